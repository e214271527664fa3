//! Cascade with hard-negative mining against a single unmined forest, and
//! both against the raw proposal ranking.
//!
//! ```text
//! cargo run --release --example bootstrap_ablation -- [seeds] [config.json]
//! ```

use std::time::Instant;

use rpnbf::forest::{self, ForestConfig};
use rpnbf::geometry::iou;
use rpnbf::pipeline::{self, RunConfig};

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.train_scenes = 200;
    cfg.synth.test_scenes = 100;
    cfg.synth.scene.distractors = 5;
    cfg.train_top_k = 100;
    cfg.forest.depth = 2;
    cfg
}

fn main() -> rpnbf::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let base = match args.get(2) {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => desk_config(),
    };
    for seed in 0..seeds {
        let t = Instant::now();
        let mut cfg = base.clone();
        cfg.synth.seed = seed + 1;
        cfg.forest.seed = seed + 1;
        let train = pipeline::build_split(&cfg.synth, "train", cfg.synth.train_scenes)?;
        let test = pipeline::build_split(&cfg.synth, "test", cfg.synth.test_scenes)?;
        let train_ff = pipeline::proposal_features(&cfg, &train, cfg.train_top_k)?;
        let test_ff = pipeline::proposal_features(&cfg, &test, cfg.test_top_k)?;

        let gts: Vec<_> = train
            .iter()
            .flat_map(|(id, s)| s.gts.iter().map(move |g| (id.clone(), *g)))
            .collect();
        let gt_map = pipeline::gt_boxes_by_image(&gts);
        let (pos, neg) = pipeline::split_by_label(&cfg, &train_ff, &gt_map);

        // share of negatives sitting on a distractor
        let mut heavy = 0;
        let mut negs = 0;
        for row in &train_ff.rows {
            let scene = &train[row.image as usize].1;
            let best_gt = scene.gts.iter().map(|g| iou(&row.bbox, &g.bbox)).fold(0.0, f64::max);
            if best_gt > cfg.positive_iou {
                continue;
            }
            negs += 1;
            if scene.distractors.iter().any(|d| iou(&row.bbox, d) >= 0.3) {
                heavy += 1;
            }
        }

        let (cascade, _) = forest::train_cascade(&pos, &neg, &cfg.forest)?;
        let single_cfg = ForestConfig {
            stages: Vec::new(),
            ..cfg.forest.clone()
        };
        let (single, _) = forest::train_cascade(&pos, &neg, &single_cfg)?;

        let test_gts: Vec<_> = test
            .iter()
            .flat_map(|(id, s)| s.gts.iter().map(move |g| (id.clone(), *g)))
            .collect();
        let images: Vec<String> = test.iter().map(|(id, _)| id.clone()).collect();
        let mr = |model| -> rpnbf::Result<f64> {
            let dets = pipeline::finalize_detections(&cfg, pipeline::score_rows(&test_ff, model)?);
            Ok(pipeline::evaluate_detections(&cfg, &images, &dets, &test_gts, 0.5)?.mr2)
        };
        println!(
            "seed {seed}: pos {} neg {} heavy {:.2}  MR-2 cascade {:.4} single {:.4} rpn {:.4}  ({:.1}s)",
            pos.rows(),
            neg.rows(),
            heavy as f64 / negs.max(1) as f64,
            mr(Some(&cascade))?,
            mr(Some(&single))?,
            mr(None)?,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
