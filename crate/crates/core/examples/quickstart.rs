//! The whole pipeline through the library: scenes, proposals, features, a
//! bootstrapped forest, detections and the miss-rate curve.
//!
//! Does in one process what the six CLI commands do through files.
//!
//! ```text
//! cargo run --release --example quickstart
//! ```

use std::time::Instant;

use rpnbf::pipeline::{self, RunConfig};

fn main() -> rpnbf::Result<()> {
    let cfg = RunConfig::default();
    cfg.validate()?;
    let t = Instant::now();

    let train = pipeline::build_split(&cfg.synth, "train", cfg.synth.train_scenes)?;
    let test = pipeline::build_split(&cfg.synth, "test", cfg.synth.test_scenes)?;
    println!("{} train and {} test scenes", train.len(), test.len());

    let ff = pipeline::proposal_features(&cfg, &train, cfg.train_top_k)?;
    println!("{} training proposals x {} features", ff.rows.len(), ff.values.cols);

    let gts: Vec<_> = train
        .iter()
        .flat_map(|(id, s)| s.gts.iter().map(move |g| (id.clone(), *g)))
        .collect();
    let (model, report) = pipeline::train_from_features(&cfg, &ff, &pipeline::gt_boxes_by_image(&gts))?;
    println!(
        "forest of {} trees, {} negatives used",
        model.trees.len(),
        report.used_negatives.len()
    );

    let dets = pipeline::detect_all(&cfg, &model, &test)?;
    let images: Vec<String> = test.iter().map(|(id, _)| id.clone()).collect();
    let test_gts: Vec<_> = test
        .iter()
        .flat_map(|(id, s)| s.gts.iter().map(move |g| (id.clone(), *g)))
        .collect();
    let c = pipeline::evaluate_detections(&cfg, &images, &dets, &test_gts, cfg.eval.iou_thresh)?;
    println!(
        "{} detections on the test split: MR-2 {:.4}  MR-4 {:.4}  ({:.1}s)",
        dets.len(),
        c.mr2,
        c.mr4,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
