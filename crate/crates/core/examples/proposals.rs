//! Anchors, oracle RPN maps, decoding, NMS and proposal recall on a few
//! synthetic scenes.
//!
//! ```text
//! cargo run --release --example proposals
//! ```

use rpnbf::geometry::{generate_anchors, AnchorConfig};
use rpnbf::proposals::{decode_proposals, label_anchors, recall_at, select_proposals, Label};
use rpnbf::synth::{gen_scene, oracle_rpn, SceneConfig};

fn main() -> rpnbf::Result<()> {
    let anchors = AnchorConfig::default();
    println!("anchor shapes (w x h):");
    for (w, h) in anchors.scale_sizes() {
        println!("  {w:7.1} x {h:7.1}");
    }

    let scene_cfg = SceneConfig::default();
    let mut props = Vec::new();
    let mut gts = Vec::new();
    for seed in 0..10 {
        let scene = gen_scene(seed, &scene_cfg)?;
        let grid = generate_anchors(&anchors, scene.size())?;
        let labels = label_anchors(&grid, &scene.gt_boxes(), 0.5);
        let positives = labels.iter().filter(|l| l.label == Label::Positive).count();

        let (scores, deltas) = oracle_rpn(&scene, &grid, 0.15, seed + 1000)?;
        let raw = decode_proposals(&scores, &deltas, &grid)?;
        let kept = select_proposals(&raw, 0.7, 100);
        println!(
            "scene {seed}: {} anchors, {positives} positive, {} decoded, {} after NMS",
            grid.len(),
            raw.len(),
            kept.len()
        );
        props.push(kept);
        gts.push(scene.gt_boxes());
    }

    let thresholds = [0.5, 0.6, 0.7, 0.8, 0.9];
    for k in [10.0, 50.0, 100.0] {
        let r = recall_at(&props, &gts, &thresholds, k)?;
        let cells: Vec<String> = r.iter().map(|v| format!("{v:.3}")).collect();
        println!("recall at IoU {thresholds:?}, {k} per image: {}", cells.join(" "));
    }
    Ok(())
}
