//! The toy backbone, the à-trous trick and RoI pooling.
//!
//! Prints the stride of every layer, checks that the à-trous conv4 equals
//! the dense one on every other cell, and pools one pedestrian box into the
//! feature vector the forest sees.
//!
//! ```text
//! cargo run --release --example atrous_features
//! ```

use rpnbf::pipeline::{self, RunConfig};
use rpnbf::synth::{extract_pyramid, gen_scene, ToyBackbone};
use rpnbf::tensors::roi_pool;

fn main() -> rpnbf::Result<()> {
    let cfg = RunConfig::default();
    let scene = gen_scene(7, &cfg.synth.scene)?;
    let backbone = ToyBackbone::new(&cfg.synth.backbone);
    let pyr = extract_pyramid(&backbone, &scene.image)?;

    for name in ["conv3", "conv4", "conv4_atrous", "conv5"] {
        let m = pyr.layer(name).expect("known layer");
        println!("{name:13} {:2} ch  {:3} x {:3}  stride {}", m.channels, m.height, m.width, m.stride);
    }

    let sub = pyr.conv4_atrous.subsample_even();
    let diff = sub
        .data
        .iter()
        .zip(&pyr.conv4.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("max |atrous[::2] - dense| = {diff:e}");

    let gt = scene.gts[0].bbox;
    println!("\nRoI {:.1},{:.1} {:.1}x{:.1}", gt.x(), gt.y(), gt.w(), gt.h());
    for name in ["conv3", "conv4", "conv4_atrous"] {
        let m = pyr.layer(name).expect("known layer");
        let pooled = roi_pool(m, &gt, 7)?;
        let mut distinct: Vec<u32> = pooled.iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        println!("{name:13} {} values, {} distinct", pooled.len(), distinct.len());
    }

    let feat = pipeline::roi_feature(&cfg, &pyr, &gt)?;
    println!("\nforest input for layers {:?}: {} values", cfg.layers, feat.len());
    for block in cfg.layout() {
        println!("  {:13} {} ch x {}x{} = {}", block.name, block.channels, block.size, block.size, block.len());
    }
    Ok(())
}
