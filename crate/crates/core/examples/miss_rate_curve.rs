//! Miss rate against false positives per image for a handmade detection
//! set, with the log-average summaries and the exported CSV/SVG.
//!
//! ```text
//! cargo run --release --example miss_rate_curve -- [out_dir]
//! ```

use std::path::PathBuf;

use rpnbf::eval::{evaluate, export_curve, filter_reasonable, GroundTruthBox, ReasonableFilter};
use rpnbf::eval::Detection;
use rpnbf::Box2;

fn b(x: f64, y: f64, w: f64, h: f64) -> Box2 {
    Box2::new(x, y, w, h).expect("valid box")
}

fn det(image: &str, bbox: Box2, score: f64) -> Detection {
    Detection {
        image_id: image.into(),
        bbox,
        score,
    }
}

fn main() -> rpnbf::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example_curve".into()));
    std::fs::create_dir_all(&out)?;

    let images: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let raw = vec![
        ("a".to_string(), GroundTruthBox::new(b(10.0, 10.0, 40.0, 100.0), 1.0)),
        ("a".to_string(), GroundTruthBox::new(b(200.0, 20.0, 30.0, 80.0), 0.9)),
        ("b".to_string(), GroundTruthBox::new(b(50.0, 50.0, 25.0, 60.0), 1.0)),
        // too small for the reasonable subset: ignored, never a miss
        ("c".to_string(), GroundTruthBox::new(b(100.0, 100.0, 16.0, 40.0), 1.0)),
        ("c".to_string(), GroundTruthBox::new(b(300.0, 10.0, 50.0, 120.0), 0.7)),
    ];
    let filter = ReasonableFilter::default();
    let gts: Vec<_> = raw
        .into_iter()
        .flat_map(|(id, g)| filter_reasonable(&[g], filter).into_iter().map(move |g| (id.clone(), g)))
        .collect();
    let counted = gts.iter().filter(|(_, g)| !g.ignore).count();
    println!("{counted} of {} ground truths count toward the miss rate", gts.len());

    let dets = vec![
        det("a", b(12.0, 12.0, 40.0, 98.0), 0.95),
        det("a", b(120.0, 40.0, 30.0, 70.0), 0.70),
        det("b", b(52.0, 48.0, 25.0, 62.0), 0.85),
        det("c", b(101.0, 101.0, 16.0, 40.0), 0.80),
        det("c", b(305.0, 15.0, 48.0, 118.0), 0.40),
        det("c", b(0.0, 0.0, 30.0, 60.0), 0.30),
    ];
    let c = evaluate(&images, &dets, &gts, 0.5)?;
    println!("{:>9} {:>7} {:>9}", "threshold", "fppi", "miss rate");
    for p in &c.points {
        println!("{:9.2} {:7.3} {:9.3}", p.threshold, p.fppi, p.miss_rate);
    }
    println!("MR-2 {:.4}  MR-4 {:.4}", c.mr2, c.mr4);

    let csv = out.join("curve.csv");
    let svg = out.join("curve.svg");
    export_curve(&c, &csv, Some(&svg))?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}
