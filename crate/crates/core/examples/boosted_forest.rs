//! RealBoost forests on a toy two-class problem: per-tree log-loss, the
//! bootstrapping cascade and a save/load round trip.
//!
//! ```text
//! cargo run --release --example boosted_forest
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpnbf::forest::{self, load_model, save_model, Examples, ForestConfig, TrainSet};

// Positives inside a ring, negatives everywhere else, plus a few "hard"
// negatives crowded just outside it.
fn dataset(seed: u64) -> (Examples, Examples) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = Examples::with_cols(4);
    let mut neg = Examples::with_cols(4);
    while pos.rows() < 400 || neg.rows() < 4000 {
        let (a, b): (f32, f32) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let r = (a * a + b * b).sqrt();
        let noise: (f32, f32) = (rng.gen(), rng.gen());
        let row = [a, b, noise.0, noise.1];
        if (0.8..1.3).contains(&r) {
            if pos.rows() < 400 {
                pos.push(&row, 0.5);
            }
        } else if neg.rows() < 4000 {
            neg.push(&row, 0.5);
        }
    }
    (pos, neg)
}

fn error_rate(f: &forest::Forest, pos: &Examples, neg: &Examples) -> rpnbf::Result<f64> {
    let fn_ = f.score_all(pos)?.iter().filter(|&&s| s <= 0.0).count();
    let fp = f.score_all(neg)?.iter().filter(|&&s| s > 0.0).count();
    Ok((fn_ + fp) as f64 / (pos.rows() + neg.rows()) as f64)
}

fn main() -> rpnbf::Result<()> {
    let (pos, neg) = dataset(3);
    let (test_pos, test_neg) = dataset(4);
    let cfg = ForestConfig {
        depth: 3,
        feature_fraction: 1.0,
        uses_prior: false,
        stages: vec![16, 32, 64],
        final_trees: 128,
        ..ForestConfig::default()
    };

    let mut ts = TrainSet::from_parts(&pos, &neg)?;
    let (plain, report) = forest::boost(&mut ts, 32, &cfg, 11)?;
    println!("plain boost on everything, 32 trees:");
    for (t, l) in report.log_loss.iter().enumerate().step_by(8) {
        println!("  after {t:2} trees  ln loss {l:.4}");
    }
    println!("  test error {:.4}", error_rate(&plain, &test_pos, &test_neg)?);

    let (cascade, creport) = forest::train_cascade(&pos, &neg, &cfg)?;
    println!(
        "\ncascade: {} random negatives, {} used in the end",
        creport.initial_negatives,
        creport.used_negatives.len()
    );
    for (i, s) in creport.stages.iter().enumerate() {
        println!("  stage {i}: {} trees, final ln loss {:.4}", s.log_loss.len() - 1, s.log_loss.last().unwrap());
    }
    println!("  test error {:.4}", error_rate(&cascade, &test_pos, &test_neg)?);

    let bytes = save_model(&cascade);
    let back = load_model(&bytes)?;
    println!("\nmodel is {} bytes; reloaded model equal: {}", bytes.len(), back == cascade);
    Ok(())
}
