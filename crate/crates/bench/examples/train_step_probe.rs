//! Wall-clock of real default-config training steps.

use std::time::Instant;
use shapeswap_core::trainer::{train, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("shapeswap_probe");
    let _ = std::fs::remove_dir_all(&dir);
    let config = TrainConfig {
        steps: 12,
        prior_steps: 10,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let outcome = train(&config, &dir, None).unwrap();
    let total = t0.elapsed().as_secs_f64();
    println!(
        "12 steps + 10 prior steps in {total:.2}s; last total loss {:.4}",
        outcome.last_report.unwrap().total
    );
    // second run with zero training steps to isolate prior cost
    let dir2 = std::env::temp_dir().join("shapeswap_probe2");
    let _ = std::fs::remove_dir_all(&dir2);
    let config2 = TrainConfig {
        steps: 1,
        prior_steps: 10,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    train(&config2, &dir2, None).unwrap();
    let prior_plus_one = t0.elapsed().as_secs_f64();
    println!("1 step + priors: {prior_plus_one:.2}s");
    println!(
        "=> per-step estimate: {:.3}s",
        (total - prior_plus_one) / 11.0
    );
}
