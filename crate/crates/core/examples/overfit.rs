//! Trains the default desk model on a single generated 128×128 pair and
//! reports how many steps the loss needed to fall below 0.05.

use std::time::Instant;

use densematch::synth::{generate_indexed_pair, DistortionConfig, SourceImages};
use densematch::train::{overfit_check, TrainConfig};

fn main() -> densematch::Result<()> {
    env_logger::init();
    let cfg = TrainConfig::default();
    let pair = generate_indexed_pair(&SourceImages::Procedural, &DistortionConfig::mild(0), cfg.image_size, cfg.image_size, 1, 0)?;
    let start = Instant::now();
    let report = overfit_check(&pair, &cfg, 500)?;
    for (i, l) in report.losses.iter().enumerate().step_by(10) {
        println!("step {:4}  loss {l:.5}", i + 1);
    }
    println!(
        "converged={} steps={} final_loss={:.5} diagonal_accuracy={:.4} ({:.1?})",
        report.converged,
        report.steps,
        report.final_loss,
        report.diagonal_accuracy,
        start.elapsed()
    );
    Ok(())
}
