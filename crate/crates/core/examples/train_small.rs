//! Trains a small network on a freshly generated 64×64 dataset and
//! prints the per-epoch mean loss.

use densematch::model::ModelConfig;
use densematch::synth::{generate_dataset, DistortionConfig, SourceImages};
use densematch::train::{train, TrainConfig, TrainOptions};

fn main() -> densematch::Result<()> {
    env_logger::init();
    let dir = std::env::temp_dir().join("densematch_train_small");
    let data = dir.join("data");
    generate_dataset(&SourceImages::Procedural, &DistortionConfig::mild(0), 64, 64, 32, 1, &data)?;
    let cfg = TrainConfig {
        model: ModelConfig {
            blocks: 2,
            channels: 16,
            ..ModelConfig::default()
        },
        batch_size: 8,
        epochs: 5,
        image_size: 64,
        checkpoint_every: 10,
        ..TrainConfig::default()
    };
    let report = train(&data, &cfg, &dir.join("run"), &TrainOptions::default())?;
    for (e, m) in report.epoch_means().iter().enumerate() {
        println!("epoch {e}: mean loss {m:.4}");
    }
    println!("checkpoint {}", report.checkpoint.display());
    Ok(())
}
