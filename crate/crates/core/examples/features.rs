//! Runs an untrained descriptor network on an image and prints the
//! feature map's shape and statistics.

use densematch::model::{init_model, ModelConfig};
use densematch::synth::procedural_image;

fn main() -> densematch::Result<()> {
    let cfg = ModelConfig::default();
    let model = init_model(&cfg)?;
    println!(
        "{} blocks × {} channels, {} parameters, receptive radius {} px",
        cfg.blocks,
        cfg.channels,
        model.param_count(),
        cfg.receptive_radius()
    );
    let img = procedural_image(96, 64, 3)?;
    let f = model.extract_features(&img.to_tensor())?;
    let d = f.data.data();
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
    println!("features {}×{}×{}, mean {mean:.4}", f.channels(), f.height(), f.width());
    println!("descriptor at (10, 20): {:?}", &f.at(10, 20)[..4]);
    Ok(())
}
