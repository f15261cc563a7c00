//! Generates one distorted training pair and writes it as PNGs plus the
//! ground-truth homography.

use std::path::PathBuf;

use densematch::synth::{generate_pair, procedural_image, DistortionConfig};

fn main() -> densematch::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_pair".into()));
    std::fs::create_dir_all(&out).map_err(|e| densematch::Error::Io { path: out.clone(), source: e })?;
    let src = procedural_image(192, 192, 7)?;
    let pair = generate_pair(&src, &DistortionConfig { seed: 7, ..DistortionConfig::default() })?;
    pair.image_a.save_png(&out.join("a.png"))?;
    pair.image_b.save_png(&out.join("b.png"))?;
    std::fs::write(out.join("h.json"), serde_json::to_string_pretty(&pair.h_ab.to_json())?)
        .map_err(|e| densematch::Error::Io { path: out.join("h.json"), source: e })?;
    println!("wrote {}/{{a,b}}.png and h.json; H = {:?}", out.display(), pair.h_ab.rows());
    Ok(())
}
