//! Matches the two images of a synthetic pair with an untrained network
//! and with ground-truth matches, and scores both.

use densematch::eval::{evaluate_matches, match_images, oracle_matches};
use densematch::geometry::RansacConfig;
use densematch::matching::MatchConfig;
use densematch::model::{init_model, ModelConfig};
use densematch::synth::{generate_indexed_pair, DistortionConfig, SourceImages};

fn main() -> densematch::Result<()> {
    let pair = generate_indexed_pair(&SourceImages::Procedural, &DistortionConfig::mild(0), 96, 96, 5, 0)?;
    let model = init_model(&ModelConfig::default())?;
    let cfg = MatchConfig {
        stride_px: 4,
        mutual_only: true,
        ..MatchConfig::default()
    };
    let found = match_images(&model, &pair.image_a, &pair.image_b, &cfg)?;
    let exact = oracle_matches(&pair.h_ab, 96, 96, 4)?;
    for (name, m) in [("untrained network", &found), ("ground truth", &exact)] {
        let r = evaluate_matches(0, &pair.h_ab, 96, 96, m, &RansacConfig::default())?;
        println!(
            "{name}: {} matches, inliers@1px {:.3}, corner error {}",
            r.n_matches,
            r.inliers[1].fraction,
            r.mce_px.map_or("n/a".into(), |e| format!("{e:.3} px"))
        );
    }
    Ok(())
}
