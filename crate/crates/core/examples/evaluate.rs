//! Evaluates an untrained network on a small generated test set and
//! writes the CSV/JSON reports.

use densematch::eval::{emit_report, evaluate_dataset, EvalConfig};
use densematch::model::{init_model, ModelConfig};
use densematch::synth::{generate_dataset, DistortionConfig, SourceImages};

fn main() -> densematch::Result<()> {
    let dir = std::env::temp_dir().join("densematch_evaluate");
    let data = dir.join("data");
    generate_dataset(&SourceImages::Procedural, &DistortionConfig::mild(0), 64, 64, 8, 2, &data)?;
    let model = init_model(&ModelConfig {
        blocks: 2,
        channels: 16,
        ..ModelConfig::default()
    })?;
    let (summary, records) = evaluate_dataset(&model, &data, &EvalConfig::default(), None)?;
    emit_report(&summary, &records, &dir.join("report"))?;
    println!(
        "{} pairs, RANSAC success {:.0}%, median corner error {:?}",
        summary.pairs,
        100.0 * summary.success_rate(),
        summary.median_mce_px
    );
    for t in &summary.per_threshold {
        println!("inliers@{} px: {} (mean fraction {:.4})", t.threshold_px, t.total_inliers, t.mean_fraction);
    }
    println!("reports in {}", dir.join("report").display());
    Ok(())
}
