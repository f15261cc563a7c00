use std::fs;
use std::path::Path;

use densematch::eval::{
    cumulative_mce_curve, emit_report, evaluate_dataset, evaluate_matches, oracle_matches,
    random_matches, read_records_csv, summarize, EvalConfig, CURVE_FILE, INLIERS_FILE,
    RECORDS_FILE, SUMMARY_FILE, TIMINGS_FILE,
};
use densematch::geometry::{Homography, RansacConfig, DEFAULT_THRESHOLDS};
use densematch::model::{init_model, ModelConfig};
use densematch::synth::{generate_dataset, generate_indexed_pair, write_dataset, DistortionConfig, SourceImages};
use densematch::train::file_digest;

/// P(|p − q| < r) for p, q independent and uniform on an L×L square.
fn square_distance_cdf(r: f64, l: f64) -> f64 {
    let s = r / l;
    std::f64::consts::PI * s * s - 8.0 / 3.0 * s.powi(3) + s.powi(4) / 2.0
}

#[test]
fn oracle_matcher_is_exact() {
    for seed in 0..5 {
        let p = generate_indexed_pair(&SourceImages::Procedural, &DistortionConfig::default(), 96, 96, seed, 0).unwrap();
        let m = oracle_matches(&p.h_ab, 96, 96, 4).unwrap();
        let r = evaluate_matches(0, &p.h_ab, 96, 96, &m, &RansacConfig::default()).unwrap();
        assert!(r.ransac_succeeded);
        assert!(r.mce_px.unwrap() < 1e-6, "{:?}", r.mce_px);
        for c in &r.inliers {
            assert_eq!(c.fraction, 1.0, "{c:?}");
        }
    }
}

#[test]
fn random_matcher_inliers_follow_the_area_ratio() {
    let size = 64;
    let l = (size - 1) as f64;
    let h = Homography::identity();
    let n = 200_000;
    let m = random_matches(size, size, n, 1);
    let r = evaluate_matches(0, &h, size, size, &m, &RansacConfig { max_iters: 10, ..Default::default() }).unwrap();
    for c in &r.inliers {
        let p = square_distance_cdf(c.threshold_px, l);
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        // five standard deviations, plus one count for the rare 0.1 px case
        let tol = 5.0 * sd + 1.0 / n as f64;
        assert!((c.fraction - p).abs() <= tol, "t={} got {} want {p} ± {tol}", c.threshold_px, c.fraction);
    }
}

#[test]
fn random_matcher_breaks_ransac() {
    let mut bad = 0;
    let trials = 40;
    for id in 0..trials {
        let p = generate_indexed_pair(&SourceImages::Procedural, &DistortionConfig::default(), 64, 64, 2, id).unwrap();
        let m = random_matches(64, 64, 300, id as u64);
        let cfg = RansacConfig { seed: id as u64, ..Default::default() };
        let r = evaluate_matches(id, &p.h_ab, 64, 64, &m, &cfg).unwrap();
        if r.mce_px.is_none_or(|e| e > 10.0) {
            bad += 1;
        }
    }
    assert!(bad * 100 >= trials * 95, "{bad}/{trials}");
}

fn small_setup(dir: &Path) -> (densematch::model::ModelParams, std::path::PathBuf) {
    let data = dir.join("data");
    generate_dataset(&SourceImages::Procedural, &DistortionConfig::mild(0), 48, 48, 4, 7, &data).unwrap();
    let model = init_model(&ModelConfig {
        blocks: 1,
        channels: 8,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    (model, data)
}

fn digests(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.display().to_string(), file_digest(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn dataset_evaluation_is_reproducible_and_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = small_setup(dir.path());
    let before = digests(&data);
    let cfg = EvalConfig {
        n_bins: 21,
        ..EvalConfig::default()
    };
    let (s1, r1) = evaluate_dataset(&model, &data, &cfg, None).unwrap();
    let (s2, r2) = evaluate_dataset(&model, &data, &cfg, None).unwrap();
    emit_report(&s1, &r1, &dir.path().join("a")).unwrap();
    emit_report(&s2, &r2, &dir.path().join("b")).unwrap();
    for f in [RECORDS_FILE, SUMMARY_FILE, CURVE_FILE, INLIERS_FILE] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(digests(&data), before);
    assert_eq!(s1.pairs, 4);
    assert!(s1.skipped.is_empty());
}

#[test]
fn summary_totals_are_column_sums() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = small_setup(dir.path());
    let cfg = EvalConfig {
        stride_px: 2,
        ..EvalConfig::default()
    };
    let (summary, records) = evaluate_dataset(&model, &data, &cfg, Some("abc".into())).unwrap();
    let out = dir.path().join("report");
    emit_report(&summary, &records, &out).unwrap();

    let parsed = read_records_csv(&out.join(RECORDS_FILE)).unwrap();
    let strip = |r: &[densematch::eval::EvalRecord]| {
        r.iter()
            .map(|x| densematch::eval::EvalRecord {
                timings: Default::default(),
                ..x.clone()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(parsed, strip(&records));
    let recomputed = summarize(&parsed, summary.skipped.clone(), &cfg, Some("abc".into())).unwrap();
    assert_eq!(recomputed, summary);

    let mut rdr = csv::Reader::from_path(out.join(RECORDS_FILE)).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let col = |i: usize| rows.iter().map(|r| r[i].parse::<usize>().unwrap()).sum::<usize>();
    assert_eq!(col(1), summary.total_matches);
    assert_eq!(rows.len() - col(2), summary.ransac_failures);
    for (k, t) in summary.per_threshold.iter().enumerate() {
        assert_eq!(col(5 + 2 * k), t.total_inliers);
    }
    for r in &records {
        let f: Vec<f64> = r.inliers.iter().map(|c| c.fraction).collect();
        assert!(f[0] <= f[1] && f[1] <= f[2], "{f:?}");
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r.mce_px.is_some(), r.ransac_succeeded);
    }
    let json: densematch::eval::EvalSummary =
        serde_json::from_str(&fs::read_to_string(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(json, summary);
}

#[test]
fn report_files_have_fixed_headers() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = small_setup(dir.path());
    let cfg = EvalConfig {
        n_bins: 17,
        ..EvalConfig::default()
    };
    let (summary, records) = evaluate_dataset(&model, &data, &cfg, None).unwrap();
    emit_report(&summary, &records, dir.path()).unwrap();
    let read = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap();
    let curve = read(CURVE_FILE);
    assert!(curve.starts_with("threshold_px,cumulative_fraction\n"));
    assert_eq!(curve.lines().count(), 17 + 1);
    let inliers = read(INLIERS_FILE);
    assert!(inliers.starts_with("threshold_px,total_inliers,mean_fraction\n"));
    assert_eq!(inliers.lines().count(), DEFAULT_THRESHOLDS.len() + 1);
    assert!(read(RECORDS_FILE).starts_with(
        "pair_id,n_matches,ransac_succeeded,ransac_inliers,mce_px,inliers_0.1,fraction_0.1,inliers_1,fraction_1,inliers_10,fraction_10\n"
    ));
    assert!(read(TIMINGS_FILE).starts_with("pair_id,features_ms,matching_ms,ransac_ms\n"));

    let fr: Vec<f64> = summary.curve.iter().map(|p| p.cumulative_fraction).collect();
    assert!(fr.windows(2).all(|w| w[0] <= w[1]));
    assert!(fr.iter().all(|f| (0.0..=1.0).contains(f)));
}

#[test]
fn empty_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(std::iter::empty(), dir.path(), 0).unwrap();
    let model = init_model(&ModelConfig { blocks: 1, channels: 4, ..ModelConfig::default() }).unwrap();
    assert!(evaluate_dataset(&model, dir.path(), &EvalConfig::default(), None).is_err());
}

#[test]
fn curve_examples() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = small_setup(dir.path());
    let (_, records) = evaluate_dataset(&model, &data, &EvalConfig::default(), None).unwrap();
    let c = cumulative_mce_curve(&records, 1000.0, 2).unwrap();
    assert_eq!(c.len(), 2);
    let ok = records.iter().filter(|r| r.ransac_succeeded).count() as f64 / records.len() as f64;
    assert!(c[1].cumulative_fraction <= ok);
}
