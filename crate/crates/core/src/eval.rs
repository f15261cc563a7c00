//! Batch evaluation: dense matches, RANSAC homography, corner error,
//! reprojection inliers and the cumulative corner-error curve.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    count_inliers, mean_corner_error, ransac_homography, reprojection_errors, Homography,
    RansacConfig, DEFAULT_THRESHOLDS,
};
use crate::matching::{extract_matches, stride_positions, Match, MatchConfig, MatchSet};
use crate::model::ModelParams;
use crate::synth::{pair_seed, read_manifest, read_pair, Image, SamplePair};

pub const RECORDS_FILE: &str = "eval_records.csv";
pub const TIMINGS_FILE: &str = "eval_timings.csv";
pub const SUMMARY_FILE: &str = "eval_summary.json";
pub const CURVE_FILE: &str = "mce_curve.csv";
pub const INLIERS_FILE: &str = "inliers.csv";

/// Strides offered by the command line.
pub const EVAL_STRIDES: [usize; 4] = [2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub stride_px: usize,
    pub mutual_only: bool,
    /// Unit-normalize descriptors; taken from the checkpoint's matching flags.
    pub normalize: bool,
    /// `seed` is the base seed; each pair runs with `pair_seed(seed, id)`.
    pub ransac: RansacConfig,
    pub max_mce_px: f64,
    pub n_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            stride_px: 4,
            mutual_only: false,
            normalize: false,
            ransac: RansacConfig::default(),
            max_mce_px: 50.0,
            n_bins: 101,
        }
    }
}

impl EvalConfig {
    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            stride_px: self.stride_px,
            mutual_only: self.mutual_only,
            normalize: self.normalize,
            ..MatchConfig::default()
        }
    }

    fn ransac_for(&self, pair_id: usize) -> RansacConfig {
        RansacConfig {
            seed: pair_seed(self.ransac.seed, pair_id as u64),
            ..self.ransac
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub features_ms: f64,
    pub matching_ms: f64,
    pub ransac_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdInliers {
    pub threshold_px: f64,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: usize,
    pub n_matches: usize,
    pub ransac_succeeded: bool,
    pub ransac_inliers: usize,
    /// Present exactly when RANSAC succeeded.
    pub mce_px: Option<f64>,
    /// One entry per threshold of [`DEFAULT_THRESHOLDS`], against the
    /// ground-truth homography.
    pub inliers: Vec<ThresholdInliers>,
    /// Not written to the records file, which stays reproducible.
    #[serde(skip)]
    pub timings: StageTimings,
}

/// Scores a match set against the ground truth of its pair.
pub fn evaluate_matches(
    pair_id: usize,
    h_true: &Homography,
    width: usize,
    height: usize,
    matches: &MatchSet,
    ransac: &RansacConfig,
) -> Result<EvalRecord> {
    let (pa, pb) = matches.point_sets();
    let errors = reprojection_errors(h_true, &pa, &pb)?;
    let stats = count_inliers(&errors, &DEFAULT_THRESHOLDS)?;
    let inliers = stats
        .per_threshold
        .iter()
        .map(|c| ThresholdInliers {
            threshold_px: c.threshold_px,
            count: c.count,
            fraction: c.fraction,
        })
        .collect();
    let t = Instant::now();
    let fit = ransac_homography(&pa, &pb, ransac);
    let ransac_ms = t.elapsed().as_secs_f64() * 1e3;
    let (ransac_succeeded, ransac_inliers, mce_px) = match fit {
        Ok(r) => match mean_corner_error(h_true, &r.homography, width, height) {
            Ok(mce) if mce.is_finite() => (true, r.inlier_count(), Some(mce)),
            _ => (false, r.inlier_count(), None),
        },
        Err(e) => {
            log::debug!("pair {pair_id}: RANSAC failed: {e}");
            (false, 0, None)
        }
    };
    Ok(EvalRecord {
        pair_id,
        n_matches: matches.len(),
        ransac_succeeded,
        ransac_inliers,
        mce_px,
        inliers,
        timings: StageTimings {
            ransac_ms,
            ..StageTimings::default()
        },
    })
}

/// Dense matches between two images of equal size.
pub fn match_images(model: &ModelParams, a: &Image, b: &Image, cfg: &MatchConfig) -> Result<MatchSet> {
    Ok(match_images_timed(model, a, b, cfg)?.0)
}

fn match_images_timed(model: &ModelParams, a: &Image, b: &Image, cfg: &MatchConfig) -> Result<(MatchSet, StageTimings)> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::ShapeMismatch {
            op: "match_images",
            detail: format!(
                "image A is {}×{} but image B is {}×{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            ),
        });
    }
    let t = Instant::now();
    let fa = model.extract_features(&a.to_tensor())?;
    let fb = model.extract_features(&b.to_tensor())?;
    let features_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let m = extract_matches(&fa, &fb, cfg)?;
    let timings = StageTimings {
        features_ms,
        matching_ms: t.elapsed().as_secs_f64() * 1e3,
        ransac_ms: 0.0,
    };
    Ok((m, timings))
}

pub fn evaluate_pair(model: &ModelParams, pair_id: usize, pair: &SamplePair, cfg: &EvalConfig) -> Result<EvalRecord> {
    let (matches, t) = match_images_timed(model, &pair.image_a, &pair.image_b, &cfg.match_config())?;
    let mut rec = evaluate_matches(
        pair_id,
        &pair.h_ab,
        pair.image_a.width(),
        pair.image_a.height(),
        &matches,
        &cfg.ransac_for(pair_id),
    )?;
    rec.timings.features_ms = t.features_ms;
    rec.timings.matching_ms = t.matching_ms;
    Ok(rec)
}

/// Matches from the ground truth itself: every stride point of A whose
/// projection lands inside B.
pub fn oracle_matches(h: &Homography, width: usize, height: usize, stride: usize) -> Result<MatchSet> {
    let (xs, ys) = (stride_positions(width, stride), stride_positions(height, stride));
    let mut matches = Vec::new();
    for &y in &ys {
        for &x in &xs {
            let p = Point2::new(x as f64, y as f64);
            let Ok(q) = h.apply(p) else { continue };
            if (0.0..=(width - 1) as f64).contains(&q.x) && (0.0..=(height - 1) as f64).contains(&q.y) {
                matches.push(Match {
                    xa: p.x,
                    ya: p.y,
                    xb: q.x,
                    yb: q.y,
                    score: 1.0,
                    mutual: true,
                });
            }
        }
    }
    Ok(MatchSet { matches })
}

/// `n` independent uniform point pairs over the image area.
pub fn random_matches(width: usize, height: usize, n: usize, seed: u64) -> MatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let matches = (0..n)
        .map(|_| Match {
            xa: rng.gen_range(0.0..=w),
            ya: rng.gen_range(0.0..=h),
            xb: rng.gen_range(0.0..=w),
            yb: rng.gen_range(0.0..=h),
            score: 0.0,
            mutual: false,
        })
        .collect();
    MatchSet { matches }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold_px: f64,
    pub cumulative_fraction: f64,
}

/// Fraction of all records whose corner error is at most τ, for τ on a
/// uniform grid of `[0, max_mce_px]`. RANSAC failures never count.
pub fn cumulative_mce_curve(records: &[EvalRecord], max_mce_px: f64, n_bins: usize) -> Result<Vec<CurvePoint>> {
    if n_bins < 2 || !(max_mce_px > 0.0) {
        return Err(Error::invalid(format!(
            "curve needs n_bins ≥ 2 and a positive range, got {n_bins} bins over {max_mce_px}"
        )));
    }
    let mut mces: Vec<f64> = records.iter().filter_map(|r| r.mce_px).collect();
    mces.sort_by(f64::total_cmp);
    let n = records.len().max(1) as f64;
    Ok((0..n_bins)
        .map(|k| {
            let tau = max_mce_px * k as f64 / (n_bins - 1) as f64;
            let below = mces.partition_point(|&m| m <= tau);
            CurvePoint {
                threshold_px: tau,
                cumulative_fraction: below as f64 / n,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTotal {
    pub threshold_px: f64,
    pub total_inliers: usize,
    /// Mean over records of the per-pair fraction.
    pub mean_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub pair_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pairs: usize,
    pub total_matches: usize,
    pub ransac_failures: usize,
    pub median_mce_px: Option<f64>,
    pub per_threshold: Vec<ThresholdTotal>,
    pub curve: Vec<CurvePoint>,
    pub skipped: Vec<SkippedPair>,
    pub config: EvalConfig,
    pub checkpoint_digest: Option<String>,
}

impl EvalSummary {
    pub fn success_rate(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            (self.pairs - self.ransac_failures) as f64 / self.pairs as f64
        }
    }
}

/// Median corner error with failures ranked above every success; `None`
/// when the median falls on a failure.
pub fn median_mce(records: &[EvalRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = records.iter().map(|r| r.mce_px.unwrap_or(f64::INFINITY)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    m.is_finite().then_some(m)
}

pub fn summarize(
    records: &[EvalRecord],
    skipped: Vec<SkippedPair>,
    cfg: &EvalConfig,
    checkpoint_digest: Option<String>,
) -> Result<EvalSummary> {
    let per_threshold = DEFAULT_THRESHOLDS
        .iter()
        .enumerate()
        .map(|(k, &t)| ThresholdTotal {
            threshold_px: t,
            total_inliers: records.iter().map(|r| r.inliers[k].count).sum(),
            mean_fraction: if records.is_empty() {
                0.0
            } else {
                records.iter().map(|r| r.inliers[k].fraction).sum::<f64>() / records.len() as f64
            },
        })
        .collect();
    Ok(EvalSummary {
        pairs: records.len(),
        total_matches: records.iter().map(|r| r.n_matches).sum(),
        ransac_failures: records.iter().filter(|r| !r.ransac_succeeded).count(),
        median_mce_px: median_mce(records),
        per_threshold,
        curve: cumulative_mce_curve(records, cfg.max_mce_px, cfg.n_bins)?,
        skipped,
        config: cfg.clone(),
        checkpoint_digest,
    })
}

/// Evaluates every pair of a dataset in id order. Pairs that cannot be
/// read or matched are listed in the summary instead of aborting the run.
pub fn evaluate_dataset(
    model: &ModelParams,
    dataset_dir: &Path,
    cfg: &EvalConfig,
    checkpoint_digest: Option<String>,
) -> Result<(EvalSummary, Vec<EvalRecord>)> {
    let manifest = read_manifest(dataset_dir)?;
    if manifest.count == 0 {
        return Err(Error::Dataset(format!("{} holds no pairs", dataset_dir.display())));
    }
    let mut records = Vec::with_capacity(manifest.count);
    let mut skipped = Vec::new();
    for id in 0..manifest.count {
        let rec = read_pair(dataset_dir, &manifest, id).and_then(|p| evaluate_pair(model, id, &p, cfg));
        match rec {
            Ok(r) => {
                log::info!(
                    "pair {id}: {} matches, mce {}",
                    r.n_matches,
                    r.mce_px.map_or("failed".into(), |m| format!("{m:.3} px"))
                );
                records.push(r);
            }
            Err(e) => {
                log::warn!("pair {id} skipped: {e}");
                skipped.push(SkippedPair {
                    pair_id: id,
                    reason: e.to_string(),
                });
            }
        }
    }
    let summary = summarize(&records, skipped, cfg, checkpoint_digest)?;
    Ok((summary, records))
}

fn threshold_label(t: f64) -> String {
    format!("{t}")
}

pub fn records_header() -> Vec<String> {
    let mut h: Vec<String> = ["pair_id", "n_matches", "ransac_succeeded", "ransac_inliers", "mce_px"]
        .map(String::from)
        .to_vec();
    for t in DEFAULT_THRESHOLDS {
        h.push(format!("inliers_{}", threshold_label(t)));
        h.push(format!("fraction_{}", threshold_label(t)));
    }
    h
}

pub fn write_records_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(records_header())?;
    for r in records {
        let mut row = vec![
            r.pair_id.to_string(),
            r.n_matches.to_string(),
            u8::from(r.ransac_succeeded).to_string(),
            r.ransac_inliers.to_string(),
            r.mce_px.map_or(String::new(), |m| m.to_string()),
        ];
        for c in &r.inliers {
            row.push(c.count.to_string());
            row.push(c.fraction.to_string());
        }
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(records_header().iter().map(String::as_str)) {
        return Err(Error::Corrupt(format!("{} has an unexpected header", path.display())));
    }
    let bad = |what: &str| Error::Corrupt(format!("{}: bad {what}", path.display()));
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let field = |i: usize| row.get(i).ok_or_else(|| bad("row length"));
        let num = |i: usize| -> Result<usize> { field(i)?.parse().map_err(|_| bad("count")) };
        let real = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|_| bad("number")) };
        let mce = match field(4)? {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("mce_px"))?),
        };
        let inliers = DEFAULT_THRESHOLDS
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                Ok(ThresholdInliers {
                    threshold_px: t,
                    count: num(5 + 2 * k)?,
                    fraction: real(6 + 2 * k)?,
                })
            })
            .collect::<Result<_>>()?;
        out.push(EvalRecord {
            pair_id: num(0)?,
            n_matches: num(1)?,
            ransac_succeeded: num(2)? == 1,
            ransac_inliers: num(3)?,
            mce_px: mce,
            inliers,
            timings: StageTimings::default(),
        });
    }
    Ok(out)
}

/// Writes the summary, records, per-stage timings, the cumulative curve
/// and the per-threshold inlier totals.
pub fn emit_report(summary: &EvalSummary, records: &[EvalRecord], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(summary)?).map_err(|e| Error::io(&path, e))?;
    write_records_csv(records, &out_dir.join(RECORDS_FILE))?;

    let path = out_dir.join(TIMINGS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["pair_id", "features_ms", "matching_ms", "ransac_ms"])?;
    for r in records {
        let t = r.timings;
        w.write_record([r.pair_id.to_string(), t.features_ms.to_string(), t.matching_ms.to_string(), t.ransac_ms.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join(CURVE_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["threshold_px", "cumulative_fraction"])?;
    for p in &summary.curve {
        w.write_record([p.threshold_px.to_string(), p.cumulative_fraction.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join(INLIERS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["threshold_px", "total_inliers", "mean_fraction"])?;
    for t in &summary.per_threshold {
        w.write_record([t.threshold_px.to_string(), t.total_inliers.to_string(), t.mean_fraction.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
