//! Robust homography fitting with 4-point RANSAC.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dlt::minimal_set_degenerate;
use super::{dlt_homography, Homography, PointSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            max_iters: 2000,
            confidence: 0.995,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult {
    pub homography: Homography,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask(h: &Homography, src: &PointSet, dst: &PointSet, threshold: f64) -> Vec<bool> {
    src.iter()
        .zip(dst.iter())
        .map(|(a, b)| match h.apply(*a) {
            Ok(p) => (p - b).norm() < threshold,
            Err(_) => false,
        })
        .collect()
}

fn required_iterations(inlier_ratio: f64, confidence: f64) -> f64 {
    let p_good = inlier_ratio.powi(4);
    if p_good >= 1.0 {
        return 1.0;
    }
    if p_good <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - p_good).ln()).ceil()
}

/// RANSAC over minimal 4-point samples.
///
/// A correspondence is an inlier when its reprojection error is below
/// `threshold_px`. The iteration budget adapts to the best inlier ratio `w`
/// seen so far as `min(max_iters, log(1−confidence)/log(1−w⁴))`, and the
/// winning consensus set is refit with the DLT.
pub fn ransac_homography(src: &PointSet, dst: &PointSet, cfg: &RansacConfig) -> Result<RansacResult> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::invalid(format!(
            "ransac_homography needs matching point counts, got {n} and {}",
            dst.len()
        )));
    }
    if n < 4 {
        return Err(Error::invalid(format!(
            "ransac_homography needs at least 4 correspondences, got {n}"
        )));
    }
    if cfg.threshold_px <= 0.0 || !(cfg.confidence > 0.0 && cfg.confidence < 1.0) {
        return Err(Error::invalid(format!(
            "invalid RANSAC settings: threshold {} px, confidence {}",
            cfg.threshold_px, cfg.confidence
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Vec<bool>, Homography)> = None;
    let mut budget = cfg.max_iters as f64;
    let mut iterations = 0usize;
    while (iterations as f64) < budget.min(cfg.max_iters as f64) {
        iterations += 1;
        let idx = sample(&mut rng, n, 4).into_vec();
        let (s, d) = (src.subset(&idx), dst.subset(&idx));
        if minimal_set_degenerate(s.points()) || minimal_set_degenerate(d.points()) {
            continue;
        }
        let Ok(h) = dlt_homography(&s, &d) else { continue };
        let mask = inlier_mask(&h, src, dst, cfg.threshold_px);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            budget = required_iterations(count as f64 / n as f64, cfg.confidence);
            best = Some((count, mask, h));
        }
    }

    let Some((count, mask, minimal)) = best else {
        return Err(Error::EstimationFailed(
            "no non-degenerate minimal sample found".into(),
        ));
    };
    if count < 4 {
        return Err(Error::EstimationFailed(format!(
            "best consensus set has only {count} inliers"
        )));
    }
    let homography = dlt_homography(&src.select(&mask), &dst.select(&mask)).unwrap_or(minimal);
    let inliers = inlier_mask(&homography, src, dst, cfg.threshold_px);
    Ok(RansacResult {
        homography,
        inliers,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_budget() {
        assert_eq!(required_iterations(1.0, 0.995), 1.0);
        assert!(required_iterations(0.0, 0.995).is_infinite());
        // w = 0.5: log(0.005) / log(1 − 1/16) ≈ 82.1
        assert_eq!(required_iterations(0.5, 0.995), 83.0);
    }

    #[test]
    fn rejects_bad_input() {
        let p = PointSet::from_xy(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert!(ransac_homography(&p, &p, &RansacConfig::default()).is_err());
        let q = PointSet::from_xy(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]).unwrap();
        let bad = RansacConfig {
            confidence: 1.0,
            ..Default::default()
        };
        assert!(ransac_homography(&q, &q, &bad).is_err());
    }

    #[test]
    fn all_collinear_fails_cleanly() {
        let line: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, i as f64)).collect();
        let p = PointSet::from_xy(&line).unwrap();
        let cfg = RansacConfig {
            max_iters: 50,
            ..Default::default()
        };
        assert!(matches!(
            ransac_homography(&p, &p, &cfg),
            Err(Error::EstimationFailed(_))
        ));
    }
}
