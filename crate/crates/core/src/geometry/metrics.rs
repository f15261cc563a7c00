//! Homography and correspondence quality metrics.

use serde::{Deserialize, Serialize};

use super::{image_corners, Homography, PointSet};
use crate::error::{Error, Result};

/// Reprojection thresholds (px) used throughout evaluation.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.1, 1.0, 10.0];

/// How the four corner displacements are aggregated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CornerErrorMode {
    /// Σ over the four corners of ‖H·x − H'·x‖.
    #[default]
    Sum,
    /// The sum divided by four.
    Mean,
}

/// Corner error with an explicit aggregation mode.
pub fn corner_error(
    h_true: &Homography,
    h_est: &Homography,
    width: usize,
    height: usize,
    mode: CornerErrorMode,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, c) in image_corners(width, height).into_iter().enumerate() {
        let a = h_true
            .apply(c)
            .map_err(|_| Error::PointAtInfinity { index: i, w: 0.0 })?;
        let b = h_est
            .apply(c)
            .map_err(|_| Error::PointAtInfinity { index: i, w: 0.0 })?;
        total += (a - b).norm();
    }
    Ok(match mode {
        CornerErrorMode::Sum => total,
        CornerErrorMode::Mean => total / 4.0,
    })
}

/// Σ_{i=1..4} ‖H·x_i − H'·x_i‖₂ over the corners (0,0), (W−1,0), (W−1,H−1),
/// (0,H−1). Despite the name this is the sum, not the average.
pub fn mean_corner_error(
    h_true: &Homography,
    h_est: &Homography,
    width: usize,
    height: usize,
) -> Result<f64> {
    corner_error(h_true, h_est, width, height, CornerErrorMode::Sum)
}

/// ‖H·p − p'‖₂ per correspondence; a point sent to infinity scores `+∞`.
pub fn reprojection_errors(h_true: &Homography, pts_a: &PointSet, pts_b: &PointSet) -> Result<Vec<f64>> {
    if pts_a.len() != pts_b.len() {
        return Err(Error::invalid(format!(
            "reprojection_errors needs matching point counts, got {} and {}",
            pts_a.len(),
            pts_b.len()
        )));
    }
    Ok(pts_a
        .iter()
        .zip(pts_b.iter())
        .map(|(a, b)| match h_true.apply(*a) {
            Ok(p) => (p - b).norm(),
            Err(_) => f64::INFINITY,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InlierCount {
    pub threshold_px: f64,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlierStats {
    pub total: usize,
    /// Set when there were no errors to count; fractions are then 0.
    pub empty: bool,
    pub per_threshold: Vec<InlierCount>,
}

/// Counts errors strictly below each threshold.
pub fn count_inliers(errors: &[f64], thresholds: &[f64]) -> Result<InlierStats> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("inlier thresholds must be sorted ascending"));
    }
    let total = errors.len();
    let per_threshold = thresholds
        .iter()
        .map(|&t| {
            let count = errors.iter().filter(|&&e| e < t).count();
            let fraction = if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            };
            InlierCount {
                threshold_px: t,
                count,
                fraction,
            }
        })
        .collect();
    Ok(InlierStats {
        total,
        empty: total == 0,
        per_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mce_examples() {
        let id = Homography::identity();
        assert_eq!(mean_corner_error(&id, &id, 640, 480).unwrap(), 0.0);
        let t = Homography::translation(1.0, 0.0);
        assert_eq!(mean_corner_error(&id, &t, 640, 480).unwrap(), 4.0);
        assert_eq!(mean_corner_error(&id, &t, 17, 3).unwrap(), 4.0);
        assert_eq!(
            corner_error(&id, &t, 17, 3, CornerErrorMode::Mean).unwrap(),
            1.0
        );
    }

    #[test]
    fn reprojection_three_four_five() {
        let h = Homography::translation(2.0, 1.0);
        let a = PointSet::from_xy(&[(10.0, 10.0), (0.0, 0.0)]).unwrap();
        let b = PointSet::from_xy(&[(15.0, 15.0), (2.0, 1.0)]).unwrap();
        assert_eq!(reprojection_errors(&h, &a, &b).unwrap(), vec![5.0, 0.0]);
    }

    #[test]
    fn reprojection_infinity_is_an_outlier() {
        let h = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        let a = PointSet::from_xy(&[(-1.0, 0.0)]).unwrap();
        let e = reprojection_errors(&h, &a, &a).unwrap();
        assert!(e[0].is_infinite());
    }

    #[test]
    fn inlier_counts() {
        let s = count_inliers(&[0.05, 0.5, 5.0, 50.0], &DEFAULT_THRESHOLDS).unwrap();
        let counts: Vec<usize> = s.per_threshold.iter().map(|c| c.count).collect();
        let fracs: Vec<f64> = s.per_threshold.iter().map(|c| c.fraction).collect();
        assert_eq!(counts, vec![1, 2, 3]);
        assert_eq!(fracs, vec![0.25, 0.5, 0.75]);
        assert!(!s.empty);

        let z = count_inliers(&[0.0; 7], &DEFAULT_THRESHOLDS).unwrap();
        assert!(z.per_threshold.iter().all(|c| c.count == 7 && c.fraction == 1.0));

        let e = count_inliers(&[], &DEFAULT_THRESHOLDS).unwrap();
        assert!(e.empty);
        assert!(e.per_threshold.iter().all(|c| c.count == 0 && c.fraction == 0.0));

        assert!(count_inliers(&[1.0], &[1.0, 0.1]).is_err());
    }
}
