//! Normalized direct linear transform.

use nalgebra::{DMatrix, Matrix3, Point2};

use super::{Homography, PointSet};
use crate::error::{Error, Result};

/// Relative size below which the second-smallest singular value marks a
/// rank-deficient system.
const RANK_TOL: f64 = 1e-10;

/// Similarity transform taking the points to centroid 0 and RMS distance √2.
fn normalizer(pts: &[Point2<f64>]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let (cx, cy) = pts
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    let (cx, cy) = (cx / n, cy / n);
    let ms: f64 = pts
        .iter()
        .map(|p| (p.x - cx).powi(2) + (p.y - cy).powi(2))
        .sum::<f64>()
        / n;
    if ms <= 0.0 || !ms.is_finite() {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = (2.0 / ms).sqrt();
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: &Point2<f64>) -> (f64, f64) {
    (
        t[(0, 0)] * p.x + t[(0, 2)],
        t[(1, 1)] * p.y + t[(1, 2)],
    )
}

fn collinear(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> bool {
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let scale = ((b - a).norm() * (c - a).norm()).max(f64::MIN_POSITIVE);
    cross.abs() <= 1e-9 * scale
}

/// True when any three of four points are (numerically) collinear.
pub(crate) fn minimal_set_degenerate(pts: &[Point2<f64>]) -> bool {
    debug_assert_eq!(pts.len(), 4);
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| collinear(&pts[t[0]], &pts[t[1]], &pts[t[2]]))
}

/// Hartley-normalized DLT from `src → dst` correspondences.
///
/// Both point sets are moved to centroid 0 and RMS distance √2, the
/// `2N×9` system is solved for its smallest right singular vector and the
/// result is de-normalized and scaled so `m22 == 1`.
pub fn dlt_homography(src: &PointSet, dst: &PointSet) -> Result<Homography> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::invalid(format!(
            "dlt_homography needs matching point counts, got {n} and {}",
            dst.len()
        )));
    }
    if n < 4 {
        return Err(Error::invalid(format!(
            "dlt_homography needs at least 4 correspondences, got {n}"
        )));
    }
    let (s, d) = (src.points(), dst.points());
    if n == 4 && (minimal_set_degenerate(s) || minimal_set_degenerate(d)) {
        return Err(Error::Degenerate(
            "three of the four points are collinear".into(),
        ));
    }
    let ts = normalizer(s)?;
    let td = normalizer(d)?;

    // At least 9 rows so the SVD yields the full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let (x, y) = transform(&ts, &s[i]);
        let (u, v) = transform(&td, &d[i]);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let sv = |k: usize| svd.singular_values[order[k]];
    let largest = sv(order.len() - 1);
    if largest <= 0.0 || sv(1) <= RANK_TOL * largest {
        return Err(Error::Degenerate(
            "correspondence system is rank deficient".into(),
        ));
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normalizer not invertible".into()))?;
    Homography::new(td_inv * hn * ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_homography, image_corners};

    fn corners() -> PointSet {
        PointSet::new(image_corners(256, 256).to_vec()).unwrap()
    }

    #[test]
    fn identity_from_fixed_corners() {
        let h = dlt_homography(&corners(), &corners()).unwrap();
        let diff = h.matrix() - Matrix3::identity();
        assert!(diff.abs().max() < 1e-9, "{diff}");
    }

    #[test]
    fn translation_recovered() {
        let c = corners();
        let moved = apply_homography(&Homography::translation(7.5, -3.0), &c).unwrap();
        let h = dlt_homography(&c, &moved).unwrap();
        let diff = h.matrix() - Homography::translation(7.5, -3.0).matrix();
        assert!(diff.abs().max() < 1e-9, "{diff}");
    }

    #[test]
    fn too_few_and_collinear_points_fail() {
        let three = PointSet::from_xy(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert!(dlt_homography(&three, &three).is_err());
        let line = PointSet::from_xy(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (5.0, 0.0)]).unwrap();
        assert!(matches!(
            dlt_homography(&line, &line),
            Err(Error::Degenerate(_))
        ));
        let all_on_line: Vec<(f64, f64)> = (0..8).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let p = PointSet::from_xy(&all_on_line).unwrap();
        assert!(dlt_homography(&p, &p).is_err());
    }
}
