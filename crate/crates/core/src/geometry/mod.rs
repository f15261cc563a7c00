//! Planar projective geometry in pixel coordinates.
//!
//! Everything here works in `f64`. A [`Homography`] always maps image-A
//! pixels to image-B pixels and is stored with `m[2][2] == 1`.

mod dlt;
mod grid;
mod metrics;
mod ransac;

pub use dlt::dlt_homography;
pub use grid::{sample_grid, GridSpec};
pub use metrics::{
    corner_error, count_inliers, mean_corner_error, reprojection_errors, CornerErrorMode,
    InlierCount, InlierStats, DEFAULT_THRESHOLDS,
};
pub use ransac::{ransac_homography, RansacConfig, RansacResult};

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convention tag written next to every serialized homography.
pub const HOMOGRAPHY_CONVENTION: &str = "a_to_b_pixels_m22_1";

const MIN_DET: f64 = 1e-12;
const MIN_DEPTH: f64 = 1e-9;

/// 3×3 projective transform from image-A pixels to image-B pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    /// Normalizes `m` so that `m[2][2] == 1` and rejects singular matrices.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("homography has non-finite entries".into()));
        }
        let s = m[(2, 2)];
        if s.abs() < 1e-12 {
            return Err(Error::Degenerate(
                "homography has m22 == 0 and cannot be scale-normalized".into(),
            ));
        }
        let m = m / s;
        let det = m.determinant();
        if det.abs() <= MIN_DET {
            return Err(Error::Degenerate(format!("homography determinant {det:e}")));
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Result<Self> {
        Self::new(Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.m[(r, c)]))
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography is not invertible".into()))?;
        Self::new(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.m * other.m)
    }

    /// Maps one point; fails when the homogeneous depth vanishes.
    pub fn apply(&self, p: Point2<f64>) -> Result<Point2<f64>> {
        self.apply_indexed(p, 0)
    }

    fn apply_indexed(&self, p: Point2<f64>, index: usize) -> Result<Point2<f64>> {
        let v = self.m * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() <= MIN_DEPTH {
            return Err(Error::PointAtInfinity { index, w: v.z });
        }
        Ok(Point2::new(v.x / v.z, v.y / v.z))
    }

    pub fn to_json(&self) -> HomographyJson {
        HomographyJson {
            h: self.rows(),
            convention: HOMOGRAPHY_CONVENTION.to_string(),
        }
    }

    pub fn from_json(j: &HomographyJson) -> Result<Self> {
        if j.convention != HOMOGRAPHY_CONVENTION {
            return Err(Error::invalid(format!(
                "unknown homography convention `{}`",
                j.convention
            )));
        }
        Self::from_rows(j.h)
    }
}

/// Serialized form: `{"h": [[..3],[..3],[..3]], "convention": "a_to_b_pixels_m22_1"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomographyJson {
    pub h: [[f64; 3]; 3],
    pub convention: String,
}

/// Ordered list of pixel positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pts: Vec<Point2<f64>>,
}

impl PointSet {
    pub fn new(pts: Vec<Point2<f64>>) -> Result<Self> {
        if let Some(i) = pts.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::invalid(format!("point {i} has non-finite coordinates")));
        }
        Ok(Self { pts })
    }

    pub fn from_xy(xy: &[(f64, f64)]) -> Result<Self> {
        Self::new(xy.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    pub fn points(&self) -> &[Point2<f64>] {
        &self.pts
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Point2<f64>> {
        self.pts.iter()
    }

    /// Keeps the points whose mask entry is true.
    pub fn select(&self, mask: &[bool]) -> PointSet {
        PointSet {
            pts: self
                .pts
                .iter()
                .zip(mask)
                .filter_map(|(p, &keep)| keep.then_some(*p))
                .collect(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> PointSet {
        PointSet {
            pts: idx.iter().map(|&i| self.pts[i]).collect(),
        }
    }
}

impl FromIterator<Point2<f64>> for PointSet {
    fn from_iter<I: IntoIterator<Item = Point2<f64>>>(iter: I) -> Self {
        PointSet {
            pts: iter.into_iter().collect(),
        }
    }
}

/// Maps every point through `h`, naming the first point sent to infinity.
pub fn apply_homography(h: &Homography, pts: &PointSet) -> Result<PointSet> {
    let pts = pts
        .iter()
        .enumerate()
        .map(|(i, &p)| h.apply_indexed(p, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PointSet { pts })
}

/// The four image corners in the order (0,0), (W−1,0), (W−1,H−1), (0,H−1).
pub fn image_corners(width: usize, height: usize) -> [Point2<f64>; 4] {
    let (w, h) = ((width as f64 - 1.0).max(0.0), (height as f64 - 1.0).max(0.0));
    [
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(w, h),
        Point2::new(0.0, h),
    ]
}
