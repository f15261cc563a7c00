//! Geometric and photometric distortions on [`FloatImage`]s.
//!
//! Photometric operations modify the image in place and return a
//! description of the region they touched so callers can build masks.

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::FloatImage;
use crate::error::{Error, Result};
use crate::geometry::{dlt_homography, image_corners, Homography, PointSet};

const MAX_REJECTIONS: usize = 100;
const SHADOW_FEATHER_PX: f64 = 2.0;

fn convex_quad(q: &[Point2<f64>; 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if cross.abs() < 1e-9 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Homography moving each image corner by an independent uniform offset of
/// at most `max_corner_shift · min(W, H)` pixels per axis.
///
/// Non-convex quadrilaterals and near-singular fits are redrawn, up to
/// 100 times.
pub fn random_homography(
    width: usize,
    height: usize,
    max_corner_shift: f64,
    seed: u64,
) -> Result<Homography> {
    if !(0.0..=0.4).contains(&max_corner_shift) {
        return Err(Error::invalid(format!(
            "max_corner_shift {max_corner_shift} outside [0, 0.4]"
        )));
    }
    if max_corner_shift == 0.0 {
        return Ok(Homography::identity());
    }
    let bound = max_corner_shift * width.min(height) as f64;
    let corners = image_corners(width, height);
    let src = PointSet::new(corners.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_REJECTIONS {
        let moved: [Point2<f64>; 4] = std::array::from_fn(|i| {
            Point2::new(
                corners[i].x + rng.gen_range(-bound..=bound),
                corners[i].y + rng.gen_range(-bound..=bound),
            )
        });
        if !convex_quad(&moved) {
            continue;
        }
        match dlt_homography(&src, &PointSet::new(moved.to_vec())?) {
            Ok(h) if h.determinant().abs() >= 1e-6 => return Ok(h),
            _ => continue,
        }
    }
    Err(Error::invalid(format!(
        "no valid homography after {MAX_REJECTIONS} draws (max_corner_shift {max_corner_shift})"
    )))
}

/// What to write where the inverse map falls outside the source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Color([f32; 3]),
}

/// Inverse warping: destination pixel `q` reads the source at `h⁻¹(q)`.
///
/// Returns the warped image and a mask marking pixels that came from the
/// source.
pub fn warp_image(src: &FloatImage, h: &Homography, fill: Fill) -> Result<(FloatImage, Vec<bool>)> {
    let inv = h.inverse()?;
    let Fill::Color(bg) = fill;
    let mut out = FloatImage::filled(src.width, src.height, bg);
    let mut valid = vec![false; src.width * src.height];
    for y in 0..src.height {
        for x in 0..src.width {
            let Ok(p) = inv.apply(Point2::new(x as f64, y as f64)) else {
                continue;
            };
            if let Some(rgb) = src.sample_bilinear(p.x, p.y) {
                for (c, v) in rgb.into_iter().enumerate() {
                    *out.get_mut(x, y, c) = v;
                }
                valid[y * src.width + x] = true;
            }
        }
    }
    Ok((out, valid))
}

/// Linear gain ramp from `gain_lo` to `gain_hi` along a random direction.
/// Returns the unit direction.
pub fn add_illumination_gradient(
    img: &mut FloatImage,
    gain_lo: f64,
    gain_hi: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(0.1 <= gain_lo && gain_lo <= gain_hi && gain_hi <= 3.0) {
        return Err(Error::invalid(format!(
            "illumination gains must satisfy 0.1 ≤ lo ≤ hi ≤ 3, got ({gain_lo}, {gain_hi})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = (theta.cos(), theta.sin());
    let proj = |x: f64, y: f64| x * dir.0 + y * dir.1;
    let corner_proj: Vec<f64> = image_corners(img.width, img.height)
        .iter()
        .map(|c| proj(c.x, c.y))
        .collect();
    let lo = corner_proj.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = corner_proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for y in 0..img.height {
        for x in 0..img.width {
            let t = (proj(x as f64, y as f64) - lo) / span;
            let gain = (gain_lo + (gain_hi - gain_lo) * t) as f32;
            for c in 0..3 {
                let v = img.get_mut(x, y, c);
                *v = (*v * gain).clamp(0.0, 1.0);
            }
        }
    }
    Ok(dir)
}

/// Convex polygon with vertices in counter-clockwise order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    pub vertices: Vec<Point2<f64>>,
}

impl ConvexPolygon {
    /// Distance from `p` to the boundary when inside, `None` outside.
    pub fn inside_depth(&self, p: Point2<f64>) -> Option<f64> {
        let n = self.vertices.len();
        let mut depth = f64::INFINITY;
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            let e = b - a;
            let len = e.norm();
            // left-hand normal points inward for CCW order
            let d = (e.x * (p.y - a.y) - e.y * (p.x - a.x)) / len;
            if d < 0.0 {
                return None;
            }
            depth = depth.min(d);
        }
        Some(depth)
    }

    /// Inclusive integer pixel bounding box clipped to the image.
    pub fn pixel_bbox(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let xs = self.vertices.iter().map(|v| v.x);
        let ys = self.vertices.iter().map(|v| v.y);
        let x0 = xs.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let x1 = (xs.fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize).min(width - 1);
        let y0 = ys.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let y1 = (ys.fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize).min(height - 1);
        (x0, y0, x1, y1)
    }
}

fn random_convex_polygon(rng: &mut ChaCha8Rng, width: usize, height: usize) -> ConvexPolygon {
    let (w, h) = (width as f64, height as f64);
    let n = rng.gen_range(3..=8);
    let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
    let (rx, ry) = (
        rng.gen_range(0.15..0.5) * w,
        rng.gen_range(0.15..0.5) * h,
    );
    let mut angles: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    angles.sort_by(f64::total_cmp);
    // points on an ellipse at increasing angle form a convex CCW polygon
    let vertices = angles
        .into_iter()
        .map(|a| Point2::new(cx + rx * a.cos(), cy + ry * a.sin()))
        .collect();
    ConvexPolygon { vertices }
}

/// Darkens a random convex polygon: `out = in · (1 − alpha·k)` where `k`
/// ramps from 0 at the edge to 1 at 2 px inside.
pub fn add_shadow_polygon(img: &mut FloatImage, alpha: f64, seed: u64) -> Result<ConvexPolygon> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("shadow alpha {alpha} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poly = random_convex_polygon(&mut rng, img.width, img.height);
    if alpha == 0.0 {
        return Ok(poly);
    }
    let (x0, y0, x1, y1) = poly.pixel_bbox(img.width, img.height);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let Some(depth) = poly.inside_depth(Point2::new(x as f64, y as f64)) else {
                continue;
            };
            let k = (depth / SHADOW_FEATHER_PX).min(1.0);
            let factor = (1.0 - alpha * k) as f32;
            for c in 0..3 {
                *img.get_mut(x, y, c) *= factor;
            }
        }
    }
    Ok(poly)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Highlight {
    pub center: (f64, f64),
    pub sigma: f64,
}

/// Additive Gaussian blob `strength · exp(−r²/2σ²)` with σ between 2% and
/// 10% of the shorter side.
pub fn add_specular_highlight(img: &mut FloatImage, strength: f64, seed: u64) -> Result<Highlight> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::invalid(format!(
            "highlight strength {strength} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = img.width.min(img.height) as f64;
    let hl = Highlight {
        center: (
            rng.gen_range(0..img.width) as f64,
            rng.gen_range(0..img.height) as f64,
        ),
        sigma: rng.gen_range(0.02..=0.10) * side,
    };
    if strength == 0.0 {
        return Ok(hl);
    }
    let inv = 1.0 / (2.0 * hl.sigma * hl.sigma);
    for y in 0..img.height {
        for x in 0..img.width {
            let r2 = (x as f64 - hl.center.0).powi(2) + (y as f64 - hl.center.1).powi(2);
            let add = (strength * (-r2 * inv).exp()) as f32;
            for c in 0..3 {
                let v = img.get_mut(x, y, c);
                *v = (*v + add).clamp(0.0, 1.0);
            }
        }
    }
    Ok(hl)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OccluderShape {
    Rectangle,
    Ellipse,
}

/// An opaque shape given by its centre and half-extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub shape: OccluderShape,
    pub center: (f64, f64),
    pub half: (f64, f64),
    pub color: [f32; 3],
}

impl Occluder {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (u, v) = (
            (x as f64 - self.center.0) / self.half.0,
            (y as f64 - self.center.1) / self.half.1,
        );
        match self.shape {
            OccluderShape::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            OccluderShape::Ellipse => u * u + v * v <= 1.0,
        }
    }
}

/// Pastes an opaque rectangle or ellipse covering `size_fraction` of the
/// image area, fully inside the frame.
pub fn add_occluder(img: &mut FloatImage, size_fraction: f64, seed: u64) -> Result<Occluder> {
    if !(size_fraction > 0.0 && size_fraction <= 0.3) {
        return Err(Error::invalid(format!(
            "occluder size fraction {size_fraction} outside (0, 0.3]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (img.width as f64, img.height as f64);
    let shape = if rng.gen_bool(0.5) {
        OccluderShape::Rectangle
    } else {
        OccluderShape::Ellipse
    };
    let area = size_fraction * w * h;
    let aspect: f64 = rng.gen_range(0.5..2.0);
    // rectangle area = 4·a·b, ellipse area = π·a·b
    let ab = match shape {
        OccluderShape::Rectangle => area / 4.0,
        OccluderShape::Ellipse => area / std::f64::consts::PI,
    };
    let a = (ab * aspect).sqrt().min(w / 2.0 - 0.5);
    let b = (ab / a).min(h / 2.0 - 0.5);
    let center = (rng.gen_range(a..=w - 1.0 - a), rng.gen_range(b..=h - 1.0 - b));
    let color = std::array::from_fn(|_| rng.gen_range(0.0..1.0f32));
    let occ = Occluder {
        shape,
        center,
        half: (a, b),
        color,
    };
    for y in 0..img.height {
        for x in 0..img.width {
            if occ.covers(x, y) {
                for (c, &v) in color.iter().enumerate() {
                    *img.get_mut(x, y, c) = v;
                }
            }
        }
    }
    Ok(occ)
}

/// i.i.d. Gaussian pixel noise, clamped to `[0, 1]`.
pub fn add_gaussian_noise(img: &mut FloatImage, sigma: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid(format!("noise sigma {sigma} outside [0, 1]")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma as f32).expect("sigma is finite and positive");
    for v in img.data.iter_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(())
}
