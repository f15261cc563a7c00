use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PointSet;
use crate::error::{Error, Result};

/// A `rows × cols` grid centred in a `width × height` image, with optional
/// per-point uniform jitter measured in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub width: usize,
    pub height: usize,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::invalid(format!(
                "grid needs at least 2×2 points, got {}×{}",
                self.rows, self.cols
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::invalid(format!(
                "grid image must be at least 2×2, got {}×{}",
                self.width, self.height
            )));
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return Err(Error::invalid(format!(
                "noise amplitude {} outside [0, 0.5]",
                self.noise_amplitude
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> (f64, f64) {
        (
            self.width as f64 / self.cols as f64,
            self.height as f64 / self.rows as f64,
        )
    }

    /// Un-jittered position of grid node (r, c).
    pub fn base_point(&self, r: usize, c: usize) -> Point2<f64> {
        let (sx, sy) = self.step();
        Point2::new(0.5 * sx + c as f64 * sx, 0.5 * sy + r as f64 * sy)
    }
}

/// Row-major grid points with jitter drawn from `U(−a, a)·step` per axis,
/// clamped to `[0, W−1] × [0, H−1]`.
pub fn sample_grid(spec: &GridSpec) -> Result<PointSet> {
    spec.validate()?;
    let (sx, sy) = spec.step();
    let a = spec.noise_amplitude;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (xmax, ymax) = ((spec.width - 1) as f64, (spec.height - 1) as f64);
    let mut pts = Vec::with_capacity(spec.rows * spec.cols);
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let base = spec.base_point(r, c);
            let (jx, jy) = if a > 0.0 {
                (rng.gen_range(-a..=a) * sx, rng.gen_range(-a..=a) * sy)
            } else {
                (0.0, 0.0)
            };
            pts.push(Point2::new(
                (base.x + jx).clamp(0.0, xmax),
                (base.y + jy).clamp(0.0, ymax),
            ));
        }
    }
    PointSet::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64, seed: u64) -> GridSpec {
        GridSpec {
            rows: 16,
            cols: 16,
            width: 256,
            height: 256,
            noise_amplitude: noise,
            seed,
        }
    }

    #[test]
    fn training_grid_is_equidistant() {
        let pts = sample_grid(&spec(0.0, 0)).unwrap();
        assert_eq!(pts.len(), 256);
        let p = pts.points();
        assert_eq!(p[0], Point2::new(8.0, 8.0));
        for r in 0..16 {
            for c in 0..15 {
                let gap = p[r * 16 + c + 1].x - p[r * 16 + c].x;
                assert_eq!(gap, 16.0);
            }
        }
        for r in 0..15 {
            assert_eq!(p[(r + 1) * 16].y - p[r * 16].y, 16.0);
        }
    }

    #[test]
    fn jitter_stays_within_half_a_cell_and_in_bounds() {
        for seed in 0..1000 {
            let s = GridSpec {
                rows: 5,
                cols: 7,
                width: 64,
                height: 48,
                noise_amplitude: 0.5,
                seed,
            };
            let pts = sample_grid(&s).unwrap();
            let (sx, sy) = s.step();
            for r in 0..s.rows {
                for c in 0..s.cols {
                    let p = pts.points()[r * s.cols + c];
                    let b = s.base_point(r, c);
                    assert!((p.x - b.x).abs() <= 0.5 * sx + 1e-12);
                    assert!((p.y - b.y).abs() <= 0.5 * sy + 1e-12);
                    assert!((0.0..=63.0).contains(&p.x) && (0.0..=47.0).contains(&p.y));
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(sample_grid(&spec(0.25, 9)).unwrap(), sample_grid(&spec(0.25, 9)).unwrap());
        assert_ne!(sample_grid(&spec(0.25, 9)).unwrap(), sample_grid(&spec(0.25, 10)).unwrap());
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = spec(0.0, 0);
        s.rows = 1;
        assert!(sample_grid(&s).is_err());
        let mut s = spec(0.6, 0);
        assert!(sample_grid(&s).is_err());
        s.noise_amplitude = 0.0;
        s.width = 1;
        assert!(sample_grid(&s).is_err());
    }
}
