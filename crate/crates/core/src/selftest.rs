//! Built-in property suites: operator gradients against finite
//! differences, bilinear sampling and the contrastive loss against direct
//! float64 formulas, and homography estimation on synthetic data.
//!
//! Every check reports a measured value next to the limit it must stay
//! under, so the same results can be printed by the command line and
//! asserted by tests.

use std::fmt;

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{
    apply_homography, dlt_homography, mean_corner_error, ransac_homography,
    Homography, PointSet, RansacConfig,
};
use crate::matching::contrastive_loss;
use crate::tensor::{finite_difference_check, grid_sample_forward, Axis, RunningStats, Tape, Tensor, Var};

pub const GRADIENT_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    /// Passing requires `measured <= limit`, or `measured >= limit` when
    /// `at_least` is set.
    pub limit: f64,
    pub at_least: bool,
}

impl Check {
    fn below(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            limit,
            at_least: false,
        }
    }

    fn above(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            limit,
            at_least: true,
        }
    }

    pub fn passed(&self) -> bool {
        if self.at_least {
            self.measured >= self.limit
        } else {
            self.measured <= self.limit
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let op = if self.at_least { ">=" } else { "<=" };
        write!(f, "{verdict} {}: {:.3e} {op} {:.3e}", self.name, self.measured, self.limit)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values kept at least 0.05 away from zero, so `relu` has no kink
/// within a finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Σ r ⊙ y, which turns any output into a scalar with generic weights.
fn project(t: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = t.constant(r.clone());
    let p = t.mul(y, rv)?;
    Ok(t.sum(p))
}

type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Worst finite-difference error over every argument of `f`.
fn check_args(args: &[Tensor], f: &Builder) -> Result<f64> {
    let mut worst = 0.0f64;
    for which in 0..args.len() {
        let err = finite_difference_check(
            |t, v| {
                let vars: Vec<Var> = args
                    .iter()
                    .enumerate()
                    .map(|(i, a)| if i == which { v } else { t.constant(a.clone()) })
                    .collect();
                f(t, &vars)
            },
            &args[which],
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Normalized coordinates whose pixel position stays 0.05 px away from the
/// integer lattice, where bilinear weights have kinks.
fn smooth_coords(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> Tensor {
    let mut pick = |size: usize| loop {
        let u: f64 = rng.gen_range(-0.4..size as f64 - 0.6);
        if (u - u.round()).abs() > 0.05 {
            return ((2.0 * u + 1.0) / size as f64 - 1.0) as f32;
        }
    };
    let data = (0..n).flat_map(|_| [pick(w), pick(h)]).collect();
    Tensor::new([n, 2], data).expect("shape")
}

/// Maximum finite-difference error of every differentiable operator over
/// `seeds` random draws.
pub fn gradient_suite(seeds: u64) -> Result<Vec<Check>> {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x67_7261_64 ^ seed);
        let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let b = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let r = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        record("add", check_args(&[a.clone(), b.clone()], &|t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, &r)
        })?);
        record("mul", check_args(&[a.clone(), b.clone()], &|t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, &r)
        })?);
        record("scale", check_args(&[a.clone()], &|t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, &r)
        })?);
        record("sum", check_args(&[a.clone()], &|t, v| Ok(t.sum(v[0])))?);
        let z = away_from_zero(&mut rng, &[3, 4]);
        record("relu", check_args(&[z], &|t, v| {
            let y = t.relu(v[0]);
            project(t, y, &r)
        })?);

        let x = uniform(&mut rng, &[2, 5, 5], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let bias = uniform(&mut rng, &[3], -1.0, 1.0);
        let stride = 1 + (seed as usize % 2);
        let out = if stride == 1 { 5 } else { 3 };
        let rc = uniform(&mut rng, &[3, out, out], -1.0, 1.0);
        record("conv2d", check_args(&[x, w, bias], &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, 1)?;
            project(t, y, &rc)
        })?);

        let xb = uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        let gamma = uniform(&mut rng, &[3], 0.5, 1.5);
        let beta = uniform(&mut rng, &[3], -0.5, 0.5);
        let rb = uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        record("batch_norm2d", check_args(&[xb, gamma, beta], &|t, v| {
            let mut stats = RunningStats::new(3, 0.1);
            let y = t.batch_norm2d(v[0], v[1], v[2], &mut stats, true, 1e-5)?;
            project(t, y, &rb)
        })?);

        let map = uniform(&mut rng, &[2, 4, 5], -1.0, 1.0);
        let grid = smooth_coords(&mut rng, 6, 5, 4);
        let rg = uniform(&mut rng, &[6, 2], -1.0, 1.0);
        record("grid_sample_bilinear", check_args(&[map, grid], &|t, v| {
            let y = t.grid_sample_bilinear(v[0], v[1])?;
            project(t, y, &rg)
        })?);

        let da = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let db = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let rp = uniform(&mut rng, &[4, 4], -1.0, 1.0);
        record("pairwise_dot", check_args(&[da.clone(), db.clone()], &|t, v| {
            let y = t.pairwise_dot(v[0], v[1])?;
            project(t, y, &rp)
        })?);
        let rn = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        record("l2_normalize_rows", check_args(&[da], &|t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            project(t, y, &rn)
        })?);

        let s = uniform(&mut rng, &[5, 5], -2.0, 2.0);
        record("softmax_cross_entropy_diag(row)", check_args(&[s.clone()], &|t, v| {
            t.softmax_cross_entropy_diag(v[0], Axis::Row)
        })?);
        record("softmax_cross_entropy_diag(column)", check_args(&[s.clone()], &|t, v| {
            t.softmax_cross_entropy_diag(v[0], Axis::Column)
        })?);
        record("contrastive_loss", check_args(&[s], &|t, v| contrastive_loss(t, v[0]))?);
    }
    Ok(worst
        .into_iter()
        .map(|(n, e)| Check::below(format!("gradient {n}"), e, GRADIENT_TOLERANCE))
        .collect())
}

/// The bilinear read as an explicit double sum over every pixel.
pub fn grid_sample_double_sum(map: &[f32], c: usize, h: usize, w: usize, x: f64, y: f64) -> Vec<f64> {
    let u = (x + 1.0) / 2.0 * w as f64 - 0.5;
    let v = (y + 1.0) / 2.0 * h as f64 - 0.5;
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for n in 0..h {
                for m in 0..w {
                    let k = (1.0 - (u - m as f64).abs()).max(0.0) * (1.0 - (v - n as f64).abs()).max(0.0);
                    s += map[(ch * h + n) * w + m] as f64 * k;
                }
            }
            s
        })
        .collect()
}

pub fn sampling_suite(seed: u64, n_coords: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (3, 7, 9);
    let map = uniform(&mut rng, &[c, h, w], -1.0, 1.0);
    let mut grid = Vec::with_capacity(2 * n_coords);
    for _ in 0..n_coords {
        grid.push(rng.gen_range(-1.0f32..1.0));
        grid.push(rng.gen_range(-1.0f32..1.0));
    }
    let got = grid_sample_forward(map.data(), c, h, w, &grid);
    let mut worst = 0.0f64;
    for (i, xy) in grid.chunks(2).enumerate() {
        let want = grid_sample_double_sum(map.data(), c, h, w, xy[0] as f64, xy[1] as f64);
        for (ch, v) in want.iter().enumerate() {
            worst = worst.max((got[i * c + ch] as f64 - v).abs());
        }
    }

    let value = rng.gen_range(-3.0f32..3.0);
    let constant = Tensor::full([1, h, w], value);
    let mut interior = Vec::new();
    for _ in 0..n_coords {
        let u = rng.gen_range(0.0..(w - 1) as f64);
        let v = rng.gen_range(0.0..(h - 1) as f64);
        interior.push(((2.0 * u + 1.0) / w as f64 - 1.0) as f32);
        interior.push(((2.0 * v + 1.0) / h as f64 - 1.0) as f32);
    }
    let unity = grid_sample_forward(constant.data(), 1, h, w, &interior)
        .iter()
        .map(|s| (s - value).abs() as f64)
        .fold(0.0, f64::max);

    let mut centres = Vec::new();
    let mut expected = Vec::new();
    for n in 0..h {
        for m in 0..w {
            centres.push(((2 * m + 1) as f64 / w as f64 - 1.0) as f32);
            centres.push(((2 * n + 1) as f64 / h as f64 - 1.0) as f32);
            expected.extend((0..c).map(|ch| map.data()[(ch * h + n) * w + m]));
        }
    }
    let centre = grid_sample_forward(map.data(), c, h, w, &centres)
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);

    vec![
        Check::below(format!("grid sample vs double sum ({n_coords} coords)"), worst, 1e-5),
        Check::below("grid sample partition of unity", unity, 1e-6),
        Check::below("grid sample pixel-centre exactness", centre, 1e-6),
    ]
}

/// Symmetric cross-entropy written out in float64.
pub fn contrastive_loss_direct(s: &[f64], n: usize) -> f64 {
    let lse = |v: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = v.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..n {
        rows += lse(&mut (0..n).map(|j| s[i * n + j])) - s[i * n + i];
        cols += lse(&mut (0..n).map(|j| s[j * n + i])) - s[i * n + i];
    }
    (rows + cols) / (2.0 * n as f64)
}

fn tape_loss(s: &Tensor) -> Result<f64> {
    let mut t = Tape::new();
    let v = t.constant(s.clone());
    let l = contrastive_loss(&mut t, v)?;
    t.item_f64(l)
}

pub fn loss_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut min_loss = f64::INFINITY;
    for n in [8usize, 64] {
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let s = uniform(&mut rng, &[n, n], -4.0, 4.0);
            let direct = contrastive_loss_direct(&s.data().iter().map(|&v| v as f64).collect::<Vec<_>>(), n);
            let got = tape_loss(&s)?;
            worst = worst.max((got - direct).abs());
            min_loss = min_loss.min(got);
        }
        out.push(Check::below(format!("contrastive loss vs direct ({n}×{n})"), worst, 1e-6));
        let c = tape_loss(&Tensor::full([n, n], rng.gen_range(-3.0..3.0)))?;
        out.push(Check::below(format!("constant {n}×{n} loss − ln {n}"), (c - (n as f64).ln()).abs(), 1e-6));
    }
    for _ in 0..50 {
        let n = rng.gen_range(1..12);
        let scale = rng.gen_range(0.1..30.0);
        min_loss = min_loss.min(tape_loss(&uniform(&mut rng, &[n, n], -scale, scale))?);
    }
    out.push(Check::above("minimum contrastive loss", min_loss, 0.0));
    Ok(out)
}

fn random_h(rng: &mut ChaCha8Rng) -> Homography {
    Homography::from_rows([
        [1.0 + rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-20.0..20.0)],
        [rng.gen_range(-0.2..0.2), 1.0 + rng.gen_range(-0.2..0.2), rng.gen_range(-20.0..20.0)],
        [rng.gen_range(-1e-3..1e-3), rng.gen_range(-1e-3..1e-3), 1.0],
    ])
    .expect("well-conditioned")
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, size: f64) -> PointSet {
    (0..n)
        .map(|_| Point2::new(rng.gen_range(0.0..size), rng.gen_range(0.0..size)))
        .collect()
}

pub fn geometry_suite(seed: u64, trials: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 256;
    let mut dlt_worst = 0.0f64;
    for _ in 0..trials {
        let h = random_h(&mut rng);
        let src = random_points(&mut rng, 8, size as f64);
        let est = dlt_homography(&src, &apply_homography(&h, &src)?)?;
        dlt_worst = dlt_worst.max(mean_corner_error(&h, &est, size, size)?);
    }

    let mut recovered = 0;
    for trial in 0..trials {
        let h = random_h(&mut rng);
        let src = random_points(&mut rng, 100, size as f64);
        let exact = apply_homography(&h, &src)?;
        let dst: PointSet = exact
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i % 2 == 0 {
                    *p
                } else {
                    Point2::new(rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64))
                }
            })
            .collect();
        let cfg = RansacConfig {
            threshold_px: 3.0,
            seed: seed ^ trial,
            ..RansacConfig::default()
        };
        if let Ok(r) = ransac_homography(&src, &dst, &cfg) {
            if mean_corner_error(&h, &r.homography, size, size)? < 1.0 {
                recovered += 1;
            }
        }
    }

    let h = random_h(&mut rng);
    let self_mce = mean_corner_error(&h, &h, size, size)?;
    let shifted = mean_corner_error(&Homography::identity(), &Homography::translation(1.0, 0.0), size, size)?;
    Ok(vec![
        Check::below("DLT corner error from exact correspondences", dlt_worst, 1e-6),
        Check::above(
            format!("RANSAC recoveries under 1 px with 50% outliers (of {trials})"),
            recovered as f64,
            (trials as f64 * 0.95).ceil(),
        ),
        Check::below("MCE(H, H)", self_mce, 0.0),
        Check::below("|MCE(identity, 1 px shift) − 4|", (shifted - 4.0).abs(), 0.0),
    ])
}

/// Every suite at its acceptance size.
pub fn run_all() -> Result<Vec<Check>> {
    let mut checks = gradient_suite(20)?;
    checks.extend(sampling_suite(1, 1000));
    checks.extend(loss_suite(2)?);
    checks.extend(geometry_suite(3, 20)?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        let mut checks = gradient_suite(2).unwrap();
        checks.extend(sampling_suite(0, 50));
        checks.extend(loss_suite(0).unwrap());
        checks.extend(geometry_suite(0, 5).unwrap());
        for c in &checks {
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn check_display() {
        let c = Check::below("x", 2.0, 1.0);
        assert!(!c.passed());
        assert!(c.to_string().starts_with("FAIL x"));
    }
}
