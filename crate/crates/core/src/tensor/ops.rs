//! Differentiable operators and their backward rules.

use std::cell::RefCell;

use super::gemm::{gemm, View};
use super::{accumulate, Node, Tape, Var};
use crate::error::{Error, Result};

/// Softmax direction for [`Tape::softmax_cross_entropy_diag`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

/// Per-channel running statistics used by batch norm in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f32) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        training: bool,
        batch: usize,
        channels: usize,
        plane: usize,
    },
    GridSample {
        map: Var,
        grid: Var,
    },
    PairwiseDot(Var, Var),
    SoftmaxCeDiag {
        s: Var,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<f32>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::PairwiseDot(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) => vec![a],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::GridSample { map, grid } => vec![map, grid],
            Op::SoftmaxCeDiag { s, .. } => vec![s],
            Op::L2NormalizeRows { input, .. } => vec![input],
        }
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        });
    }
    Ok(())
}

fn matrix_dims(tape: &Tape, op: &'static str, v: Var) -> Result<(usize, usize)> {
    match *tape.shape(v) {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::ShapeMismatch {
            op,
            detail: format!("expected a matrix, got shape {s:?}"),
        }),
    }
}

impl Tape {
    /// Full-precision value of a scalar node produced by a reduction.
    fn exact(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].exact
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let rg = self.any_grad(&[a, b]);
        if let (Some(x), Some(y)) = (self.exact(a), self.exact(b)) {
            return Ok(self.push_scalar(x + y, Op::Add(a, b), rg));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let rg = self.any_grad(&[a, b]);
        if let (Some(x), Some(y)) = (self.exact(a), self.exact(b)) {
            return Ok(self.push_scalar(x * y, Op::Mul(a, b), rg));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let rg = self.any_grad(&[a]);
        if let Some(x) = self.exact(a) {
            return self.push_scalar(x * factor as f64, Op::Scale(a, factor), rg);
        }
        let data = self.data(a).iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().map(|&x| x as f64).sum();
        let rg = self.any_grad(&[a]);
        self.push_scalar(s, Op::Sum(a), rg)
    }

    /// Elementwise `max(0, x)`; the gradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.any_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), rg)
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `C_in×H×W`, `weight` is `C_out×C_in×k×k` with odd `k`,
    /// `bias` is `C_out`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [c_in, h, w] = *self.shape(input) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input must be C×H×W, got {:?}", self.shape(input)),
            });
        };
        let [c_out, wc_in, k, k2] = *self.shape(weight) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight must be 4-D, got {:?}", self.shape(weight)),
            });
        };
        if wc_in != c_in || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "weight {:?} incompatible with input {:?}",
                    self.shape(weight),
                    self.shape(input)
                ),
            });
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias must be [{c_out}], got {:?}", self.shape(bias)),
            });
        }
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let out_dim = |n: usize| -> Result<usize> {
            let padded = n + 2 * padding;
            if padded < k {
                return Err(Error::invalid(format!(
                    "conv2d output size is not positive (extent {n}, padding {padding}, kernel {k})"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
            ho: out_dim(h)?,
            wo: out_dim(w)?,
        };
        let kk = c_in * k * k;
        let p = geom.ho * geom.wo;
        let mut out = Vec::with_capacity(c_out * p);
        for &b in self.data(bias) {
            out.extend(std::iter::repeat(b).take(p));
        }
        with_im2col(self.data(input), &geom, |cols| {
            gemm(
                View::row_major(self.data(weight), c_out, kk),
                View::row_major(cols, kk, p),
                1.0,
                &mut out,
            )
        });
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            vec![c_out, geom.ho, geom.wo],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization over `B×C×H×W` (a `C×H×W` input is
    /// treated as a batch of one).
    ///
    /// In training mode the batch statistics normalize the input and are
    /// folded into `stats` with its momentum (unbiased variance, as usual);
    /// otherwise `stats` supplies mean and variance.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
        eps: f32,
    ) -> Result<Var> {
        let (batch, channels, plane) = match *self.shape(input) {
            [b, c, h, w] => (b, c, h * w),
            [c, h, w] => (1, c, h * w),
            ref s => {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm2d",
                    detail: format!("input must be 3-D or 4-D, got {s:?}"),
                })
            }
        };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d",
                detail: format!(
                    "gamma {:?} / beta {:?} must have {channels} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        if stats.mean.len() != channels || stats.var.len() != channels {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d",
                detail: format!("running stats do not have {channels} channels"),
            });
        }
        if eps <= 0.0 {
            return Err(Error::invalid("batch_norm2d eps must be positive"));
        }
        let count = batch * plane;
        if training && count < 2 {
            return Err(Error::invalid(format!(
                "batch_norm2d in training mode needs at least 2 values per channel, got {count}"
            )));
        }
        let x = self.data(input);
        let idx = |b: usize, c: usize| (b * channels + c) * plane;
        let mut inv_std = vec![0.0f32; channels];
        let mut mean_c = vec![0.0f64; channels];
        for c in 0..channels {
            let (mean, var) = if training {
                let mut s = 0.0f64;
                for b in 0..batch {
                    s += x[idx(b, c)..idx(b, c) + plane]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                let mean = s / count as f64;
                let mut ss = 0.0f64;
                for b in 0..batch {
                    ss += x[idx(b, c)..idx(b, c) + plane]
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>();
                }
                let var = ss / count as f64;
                let m = stats.momentum as f64;
                let unbiased = ss / (count - 1) as f64;
                stats.mean[c] = ((1.0 - m) * stats.mean[c] as f64 + m * mean) as f32;
                stats.var[c] = ((1.0 - m) * stats.var[c] as f64 + m * unbiased) as f32;
                (mean, var)
            } else {
                (stats.mean[c] as f64, stats.var[c] as f64)
            };
            mean_c[c] = mean;
            inv_std[c] = (1.0 / (var + eps as f64).sqrt()) as f32;
        }
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let r = idx(b, c)..idx(b, c) + plane;
                let (m, is) = (mean_c[c], inv_std[c] as f64);
                for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x[r]) {
                    let n = ((v as f64 - m) * is) as f32;
                    *xh = n;
                    *o = g[c] * n + bt[c];
                }
            }
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            self.shape(input).to_vec(),
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
                batch,
                channels,
                plane,
            },
            rg,
        ))
    }

    /// Bilinear sampling of a `C×H×W` map at `N×2` normalized `(x, y)`
    /// coordinates, producing `N×C`.
    ///
    /// Normalized `x ∈ [−1, 1]` maps to the continuous column
    /// `u = (x + 1)/2 · W − 0.5`, so `x = −1 + (2m + 1)/W` is the center of
    /// column `m` (rows likewise). Each of the four neighbours is weighted
    /// by `max(0, 1−|u−m|)·max(0, 1−|v−n|)`; neighbours outside the map
    /// contribute nothing. Differentiable in both the map and the grid.
    pub fn grid_sample_bilinear(&mut self, map: Var, grid: Var) -> Result<Var> {
        let [c, h, w] = *self.shape(map) else {
            return Err(Error::ShapeMismatch {
                op: "grid_sample_bilinear",
                detail: format!("map must be C×H×W, got {:?}", self.shape(map)),
            });
        };
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("grid_sample_bilinear on an empty map"));
        }
        let n = match *self.shape(grid) {
            [n, 2] => n,
            [0] => 0,
            ref s => {
                return Err(Error::ShapeMismatch {
                    op: "grid_sample_bilinear",
                    detail: format!("grid must be N×2, got {s:?}"),
                })
            }
        };
        let out = grid_sample_forward(self.data(map), c, h, w, self.data(grid));
        let rg = self.any_grad(&[map, grid]);
        Ok(self.push(vec![n, c], out, Op::GridSample { map, grid }, rg))
    }

    /// `S[i][j] = ⟨a[i], b[j]⟩` for `a: N×d`, `b: M×d`.
    pub fn pairwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self, "pairwise_dot", a)?;
        let (m, d2) = matrix_dims(self, "pairwise_dot", b)?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "pairwise_dot",
                detail: format!("descriptor length {d} vs {d2}"),
            });
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            let ai = &ad[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &bd[j * d..(j + 1) * d];
                out[i * m + j] = dot64(ai, bj) as f32;
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![n, m], out, Op::PairwiseDot(a, b), rg))
    }

    /// Mean over the diagonal of `−log softmax(S)` taken along `axis`.
    pub fn softmax_cross_entropy_diag(&mut self, s: Var, axis: Axis) -> Result<Var> {
        let (n, m) = matrix_dims(self, "softmax_cross_entropy_diag", s)?;
        if n != m || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy_diag",
                detail: format!("expected a non-empty square matrix, got {n}×{m}"),
            });
        }
        let sd = self.data(s);
        let at = |line: usize, k: usize| match axis {
            Axis::Row => sd[line * n + k] as f64,
            Axis::Column => sd[k * n + line] as f64,
        };
        let mut probs = vec![0.0f64; n * n];
        let mut total = 0.0f64;
        for line in 0..n {
            let mx = (0..n).map(|k| at(line, k)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|k| (at(line, k) - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - at(line, line);
            for k in 0..n {
                let p = (at(line, k) - lse).exp();
                match axis {
                    Axis::Row => probs[line * n + k] = p,
                    Axis::Column => probs[k * n + line] = p,
                }
            }
        }
        let rg = self.any_grad(&[s]);
        Ok(self.push_scalar(total / n as f64, Op::SoftmaxCeDiag { s, probs }, rg))
    }

    /// Scales each row of an `N×d` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self, "l2_normalize_rows", a)?;
        let x = self.data(a);
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let nrm = (dot64(row, row).sqrt() as f32).max(1e-12);
            norms.push(nrm);
            for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / nrm;
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(vec![n, d], out, Op::L2NormalizeRows { input: a, norms }, rg))
    }
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Bilinear corner weights for one normalized coordinate pair.
struct Bilinear {
    m0: isize,
    n0: isize,
    fx: f32,
    fy: f32,
}

impl Bilinear {
    fn new(x: f32, y: f32, h: usize, w: usize) -> Self {
        let u = (x + 1.0) * 0.5 * w as f32 - 0.5;
        let v = (y + 1.0) * 0.5 * h as f32 - 0.5;
        let (uf, vf) = (u.floor(), v.floor());
        Self {
            m0: uf as isize,
            n0: vf as isize,
            fx: u - uf,
            fy: v - vf,
        }
    }

    /// The four (row, col, weight) neighbours that fall inside the map.
    fn corners(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, f32)> {
        let (fx, fy) = (self.fx, self.fy);
        let cand = [
            (self.n0, self.m0, (1.0 - fx) * (1.0 - fy)),
            (self.n0, self.m0 + 1, fx * (1.0 - fy)),
            (self.n0 + 1, self.m0, (1.0 - fx) * fy),
            (self.n0 + 1, self.m0 + 1, fx * fy),
        ];
        cand.into_iter().filter_map(move |(n, m, wt)| {
            (n >= 0 && m >= 0 && (n as usize) < h && (m as usize) < w)
                .then_some((n as usize, m as usize, wt))
        })
    }
}

/// Forward kernel of [`Tape::grid_sample_bilinear`] on raw buffers.
pub fn grid_sample_forward(map: &[f32], c: usize, h: usize, w: usize, grid: &[f32]) -> Vec<f32> {
    let n = grid.len() / 2;
    let plane = h * w;
    let mut out = vec![0.0f32; n * c];
    for i in 0..n {
        let b = Bilinear::new(grid[2 * i], grid[2 * i + 1], h, w);
        let row = &mut out[i * c..(i + 1) * c];
        for (r, col, wt) in b.corners(h, w) {
            let off = r * w + col;
            for (ch, o) in row.iter_mut().enumerate() {
                *o += wt * map[ch * plane + off];
            }
        }
    }
    out
}

thread_local! {
    // Column buffers are tens of megabytes at training resolution; fresh
    // allocations of that size go through mmap and fault on every page.
    static COLS: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
    static DCOLS: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on the thread's im2col buffer for `x`.
fn with_im2col<R>(x: &[f32], g: &ConvGeom, f: impl FnOnce(&[f32]) -> R) -> R {
    COLS.with(|c| {
        let mut cols = c.borrow_mut();
        im2col_into(x, g, &mut cols);
        f(&cols)
    })
}

fn im2col_into(x: &[f32], g: &ConvGeom, cols: &mut Vec<f32>) {
    let p = g.ho * g.wo;
    cols.clear();
    cols.resize(g.c_in * g.k * g.k * p, 0.0);
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(kx, g.w, g.wo, g.stride, g.pad);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h || lo >= hi {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        d[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            d[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(kx, g.w, g.wo, g.stride, g.pad);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output columns `ox` in `[lo, hi)` whose tap `kx` reads inside `[0, w)`.
fn valid_range(kx: usize, w: usize, wo: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ix = ox * stride + kx - pad
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn backward_node(nodes: &[Node], id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let node = &nodes[id];
    let rg = |v: Var| nodes[v.0].requires_grad;
    let len = |v: Var| nodes[v.0].data.len();
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            for v in [a, b] {
                if rg(v) {
                    let buf = accumulate(&mut grads[v.0], len(v));
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
        }
        &Op::Mul(a, b) => {
            for (v, other) in [(a, b), (b, a)] {
                if rg(v) {
                    let o = &nodes[other.0].data;
                    let buf = accumulate(&mut grads[v.0], len(v));
                    for ((d, s), y) in buf.iter_mut().zip(g).zip(o) {
                        *d += s * y;
                    }
                }
            }
        }
        &Op::Scale(a, f) => {
            if rg(a) {
                let buf = accumulate(&mut grads[a.0], len(a));
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += s * f);
            }
        }
        &Op::Sum(a) => {
            if rg(a) {
                let buf = accumulate(&mut grads[a.0], len(a));
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Relu(a) => {
            if rg(a) {
                let x = &nodes[a.0].data;
                let buf = accumulate(&mut grads[a.0], len(a));
                for ((d, s), &xv) in buf.iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *d += s;
                    }
                }
            }
        }
        &Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let p = geom.ho * geom.wo;
            let kk = geom.c_in * geom.k * geom.k;
            let gv = View::row_major(g, geom.c_out, p);
            if rg(bias) {
                let buf = accumulate(&mut grads[bias.0], geom.c_out);
                for (co, d) in buf.iter_mut().enumerate() {
                    *d += g[co * p..(co + 1) * p].iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
            if rg(weight) {
                let buf = accumulate(&mut grads[weight.0], geom.c_out * kk);
                with_im2col(&nodes[input.0].data, &geom, |cols| {
                    gemm(gv, View::row_major(cols, kk, p).t(), 1.0, buf)
                });
            }
            if rg(input) {
                DCOLS.with(|d| {
                    let mut dcols = d.borrow_mut();
                    dcols.resize(kk * p, 0.0);
                    // beta = 0 overwrites every entry
                    gemm(
                        View::row_major(&nodes[weight.0].data, geom.c_out, kk).t(),
                        gv,
                        0.0,
                        &mut dcols[..kk * p],
                    );
                    let buf = accumulate(&mut grads[input.0], len(input));
                    col2im_add(&dcols[..kk * p], &geom, buf);
                });
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
            batch,
            channels,
            plane,
        } => {
            let (input, gamma, beta) = (*input, *gamma, *beta);
            let (batch, channels, plane) = (*batch, *channels, *plane);
            let idx = |b: usize, c: usize| (b * channels + c) * plane;
            let mut sum_g = vec![0.0f64; channels];
            let mut sum_gx = vec![0.0f64; channels];
            for b in 0..batch {
                for c in 0..channels {
                    let r = idx(b, c)..idx(b, c) + plane;
                    for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                        sum_g[c] += gv as f64;
                        sum_gx[c] += gv as f64 * xh as f64;
                    }
                }
            }
            if rg(gamma) {
                let buf = accumulate(&mut grads[gamma.0], channels);
                buf.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += *s as f32);
            }
            if rg(beta) {
                let buf = accumulate(&mut grads[beta.0], channels);
                buf.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += *s as f32);
            }
            if rg(input) {
                let gam = nodes[gamma.0].data.clone();
                let count = (batch * plane) as f64;
                let buf = accumulate(&mut grads[input.0], len(input));
                for b in 0..batch {
                    for c in 0..channels {
                        let r = idx(b, c)..idx(b, c) + plane;
                        let k = gam[c] as f64 * inv_std[c] as f64;
                        if *training {
                            let (mg, mgx) = (sum_g[c] / count, sum_gx[c] / count);
                            for ((d, &gv), &xh) in buf[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *d += (k * (gv as f64 - mg - xh as f64 * mgx)) as f32;
                            }
                        } else {
                            for (d, &gv) in buf[r.clone()].iter_mut().zip(&g[r]) {
                                *d += (k * gv as f64) as f32;
                            }
                        }
                    }
                }
            }
        }
        &Op::GridSample { map, grid } => {
            let [c, h, w] = nodes[map.0].shape[..] else {
                unreachable!("grid sample map is 3-D")
            };
            let plane = h * w;
            let gd = &nodes[grid.0].data;
            let n = gd.len() / 2;
            if rg(map) {
                let buf = accumulate(&mut grads[map.0], c * plane);
                for i in 0..n {
                    let b = Bilinear::new(gd[2 * i], gd[2 * i + 1], h, w);
                    let gi = &g[i * c..(i + 1) * c];
                    for (r, col, wt) in b.corners(h, w) {
                        let off = r * w + col;
                        for (ch, &gv) in gi.iter().enumerate() {
                            buf[ch * plane + off] += wt * gv;
                        }
                    }
                }
            }
            if rg(grid) {
                let md = &nodes[map.0].data;
                let buf = accumulate(&mut grads[grid.0], 2 * n);
                for i in 0..n {
                    let b = Bilinear::new(gd[2 * i], gd[2 * i + 1], h, w);
                    let gi = &g[i * c..(i + 1) * c];
                    // d(weight)/du and d(weight)/dv for the four corners
                    let cand = [
                        (b.n0, b.m0, -(1.0 - b.fy), -(1.0 - b.fx)),
                        (b.n0, b.m0 + 1, 1.0 - b.fy, -b.fx),
                        (b.n0 + 1, b.m0, -b.fy, 1.0 - b.fx),
                        (b.n0 + 1, b.m0 + 1, b.fy, b.fx),
                    ];
                    let (mut du, mut dv) = (0.0f64, 0.0f64);
                    for (r, col, wu, wv) in cand {
                        if r < 0 || col < 0 || r as usize >= h || col as usize >= w {
                            continue;
                        }
                        let off = r as usize * w + col as usize;
                        let s: f64 = gi
                            .iter()
                            .enumerate()
                            .map(|(ch, &gv)| gv as f64 * md[ch * plane + off] as f64)
                            .sum();
                        du += wu as f64 * s;
                        dv += wv as f64 * s;
                    }
                    buf[2 * i] += (du * w as f64 * 0.5) as f32;
                    buf[2 * i + 1] += (dv * h as f64 * 0.5) as f32;
                }
            }
        }
        &Op::PairwiseDot(a, b) => {
            let [n, d] = nodes[a.0].shape[..] else { unreachable!() };
            let m = nodes[b.0].shape[0];
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            if rg(a) {
                let buf = accumulate(&mut grads[a.0], n * d);
                for i in 0..n {
                    let mut acc = vec![0.0f64; d];
                    for j in 0..m {
                        let gij = g[i * m + j] as f64;
                        for (s, &v) in acc.iter_mut().zip(&bd[j * d..(j + 1) * d]) {
                            *s += gij * v as f64;
                        }
                    }
                    for (dst, s) in buf[i * d..(i + 1) * d].iter_mut().zip(acc) {
                        *dst += s as f32;
                    }
                }
            }
            if rg(b) {
                let buf = accumulate(&mut grads[b.0], m * d);
                for j in 0..m {
                    let mut acc = vec![0.0f64; d];
                    for i in 0..n {
                        let gij = g[i * m + j] as f64;
                        for (s, &v) in acc.iter_mut().zip(&ad[i * d..(i + 1) * d]) {
                            *s += gij * v as f64;
                        }
                    }
                    for (dst, s) in buf[j * d..(j + 1) * d].iter_mut().zip(acc) {
                        *dst += s as f32;
                    }
                }
            }
        }
        Op::SoftmaxCeDiag { s, probs, .. } => {
            let s = *s;
            if rg(s) {
                let n = nodes[s.0].shape[0];
                let k = g[0] as f64 / n as f64;
                let buf = accumulate(&mut grads[s.0], n * n);
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        buf[i * n + j] += (k * (probs[i * n + j] - delta)) as f32;
                    }
                }
            }
        }
        Op::L2NormalizeRows { input, norms } => {
            let input = *input;
            if rg(input) {
                let d = nodes[input.0].shape[1];
                let y = &node.data;
                let buf = accumulate(&mut grads[input.0], len(input));
                for (i, &nrm) in norms.iter().enumerate() {
                    let r = i * d..(i + 1) * d;
                    let yg = dot64(&y[r.clone()], &g[r.clone()]);
                    for ((dst, &yv), &gv) in buf[r.clone()].iter_mut().zip(&y[r.clone()]).zip(&g[r]) {
                        *dst += ((gv as f64 - yv as f64 * yg) / nrm as f64) as f32;
                    }
                }
            }
        }
    }
}
