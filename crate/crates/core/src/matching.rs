//! Descriptor sampling, similarity matrices, the contrastive loss and
//! inference-time match extraction.

use std::io::Write;
use std::path::Path;

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::model::FeatureMap;
use crate::tensor::{gemm, grid_sample_forward, Axis, Tape, Tensor, Var, View};

/// Normalized sampling coordinate of pixel `u` along an axis of `size`
/// pixels: pixel centres map to `(2u + 1)/size − 1`.
pub fn pixel_to_normalized(u: f64, size: usize) -> f64 {
    (2.0 * u + 1.0) / size as f64 - 1.0
}

fn normalized_grid(pts: &PointSet, width: usize, height: usize) -> Result<Vec<f32>> {
    let mut grid = Vec::with_capacity(pts.len() * 2);
    for (i, p) in pts.iter().enumerate() {
        let inside = (0.0..=(width - 1) as f64).contains(&p.x)
            && (0.0..=(height - 1) as f64).contains(&p.y);
        if !inside {
            return Err(Error::OutOfBounds {
                index: i,
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }
        grid.push(pixel_to_normalized(p.x, width) as f32);
        grid.push(pixel_to_normalized(p.y, height) as f32);
    }
    Ok(grid)
}

/// Bilinear descriptors `N×d` at pixel coordinates, differentiable into
/// the `d×H×W` map `fmap`.
pub fn sample_descriptors(tape: &mut Tape, fmap: Var, pts: &PointSet) -> Result<Var> {
    let [_, h, w] = *tape.shape(fmap) else {
        return Err(Error::ShapeMismatch {
            op: "sample_descriptors",
            detail: format!("feature map must be d×H×W, got {:?}", tape.shape(fmap)),
        });
    };
    let grid = normalized_grid(pts, w, h)?;
    let n = pts.len();
    let g = tape.constant(Tensor::new([n, 2], grid)?);
    tape.grid_sample_bilinear(fmap, g)
}

/// Non-differentiable form of [`sample_descriptors`] for inference.
pub fn sample_descriptors_map(fmap: &FeatureMap, pts: &PointSet) -> Result<Tensor> {
    let (c, h, w) = (fmap.channels(), fmap.height(), fmap.width());
    let grid = normalized_grid(pts, w, h)?;
    Tensor::new([pts.len(), c], grid_sample_forward(fmap.data.data(), c, h, w, &grid))
}

/// `S = da · dbᵀ / temperature`.
pub fn similarity_matrix(tape: &mut Tape, da: Var, db: Var, temperature: f32) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if tape.shape(da) != tape.shape(db) {
        return Err(Error::ShapeMismatch {
            op: "similarity_matrix",
            detail: format!("{:?} vs {:?}", tape.shape(da), tape.shape(db)),
        });
    }
    let s = tape.pairwise_dot(da, db)?;
    Ok(if temperature == 1.0 {
        s
    } else {
        tape.scale(s, 1.0 / temperature)
    })
}

/// Symmetric cross-entropy with the diagonal as positives:
/// `(CE_rows + CE_cols) / 2`.
pub fn contrastive_loss(tape: &mut Tape, s: Var) -> Result<Var> {
    let rows = tape.softmax_cross_entropy_diag(s, Axis::Row)?;
    let cols = tape.softmax_cross_entropy_diag(s, Axis::Column)?;
    let both = tape.add(rows, cols)?;
    Ok(tape.scale(both, 0.5))
}

/// Default cap on the `N_a × N_b` score matrix: 1 GiB.
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub stride_px: usize,
    pub mutual_only: bool,
    pub score_min: Option<f32>,
    /// Unit-normalize descriptors before comparing them.
    pub normalize: bool,
    pub memory_budget_bytes: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            stride_px: 4,
            mutual_only: false,
            score_min: None,
            normalize: false,
            memory_budget_bytes: DEFAULT_MEMORY_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub score: f32,
    /// Whether the A point is also the best match of its B point.
    pub mutual: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Matched coordinates as two aligned point sets.
    pub fn point_sets(&self) -> (PointSet, PointSet) {
        let a = self.matches.iter().map(|m| Point2::new(m.xa, m.ya)).collect();
        let b = self.matches.iter().map(|m| Point2::new(m.xb, m.yb)).collect();
        (a, b)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["xa", "ya", "xb", "yb", "score", "mutual"])?;
        for m in &self.matches {
            w.serialize((m.xa, m.ya, m.xb, m.yb, m.score, m.mutual as u8))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut matches = Vec::new();
        for row in r.deserialize() {
            let (xa, ya, xb, yb, score, mutual): (f64, f64, f64, f64, f32, u8) = row?;
            matches.push(Match {
                xa,
                ya,
                xb,
                yb,
                score,
                mutual: mutual != 0,
            });
        }
        Ok(Self { matches })
    }

    /// Writes the CSV to any sink, e.g. stdout.
    pub fn write_to(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["xa", "ya", "xb", "yb", "score", "mutual"])?;
        for m in &self.matches {
            w.serialize((m.xa, m.ya, m.xb, m.yb, m.score, m.mutual as u8))?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<stream>"), e))
    }
}

/// Integer grid positions `offset + k·stride` along an axis of `size`
/// pixels, where `offset = (stride − 1)/2` centres each cell.
pub fn stride_positions(size: usize, stride: usize) -> Vec<usize> {
    ((stride - 1) / 2..size).step_by(stride).collect()
}

/// Row-major `N×d` descriptors at every grid position, plus the positions.
fn grid_descriptors(f: &FeatureMap, stride: usize, normalize: bool) -> (Vec<f32>, Vec<(usize, usize)>) {
    let (d, h, w) = (f.channels(), f.height(), f.width());
    let pos: Vec<(usize, usize)> = stride_positions(h, stride)
        .into_iter()
        .flat_map(|y| stride_positions(w, stride).into_iter().map(move |x| (x, y)))
        .collect();
    let map = f.data.data();
    let mut out = vec![0.0f32; pos.len() * d];
    for (i, &(x, y)) in pos.iter().enumerate() {
        let row = &mut out[i * d..(i + 1) * d];
        for (c, v) in row.iter_mut().enumerate() {
            *v = map[(c * h + y) * w + x];
        }
        if normalize {
            let n = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32;
            let n = n.max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    (out, pos)
}

/// Index of the first maximum; NaN entries are never selected.
fn argmax(values: impl Iterator<Item = f32>) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Dense grid matching: every A grid point is paired with the B grid point
/// of highest descriptor dot product (lowest index on ties).
pub fn extract_matches(fa: &FeatureMap, fb: &FeatureMap, cfg: &MatchConfig) -> Result<MatchSet> {
    if cfg.stride_px < 1 {
        return Err(Error::invalid("stride must be at least 1 pixel"));
    }
    if fa.channels() != fb.channels() {
        return Err(Error::ShapeMismatch {
            op: "extract_matches",
            detail: format!("descriptor length {} vs {}", fa.channels(), fb.channels()),
        });
    }
    let d = fa.channels();
    let (da, pa) = grid_descriptors(fa, cfg.stride_px, cfg.normalize);
    let (db, pb) = grid_descriptors(fb, cfg.stride_px, cfg.normalize);
    let (na, nb) = (pa.len(), pb.len());
    let required = na * nb * std::mem::size_of::<f32>();
    if required > cfg.memory_budget_bytes {
        return Err(Error::MemoryBudget {
            required,
            budget: cfg.memory_budget_bytes,
        });
    }
    if na == 0 || nb == 0 {
        return Ok(MatchSet::default());
    }
    let mut s = vec![0.0f32; na * nb];
    gemm(
        View::row_major(&da, na, d),
        View::row_major(&db, nb, d).t(),
        0.0,
        &mut s,
    );
    let row_best: Vec<(usize, f32)> = (0..na)
        .map(|i| argmax(s[i * nb..(i + 1) * nb].iter().copied()).unwrap_or((0, f32::NAN)))
        .collect();
    let col_best: Vec<usize> = (0..nb)
        .map(|j| argmax((0..na).map(|i| s[i * nb + j])).map_or(usize::MAX, |b| b.0))
        .collect();

    let mut matches = Vec::with_capacity(na);
    for (i, &(j, score)) in row_best.iter().enumerate() {
        if !score.is_finite() {
            continue;
        }
        let mutual = col_best[j] == i;
        if cfg.mutual_only && !mutual {
            continue;
        }
        if cfg.score_min.is_some_and(|t| score < t) {
            continue;
        }
        matches.push(Match {
            xa: pa[i].0 as f64,
            ya: pa[i].1 as f64,
            xb: pb[j].0 as f64,
            yb: pb[j].1 as f64,
            score,
            mutual,
        });
    }
    Ok(MatchSet { matches })
}
