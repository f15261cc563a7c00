//! Contrastive training: Adam, per-step grid resampling, the epoch loop,
//! checkpoints and the single-pair overfit diagnostic.

mod adam;
mod checkpoint;

pub use adam::{AdamConfig, OptimizerState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, file_digest, load_checkpoint, save_checkpoint,
    Checkpoint, MatchingFlags, FORMAT_VERSION, LOSS_TAIL, MAGIC,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_grid, GridSpec, Homography, PointSet};
use crate::matching::{contrastive_loss, sample_descriptors, similarity_matrix};
use crate::model::{init_model, ModelConfig, ModelParams};
use crate::synth::{pair_seed, read_dataset, SamplePair};
use crate::tensor::{Tape, Var};

/// Pairs keeping fewer grid correspondences than this are skipped.
pub const MIN_CORRESPONDENCES: usize = 8;
pub const OVERFIT_TARGET_LOSS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub matching: MatchingFlags,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Grid jitter as a fraction of the cell size.
    pub noise_amplitude: f64,
    pub epochs: usize,
    pub seed: u64,
    pub image_size: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 6×64 model, 128 px images, 16×16 grid, batch 16,
    /// 30 epochs.
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            model: ModelConfig::default(),
            matching: MatchingFlags::default(),
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 16,
            grid_rows: 16,
            grid_cols: 16,
            noise_amplitude: 0.25,
            epochs: 30,
            seed: 0,
            image_size: 128,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid(
                "batch_size, epochs and checkpoint_every must be positive",
            ));
        }
        if !(self.matching.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        self.grid(0).validate()
    }

    pub fn grid(&self, seed: u64) -> GridSpec {
        GridSpec {
            rows: self.grid_rows,
            cols: self.grid_cols,
            width: self.image_size,
            height: self.image_size,
            noise_amplitude: self.noise_amplitude,
            seed,
        }
    }
}

/// Grid points of A and their projections into B, keeping only pairs
/// whose projection lands inside B.
pub fn grid_correspondences(h: &Homography, grid: &PointSet, width: usize, height: usize) -> (PointSet, PointSet) {
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    let mut a = Vec::with_capacity(grid.len());
    let mut b = Vec::with_capacity(grid.len());
    for p in grid.iter() {
        let Ok(q) = h.apply(*p) else { continue };
        if (0.0..=wmax).contains(&q.x) && (0.0..=hmax).contains(&q.y) {
            a.push(*p);
            b.push(q);
        }
    }
    (
        PointSet::new(a).expect("grid points are finite"),
        PointSet::new(b).expect("projections are finite"),
    )
}

/// The recorded graph of one pair.
pub struct PairGraph {
    pub loss: Var,
    pub params_a: Vec<Var>,
    pub params_b: Vec<Var>,
    pub correspondences: usize,
    /// Fraction of rows of S whose maximum sits on the diagonal.
    pub diagonal_accuracy: f64,
}

/// Builds the loss of one pair on `tape`, or `None` when too few grid
/// points project into B.
pub fn pair_graph(
    model: &mut ModelParams,
    tape: &mut Tape,
    pair: &SamplePair,
    grid: &GridSpec,
    matching: &MatchingFlags,
    training: bool,
) -> Result<Option<PairGraph>> {
    let (w, h) = (pair.image_a.width(), pair.image_a.height());
    let spec = GridSpec {
        width: w,
        height: h,
        ..*grid
    };
    let pts = sample_grid(&spec)?;
    let (pa, pb) = grid_correspondences(&pair.h_ab, &pts, w, h);
    if pa.len() < MIN_CORRESPONDENCES {
        return Ok(None);
    }
    let ia = tape.constant(pair.image_a.to_tensor());
    let ib = tape.constant(pair.image_b.to_tensor());
    let fa = model.forward(tape, ia, training)?;
    let fb = model.forward(tape, ib, training)?;
    let mut da = sample_descriptors(tape, fa.output, &pa)?;
    let mut db = sample_descriptors(tape, fb.output, &pb)?;
    if matching.normalize {
        da = tape.l2_normalize_rows(da)?;
        db = tape.l2_normalize_rows(db)?;
    }
    let s = similarity_matrix(tape, da, db, matching.temperature)?;
    let loss = contrastive_loss(tape, s)?;
    let n = pa.len();
    let sd = tape.data(s);
    let hits = (0..n)
        .filter(|&i| {
            let row = &sd[i * n..(i + 1) * n];
            let best = (0..n).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == i
        })
        .count();
    Ok(Some(PairGraph {
        loss,
        params_a: fa.params,
        params_b: fb.params,
        correspondences: n,
        diagonal_accuracy: hits as f64 / n as f64,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Mean loss over the pairs that contributed.
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
    pub diagonal_accuracy: f64,
}

/// Grid seed of batch slot `k` at optimizer step `step`.
pub fn grid_seed(cfg_seed: u64, step: u64, k: usize) -> u64 {
    pair_seed(pair_seed(cfg_seed ^ 0x6772_6964, step), k as u64)
}

/// One optimizer step over `batch`. Every pair gets a fresh jittered grid
/// derived from `(cfg.seed, step)`; gradients are averaged over the pairs
/// that kept enough correspondences.
pub fn train_step(
    model: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &[&SamplePair],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    for p in model.params_mut() {
        p.zero_grad();
    }
    let (mut total, mut acc, mut used, mut skipped) = (0.0, 0.0, 0usize, 0usize);
    for (k, pair) in batch.iter().enumerate() {
        if pair.image_a.width() != cfg.image_size || pair.image_a.height() != cfg.image_size {
            return Err(Error::invalid(format!(
                "pair is {}×{}, training expects {}×{}",
                pair.image_a.width(),
                pair.image_a.height(),
                cfg.image_size,
                cfg.image_size
            )));
        }
        let mut tape = Tape::new();
        let grid = cfg.grid(grid_seed(cfg.seed, step, k));
        let Some(g) = pair_graph(model, &mut tape, pair, &grid, &cfg.matching, true)? else {
            log::warn!(
                "step {step}: pair seed {} kept fewer than {MIN_CORRESPONDENCES} correspondences, skipped",
                pair.seed
            );
            skipped += 1;
            continue;
        };
        total += tape.item_f64(g.loss)?;
        acc += g.diagonal_accuracy;
        used += 1;
        let grads = tape.backward(g.loss)?;
        for vars in [&g.params_a, &g.params_b] {
            for (v, p) in vars.iter().zip(model.params_mut()) {
                grads.accumulate_into(*v, p);
            }
        }
    }
    if used == 0 {
        return Err(Error::invalid(format!(
            "step {step}: every pair in the batch was skipped"
        )));
    }
    let scale = 1.0 / used as f32;
    let mut params = model.params_mut();
    for p in params.iter_mut() {
        if let Some(mut g) = p.take_grad() {
            g.iter_mut().for_each(|v| *v *= scale);
            p.accumulate_grad(&g);
        }
    }
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    opt.step(&mut model.params_mut(), &names, &cfg.adam())?;
    Ok(StepStats {
        loss: total / used as f64,
        used,
        skipped,
        diagonal_accuracy: acc / used as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps have been taken.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: u64,
    pub steps_per_epoch: u64,
    pub losses: Vec<LossRow>,
    pub checkpoint: PathBuf,
    pub model: ModelParams,
}

impl TrainReport {
    /// Mean loss of each epoch that has at least one row.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.losses)
    }
}

pub fn epoch_means(rows: &[LossRow]) -> Vec<f64> {
    let Some(last) = rows.iter().map(|r| r.epoch).max() else {
        return Vec::new();
    };
    (0..=last)
        .filter_map(|e| {
            let v: Vec<f64> = rows.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.cndl")
}

/// Highest-numbered `step_NNNNNN.cndl` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_")?.strip_suffix(".cndl")?.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed ^ 0x7368_7566, epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn write_loss_rows(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["step", "epoch", "loss"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Epoch loop over a dataset directory. Writes `train_config.json`,
/// `loss.csv` (step, epoch, loss) and `step_NNNNNN.cndl` checkpoints to
/// `out_dir`; with `opts.resume` it continues from the latest checkpoint
/// and reproduces the uninterrupted trajectory.
pub fn train(dataset_dir: &Path, cfg: &TrainConfig, out_dir: &Path, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let (manifest, pairs) = read_dataset(dataset_dir)?;
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("{} holds no pairs", dataset_dir.display())));
    }
    if (manifest.width, manifest.height) != (cfg.image_size, cfg.image_size) {
        return Err(Error::Dataset(format!(
            "dataset is {}×{}, training expects {}×{}",
            manifest.width, manifest.height, cfg.image_size, cfg.image_size
        )));
    }
    train_pairs(&pairs, cfg, out_dir, opts)
}

/// [`train`] over pairs already in memory.
pub fn train_pairs(pairs: &[SamplePair], cfg: &TrainConfig, out_dir: &Path, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join("train_config.json");
    fs::write(&config_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&config_path, e))?;

    let loss_path = out_dir.join("loss.csv");
    let (mut model, mut opt, mut step, mut loss_tail, mut rows) = match latest_checkpoint(out_dir)? {
        Some(path) if opts.resume => {
            let ck = load_checkpoint(&path)?;
            if ck.train_config.as_ref() != Some(cfg) {
                return Err(Error::invalid(format!(
                    "{} was written with a different training configuration",
                    path.display()
                )));
            }
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Corrupt(format!("{} has no optimizer state", path.display())))?;
            let rows: Vec<LossRow> = if loss_path.is_file() {
                read_loss_csv(&loss_path)?.into_iter().filter(|r| r.step <= ck.step).collect()
            } else {
                Vec::new()
            };
            log::info!("resuming from {} at step {}", path.display(), ck.step);
            (ck.model, opt, ck.step, ck.loss_tail, rows)
        }
        _ => {
            let model = init_model(&cfg.model)?;
            let opt = OptimizerState::new(model.params().into_iter().map(|(_, t)| t));
            (model, opt, 0, Vec::new(), Vec::new())
        }
    };
    write_loss_rows(&loss_path, &rows)?;
    let mut loss_file = fs::OpenOptions::new()
        .append(true)
        .open(&loss_path)
        .map_err(|e| Error::io(&loss_path, e))?;

    let n = pairs.len();
    let spe = n.div_ceil(cfg.batch_size) as u64;
    let total = spe * cfg.epochs as u64;
    let stop = opts.stop_after.map_or(total, |s| s.min(total));
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    let mut last_ckpt = out_dir.join(checkpoint_name(step));

    let save = |model: &ModelParams, opt: &OptimizerState, step: u64, tail: &[f64]| -> Result<PathBuf> {
        if !model.is_finite() {
            return Err(Error::NonFiniteGradient(format!(
                "parameters became non-finite by step {step}"
            )));
        }
        let path = out_dir.join(checkpoint_name(step));
        let ck = Checkpoint {
            model: model.clone(),
            matching: cfg.matching,
            optimizer: Some(opt.clone()),
            step,
            loss_tail: tail.to_vec(),
            train_config: Some(cfg.clone()),
        };
        save_checkpoint(&ck, &path)?;
        Ok(path)
    };

    while step < stop {
        let epoch = (step / spe) as usize;
        if epoch != order_epoch {
            order = epoch_order(n, cfg.seed, epoch);
            order_epoch = epoch;
        }
        let i = (step % spe) as usize * cfg.batch_size;
        let batch: Vec<&SamplePair> = order[i..(i + cfg.batch_size).min(n)].iter().map(|&j| &pairs[j]).collect();
        let stats = train_step(&mut model, &mut opt, &batch, cfg, step)?;
        step += 1;
        let row = LossRow {
            step,
            epoch,
            loss: stats.loss,
        };
        writeln!(loss_file, "{},{},{}", row.step, row.epoch, row.loss).map_err(|e| Error::io(&loss_path, e))?;
        rows.push(row);
        loss_tail.push(stats.loss);
        if loss_tail.len() > LOSS_TAIL {
            loss_tail.remove(0);
        }
        log::info!(
            "step {step}/{total} epoch {epoch} loss {:.5} acc {:.3} ({} pairs, {} skipped)",
            stats.loss,
            stats.diagonal_accuracy,
            stats.used,
            stats.skipped
        );
        if step % cfg.checkpoint_every == 0 || step == stop {
            last_ckpt = save(&model, &opt, step, &loss_tail)?;
        }
    }
    if !last_ckpt.is_file() {
        last_ckpt = save(&model, &opt, step, &loss_tail)?;
    }
    Ok(TrainReport {
        steps: step,
        steps_per_epoch: spe,
        losses: rows,
        checkpoint: last_ckpt,
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    /// Steps taken; equals `max_steps` when the target was not reached.
    pub steps: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub diagonal_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Trains a fresh model on one pair until the loss drops below 0.05 or
/// `max_steps` is reached. Loss and accuracy are those of the last forward
/// pass (before its update).
pub fn overfit_check(pair: &SamplePair, cfg: &TrainConfig, max_steps: usize) -> Result<OverfitReport> {
    let mut model = init_model(&cfg.model)?;
    overfit_model(&mut model, pair, cfg, max_steps)
}

pub fn overfit_model(model: &mut ModelParams, pair: &SamplePair, cfg: &TrainConfig, max_steps: usize) -> Result<OverfitReport> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(model.params().into_iter().map(|(_, t)| t));
    let mut losses = Vec::new();
    let mut acc = 0.0;
    for step in 0..max_steps as u64 {
        let stats = train_step(model, &mut opt, &[pair], cfg, step)?;
        losses.push(stats.loss);
        acc = stats.diagonal_accuracy;
        if stats.loss < OVERFIT_TARGET_LOSS {
            break;
        }
    }
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok(OverfitReport {
        steps: losses.len(),
        converged: final_loss < OVERFIT_TARGET_LOSS,
        final_loss,
        diagonal_accuracy: acc,
        losses,
    })
}
