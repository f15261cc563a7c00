//! Fully convolutional residual descriptor network.
//!
//! A 3×3 stem lifts RGB to `channels` features, followed by `blocks`
//! residual blocks of conv → norm → relu → conv → norm, skip add, relu.
//! Everything runs at stride 1 with padding 1, so the output is a
//! `channels×H×W` descriptor map at input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tape, Tensor, Var};

pub const MIN_INPUT_SIDE: usize = 8;
const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale network: 6 blocks of 64 channels.
    fn default() -> Self {
        Self {
            blocks: 6,
            channels: 64,
            kernel: 3,
            norm: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-size network: 10 blocks of 128 channels.
    pub fn full(seed: u64) -> Self {
        Self {
            blocks: 10,
            channels: 128,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 || self.channels < 4 {
            return Err(Error::invalid(format!(
                "model needs blocks ≥ 1 and channels ≥ 4, got {} and {}",
                self.blocks, self.channels
            )));
        }
        if self.kernel != 3 {
            return Err(Error::invalid(format!(
                "only 3×3 kernels are supported, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        let (c, k2) = (self.channels, self.kernel * self.kernel);
        let norm = if self.norm { 2 * c } else { 0 };
        3 * c * k2 + c + self.blocks * 2 * (c * c * k2 + c + norm)
    }

    /// Pixels on each side of the output influenced by zero padding.
    pub fn receptive_radius(&self) -> usize {
        (self.kernel / 2) * (1 + 2 * self.blocks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn he_normal(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * k * k) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..c_out * c_in * k * k).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::new([c_out, c_in, k, k], data)
                .expect("shape matches")
                .with_grad(),
            bias: Tensor::zeros([c_out]).with_grad(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

impl Norm {
    fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::full([c], 1.0).with_grad(),
            beta: Tensor::zeros([c]).with_grad(),
            stats: RunningStats::new(c, BN_MOMENTUM),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv1: Conv,
    pub norm1: Option<Norm>,
    pub conv2: Conv,
    pub norm2: Option<Norm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub stem: Conv,
    pub blocks: Vec<Block>,
}

/// Descriptor map `d×H×W` at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "FeatureMap",
                detail: format!("expected d×H×W, got {:?}", data.shape()),
            });
        }
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Descriptor at integer pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> Vec<f32> {
        let (h, w) = (self.height(), self.width());
        (0..self.channels())
            .map(|c| self.data.data()[(c * h + y) * w + x])
            .collect()
    }
}

/// Graph handles produced by [`ModelParams::forward`].
pub struct Forward {
    pub output: Var,
    /// One handle per trainable tensor, in [`ModelParams::params`] order.
    pub params: Vec<Var>,
}

pub fn init_model(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, k) = (cfg.channels, cfg.kernel);
    let stem = Conv::he_normal(3, c, k, &mut rng);
    let blocks = (0..cfg.blocks)
        .map(|_| Block {
            conv1: Conv::he_normal(c, c, k, &mut rng),
            norm1: cfg.norm.then(|| Norm::new(c)),
            conv2: Conv::he_normal(c, c, k, &mut rng),
            norm2: cfg.norm.then(|| Norm::new(c)),
        })
        .collect();
    Ok(ModelParams {
        config: cfg.clone(),
        stem,
        blocks,
    })
}

fn check_input(cfg: &ModelConfig, shape: &[usize]) -> Result<()> {
    match *shape {
        [3, h, w] if h >= MIN_INPUT_SIDE && w >= MIN_INPUT_SIDE => Ok(()),
        [3, h, w] => Err(Error::invalid(format!(
            "input {h}×{w} is smaller than {MIN_INPUT_SIDE}×{MIN_INPUT_SIDE}"
        ))),
        _ => Err(Error::ShapeMismatch {
            op: "extract_features",
            detail: format!(
                "expected a 3×H×W image for a {}-channel model, got {shape:?}",
                cfg.channels
            ),
        }),
    }
}

impl ModelParams {
    /// Trainable tensors with stable names, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("stem.weight".to_string(), &self.stem.weight),
            ("stem.bias".to_string(), &self.stem.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (j, conv, norm) in [(1, &b.conv1, &b.norm1), (2, &b.conv2, &b.norm2)] {
                out.push((format!("blocks.{i}.conv{j}.weight"), &conv.weight));
                out.push((format!("blocks.{i}.conv{j}.bias"), &conv.bias));
                if let Some(n) = norm {
                    out.push((format!("blocks.{i}.norm{j}.gamma"), &n.gamma));
                    out.push((format!("blocks.{i}.norm{j}.beta"), &n.beta));
                }
            }
        }
        out
    }

    /// Same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            out.push(&mut b.conv1.weight);
            out.push(&mut b.conv1.bias);
            if let Some(n) = &mut b.norm1 {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
            out.push(&mut b.conv2.weight);
            out.push(&mut b.conv2.bias);
            if let Some(n) = &mut b.norm2 {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    /// Running statistics of every norm layer, block by block.
    pub fn norm_stats(&self) -> Vec<&RunningStats> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.norm1, &b.norm2])
            .flatten()
            .map(|n| &n.stats)
            .collect()
    }

    pub fn norm_stats_mut(&mut self) -> Vec<&mut RunningStats> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.norm1, &mut b.norm2])
            .flatten()
            .map(|n| &mut n.stats)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.is_finite())
    }

    /// Records the network on `tape`. In training mode norm layers use the
    /// statistics of this image and update their running averages.
    pub fn forward(&mut self, tape: &mut Tape, image: Var, training: bool) -> Result<Forward> {
        check_input(&self.config, tape.shape(image))?;
        let mut params = Vec::new();
        let conv = |tape: &mut Tape, x: Var, c: &Conv, params: &mut Vec<Var>| {
            let w = tape.leaf_ref(&c.weight);
            let b = tape.leaf_ref(&c.bias);
            params.extend([w, b]);
            tape.conv2d(x, w, b, 1, 1)
        };
        let norm = |tape: &mut Tape, x: Var, n: &mut Option<Norm>, params: &mut Vec<Var>| match n {
            Some(n) => {
                let g = tape.leaf_ref(&n.gamma);
                let b = tape.leaf_ref(&n.beta);
                params.extend([g, b]);
                tape.batch_norm2d(x, g, b, &mut n.stats, training, BN_EPS)
            }
            None => Ok(x),
        };

        let mut x = conv(tape, image, &self.stem, &mut params)?;
        for block in &mut self.blocks {
            let skip = x;
            let mut y = conv(tape, x, &block.conv1, &mut params)?;
            y = norm(tape, y, &mut block.norm1, &mut params)?;
            y = tape.relu(y);
            y = conv(tape, y, &block.conv2, &mut params)?;
            y = norm(tape, y, &mut block.norm2, &mut params)?;
            y = tape.add(y, skip)?;
            x = tape.relu(y);
        }
        Ok(Forward { output: x, params })
    }

    /// Inference with running statistics. Each block runs on its own short
    /// tape, so memory stays bounded by one block's activations.
    pub fn extract_features(&self, image: &Tensor) -> Result<FeatureMap> {
        check_input(&self.config, image.shape())?;
        let conv = |tape: &mut Tape, x: Var, c: &Conv| {
            let w = tape.constant(c.weight.clone());
            let b = tape.constant(c.bias.clone());
            tape.conv2d(x, w, b, 1, 1)
        };
        let norm = |tape: &mut Tape, x: Var, n: &Option<Norm>| match n {
            Some(n) => {
                let g = tape.constant(n.gamma.clone());
                let b = tape.constant(n.beta.clone());
                let mut stats = n.stats.clone();
                tape.batch_norm2d(x, g, b, &mut stats, false, BN_EPS)
            }
            None => Ok(x),
        };

        let mut tape = Tape::new();
        let input = tape.constant(image.clone());
        let stem = conv(&mut tape, input, &self.stem)?;
        let mut x = tape.value(stem);
        for block in &self.blocks {
            let mut tape = Tape::new();
            let skip = tape.constant(x);
            let mut y = conv(&mut tape, skip, &block.conv1)?;
            y = norm(&mut tape, y, &block.norm1)?;
            y = tape.relu(y);
            y = conv(&mut tape, y, &block.conv2)?;
            y = norm(&mut tape, y, &block.norm2)?;
            y = tape.add(y, skip)?;
            y = tape.relu(y);
            x = tape.value(y);
        }
        FeatureMap::new(x)
    }
}

/// Free-function form of [`ModelParams::extract_features`].
pub fn extract_features(params: &ModelParams, image: &Tensor) -> Result<FeatureMap> {
    params.extract_features(image)
}
