//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"CNDL" | u32 version | u64 n | n bytes of UTF-8 JSON metadata
//!        | f32 payload of every tensor listed in the metadata, in order
//!        | u64 checksum (first 8 bytes of SHA-256 over everything before)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::OptimizerState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"CNDL";
/// Bumped whenever the block layout or tensor naming changes.
pub const FORMAT_VERSION: u32 = 1;
/// Block layout recorded in the metadata.
pub const ARCHITECTURE: &str = "stem3x3+resblock(conv-bn-relu-conv-bn,add,relu)";
pub const LOSS_TAIL: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingFlags {
    pub normalize: bool,
    pub temperature: f32,
}

impl Default for MatchingFlags {
    fn default() -> Self {
        Self {
            normalize: false,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub matching: MatchingFlags,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub loss_tail: Vec<f64>,
    pub train_config: Option<TrainConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    architecture: String,
    model: ModelConfig,
    matching: MatchingFlags,
    step: u64,
    adam_t: Option<u64>,
    loss_tail: Vec<f64>,
    train_config: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

/// Every stored tensor as (name, shape, data) in file order.
fn named_tensors(ck: &Checkpoint) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out: Vec<(String, Vec<usize>, &[f32])> = ck
        .model
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data()))
        .collect();
    let stat_names = norm_stat_names(&ck.model);
    for (name, s) in stat_names.iter().zip(ck.model.norm_stats()) {
        out.push((format!("{name}.running_mean"), vec![s.mean.len()], &s.mean));
        out.push((format!("{name}.running_var"), vec![s.var.len()], &s.var));
    }
    if let Some(opt) = &ck.optimizer {
        let params = ck.model.params();
        for (i, (n, t)) in params.iter().enumerate() {
            out.push((format!("adam.m.{n}"), t.shape().to_vec(), &opt.m[i]));
        }
        for (i, (n, t)) in params.iter().enumerate() {
            out.push((format!("adam.v.{n}"), t.shape().to_vec(), &opt.v[i]));
        }
    }
    out
}

fn norm_stat_names(m: &ModelParams) -> Vec<String> {
    m.blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| {
            [(1, b.norm1.is_some()), (2, b.norm2.is_some())]
                .into_iter()
                .filter(|(_, on)| *on)
                .map(move |(j, _)| format!("blocks.{i}.norm{j}"))
        })
        .collect()
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = named_tensors(ck);
    let meta = Metadata {
        architecture: ARCHITECTURE.into(),
        model: ck.model.config.clone(),
        matching: ck.matching,
        step: ck.step,
        adam_t: ck.optimizer.as_ref().map(|o| o.t),
        loss_tail: ck.loss_tail.clone(),
        train_config: ck.train_config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let payload: usize = tensors.iter().map(|(_, _, d)| d.len() * 4).sum();
    let mut buf = Vec::with_capacity(4 + 4 + 8 + json.len() + payload + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corrupt(format!("truncated while reading {what}")))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut at = 0;
    if take(bytes, &mut at, 4, "magic")? != MAGIC {
        return Err(Error::Corrupt("missing CNDL magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < at + 8 + 8 {
        return Err(Error::Corrupt("truncated header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if checksum(body) != stored {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }

    let n = u64::from_le_bytes(take(body, &mut at, 8, "metadata length")?.try_into().unwrap());
    let json = take(body, &mut at, n as usize, "metadata")?;
    let meta: Metadata = serde_json::from_slice(json)
        .map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
    if meta.architecture != ARCHITECTURE {
        return Err(Error::Corrupt(format!(
            "unknown architecture `{}`",
            meta.architecture
        )));
    }

    let mut store = std::collections::HashMap::new();
    for entry in &meta.tensors {
        let len: usize = entry.shape.iter().product();
        let raw = take(body, &mut at, len * 4, &entry.name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.insert(entry.name.clone(), (entry.shape.clone(), data)).is_some() {
            return Err(Error::Corrupt(format!("tensor `{}` stored twice", entry.name)));
        }
    }
    if at != body.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last tensor",
            body.len() - at
        )));
    }

    let mut fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let (s, d) = store
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` missing")))?;
        if s != shape {
            return Err(Error::Corrupt(format!(
                "tensor `{name}` has shape {s:?}, model expects {shape:?}"
            )));
        }
        Ok(d)
    };

    let mut model = init_model(&meta.model)?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(model.params_mut()) {
        let shape = t.shape().to_vec();
        t.data_mut().copy_from_slice(&fetch(name, &shape)?);
    }
    let stat_names = norm_stat_names(&model);
    for (name, s) in stat_names.iter().zip(model.norm_stats_mut()) {
        let c = s.mean.len();
        s.mean = fetch(&format!("{name}.running_mean"), &[c])?;
        s.var = fetch(&format!("{name}.running_var"), &[c])?;
    }
    let optimizer = match meta.adam_t {
        Some(t) => {
            let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, p)| p.shape().to_vec()).collect();
            let m = names
                .iter()
                .zip(&shapes)
                .map(|(n, s)| fetch(&format!("adam.m.{n}"), s))
                .collect::<Result<_>>()?;
            let v = names
                .iter()
                .zip(&shapes)
                .map(|(n, s)| fetch(&format!("adam.v.{n}"), s))
                .collect::<Result<_>>()?;
            Some(OptimizerState { m, v, t })
        }
        None => None,
    };
    if let Some(extra) = store.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint {
        model,
        matching: meta.matching,
        optimizer,
        step: meta.step,
        loss_tail: meta.loss_tail,
        train_config: meta.train_config,
    })
}

/// Writes atomically via a temporary file in the same directory.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("cndl.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Hex SHA-256 of a checkpoint file.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = init_model(&ModelConfig {
            blocks: 1,
            channels: 4,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let mut opt = OptimizerState::new(model.params().into_iter().map(|(_, t)| t));
        opt.t = 3;
        opt.m[0][0] = 0.25;
        opt.v[1][2] = 1.5;
        Checkpoint {
            model,
            matching: MatchingFlags::default(),
            optimizer: Some(opt),
            step: 17,
            loss_tail: vec![5.5, 4.25, 0.1 + 0.2],
            train_config: None,
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        let bare = Checkpoint { optimizer: None, ..ck };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&bare).unwrap()).unwrap(), bare);
    }

    #[test]
    fn version_and_corruption_are_detected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let mut v = bytes.clone();
        v[4] ^= 0x01;
        assert!(matches!(
            decode_checkpoint(&v),
            Err(Error::UnsupportedVersion { found: 0, expected: 1 })
        ));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Corrupt(_))));
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
    }
}
