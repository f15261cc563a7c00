//! On-disk pair datasets.
//!
//! A dataset directory holds `NNNNNN_a.png`, `NNNNNN_b.png` and
//! `NNNNNN_h.json` per pair plus a single `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{procedural_image, Image};
use super::pair::{generate_pair, DistortionConfig, SamplePair};
use crate::error::{Error, Result};
use crate::geometry::{Homography, HomographyJson};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub config_digest: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    #[serde(flatten)]
    homography: HomographyJson,
    seed: u64,
    fill: [u8; 3],
}

fn pair_path(dir: &Path, id: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{id:06}_{suffix}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn write_pair(dir: &Path, id: usize, p: &SamplePair) -> Result<()> {
    p.image_a.save_png(&pair_path(dir, id, "a.png"))?;
    p.image_b.save_png(&pair_path(dir, id, "b.png"))?;
    let meta = PairMeta {
        homography: p.h_ab.to_json(),
        seed: p.seed,
        fill: p.fill,
    };
    write_json(&pair_path(dir, id, "h.json"), &meta)
}

/// Writes every pair and then the manifest. All pairs must share the
/// dimensions and config digest of the first one.
pub fn write_dataset<'a, I>(pairs: I, dir: &Path, seed: u64) -> Result<Manifest>
where
    I: IntoIterator<Item = &'a SamplePair>,
{
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest: Option<Manifest> = None;
    let mut count = 0;
    for (id, p) in pairs.into_iter().enumerate() {
        let m = manifest.get_or_insert_with(|| Manifest {
            count: 0,
            width: p.image_a.width(),
            height: p.image_a.height(),
            config_digest: p.config_digest.clone(),
            seed,
        });
        if (p.image_a.width(), p.image_a.height()) != (m.width, m.height)
            || (p.image_b.width(), p.image_b.height()) != (m.width, m.height)
        {
            return Err(Error::Dataset(format!(
                "pair {id:06} is {}×{}, dataset is {}×{}",
                p.image_a.width(),
                p.image_a.height(),
                m.width,
                m.height
            )));
        }
        if p.config_digest != m.config_digest {
            return Err(Error::Dataset(format!(
                "pair {id:06} has config digest {}, dataset uses {}",
                p.config_digest, m.config_digest
            )));
        }
        write_pair(dir, id, p)?;
        count += 1;
    }
    let mut manifest = manifest.unwrap_or(Manifest {
        count: 0,
        width: 0,
        height: 0,
        config_digest: String::new(),
        seed,
    });
    manifest.count = count;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Dataset(format!(
            "{} has no {MANIFEST_FILE}",
            dir.display()
        )));
    }
    read_json(&path)
}

/// Reads one pair; the manifest supplies dimensions and digest.
pub fn read_pair(dir: &Path, manifest: &Manifest, id: usize) -> Result<SamplePair> {
    let image_a = Image::load(&pair_path(dir, id, "a.png"))?;
    let image_b = Image::load(&pair_path(dir, id, "b.png"))?;
    for (tag, img) in [("a", &image_a), ("b", &image_b)] {
        if (img.width(), img.height()) != (manifest.width, manifest.height) {
            return Err(Error::Dataset(format!(
                "{id:06}_{tag}.png is {}×{}, manifest says {}×{}",
                img.width(),
                img.height(),
                manifest.width,
                manifest.height
            )));
        }
    }
    let meta: PairMeta = read_json(&pair_path(dir, id, "h.json"))?;
    let h_ab = Homography::from_json(&meta.homography)
        .map_err(|e| Error::Dataset(format!("{id:06}_h.json: {e}")))?;
    Ok(SamplePair {
        image_a,
        image_b,
        h_ab,
        config_digest: manifest.config_digest.clone(),
        seed: meta.seed,
        fill: meta.fill,
    })
}

/// Checks the manifest against the files present, then loads every pair.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SamplePair>)> {
    let manifest = read_manifest(dir)?;
    let missing: Vec<String> = (0..manifest.count)
        .filter(|&id| {
            ["a.png", "b.png", "h.json"]
                .iter()
                .any(|s| !pair_path(dir, id, s).is_file())
        })
        .map(|id| format!("{id:06}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "manifest lists {} pairs but files are missing for ids {}",
            manifest.count,
            missing.join(", ")
        )));
    }
    let pairs = (0..manifest.count)
        .map(|id| read_pair(dir, &manifest, id))
        .collect::<Result<_>>()?;
    Ok((manifest, pairs))
}

/// Seed for pair `id` of a dataset generated with `seed` (SplitMix64).
pub fn pair_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Where source images come from.
#[derive(Debug, Clone)]
pub enum SourceImages {
    /// Built-in procedural textures.
    Procedural,
    /// Image files, cycled in name order and resized to the target size.
    Files(Vec<PathBuf>),
}

impl SourceImages {
    /// Every PNG in `dir`, sorted by name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("no images found in {}", dir.display())));
        }
        files.sort();
        Ok(Self::Files(files))
    }

    pub fn source(&self, id: usize, width: usize, height: usize, seed: u64) -> Result<Image> {
        match self {
            Self::Procedural => procedural_image(width, height, seed),
            Self::Files(files) => {
                let img = Image::load(&files[id % files.len()])?;
                if (img.width(), img.height()) == (width, height) {
                    Ok(img)
                } else {
                    img.resized(width, height)
                }
            }
        }
    }
}

/// Generates pair `id` of a dataset. The distortion seed in `cfg` is
/// replaced by [`pair_seed`]`(seed, id)`.
pub fn generate_indexed_pair(
    sources: &SourceImages,
    cfg: &DistortionConfig,
    width: usize,
    height: usize,
    seed: u64,
    id: usize,
) -> Result<SamplePair> {
    let s = pair_seed(seed, id as u64);
    let src = sources.source(id, width, height, s.rotate_left(17))?;
    generate_pair(&src, &DistortionConfig { seed: s, ..cfg.clone() })
}

/// Generates `count` pairs and writes them to `dir` one at a time.
pub fn generate_dataset(
    sources: &SourceImages,
    cfg: &DistortionConfig,
    width: usize,
    height: usize,
    count: usize,
    seed: u64,
    dir: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digest = cfg.digest();
    for id in 0..count {
        let p = generate_indexed_pair(sources, cfg, width, height, seed, id)?;
        write_pair(dir, id, &p)?;
    }
    let manifest = Manifest {
        count,
        width,
        height,
        config_digest: digest,
        seed,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| pair_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(pair_seed(7, 0), pair_seed(8, 0));
    }
}
