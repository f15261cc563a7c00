use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::distort::{
    add_gaussian_noise, add_illumination_gradient, add_occluder, add_shadow_polygon,
    add_specular_highlight, random_homography, warp_image, Fill,
};
use super::image::Image;
use crate::error::{Error, Result};
use crate::geometry::Homography;

/// Distribution of distortions applied to image B. Ranges are inclusive
/// `(lo, hi)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionConfig {
    pub max_corner_shift: f64,
    pub illumination_gain_range: (f64, f64),
    pub n_shadows: (usize, usize),
    pub shadow_alpha_range: (f64, f64),
    pub n_highlights: (usize, usize),
    pub highlight_strength: (f64, f64),
    pub n_occluders: (usize, usize),
    pub occluder_size_range: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self {
            max_corner_shift: 0.15,
            illumination_gain_range: (0.5, 1.5),
            n_shadows: (0, 2),
            shadow_alpha_range: (0.2, 0.6),
            n_highlights: (0, 2),
            highlight_strength: (0.1, 0.5),
            n_occluders: (0, 2),
            occluder_size_range: (0.02, 0.08),
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

fn ordered<T: PartialOrd + std::fmt::Debug>(name: &str, r: (T, T)) -> Result<()> {
    if r.0 > r.1 {
        return Err(Error::invalid(format!("{name} range {r:?} is not ordered")));
    }
    Ok(())
}

fn within(name: &str, r: (f64, f64), lo: f64, hi: f64) -> Result<()> {
    ordered(name, r)?;
    if r.0 < lo || r.1 > hi {
        return Err(Error::invalid(format!(
            "{name} range {r:?} outside [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl DistortionConfig {
    /// Geometry and photometry both disabled.
    pub fn none(seed: u64) -> Self {
        Self {
            max_corner_shift: 0.0,
            illumination_gain_range: (1.0, 1.0),
            n_shadows: (0, 0),
            n_highlights: (0, 0),
            n_occluders: (0, 0),
            noise_sigma: 0.0,
            seed,
            ..Self::default()
        }
    }

    /// Small perspective change with gentle lighting and no occluders.
    pub fn mild(seed: u64) -> Self {
        Self {
            max_corner_shift: 0.05,
            illumination_gain_range: (0.8, 1.2),
            n_shadows: (0, 1),
            shadow_alpha_range: (0.1, 0.3),
            n_highlights: (0, 1),
            highlight_strength: (0.05, 0.2),
            n_occluders: (0, 0),
            noise_sigma: 0.01,
            seed,
            ..Self::default()
        }
    }

    /// Same geometry, photometric operations switched off.
    pub fn geometric_only(&self) -> Self {
        Self {
            max_corner_shift: self.max_corner_shift,
            ..Self::none(self.seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.4).contains(&self.max_corner_shift) {
            return Err(Error::invalid(format!(
                "max_corner_shift {} outside [0, 0.4]",
                self.max_corner_shift
            )));
        }
        within("illumination_gain", self.illumination_gain_range, 0.1, 3.0)?;
        within("shadow_alpha", self.shadow_alpha_range, 0.0, 1.0)?;
        within("highlight_strength", self.highlight_strength, 0.0, 1.0)?;
        ordered("n_shadows", self.n_shadows)?;
        ordered("n_highlights", self.n_highlights)?;
        ordered("n_occluders", self.n_occluders)?;
        ordered("occluder_size", self.occluder_size_range)?;
        let (lo, hi) = self.occluder_size_range;
        if lo <= 0.0 || hi > 0.3 {
            return Err(Error::invalid(format!(
                "occluder_size range ({lo}, {hi}) outside (0, 0.3]"
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(Error::invalid(format!(
                "noise_sigma {} outside [0, 1]",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the JSON form with the seed zeroed, so pairs drawn
    /// from the same distribution share a digest.
    pub fn digest(&self) -> String {
        let canon = Self { seed: 0, ..self.clone() };
        let json = serde_json::to_vec(&canon).expect("config serializes");
        Sha256::digest(json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image_a: Image,
    pub image_b: Image,
    /// Maps pixel coordinates of A to B.
    pub h_ab: Homography,
    pub config_digest: String,
    pub seed: u64,
    /// Colour written where B has no source content.
    pub fill: [u8; 3],
}

fn draw_count(rng: &mut ChaCha8Rng, r: (usize, usize)) -> usize {
    rng.gen_range(r.0..=r.1)
}

fn draw(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..=r.1)
    }
}

/// A = `src`; B = `src` warped by a random homography followed by
/// illumination, shadows, highlights, occluders and pixel noise, in that
/// order. Every random choice derives from `cfg.seed`.
pub fn generate_pair(src: &Image, cfg: &DistortionConfig) -> Result<SamplePair> {
    cfg.validate()?;
    let (w, h) = (src.width(), src.height());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h_ab = random_homography(w, h, cfg.max_corner_shift, rng.gen())?;
    let fill: [u8; 3] = rng.gen();
    let fill_f = fill.map(|v| v as f32 / 255.0);
    let (mut img, _) = warp_image(&src.to_float(), &h_ab, Fill::Color(fill_f))?;

    let (lo, hi) = cfg.illumination_gain_range;
    let illum_seed = rng.gen();
    if (lo, hi) != (1.0, 1.0) {
        add_illumination_gradient(&mut img, lo, hi, illum_seed)?;
    }
    for _ in 0..draw_count(&mut rng, cfg.n_shadows) {
        let alpha = draw(&mut rng, cfg.shadow_alpha_range);
        add_shadow_polygon(&mut img, alpha, rng.gen())?;
    }
    for _ in 0..draw_count(&mut rng, cfg.n_highlights) {
        let s = draw(&mut rng, cfg.highlight_strength);
        add_specular_highlight(&mut img, s, rng.gen())?;
    }
    for _ in 0..draw_count(&mut rng, cfg.n_occluders) {
        let f = draw(&mut rng, cfg.occluder_size_range);
        add_occluder(&mut img, f, rng.gen())?;
    }
    add_gaussian_noise(&mut img, cfg.noise_sigma, rng.gen())?;

    Ok(SamplePair {
        image_a: src.clone(),
        image_b: img.to_u8(),
        h_ab,
        config_digest: cfg.digest(),
        seed: cfg.seed,
        fill,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::image::procedural_image;

    #[test]
    fn disabled_config_is_identity() {
        let src = procedural_image(48, 40, 1).unwrap();
        let p = generate_pair(&src, &DistortionConfig::none(17)).unwrap();
        assert_eq!(p.image_b, p.image_a);
        assert_eq!(p.h_ab, Homography::identity());
    }

    #[test]
    fn same_seed_same_pair() {
        let src = procedural_image(48, 40, 2).unwrap();
        let cfg = DistortionConfig {
            seed: 99,
            n_shadows: (1, 3),
            n_occluders: (1, 2),
            ..Default::default()
        };
        assert_eq!(generate_pair(&src, &cfg).unwrap(), generate_pair(&src, &cfg).unwrap());
        let other = DistortionConfig { seed: 100, ..cfg.clone() };
        assert_ne!(generate_pair(&src, &cfg).unwrap().image_b, generate_pair(&src, &other).unwrap().image_b);
    }

    #[test]
    fn digest_ignores_seed() {
        let a = DistortionConfig { seed: 1, ..Default::default() };
        let b = DistortionConfig { seed: 2, ..Default::default() };
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        let c = DistortionConfig { noise_sigma: 0.1, ..a.clone() };
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn validation() {
        assert!(DistortionConfig::default().validate().is_ok());
        let bad = [
            DistortionConfig { max_corner_shift: 0.5, ..Default::default() },
            DistortionConfig { illumination_gain_range: (1.5, 0.5), ..Default::default() },
            DistortionConfig { shadow_alpha_range: (0.0, 1.2), ..Default::default() },
            DistortionConfig { n_occluders: (3, 1), ..Default::default() },
            DistortionConfig { occluder_size_range: (0.0, 0.1), ..Default::default() },
            DistortionConfig { noise_sigma: -0.1, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
