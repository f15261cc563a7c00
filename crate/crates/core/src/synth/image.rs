use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 16;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image must be at least {MIN_SIDE}×{MIN_SIDE}, got {width}×{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "RGB buffer for {width}×{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    /// `3×H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new([3, self.height, self.width], out).expect("shape matches buffer")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }

    /// Triangle-filtered resize.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        let out = image::imageops::resize(
            &buf,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::new(width, height, out.into_raw())
    }
}

/// Working representation during compositing: RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f32 {
        &mut self.data[(y * self.width + x) * 3 + c]
    }

    /// Bilinear sample at continuous pixel coordinates (integer = pixel
    /// centre). `None` outside `[0, W−1] × [0, H−1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(0.0..=wmax).contains(&x) || !(0.0..=hmax).contains(&y) {
            return None;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let mut out = [0.0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
            let bot = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
        Some(out)
    }

    pub fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Quantizes to 8 bits (values are clamped first).
    pub fn to_u8(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Image::new(self.width, self.height, data).expect("dimensions carried over")
    }
}

/// Self-contained texture source: smooth gradients, filled shapes, and
/// thin pen-like strokes on top of fine noise.
pub fn procedural_image(width: usize, height: usize, seed: u64) -> Result<Image> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::invalid(format!(
            "procedural image must be at least {MIN_SIDE}×{MIN_SIDE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f32, height as f32);
    let mut img = FloatImage::filled(width, height, [0.0; 3]);

    // background: linear gradient between two random colours
    let c0: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let span = dx.abs() * w + dy.abs() * h;
    for y in 0..height {
        for x in 0..width {
            let t = ((x as f32 - w / 2.0) * dx + (y as f32 - h / 2.0) * dy) / span + 0.5;
            for c in 0..3 {
                *img.get_mut(x, y, c) = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // Every primitive is anti-aliased over about two pixels so the texture
    // survives bilinear resampling without aliasing.
    let scale = w.min(h);
    let n_shapes = rng.gen_range(12..24);
    for _ in 0..n_shapes {
        let col: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        let (rx, ry) = (
            rng.gen_range(0.04..0.25) * scale,
            rng.gen_range(0.04..0.25) * scale,
        );
        let ellipse = rng.gen_bool(0.5);
        let x0 = (cx - rx - EDGE).max(0.0) as usize;
        let x1 = ((cx + rx + EDGE).ceil() as usize).min(width);
        let y0 = (cy - ry - EDGE).max(0.0) as usize;
        let y1 = ((cy + ry + EDGE).ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                // approximate signed distance to the outline, negative inside
                let d = if ellipse {
                    let r = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
                    (r - 1.0) * rx.min(ry)
                } else {
                    (dx.abs() - rx).max(dy.abs() - ry)
                };
                blend(&mut img, x, y, col, coverage(d));
            }
        }
    }

    // strokes: short polylines of varying width
    let n_strokes = rng.gen_range(10..20);
    for _ in 0..n_strokes {
        let col: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let thick = rng.gen_range(1.0..2.5f32);
        let mut p = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        let mut heading: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        for _ in 0..rng.gen_range(2..6) {
            heading += rng.gen_range(-1.5..1.5);
            let len = rng.gen_range(0.05..0.2) * scale;
            let q = (p.0 + heading.cos() * len, p.1 + heading.sin() * len);
            draw_segment(&mut img, p, q, thick, col);
            p = q;
        }
    }

    // low-amplitude value noise on a 4 px lattice so flat regions still
    // carry some signal
    let (gw, gh) = (width / NOISE_CELL + 2, height / NOISE_CELL + 2);
    let lattice: Vec<f32> = (0..gw * gh * 3).map(|_| rng.gen_range(-0.04..0.04)).collect();
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f32 / NOISE_CELL as f32, y as f32 / NOISE_CELL as f32);
            let (i, j) = (fx as usize, fy as usize);
            let (tx, ty) = (smooth(fx - i as f32), smooth(fy - j as f32));
            for c in 0..3 {
                let at = |ii: usize, jj: usize| lattice[(jj * gw + ii) * 3 + c];
                let top = at(i, j) * (1.0 - tx) + at(i + 1, j) * tx;
                let bot = at(i, j + 1) * (1.0 - tx) + at(i + 1, j + 1) * tx;
                *img.get_mut(x, y, c) += top * (1.0 - ty) + bot * ty;
            }
        }
    }
    img.clamp();
    Ok(img.to_u8())
}

const EDGE: f32 = 1.5;
const NOISE_CELL: usize = 6;

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Fraction of a pixel covered given its signed distance to an edge.
fn coverage(d: f32) -> f32 {
    (0.5 - d / (2.0 * EDGE)).clamp(0.0, 1.0)
}

fn blend(img: &mut FloatImage, x: usize, y: usize, col: [f32; 3], alpha: f32) {
    if alpha <= 0.0 {
        return;
    }
    for (c, &v) in col.iter().enumerate() {
        let p = img.get_mut(x, y, c);
        *p = *p * (1.0 - alpha) + v * alpha;
    }
}

fn draw_segment(img: &mut FloatImage, a: (f32, f32), b: (f32, f32), thick: f32, col: [f32; 3]) {
    let reach = thick + EDGE;
    let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(img.width);
    let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(img.height);
    let (ex, ey) = (b.0 - a.0, b.1 - a.1);
    let len2 = (ex * ex + ey * ey).max(1e-6);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f32 - a.0, y as f32 - a.1);
            let t = ((px * ex + py * ey) / len2).clamp(0.0, 1.0);
            let (dx, dy) = (px - t * ex, py - t * ey);
            let d = (dx * dx + dy * dy).sqrt() - thick;
            blend(img, x, y, col, coverage(d));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_mismatched() {
        assert!(Image::new(8, 32, vec![0; 8 * 32 * 3]).is_err());
        assert!(Image::new(16, 16, vec![0; 10]).is_err());
        assert!(Image::new(16, 16, vec![0; 16 * 16 * 3]).is_ok());
    }

    #[test]
    fn float_round_trip_is_exact() {
        let img = procedural_image(32, 24, 3).unwrap();
        assert_eq!(img.to_float().to_u8(), img);
    }

    #[test]
    fn procedural_is_deterministic_and_textured() {
        let a = procedural_image(64, 64, 7).unwrap();
        assert_eq!(a, procedural_image(64, 64, 7).unwrap());
        assert_ne!(a, procedural_image(64, 64, 8).unwrap());
        let mean = a.data().iter().map(|&v| v as f64).sum::<f64>() / a.data().len() as f64;
        let var = a.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / a.data().len() as f64;
        assert!(var.sqrt() > 20.0, "too flat: std {}", var.sqrt());
    }

    #[test]
    fn tensor_layout_is_planar() {
        let img = procedural_image(16, 16, 1).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 16, 16]);
        let px = img.pixel(5, 3);
        assert_eq!(t.data()[3 * 16 + 5], px[0] as f32 / 255.0);
        assert_eq!(t.data()[256 * 2 + 3 * 16 + 5], px[2] as f32 / 255.0);
    }

    #[test]
    fn bilinear_sampling_hits_pixels_and_midpoints() {
        let img = procedural_image(16, 16, 2).unwrap().to_float();
        assert_eq!(img.sample_bilinear(4.0, 6.0).unwrap()[1], img.get(4, 6, 1));
        let mid = img.sample_bilinear(4.5, 6.0).unwrap()[0];
        assert!((mid - 0.5 * (img.get(4, 6, 0) + img.get(5, 6, 0))).abs() < 1e-6);
        assert!(img.sample_bilinear(-0.1, 0.0).is_none());
        assert!(img.sample_bilinear(15.0, 15.0).is_some());
    }
}
