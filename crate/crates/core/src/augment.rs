//! Stochastic image augmentations on planar `[3, H, W]` data in `[-1, 1]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the image.
    pub crop_min: f32,
    pub crop_max: f32,
    pub flip_p: f32,
    pub blur_p: f32,
    pub blur_sigma_max: f32,
    pub jitter_p: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Maximum hue rotation in turns (0 disables).
    pub hue: f32,
    pub grayscale_p: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_min: 0.8,
            crop_max: 1.0,
            flip_p: 0.5,
            blur_p: 0.5,
            blur_sigma_max: 1.0,
            jitter_p: 1.0,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.0,
            grayscale_p: 0.0,
        }
    }
}

impl AugmentConfig {
    /// Leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            crop_min: 1.0,
            crop_max: 1.0,
            flip_p: 0.0,
            blur_p: 0.0,
            blur_sigma_max: 0.0,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = [self.flip_p, self.blur_p, self.jitter_p, self.grayscale_p];
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(Error::Config(format!(
                "crop range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.crop_min, self.crop_max
            )));
        }
        let mags = [
            self.blur_sigma_max,
            self.brightness,
            self.contrast,
            self.saturation,
            self.hue,
        ];
        if mags.iter().any(|v| !(*v >= 0.0)) || self.brightness >= 1.0 || self.hue > 0.5 {
            return Err(Error::Config("augmentation magnitudes out of range".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        kv.set(format!("{prefix}.crop_min"), self.crop_min);
        kv.set(format!("{prefix}.crop_max"), self.crop_max);
        kv.set(format!("{prefix}.flip_p"), self.flip_p);
        kv.set(format!("{prefix}.blur_p"), self.blur_p);
        kv.set(format!("{prefix}.blur_sigma_max"), self.blur_sigma_max);
        kv.set(format!("{prefix}.jitter_p"), self.jitter_p);
        kv.set(format!("{prefix}.brightness"), self.brightness);
        kv.set(format!("{prefix}.contrast"), self.contrast);
        kv.set(format!("{prefix}.saturation"), self.saturation);
        kv.set(format!("{prefix}.hue"), self.hue);
        kv.set(format!("{prefix}.grayscale_p"), self.grayscale_p);
    }

    pub fn read_kv(kv: &KvMap, prefix: &str) -> Result<Self> {
        let c = Self {
            crop_min: kv.get(&format!("{prefix}.crop_min"))?,
            crop_max: kv.get(&format!("{prefix}.crop_max"))?,
            flip_p: kv.get(&format!("{prefix}.flip_p"))?,
            blur_p: kv.get(&format!("{prefix}.blur_p"))?,
            blur_sigma_max: kv.get(&format!("{prefix}.blur_sigma_max"))?,
            jitter_p: kv.get(&format!("{prefix}.jitter_p"))?,
            brightness: kv.get(&format!("{prefix}.brightness"))?,
            contrast: kv.get(&format!("{prefix}.contrast"))?,
            saturation: kv.get(&format!("{prefix}.saturation"))?,
            hue: kv.get(&format!("{prefix}.hue"))?,
            grayscale_p: kv.get(&format!("{prefix}.grayscale_p"))?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Mirrors each row of a planar image in place.
pub fn flip_horizontal(img: &mut [f32], h: usize, w: usize) {
    for row in img.chunks_exact_mut(w).take(3 * h) {
        row.reverse();
    }
}

/// Crops the square `[x0, x0 + side) x [y0, y0 + side)` and resizes it
/// bilinearly back to `h x w`.
pub fn crop_resize(img: &[f32], h: usize, w: usize, x0: f32, y0: f32, side_x: f32, side_y: f32) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    let sample = |plane: &[f32], fy: f32, fx: f32| -> f32 {
        let fy = fy.clamp(0.0, (h - 1) as f32);
        let fx = fx.clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (fy as usize, fx as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
        let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
        top * (1.0 - ty) + bot * ty
    };
    for c in 0..3 {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let fy = y0 + (y as f32 + 0.5) * side_y / h as f32 - 0.5;
            for x in 0..w {
                let fx = x0 + (x as f32 + 0.5) * side_x / w as f32 - 0.5;
                out[c * h * w + y * w + x] = sample(plane, fy, fx);
            }
        }
    }
    out
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &mut [f32], h: usize, w: usize, sigma: f32) {
    if sigma <= 1e-3 {
        return;
    }
    let radius = libm::ceilf(2.0 * sigma) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| libm::expf(-((i * i) as f32) / (2.0 * sigma * sigma)))
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let mut tmp = vec![0.0; h * w];
    for plane in img.chunks_exact_mut(h * w).take(3) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Rotates hue by `turns` using the YIQ chroma plane.
fn rotate_hue(rgb: [f32; 3], turns: f32) -> [f32; 3] {
    let [r, g, b] = rgb;
    let y = luma(r, g, b);
    let i = 0.596 * r - 0.274 * g - 0.322 * b;
    let q = 0.211 * r - 0.523 * g + 0.312 * b;
    let a = turns * 2.0 * core::f32::consts::PI;
    let (s, c) = (libm::sinf(a), libm::cosf(a));
    let (i, q) = (i * c - q * s, i * s + q * c);
    [
        y + 0.956 * i + 0.621 * q,
        y - 0.272 * i - 0.647 * q,
        y - 1.106 * i + 1.703 * q,
    ]
}

struct Jitter {
    brightness: f32,
    contrast: f32,
    saturation: f32,
    hue: f32,
    grayscale: bool,
}

fn apply_jitter(img: &mut [f32], h: usize, w: usize, j: &Jitter) {
    let hw = h * w;
    // work in [0, 1]
    for v in img.iter_mut() {
        *v = ((*v + 1.0) * 0.5 * j.brightness).clamp(0.0, 1.0);
    }
    let mean = (0..hw)
        .map(|p| luma(img[p], img[hw + p], img[2 * hw + p]))
        .sum::<f32>()
        / hw as f32;
    for v in img.iter_mut() {
        *v = ((*v - mean) * j.contrast + mean).clamp(0.0, 1.0);
    }
    for p in 0..hw {
        let mut rgb = [img[p], img[hw + p], img[2 * hw + p]];
        let g = luma(rgb[0], rgb[1], rgb[2]);
        for v in rgb.iter_mut() {
            *v = (*v - g) * j.saturation + g;
        }
        if j.hue != 0.0 {
            rgb = rotate_hue(rgb, j.hue);
        }
        if j.grayscale {
            let g = luma(rgb[0], rgb[1], rgb[2]);
            rgb = [g; 3];
        }
        for c in 0..3 {
            img[c * hw + p] = rgb[c].clamp(0.0, 1.0);
        }
    }
    for v in img.iter_mut() {
        *v = *v * 2.0 - 1.0;
    }
}

/// Augments one planar image in place.
pub fn augment_image<R: Rng + ?Sized>(img: &mut Vec<f32>, h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) {
    let area = rng.random_range(cfg.crop_min..=cfg.crop_max);
    if area < 1.0 {
        let side_x = libm::sqrtf(area) * w as f32;
        let side_y = libm::sqrtf(area) * h as f32;
        let x0 = rng.random_range(0.0..=(w as f32 - side_x));
        let y0 = rng.random_range(0.0..=(h as f32 - side_y));
        *img = crop_resize(img, h, w, x0, y0, side_x, side_y);
    }
    if rng.random::<f32>() < cfg.flip_p {
        flip_horizontal(img, h, w);
    }
    if rng.random::<f32>() < cfg.blur_p {
        let sigma = rng.random_range(0.0..=cfg.blur_sigma_max);
        gaussian_blur(img, h, w, sigma);
    }
    if rng.random::<f32>() < cfg.jitter_p {
        let mut factor = |m: f32| if m > 0.0 { rng.random_range(1.0 - m..=1.0 + m) } else { 1.0 };
        let j = Jitter {
            brightness: factor(cfg.brightness),
            contrast: factor(cfg.contrast),
            saturation: factor(cfg.saturation),
            hue: if cfg.hue > 0.0 { rng.random_range(-cfg.hue..=cfg.hue) } else { 0.0 },
            grayscale: rng.random::<f32>() < cfg.grayscale_p,
        };
        apply_jitter(img, h, w, &j);
    }
    for v in img.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Augments every image of `[N, 3, H, W]`, image `i` driven by `seeds[i]`.
pub fn augment_batch_seeded(images: &Tensor, cfg: &AugmentConfig, seeds: &[u64]) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || seeds.len() != s[0] {
        return Err(shape_err("augment", s, &[seeds.len(), 3, 0, 0]));
    }
    let (h, w) = (s[2], s[3]);
    let per = 3 * h * w;
    let mut out = Vec::with_capacity(images.numel());
    for (chunk, &seed) in images.data().chunks_exact(per.max(1)).zip(seeds) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = chunk.to_vec();
        augment_image(&mut img, h, w, cfg, &mut rng);
        out.extend_from_slice(&img);
    }
    Tensor::new(s.to_vec(), out)
}

/// Augments a batch with per-image seeds drawn from `rng`.
pub fn augment_samples<R: Rng + ?Sized>(images: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    let n = images.shape().first().copied().unwrap_or(0);
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    augment_batch_seeded(images, cfg, &seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Vec<f32> {
        (0..3 * h * w).map(|i| ((i * 37) % 200) as f32 / 100.0 - 1.0).collect()
    }

    #[test]
    fn flip_is_an_involution() {
        let orig = ramp(5, 7);
        let mut img = orig.clone();
        flip_horizontal(&mut img, 5, 7);
        assert_ne!(img, orig);
        flip_horizontal(&mut img, 5, 7);
        assert_eq!(img, orig);
    }

    #[test]
    fn full_crop_is_identity() {
        let img = ramp(6, 6);
        assert_eq!(crop_resize(&img, 6, 6, 0.0, 0.0, 6.0, 6.0), img);
    }

    #[test]
    fn blur_preserves_constants() {
        let mut img = vec![0.25; 3 * 16];
        gaussian_blur(&mut img, 4, 4, 0.8);
        assert!(img.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn zero_hue_rotation_is_identity() {
        let rgb = [0.2, 0.5, 0.9];
        let out = rotate_hue(rgb, 0.0);
        for c in 0..3 {
            assert!((out[c] - rgb[c]).abs() < 2e-3);
        }
    }
}
