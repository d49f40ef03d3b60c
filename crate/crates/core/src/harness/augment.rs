//! Training-time augmentation. Only the horizontal flip touches geometry;
//! photometric operations change pixels alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FrameSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub color_jitter_p: f64,
    pub blur_p: f64,
    pub grayscale_p: f64,
    pub sharpness_p: f64,
    /// Jitter factors are drawn from `[1 - x, 1 + x]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_sigma_range: [f64; 2],
    pub sharpness_factor: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            color_jitter_p: 0.25,
            blur_p: 0.25,
            grayscale_p: 0.2,
            sharpness_p: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            blur_sigma_range: [0.1, 2.0],
            sharpness_factor: 2.0,
        }
    }
}

impl AugmentConfig {
    /// Every probability zero.
    pub fn none() -> Self {
        Self {
            flip_p: 0.0,
            color_jitter_p: 0.0,
            blur_p: 0.0,
            grayscale_p: 0.0,
            sharpness_p: 0.0,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_p == 0.0
            && self.color_jitter_p == 0.0
            && self.blur_p == 0.0
            && self.grayscale_p == 0.0
            && self.sharpness_p == 0.0
    }
}

/// Mirrors the image and every box: `x' = W - x - w`.
pub fn flip_frame(frame: &FrameSample) -> FrameSample {
    let (h, w) = (frame.height(), frame.width());
    let src = frame.image.data();
    let mut data = vec![0.0; src.len()];
    for c in 0..3 {
        for y in 0..h {
            let row = (c * h + y) * w;
            for x in 0..w {
                data[row + x] = src[row + w - 1 - x];
            }
        }
    }
    let mut out = frame.clone();
    out.image = Tensor::new(vec![3, h, w], data);
    for a in &mut out.annotations {
        a.bbox = a.bbox.flip_horizontal(w as f64);
    }
    out
}

fn luma(img: &[f64], plane: usize, i: usize) -> f64 {
    0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i]
}

fn grayscale(img: &mut [f64], plane: usize) {
    for i in 0..plane {
        let l = luma(img, plane, i);
        for c in 0..3 {
            img[c * plane + i] = l;
        }
    }
}

/// Brightness, contrast, then saturation, each a blend toward a reference.
fn color_jitter(img: &mut [f64], plane: usize, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let mut factor = |x: f64| if x > 0.0 { rng.gen_range(1.0 - x..1.0 + x) } else { 1.0 };
    let (b, c, s) = (factor(cfg.brightness), factor(cfg.contrast), factor(cfg.saturation));
    img.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    let mean = (0..plane).map(|i| luma(img, plane, i)).sum::<f64>() / plane as f64;
    img.iter_mut().for_each(|v| *v = (mean + c * (*v - mean)).clamp(0.0, 1.0));
    for i in 0..plane {
        let l = luma(img, plane, i);
        for ch in 0..3 {
            let v = &mut img[ch * plane + i];
            *v = (l + s * (*v - l)).clamp(0.0, 1.0);
        }
    }
}

/// Separable 3-tap Gaussian with edge clamping.
fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    let e = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let plane = h * w;
    let mut tmp = vec![0.0; plane];
    for c in 0..3 {
        let p = &mut img[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let l = p[y * w + x.saturating_sub(1)];
                let r = p[y * w + (x + 1).min(w - 1)];
                tmp[y * w + x] = k[0] * l + k[1] * p[y * w + x] + k[2] * r;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let u = tmp[y.saturating_sub(1) * w + x];
                let d = tmp[(y + 1).min(h - 1) * w + x];
                p[y * w + x] = k[0] * u + k[1] * tmp[y * w + x] + k[2] * d;
            }
        }
    }
}

/// Blend with a smoothed copy: factor 1 is identity, above 1 sharpens.
/// Border pixels are left unchanged.
fn adjust_sharpness(img: &mut [f64], h: usize, w: usize, factor: f64) {
    if h < 3 || w < 3 {
        return;
    }
    let plane = h * w;
    for c in 0..3 {
        let p = &mut img[c * plane..(c + 1) * plane];
        let src = p.to_vec();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut s = 4.0 * src[y * w + x];
                for (dy, dx) in [(0, 1), (2, 1), (1, 0), (1, 2), (0, 0), (0, 2), (2, 0), (2, 2)] {
                    s += src[(y + dy - 1) * w + x + dx - 1];
                }
                let smooth = s / 12.0;
                p[y * w + x] = (smooth + factor * (src[y * w + x] - smooth)).clamp(0.0, 1.0);
            }
        }
    }
}

/// Applies each enabled operation with its probability, deterministically per seed.
pub fn augment(frame: &FrameSample, cfg: &AugmentConfig, seed: u64) -> FrameSample {
    if cfg.is_identity() {
        return frame.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = if rng.gen::<f64>() < cfg.flip_p {
        flip_frame(frame)
    } else {
        frame.clone()
    };
    let (h, w) = (out.height(), out.width());
    let plane = h * w;
    let img = out.image.data_mut();
    if rng.gen::<f64>() < cfg.color_jitter_p {
        color_jitter(img, plane, cfg, &mut rng);
    }
    if rng.gen::<f64>() < cfg.blur_p {
        let [lo, hi] = cfg.blur_sigma_range;
        let sigma = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        gaussian_blur(img, h, w, sigma);
    }
    if rng.gen::<f64>() < cfg.grayscale_p {
        grayscale(img, plane);
    }
    if rng.gen::<f64>() < cfg.sharpness_p {
        adjust_sharpness(img, h, w, cfg.sharpness_factor);
    }
    out
}
