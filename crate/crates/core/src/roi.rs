//! RoIAlign, tokenization of per-object feature grids, and token mask plans.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::data::BoundingBox;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GRID: usize = 8;
pub const DEFAULT_SAMPLES_PER_BIN: usize = 2;

/// Precomputed bilinear taps of one RoIAlign: for every output bin the list of
/// `(flat spatial index, weight)` pairs whose weighted sum gives the bin value.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSampling {
    pub grid: (usize, usize),
    fm_h: usize,
    fm_w: usize,
    offsets: Vec<usize>,
    taps: Vec<(usize, f64)>,
}

impl RoiSampling {
    /// Sampling pattern for `bbox` (image pixels) over a feature map of
    /// `fm_h x fm_w` cells at `stride`. The box is first clamped to the
    /// `image_w x image_h` rectangle. Continuous coordinate `i + 0.5` is the
    /// center of cell `i`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        bbox: &BoundingBox,
        image_w: usize,
        image_h: usize,
        fm_h: usize,
        fm_w: usize,
        stride: usize,
        grid: (usize, usize),
        samples_per_bin: usize,
    ) -> Result<Self> {
        if grid.0 == 0 || grid.1 == 0 || samples_per_bin == 0 {
            return Err(invalid("RoI grid and samples_per_bin must be positive"));
        }
        if !(bbox.w > 0.0 && bbox.h > 0.0) {
            return Err(invalid(format!("degenerate box {bbox:?}")));
        }
        let clamped = bbox
            .clamp_to(image_w as f64, image_h as f64)
            .ok_or_else(|| invalid(format!("box {bbox:?} has no area inside the image")))?;
        let s = stride as f64;
        let (x0, y0) = (clamped.x / s, clamped.y / s);
        let (bin_w, bin_h) = (clamped.w / s / grid.1 as f64, clamped.h / s / grid.0 as f64);
        let n = samples_per_bin;
        let inv = 1.0 / (n * n) as f64;
        let axis = |start: f64, bin: f64, k: usize, j: usize, len: usize| -> (usize, usize, f64) {
            let u = start + (k as f64 + (j as f64 + 0.5) / n as f64) * bin - 0.5;
            let u = u.clamp(0.0, (len - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, u - lo as f64)
        };
        let mut offsets = Vec::with_capacity(grid.0 * grid.1 + 1);
        let mut taps = Vec::with_capacity(grid.0 * grid.1 * n * n * 4);
        offsets.push(0);
        for r in 0..grid.0 {
            for c in 0..grid.1 {
                for sy in 0..n {
                    let (ylo, yhi, ly) = axis(y0, bin_h, r, sy, fm_h);
                    for sx in 0..n {
                        let (xlo, xhi, lx) = axis(x0, bin_w, c, sx, fm_w);
                        for (yy, wy) in [(ylo, 1.0 - ly), (yhi, ly)] {
                            for (xx, wx) in [(xlo, 1.0 - lx), (xhi, lx)] {
                                let w = wy * wx * inv;
                                if w != 0.0 {
                                    taps.push((yy * fm_w + xx, w));
                                }
                            }
                        }
                    }
                }
                offsets.push(taps.len());
            }
        }
        Ok(Self {
            grid,
            fm_h,
            fm_w,
            offsets,
            taps,
        })
    }

    pub fn bins(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `fm[c, h, w] -> [bins, c]`, row-major over the grid.
    pub fn apply_tokens(&self, fm: &Tensor) -> Tensor {
        let s = fm.shape();
        assert_eq!((s[1], s[2]), (self.fm_h, self.fm_w), "feature map size changed");
        let c = s[0];
        let plane = self.fm_h * self.fm_w;
        let data = fm.data();
        let mut out = vec![0.0; self.bins() * c];
        for b in 0..self.bins() {
            let taps = &self.taps[self.offsets[b]..self.offsets[b + 1]];
            let row = &mut out[b * c..(b + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                let p = &data[ch * plane..(ch + 1) * plane];
                *o = taps.iter().map(|&(i, w)| w * p[i]).sum();
            }
        }
        Tensor::new(vec![self.bins(), c], out)
    }

    pub(crate) fn backward_tokens(&self, g: &[f64], d_fm: &mut [f64]) {
        let plane = self.fm_h * self.fm_w;
        let c = d_fm.len() / plane;
        for b in 0..self.bins() {
            let taps = &self.taps[self.offsets[b]..self.offsets[b + 1]];
            for ch in 0..c {
                let gv = g[b * c + ch];
                let p = &mut d_fm[ch * plane..(ch + 1) * plane];
                for &(i, w) in taps {
                    p[i] += w * gv;
                }
            }
        }
    }
}

/// Per-object feature grid `[c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoIFeatureGrid {
    pub values: Tensor,
    pub source_box: BoundingBox,
}

/// Row-major flattening of a grid into `[h*w, c]` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub tokens: Tensor,
    pub grid_positions: Vec<(usize, usize)>,
}

pub fn roi_align(
    fm: &FeatureMap,
    bbox: &BoundingBox,
    grid: (usize, usize),
    samples_per_bin: usize,
) -> Result<RoIFeatureGrid> {
    let sampling = fm.roi_sampling(bbox, grid, samples_per_bin)?;
    let tokens = sampling.apply_tokens(&fm.values);
    let c = fm.channels();
    // [bins, c] -> [c, h, w]
    let bins = sampling.bins();
    let mut values = vec![0.0; c * bins];
    for b in 0..bins {
        for ch in 0..c {
            values[ch * bins + b] = tokens.row(b)[ch];
        }
    }
    Ok(RoIFeatureGrid {
        values: Tensor::new(vec![c, grid.0, grid.1], values),
        source_box: *bbox,
    })
}

pub fn tokenize(grid: &RoIFeatureGrid) -> TokenSet {
    let s = grid.values.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut tokens = vec![0.0; h * w * c];
    let mut positions = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let t = r * w + col;
            positions.push((r, col));
            for ch in 0..c {
                tokens[t * c + ch] = grid.values.at3(ch, r, col);
            }
        }
    }
    TokenSet {
        tokens: Tensor::new(vec![h * w, c], tokens),
        grid_positions: positions,
    }
}

/// Inverse of [`tokenize`] using the stored grid positions.
pub fn untokenize(tokens: &TokenSet, source_box: BoundingBox) -> Result<RoIFeatureGrid> {
    let c = tokens.tokens.cols();
    let h = tokens.grid_positions.iter().map(|p| p.0).max().map_or(0, |m| m + 1);
    let w = tokens.grid_positions.iter().map(|p| p.1).max().map_or(0, |m| m + 1);
    if h * w != tokens.tokens.rows() {
        return Err(Error::Shape(format!(
            "{} tokens do not tile a {h}x{w} grid",
            tokens.tokens.rows()
        )));
    }
    let mut values = vec![0.0; c * h * w];
    for (t, &(r, col)) in tokens.grid_positions.iter().enumerate() {
        for ch in 0..c {
            values[(ch * h + r) * w + col] = tokens.tokens.row(t)[ch];
        }
    }
    Ok(RoIFeatureGrid {
        values: Tensor::new(vec![c, h, w], values),
        source_box,
    })
}

/// Which tokens of an object enter the local encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub kept: Vec<bool>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn keep_all(n_tokens: usize) -> Self {
        Self {
            kept: vec![true; n_tokens],
            ratio: 0.0,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.kept.len()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.kept.len()).filter(|&i| self.kept[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.kept.len()).filter(|&i| !self.kept[i]).collect()
    }

    pub fn n_kept(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn n_masked(&self) -> usize {
        self.n_tokens() - self.n_kept()
    }
}

/// Number of masked tokens: `floor(ratio * n)`, robust to representation error
/// in `ratio` (so `0.29 * 100` masks 29).
pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    ((ratio * n_tokens as f64) + 1e-9).floor() as usize
}

/// Masks exactly `floor(ratio * n_tokens)` tokens chosen uniformly without
/// replacement.
pub fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    if n_tokens == 0 {
        return Err(invalid("mask plan needs at least one token"));
    }
    let n_masked = masked_count(n_tokens, ratio).min(n_tokens);
    let mut kept = vec![true; n_tokens];
    if n_masked > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in rand::seq::index::sample(&mut rng, n_tokens, n_masked).iter() {
            kept[i] = false;
        }
    }
    Ok(MaskPlan { kept, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rand_tensor;

    fn fm(values: Tensor, stride: usize) -> FeatureMap {
        let s = values.shape().to_vec();
        FeatureMap {
            values,
            stride,
            image_height: s[1] * stride,
            image_width: s[2] * stride,
        }
    }

    #[test]
    fn constant_map() {
        let f = fm(Tensor::filled(&[3, 10, 12], 0.25), 4);
        let g = roi_align(&f, &BoundingBox::new(5.0, 3.0, 17.0, 22.0), (8, 8), 2).unwrap();
        assert!(g.values.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(g.values.shape(), &[3, 8, 8]);
    }

    /// Independent average-pooling oracle over integer-aligned boxes.
    fn avg_pool_oracle(t: &Tensor, x0: usize, y0: usize, size: usize, grid: usize) -> Tensor {
        let s = t.shape();
        let k = size / grid;
        let mut out = vec![0.0; s[0] * grid * grid];
        for c in 0..s[0] {
            for r in 0..grid {
                for col in 0..grid {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += t.at3(c, y0 + r * k + dy, x0 + col * k + dx);
                        }
                    }
                    out[(c * grid + r) * grid + col] = acc / (k * k) as f64;
                }
            }
        }
        Tensor::new(vec![s[0], grid, grid], out)
    }

    #[test]
    fn aligned_boxes_match_average_pool() {
        let t = rand_tensor(&[2, 24, 24], 3);
        let f = fm(t.clone(), 1);
        for (x0, y0, size) in [(0, 0, 8), (4, 2, 8), (3, 5, 16)] {
            let b = BoundingBox::new(x0 as f64, y0 as f64, size as f64, size as f64);
            let got = roi_align(&f, &b, (8, 8), 1).unwrap();
            let want = avg_pool_oracle(&t, x0, y0, size, 8);
            assert!(got.values.max_abs_diff(&want) < 1e-6);
        }
    }

    #[test]
    fn linear_in_feature_map() {
        let (a, b) = (rand_tensor(&[3, 9, 11], 1), rand_tensor(&[3, 9, 11], 2));
        let mix = Tensor::new(
            vec![3, 9, 11],
            a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * x - 0.5 * y).collect(),
        );
        let bx = BoundingBox::new(3.3, 4.1, 20.7, 15.2);
        let ra = roi_align(&fm(a, 4), &bx, (8, 8), 2).unwrap();
        let rb = roi_align(&fm(b, 4), &bx, (8, 8), 2).unwrap();
        let rm = roi_align(&fm(mix, 4), &bx, (8, 8), 2).unwrap();
        for i in 0..rm.values.len() {
            let lin = 2.0 * ra.values.data()[i] - 0.5 * rb.values.data()[i];
            assert!((rm.values.data()[i] - lin).abs() < 1e-6);
        }
    }

    #[test]
    fn translation_consistent() {
        let base = rand_tensor(&[2, 12, 12], 9);
        let mut shifted = vec![0.0; base.len()];
        for c in 0..2 {
            for y in 0..12 {
                for x in 1..12 {
                    shifted[(c * 12 + y) * 12 + x] = base.at3(c, y, x - 1);
                }
            }
        }
        let shifted = Tensor::new(vec![2, 12, 12], shifted);
        let stride = 4;
        let bx = BoundingBox::new(9.0, 10.0, 13.0, 17.0);
        let moved = BoundingBox::new(bx.x + stride as f64, bx.y, bx.w, bx.h);
        let a = roi_align(&fm(base, stride), &bx, (8, 8), 2).unwrap();
        let b = roi_align(&fm(shifted, stride), &moved, (8, 8), 2).unwrap();
        assert!(a.values.max_abs_diff(&b.values) < 1e-6);
    }

    #[test]
    fn degenerate_boxes_error() {
        let f = fm(Tensor::zeros(&[1, 4, 4]), 4);
        assert!(roi_align(&f, &BoundingBox::new(1.0, 1.0, 0.0, 5.0), (8, 8), 2).is_err());
        assert!(roi_align(&f, &BoundingBox::new(16.0, 1.0, 3.0, 5.0), (8, 8), 2).is_err());
        assert!(roi_align(&f, &BoundingBox::new(-9.0, 1.0, 9.0, 5.0), (8, 8), 2).is_err());
    }

    #[test]
    fn tokenize_layout() {
        let g = RoIFeatureGrid {
            values: rand_tensor(&[2, 8, 8], 4),
            source_box: BoundingBox::new(0.0, 0.0, 1.0, 1.0),
        };
        let t = tokenize(&g);
        assert_eq!(t.tokens.shape(), &[64, 2]);
        assert_eq!(t.grid_positions[9], (1, 1));
        assert_eq!(t.tokens.row(9)[1], g.values.at3(1, 1, 1));
        assert_eq!(untokenize(&t, g.source_box).unwrap(), g);
    }

    #[test]
    fn mask_counts() {
        for (ratio, masked) in [(0.0, 0), (0.3, 19), (0.5, 32), (0.8, 51)] {
            let p = sample_mask(64, ratio, 1).unwrap();
            assert_eq!(p.n_masked(), masked);
            assert_eq!(p.n_kept() + p.n_masked(), 64);
        }
        assert_eq!(masked_count(100, 0.29), 29);
        assert!(sample_mask(64, 1.0, 0).is_err());
        assert!(sample_mask(64, -0.1, 0).is_err());
        assert_eq!(sample_mask(64, 0.5, 3).unwrap(), sample_mask(64, 0.5, 3).unwrap());
        assert_ne!(sample_mask(64, 0.5, 3).unwrap(), sample_mask(64, 0.5, 4).unwrap());
    }
}
