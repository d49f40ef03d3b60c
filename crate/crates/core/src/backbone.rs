//! Contextual encoder: a strided convolutional trunk with FPN-style top-down
//! lateral merging, producing one dense feature map per image.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{BoundingBox, HeatmapChannel, DEFAULT_HEATMAP_SIGMA_PX};
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::roi::RoiSampling;
use crate::tensor::Tensor;

/// How a lateral projection is merged with the upsampled coarser level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpnMerge {
    Add,
    /// Channel concatenation followed by a 1x1 projection.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output channels of each stride-2 stage.
    pub widths: Vec<usize>,
    pub fpn_width: usize,
    pub output_stride: usize,
    pub merge: FpnMerge,
    pub use_heatmap: bool,
    pub heatmap_sigma_px: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128],
            fpn_width: 64,
            output_stride: 4,
            merge: FpnMerge::Add,
            use_heatmap: true,
            heatmap_sigma_px: DEFAULT_HEATMAP_SIGMA_PX,
        }
    }
}

impl BackboneConfig {
    /// Index of the finest stage feeding the output.
    fn output_level(&self) -> Result<usize> {
        let s = self.output_stride;
        if !s.is_power_of_two() || s < 2 {
            return Err(invalid(format!("output stride {s} must be a power of two >= 2")));
        }
        let level = s.trailing_zeros() as usize - 1;
        if level >= self.widths.len() {
            return Err(invalid(format!(
                "output stride {s} needs more than {} stages",
                self.widths.len()
            )));
        }
        Ok(level)
    }

    /// Smallest image side the trunk accepts.
    pub fn min_input_size(&self) -> usize {
        1 << self.widths.len()
    }
}

/// Dense features `[c, H', W']` with `H' = ceil(H / stride)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn roi_sampling(
        &self,
        bbox: &BoundingBox,
        grid: (usize, usize),
        samples_per_bin: usize,
    ) -> Result<RoiSampling> {
        RoiSampling::new(
            bbox,
            self.image_width,
            self.image_height,
            self.height(),
            self.width(),
            self.stride,
            grid,
            samples_per_bin,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub config: BackboneConfig,
    stages: Vec<Conv2d>,
    /// One 1x1 projection per stage at or above the output level.
    pub laterals: Vec<Conv2d>,
    merges: Vec<Conv2d>,
    output_level: usize,
}

/// Input channels of the first convolution: RGB plus the centers heatmap.
pub const INPUT_CHANNELS: usize = 4;

impl ContextEncoder {
    pub fn new(config: BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) || config.fpn_width == 0 {
            return Err(invalid("backbone widths must be non-empty and positive"));
        }
        let output_level = config.output_level()?;
        let mut stages = Vec::new();
        let mut c_in = INPUT_CHANNELS;
        for (i, &w) in config.widths.iter().enumerate() {
            stages.push(Conv2d::new(store, rng, &format!("backbone.stage{i}"), c_in, w, 3, 2, 1));
            c_in = w;
        }
        let fpn = config.fpn_width;
        let laterals = (output_level..config.widths.len())
            .map(|i| Conv2d::new(store, rng, &format!("backbone.lateral{i}"), config.widths[i], fpn, 1, 1, 0))
            .collect();
        let merges = match config.merge {
            FpnMerge::Add => Vec::new(),
            FpnMerge::Concat => (output_level..config.widths.len() - 1)
                .map(|i| Conv2d::new(store, rng, &format!("backbone.merge{i}"), 2 * fpn, fpn, 1, 1, 0))
                .collect(),
        };
        Ok(Self {
            config,
            stages,
            laterals,
            merges,
            output_level,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.config.fpn_width
    }

    pub fn stride(&self) -> usize {
        self.config.output_stride
    }

    /// Graph forward over `image[3, H, W]` and an optional `heatmap[1, H, W]`.
    /// Without a heatmap the fourth input channel is zero.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var, heatmap: Option<Var>) -> Result<Var> {
        let s = g.value(image).shape().to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("image must be [3, H, W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let min = self.config.min_input_size();
        if h < min || w < min {
            return Err(invalid(format!(
                "image {h}x{w} is smaller than the {min}px minimum of the backbone"
            )));
        }
        let extra = match heatmap {
            Some(hm) => {
                let hs = g.value(hm).shape();
                if hs != [1, h, w] {
                    return Err(Error::Shape(format!("heatmap {hs:?} does not match image {h}x{w}")));
                }
                hm
            }
            None => g.constant(Tensor::zeros(&[1, h, w])),
        };
        let mut x = g.concat_channels(image, extra);
        let mut feats = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let y = stage.forward(g, store, x);
            x = g.gelu(y);
            feats.push(x);
        }
        let last = self.stages.len() - 1;
        let mut top = self.laterals[last - self.output_level].forward(g, store, feats[last]);
        for level in (self.output_level..last).rev() {
            let lat = self.laterals[level - self.output_level].forward(g, store, feats[level]);
            let ls = g.value(lat).shape().to_vec();
            let up = g.upsample2x(top, ls[1], ls[2]);
            top = match self.config.merge {
                FpnMerge::Add => g.add(lat, up),
                FpnMerge::Concat => {
                    let cat = g.concat_channels(lat, up);
                    self.merges[level - self.output_level].forward(g, store, cat)
                }
            };
        }
        Ok(top)
    }

    /// Evaluates the encoder outside of training.
    pub fn encode_context(
        &self,
        store: &ParamStore,
        image: &Tensor,
        heatmap: Option<&HeatmapChannel>,
    ) -> Result<FeatureMap> {
        if image.shape().len() != 3 {
            return Err(Error::Shape(format!("image must be [3, H, W], got {:?}", image.shape())));
        }
        let mut g = Graph::new();
        let img = g.constant(image.clone());
        let hm = heatmap.map(|h| g.constant(h.values.clone()));
        let out = self.forward(&mut g, store, img, hm)?;
        Ok(FeatureMap {
            values: g.value(out).clone(),
            stride: self.stride(),
            image_height: image.shape()[1],
            image_width: image.shape()[2],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rand_tensor;
    use rand::SeedableRng;

    fn encoder(config: BackboneConfig, seed: u64) -> (ContextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = ContextEncoder::new(config, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let t = rand_tensor(&[3, h, w], seed);
        Tensor::new(vec![3, h, w], t.data().iter().map(|v| 0.5 + 0.5 * v).collect())
    }

    #[test]
    fn shape_contract_sweep() {
        for merge in [FpnMerge::Add, FpnMerge::Concat] {
            let (enc, store) = encoder(BackboneConfig { merge, ..Default::default() }, 1);
            for h in [32, 48, 64, 96] {
                for w in [32, 48, 64, 96] {
                    let fm = enc.encode_context(&store, &image(h, w, 2), None).unwrap();
                    assert_eq!(fm.values.shape(), &[64, h.div_ceil(4), w.div_ceil(4)]);
                    assert!(fm.values.is_finite());
                }
            }
        }
        let (enc, store) = encoder(BackboneConfig::default(), 1);
        let fm = enc.encode_context(&store, &image(37, 45, 2), None).unwrap();
        assert_eq!(fm.values.shape(), &[64, 10, 12]);
    }

    #[test]
    fn heatmap_changes_output() {
        let (enc, store) = encoder(BackboneConfig::default(), 3);
        let img = image(64, 64, 4);
        let hm = crate::data::build_centers_heatmap(&[BoundingBox::new(10.0, 10.0, 20.0, 30.0)], 64, 64, 8.0).unwrap();
        let a = enc.encode_context(&store, &img, None).unwrap();
        let b = enc.encode_context(&store, &img, Some(&hm)).unwrap();
        assert!(a.values.max_abs_diff(&b.values) > 1e-6);
    }

    #[test]
    fn rejects_small_or_mismatched() {
        let (enc, store) = encoder(BackboneConfig::default(), 3);
        assert!(enc.encode_context(&store, &image(3, 3, 1), None).is_err());
        let hm = HeatmapChannel {
            values: Tensor::zeros(&[1, 32, 30]),
            sigma_px: 8.0,
        };
        assert!(enc.encode_context(&store, &image(32, 32, 1), Some(&hm)).is_err());
    }

    #[test]
    fn zeroed_coarse_laterals_leave_finest_pathway() {
        let (enc, mut store) = encoder(BackboneConfig::default(), 5);
        let img = image(32, 32, 6);
        for lat in &enc.laterals[1..] {
            store.get_mut(lat.weight).data_mut().fill(0.0);
            store.get_mut(lat.bias).data_mut().fill(0.0);
        }
        let full = enc.encode_context(&store, &img, None).unwrap();
        // finest pathway alone: stage convs then the first lateral
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let z = g.constant(Tensor::zeros(&[1, 32, 32]));
        let mut x = g.concat_channels(x, z);
        for stage in &enc.stages[..=enc.output_level] {
            let y = stage.forward(&mut g, &store, x);
            x = g.gelu(y);
        }
        let alone = enc.laterals[0].forward(&mut g, &store, x);
        assert!(full.values.max_abs_diff(g.value(alone)) == 0.0);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = BackboneConfig {
            widths: vec![4, 6, 8],
            fpn_width: 5,
            ..Default::default()
        };
        let (enc, store) = encoder(cfg, 7);
        let img = image(16, 16, 8);
        let proj = rand_tensor(&[5, 4, 4], 9);
        let objective = |img: &Tensor| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let x = g.leaf(img.clone());
            let out = enc.forward(&mut g, &store, x, None).unwrap();
            let p = g.constant(proj.clone());
            let prod = g.mul(out, p);
            let flat = g.reshape(prod, &[1, 80]);
            let col = g.constant(Tensor::filled(&[80, 1], 1.0));
            let s = g.matmul(flat, col);
            let val = g.value(s).data()[0];
            let grads = g.backward(s);
            (val, grads.wrt(x).map(<[f64]>::to_vec))
        };
        let (_, analytic) = objective(&img);
        let analytic = analytic.unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for j in (0..img.len()).step_by(7) {
            let mut p = img.clone();
            p.data_mut()[j] += h;
            let mut m = img.clone();
            m.data_mut()[j] -= h;
            let num = (objective(&p).0 - objective(&m).0) / (2.0 * h);
            let rel = (num - analytic[j]).abs() / num.abs().max(analytic[j].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
