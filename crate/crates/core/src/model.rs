//! The full per-frame network: context encoder, per-object tokens, local
//! encoder, reconstruction decoder, global encoder, and distance head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{BackboneConfig, ContextEncoder};
use crate::data::{build_centers_heatmap, BoundingBox};
use crate::error::{invalid, Error, Result};
use crate::head::{DistanceHead, DistancePrediction, GlobalEncoder};
use crate::mom::{LocalEncoder, MaskPlacement, MomDecoder};
use crate::nn::ParamStore;
use crate::roi::{MaskPlan, RoiSampling, DEFAULT_GRID, DEFAULT_SAMPLES_PER_BIN};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Side of the square RoI token grid.
    pub grid: usize,
    pub samples_per_bin: usize,
    pub d_model: usize,
    pub local_depth: usize,
    pub local_heads: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub global_depth: usize,
    pub global_heads: usize,
    pub mlp_ratio: usize,
    /// Reconstruction patch side in pixels per token.
    pub patch_px: usize,
    pub mask_placement: MaskPlacement,
    /// Initial bias of the mean output, in meters.
    pub head_mu_init_m: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            grid: DEFAULT_GRID,
            samples_per_bin: DEFAULT_SAMPLES_PER_BIN,
            d_model: 64,
            local_depth: 2,
            local_heads: 4,
            decoder_depth: 2,
            decoder_heads: 8,
            global_depth: 2,
            global_heads: 8,
            mlp_ratio: 4,
            patch_px: 4,
            mask_placement: MaskPlacement::BeforeEncoder,
            head_mu_init_m: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn n_tokens(&self) -> usize {
        self.grid * self.grid
    }

    fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if d == 0 || self.grid == 0 || self.patch_px == 0 || self.samples_per_bin == 0 || self.mlp_ratio == 0 {
            return Err(invalid("model sizes must be positive"));
        }
        for (name, heads) in [
            ("local", self.local_heads),
            ("decoder", self.decoder_heads),
            ("global", self.global_heads),
        ] {
            if heads == 0 || !d.is_multiple_of(heads) {
                return Err(invalid(format!("{name} heads {heads} must divide d_model {d}")));
            }
        }
        if self.local_depth == 0 || self.global_depth == 0 {
            return Err(invalid("encoder depths must be at least 1"));
        }
        Ok(())
    }
}

/// Whether a forward pass is for training (optionally decoding) or inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train { decode: bool },
    Eval,
}

/// Graph handles produced by one frame's forward pass.
pub struct FrameVars {
    /// Raw head outputs `[n_objects, 2]`.
    pub raw: Var,
    /// Per-object reconstructions `[n_tokens, p*p*3]`, empty when not decoding.
    pub reconstructions: Vec<Var>,
    pub feature_map: Var,
}

#[derive(Clone, Debug)]
pub struct DistanceModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: ContextEncoder,
    pub local: LocalEncoder,
    pub decoder: MomDecoder,
    pub global: GlobalEncoder,
    pub head: DistanceHead,
}

impl DistanceModel {
    /// Builds a freshly initialized model; the parameter layout depends only on `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = ContextEncoder::new(config.backbone.clone(), &mut store, &mut rng)?;
        let d = config.d_model;
        let grid = (config.grid, config.grid);
        let local = LocalEncoder::new(
            &mut store,
            &mut rng,
            backbone.out_channels(),
            d,
            grid,
            config.local_depth,
            config.local_heads,
            config.mlp_ratio,
        );
        let decoder = MomDecoder::new(
            &mut store,
            &mut rng,
            d,
            config.decoder_depth,
            config.decoder_heads,
            config.mlp_ratio,
            config.patch_px,
        );
        let global = GlobalEncoder::new(&mut store, &mut rng, d, config.global_depth, config.global_heads, config.mlp_ratio);
        let head = DistanceHead::new(&mut store, &mut rng, d, config.head_mu_init_m);
        Ok(Self {
            config,
            store,
            backbone,
            local,
            decoder,
            global,
            head,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.config.grid, self.config.grid)
    }

    /// Builds the whole frame graph. `plans[i]` is the mask of object `i`.
    pub fn forward_frame(
        &self,
        g: &mut Graph,
        image: &Tensor,
        boxes: &[BoundingBox],
        plans: &[MaskPlan],
        mode: ForwardMode,
    ) -> Result<FrameVars> {
        if boxes.is_empty() {
            return Err(invalid("frame has no objects"));
        }
        if boxes.len() != plans.len() {
            return Err(Error::Shape(format!("{} boxes but {} mask plans", boxes.len(), plans.len())));
        }
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("image must be [3, H, W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let img = g.constant(image.clone());
        let heat = if self.config.backbone.use_heatmap {
            let hm = build_centers_heatmap(boxes, h, w, self.config.backbone.heatmap_sigma_px)?;
            Some(g.constant(hm.values))
        } else {
            None
        };
        let fm = self.backbone.forward(g, &self.store, img, heat)?;
        let fs = g.value(fm).shape().to_vec();
        let n_tok = self.config.n_tokens();
        let after = matches!(mode, ForwardMode::Train { .. }) && self.config.mask_placement == MaskPlacement::AfterEncoder;
        let decode = matches!(mode, ForwardMode::Train { decode: true });
        let all: Vec<usize> = (0..n_tok).collect();
        let mut pooled = Vec::with_capacity(boxes.len());
        let mut reconstructions = Vec::new();
        for (bbox, plan) in boxes.iter().zip(plans) {
            if plan.n_tokens() != n_tok {
                return Err(Error::Shape(format!("mask plan has {} tokens, grid has {n_tok}", plan.n_tokens())));
            }
            let kept = plan.kept_indices();
            if kept.is_empty() {
                return Err(invalid("mask plan keeps no tokens"));
            }
            let sampling = RoiSampling::new(
                bbox,
                w,
                h,
                fs[1],
                fs[2],
                self.backbone.stride(),
                self.grid(),
                self.config.samples_per_bin,
            )?;
            let tokens = g.roi_tokens(fm, sampling);
            let (pool_src, dec_in) = if after {
                let enc = self.local.forward(g, &self.store, tokens, &all);
                let dec_in = g.gather_rows(enc, &kept);
                (enc, dec_in)
            } else {
                let enc = self.local.forward(g, &self.store, tokens, &kept);
                (enc, enc)
            };
            pooled.push(g.mean_rows(pool_src));
            if decode {
                reconstructions.push(self.decoder.forward(g, &self.store, self.local.pos_emb, dec_in, &plan.kept));
            }
        }
        let objects = g.concat_rows(&pooled);
        let glob = self.global.forward(g, &self.store, objects);
        let raw = self.head.forward(g, &self.store, glob);
        Ok(FrameVars {
            raw,
            reconstructions,
            feature_map: fm,
        })
    }

    /// Inference over one frame with the given per-object masks.
    pub fn predict_frame(&self, image: &Tensor, boxes: &[BoundingBox], plans: &[MaskPlan]) -> Result<Vec<DistancePrediction>> {
        let mut g = Graph::new();
        let vars = self.forward_frame(&mut g, image, boxes, plans, ForwardMode::Eval)?;
        let raw = g.value(vars.raw);
        Ok((0..raw.rows()).map(|i| DistancePrediction::from_raw(raw.row(i)[0], raw.row(i)[1])).collect())
    }

    /// Token-pair attention count for one frame: local pairs per object plus
    /// global pairs across objects, each times the stack depth.
    pub fn flop_proxy(&self, kept_per_object: &[usize]) -> u64 {
        let local: u64 = kept_per_object.iter().map(|&k| (k * k) as u64).sum();
        let n = kept_per_object.len() as u64;
        local * self.config.local_depth as u64 + n * n * self.config.global_depth as u64
    }
}
