//! Masked object modeling: the local encoder over kept tokens, the
//! reconstruction decoder, pixel targets, and the reconstruction loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::BoundingBox;
use crate::error::{invalid, Error, Result};
use crate::model::DistanceModel;
use crate::nn::{uniform, Linear, ParamId, ParamStore, TransformerStack};
use crate::roi::{MaskPlan, TokenSet};
use crate::tensor::Tensor;

/// Which reconstruction entries enter the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomScope {
    #[default]
    AllTokens,
    MaskedOnly,
}

/// Where the training mask is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPlacement {
    /// Only kept tokens enter the local encoder; pooling sees kept tokens.
    #[default]
    BeforeEncoder,
    /// All tokens are encoded and pooled; the decoder sees the kept encodings.
    AfterEncoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTokens {
    /// `[n_kept, d_model]`
    pub tokens: Tensor,
    pub kept_positions: Vec<(usize, usize)>,
}

/// Per-token RGB patches `[h*w, p*p*3]`, entry order `(row, col, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTarget {
    pub patches: Tensor,
    pub patch_px: usize,
    pub grid: (usize, usize),
}

impl PatchTarget {
    /// Reassembles the patches into a `[3, h*p, w*p]` image.
    pub fn to_image(&self) -> Tensor {
        let p = self.patch_px;
        let (gh, gw) = self.grid;
        let (ih, iw) = (gh * p, gw * p);
        let mut img = vec![0.0; 3 * ih * iw];
        for r in 0..gh {
            for c in 0..gw {
                let patch = self.patches.row(r * gw + c);
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..3 {
                            img[(ch * ih + r * p + py) * iw + c * p + px] = patch[(py * p + px) * 3 + ch];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![3, ih, iw], img)
    }
}

#[derive(Clone, Debug)]
pub struct LocalEncoder {
    pub token_proj: Linear,
    /// Learned per-cell positional embedding `[h*w, d]`, shared with the decoder.
    pub pos_emb: ParamId,
    pub stack: TransformerStack,
    pub grid: (usize, usize),
}

impl LocalEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        d: usize,
        grid: (usize, usize),
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            token_proj: Linear::new(store, rng, "local.token_proj", c_in, d),
            pos_emb: store.add("local.pos_emb", uniform(rng, &[grid.0 * grid.1, d], 0.05)),
            stack: TransformerStack::new(store, rng, "local", d, depth, heads, mlp_ratio),
            grid,
        }
    }

    /// Encodes the rows `kept` of `tokens[n, c]`; output rows follow `kept`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, kept: &[usize]) -> Var {
        let x = g.gather_rows(tokens, kept);
        let x = self.token_proj.forward(g, store, x);
        let pos = g.param(store, self.pos_emb);
        let pos = g.gather_rows(pos, kept);
        let x = g.add(x, pos);
        self.stack.forward(g, store, x)
    }
}

#[derive(Clone, Debug)]
pub struct MomDecoder {
    pub mask_token: ParamId,
    pub stack: TransformerStack,
    pub out: Linear,
    pub patch_px: usize,
}

impl MomDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        patch_px: usize,
    ) -> Self {
        Self {
            mask_token: store.add("decoder.mask_token", uniform(rng, &[1, d], 0.05)),
            stack: TransformerStack::new(store, rng, "decoder", d, depth, heads, mlp_ratio),
            out: Linear::new(store, rng, "decoder.out", d, patch_px * patch_px * 3),
            patch_px,
        }
    }

    /// Full-length reconstruction `[n, p*p*3]` from the kept encodings.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pos_emb: ParamId, encoded: Var, kept_mask: &[bool]) -> Var {
        let token = g.param(store, self.mask_token);
        let full = g.fill_masked(encoded, token, kept_mask);
        let pos = g.param(store, pos_emb);
        let x = g.add(full, pos);
        let x = self.stack.forward(g, store, x);
        self.out.forward(g, store, x)
    }
}

impl DistanceModel {
    /// Runs the local encoder over the kept tokens of one object.
    pub fn local_encode(&self, tokens: &TokenSet, plan: &MaskPlan) -> Result<EncodedTokens> {
        if plan.n_tokens() != tokens.tokens.rows() {
            return Err(Error::Shape(format!(
                "plan covers {} tokens, object has {}",
                plan.n_tokens(),
                tokens.tokens.rows()
            )));
        }
        let kept = plan.kept_indices();
        if kept.is_empty() {
            return Err(invalid("mask plan keeps no tokens"));
        }
        let mut g = Graph::new();
        let t = g.constant(tokens.tokens.clone());
        let out = self.local.forward(&mut g, &self.store, t, &kept);
        Ok(EncodedTokens {
            tokens: g.value(out).clone(),
            kept_positions: kept.iter().map(|&i| tokens.grid_positions[i]).collect(),
        })
    }

    /// Decoder prediction `[n_tokens, p*p*3]` for one object.
    pub fn reconstruct(&self, encoded: &EncodedTokens, plan: &MaskPlan) -> Result<Tensor> {
        let (gh, gw) = self.local.grid;
        if plan.n_tokens() != gh * gw {
            return Err(Error::Shape(format!("plan has {} tokens, grid has {}", plan.n_tokens(), gh * gw)));
        }
        let expected: Vec<(usize, usize)> = plan.kept_indices().iter().map(|&i| (i / gw, i % gw)).collect();
        if expected != encoded.kept_positions || encoded.tokens.rows() != expected.len() {
            return Err(Error::Shape("encoded tokens do not match the mask plan".into()));
        }
        let mut g = Graph::new();
        let e = g.constant(encoded.tokens.clone());
        let out = self.decoder.forward(&mut g, &self.store, self.local.pos_emb, e, &plan.kept);
        Ok(g.value(out).clone())
    }
}

/// Samples `image[3, H, W]` bilinearly over the clamped box into
/// `(gh*p) x (gw*p)` pixels and splits it row-major into patches.
pub fn extract_target(image: &Tensor, bbox: &BoundingBox, grid: (usize, usize), patch_px: usize) -> Result<PatchTarget> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("image must be [3, H, W], got {s:?}")));
    }
    if patch_px == 0 || grid.0 == 0 || grid.1 == 0 {
        return Err(invalid("patch size and grid must be positive"));
    }
    let (h, w) = (s[1], s[2]);
    let b = bbox
        .clamp_to(w as f64, h as f64)
        .filter(|_| bbox.w > 0.0 && bbox.h > 0.0)
        .ok_or_else(|| invalid(format!("box {bbox:?} has no area inside the image")))?;
    let (oh, ow) = (grid.0 * patch_px, grid.1 * patch_px);
    let axis = |start: f64, len: f64, out: usize, i: usize, size: usize| -> (usize, usize, f64) {
        let u = (start + (i as f64 + 0.5) * len / out as f64 - 0.5).clamp(0.0, (size - 1) as f64);
        let lo = u.floor() as usize;
        (lo, (lo + 1).min(size - 1), u - lo as f64)
    };
    let n_tok = grid.0 * grid.1;
    let k = patch_px * patch_px * 3;
    let mut patches = vec![0.0; n_tok * k];
    for oy in 0..oh {
        let (y0, y1, ly) = axis(b.y, b.h, oh, oy, h);
        for ox in 0..ow {
            let (x0, x1, lx) = axis(b.x, b.w, ow, ox, w);
            let tok = (oy / patch_px) * grid.1 + ox / patch_px;
            let (py, px) = (oy % patch_px, ox % patch_px);
            for ch in 0..3 {
                let v = (1.0 - ly) * ((1.0 - lx) * image.at3(ch, y0, x0) + lx * image.at3(ch, y0, x1))
                    + ly * ((1.0 - lx) * image.at3(ch, y1, x0) + lx * image.at3(ch, y1, x1));
                patches[tok * k + (py * patch_px + px) * 3 + ch] = v;
            }
        }
    }
    Ok(PatchTarget {
        patches: Tensor::new(vec![n_tok, k], patches),
        patch_px,
        grid,
    })
}

/// Row selection implied by `scope` for one object's plan.
pub fn scope_rows(plan: &MaskPlan, scope: MomScope) -> Vec<bool> {
    match scope {
        MomScope::AllTokens => vec![true; plan.n_tokens()],
        MomScope::MaskedOnly => plan.kept.iter().map(|k| !k).collect(),
    }
}

/// Mean over objects of the per-object mean squared error on scoped entries.
pub fn mom_loss(predictions: &[Tensor], targets: &[PatchTarget], plans: &[MaskPlan], scope: MomScope) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.len() != plans.len() {
        return Err(Error::Shape("predictions, targets, and plans differ in length".into()));
    }
    if predictions.is_empty() {
        return Err(invalid("MoM loss over zero objects"));
    }
    let mut total = 0.0;
    for ((p, t), plan) in predictions.iter().zip(targets).zip(plans) {
        if p.shape() != t.patches.shape() || plan.n_tokens() != p.rows() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                p.shape(),
                t.patches.shape()
            )));
        }
        let rows = scope_rows(plan, scope);
        let k = p.cols();
        let mut sum = 0.0;
        let mut count = 0;
        for (r, sel) in rows.iter().enumerate() {
            if *sel {
                sum += p.row(r).iter().zip(t.patches.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                count += k;
            }
        }
        total += if count == 0 { 0.0 } else { sum / count as f64 };
    }
    Ok(total / predictions.len() as f64)
}
