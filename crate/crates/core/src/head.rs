//! Object pooling, the global encoder across objects, the Gaussian distance
//! head, and the training objective.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::mom::EncodedTokens;
use crate::model::DistanceModel;
use crate::nn::{Linear, ParamStore, TransformerStack};
use crate::tensor::Tensor;

/// Added to `softplus(s)` so the predicted variance is never zero.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectEmbedding {
    pub vector: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistancePrediction {
    pub mu: f64,
    pub sigma2: f64,
}

impl DistancePrediction {
    /// Reads `(m, s)` head outputs.
    pub fn from_raw(m: f64, s: f64) -> Self {
        Self {
            mu: m,
            sigma2: softplus(s) + VARIANCE_FLOOR,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GlobalEncoder {
    pub stack: TransformerStack,
}

impl GlobalEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, depth: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            stack: TransformerStack::new(store, rng, "global", d, depth, heads, mlp_ratio),
        }
    }

    /// `x[n_objects, d]`; no positional encoding, so the map is permutation equivariant.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        self.stack.forward(g, store, x)
    }
}

#[derive(Clone, Debug)]
pub struct DistanceHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DistanceHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, mu_bias: f64) -> Self {
        let fc1 = Linear::new(store, rng, "head.fc1", d, d);
        let fc2 = Linear::new(store, rng, "head.fc2", d, 2);
        store.get_mut(fc2.bias).data_mut()[0] = mu_bias;
        Self { fc1, fc2 }
    }

    /// Raw `(m, s)` rows `[n, 2]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Channel-wise mean over the encoded tokens.
pub fn pool_object(encoded: &EncodedTokens) -> Result<ObjectEmbedding> {
    let t = &encoded.tokens;
    if t.rows() == 0 {
        return Err(invalid("cannot pool an empty token set"));
    }
    let d = t.cols();
    let mut v = vec![0.0; d];
    for r in 0..t.rows() {
        for (acc, x) in v.iter_mut().zip(t.row(r)) {
            *acc += x;
        }
    }
    let n = t.rows() as f64;
    v.iter_mut().for_each(|x| *x /= n);
    Ok(ObjectEmbedding { vector: v })
}

fn stack_embeddings(embeddings: &[ObjectEmbedding], d: usize) -> Result<Tensor> {
    if embeddings.is_empty() {
        return Err(invalid("global encoder needs at least one object"));
    }
    let mut data = Vec::with_capacity(embeddings.len() * d);
    for e in embeddings {
        if e.vector.len() != d {
            return Err(Error::Shape(format!("embedding of length {} where {d} expected", e.vector.len())));
        }
        data.extend_from_slice(&e.vector);
    }
    Ok(Tensor::new(vec![embeddings.len(), d], data))
}

impl DistanceModel {
    pub fn global_encode(&self, embeddings: &[ObjectEmbedding]) -> Result<Vec<ObjectEmbedding>> {
        let x = stack_embeddings(embeddings, self.config.d_model)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.global.forward(&mut g, &self.store, xv);
        let out = g.value(out);
        Ok((0..out.rows()).map(|r| ObjectEmbedding { vector: out.row(r).to_vec() }).collect())
    }

    pub fn predict_distance(&self, embedding: &ObjectEmbedding) -> Result<DistancePrediction> {
        let x = stack_embeddings(std::slice::from_ref(embedding), self.config.d_model)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let raw = self.head.forward(&mut g, &self.store, xv);
        let r = g.value(raw).row(0);
        Ok(DistancePrediction::from_raw(r[0], r[1]))
    }
}

/// Per-object `0.5 (ln sigma2 + (d - mu)^2 / sigma2)`, constant term omitted.
pub fn gnll(pred: &DistancePrediction, target_m: f64) -> Result<f64> {
    if !(pred.sigma2 > 0.0) {
        return Err(invalid(format!("variance must be positive, got {}", pred.sigma2)));
    }
    if !(target_m > 0.0) {
        return Err(invalid(format!("target distance must be positive, got {target_m}")));
    }
    let e = target_m - pred.mu;
    Ok(0.5 * (pred.sigma2.ln() + e * e / pred.sigma2))
}

/// Mean of [`gnll`] over objects.
pub fn gnll_loss(preds: &[DistancePrediction], targets_m: &[f64]) -> Result<f64> {
    if preds.len() != targets_m.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", preds.len(), targets_m.len())));
    }
    if preds.is_empty() {
        return Err(invalid("GNLL over zero objects"));
    }
    let mut sum = 0.0;
    for (p, &t) in preds.iter().zip(targets_m) {
        sum += gnll(p, t)?;
    }
    Ok(sum / preds.len() as f64)
}

/// `alpha * l_mom + gnll_weight * l_gnll`.
pub fn total_loss(l_mom: f64, l_gnll: f64, alpha: f64, gnll_weight: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(invalid(format!("MoM weight must be non-negative, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&gnll_weight) {
        return Err(invalid(format!("GNLL weight must lie in [0, 1], got {gnll_weight}")));
    }
    Ok(alpha * l_mom + gnll_weight * l_gnll)
}
