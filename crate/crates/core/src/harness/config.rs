//! Run configuration and `key=value` overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::augment::AugmentConfig;
use crate::error::{invalid, io_err, Error, Result};
use crate::metrics::MetricsConfig;
use crate::model::ModelConfig;
use crate::mom::MomScope;
use crate::par::Exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Weight of the reconstruction loss.
    pub alpha: f64,
    /// When false the decoder is never run; masks are still sampled.
    pub mom_enabled: bool,
    pub mom_scope: MomScope,
    pub mask_ratio_train: f64,
    pub mask_ratio_eval: f64,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Frames per optimizer step.
    pub batch_size: usize,
    /// First warm-restart period in steps; defaults to ten epochs.
    pub cosine_period_steps: Option<usize>,
    pub cosine_t_mult: f64,
    pub dist_loss_delay_epochs: usize,
    pub dist_loss_warmup_epochs: usize,
    pub augmentation: AugmentConfig,
    pub max_epochs: usize,
    pub max_steps: Option<usize>,
    /// Stop after this many epochs without a better validation RMSE.
    pub early_stopping_patience: Option<usize>,
    pub validate_every_epochs: usize,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Gaussian noise (meters) added to training targets per class, redrawn every step.
    pub label_noise_std_by_class: BTreeMap<String, f64>,
    /// Start the mean output at the mean training distance.
    pub init_head_from_targets: bool,
    pub metrics: MetricsConfig,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            alpha: 10.0,
            mom_enabled: true,
            mom_scope: MomScope::AllTokens,
            mask_ratio_train: 0.5,
            mask_ratio_eval: 0.0,
            learning_rate: 1e-4,
            min_learning_rate: 0.0,
            weight_decay: 1e-5,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            batch_size: 2,
            cosine_period_steps: None,
            cosine_t_mult: 2.0,
            dist_loss_delay_epochs: 0,
            dist_loss_warmup_epochs: 11,
            augmentation: AugmentConfig::default(),
            max_epochs: 100,
            max_steps: None,
            early_stopping_patience: Some(10),
            validate_every_epochs: 1,
            grad_clip_norm: None,
            seed: 0,
            label_noise_std_by_class: BTreeMap::new(),
            init_head_from_targets: true,
            metrics: MetricsConfig::default(),
            exec: Exec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(invalid(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        for (name, r) in [("mask_ratio_train", self.mask_ratio_train), ("mask_ratio_eval", self.mask_ratio_eval)] {
            if !(0.0..1.0).contains(&r) {
                return Err(invalid(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate >= 0.0) || self.min_learning_rate > self.learning_rate {
            return Err(invalid("learning rates must satisfy 0 <= min_learning_rate <= learning_rate, learning_rate > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay must be non-negative"));
        }
        if !(self.cosine_t_mult >= 1.0) || self.cosine_period_steps == Some(0) {
            return Err(invalid("cosine schedule needs a positive period and t_mult >= 1"));
        }
        if self.validate_every_epochs == 0 {
            return Err(invalid("validate_every_epochs must be at least 1"));
        }
        if self.label_noise_std_by_class.values().any(|s| !(*s >= 0.0)) {
            return Err(invalid("label noise must be non-negative"));
        }
        Ok(())
    }

    /// Reads a JSON config file (or defaults when `path` is `None`) and
    /// applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    line: e.line(),
                    message: e.to_string(),
                })?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| invalid(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets a dotted path like `model.d_model=32`. The value is parsed as JSON
/// when possible and taken as a string otherwise. Missing objects along the
/// path are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(invalid(format!("override {assignment:?} has an empty key")));
    }
    let parsed = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(invalid(format!("override {key}: {} is not an object", parts[..i].join("."))));
            }
        }
        let map = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split always yields a part")
}
