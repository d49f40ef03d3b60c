//! Single-file checkpoints: magic, JSON header, then raw little-endian f64
//! parameters followed by the optimizer moments.
//!
//! All training randomness is derived from the root seed and the step
//! counter, so those two values are the complete RNG state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::evaluate::Predictor;
use super::optim::AdamW;
use super::usable_objects;
use crate::data::{BoundingBox, FrameSample};
use crate::error::{io_err, Error, Result};
use crate::head::{DistancePrediction, VARIANCE_FLOOR};
use crate::model::DistanceModel;
use crate::roi::MaskPlan;

const MAGIC: &[u8; 8] = b"OBJDIST\x01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    /// Predicts the annotated distance of every object; for pipeline checks.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    config: RunConfig,
    epoch: usize,
    step: usize,
    best_val_rmse: Option<f64>,
    params: Vec<ParamEntry>,
    optimizer: Option<AdamW>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: RunConfig,
    /// Epochs completed and optimizer steps taken when the snapshot was made.
    pub epoch: usize,
    pub step: usize,
    pub best_val_rmse: Option<f64>,
    pub model: Option<DistanceModel>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn oracle(config: RunConfig) -> Self {
        Self {
            kind: CheckpointKind::Oracle,
            config,
            epoch: 0,
            step: 0,
            best_val_rmse: None,
            model: None,
            optimizer: None,
        }
    }

    /// Untrained model built from `config`.
    pub fn fresh(config: RunConfig) -> Result<Self> {
        let model = DistanceModel::new(config.model.clone(), super::derive_seed(config.seed, &[super::tag::INIT]))?;
        Ok(Self {
            kind: CheckpointKind::Model,
            config,
            epoch: 0,
            step: 0,
            best_val_rmse: None,
            model: Some(model),
            optimizer: None,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self
            .model
            .iter()
            .flat_map(|m| m.store.iter())
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_rmse: self.best_val_rmse,
            params,
            optimizer: self.optimizer.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        if let Some(m) = &self.model {
            for (_, _, t) in m.store.iter() {
                put(t.data());
            }
            if let Some(opt) = &self.optimizer {
                for xs in opt.m.iter().chain(&opt.v) {
                    put(xs);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut rest = &bytes[16 + hlen..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if rest.len() < n * 8 {
                return Err(bad("truncated parameter data"));
            }
            let (head, tail) = rest.split_at(n * 8);
            rest = tail;
            Ok(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        let (model, optimizer) = match header.kind {
            CheckpointKind::Oracle => (None, None),
            CheckpointKind::Model => {
                let mut model = DistanceModel::new(header.config.model.clone(), 0)?;
                let ids: Vec<_> = model.store.ids().collect();
                if ids.len() != header.params.len() {
                    return Err(bad("parameter count does not match the model configuration"));
                }
                for (&id, entry) in ids.iter().zip(&header.params) {
                    let t = model.store.get(id);
                    if model.store.name(id) != entry.name || t.shape() != entry.shape.as_slice() {
                        return Err(Error::Checkpoint(format!(
                            "parameter {} {:?} does not match the configured {} {:?}",
                            entry.name,
                            entry.shape,
                            model.store.name(id),
                            t.shape()
                        )));
                    }
                    let n = t.len();
                    let data = take(n)?;
                    model.store.get_mut(id).data_mut().copy_from_slice(&data);
                }
                let optimizer = match header.optimizer {
                    Some(mut opt) => {
                        let sizes: Vec<usize> = ids.iter().map(|&i| model.store.get(i).len()).collect();
                        opt.m = sizes.iter().map(|&n| take(n)).collect::<Result<_>>()?;
                        opt.v = sizes.iter().map(|&n| take(n)).collect::<Result<_>>()?;
                        Some(opt)
                    }
                    None => None,
                };
                (Some(model), optimizer)
            }
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes after checkpoint data"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            best_val_rmse: header.best_val_rmse,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }
}

impl Predictor for Checkpoint {
    fn predict(&self, frame: &FrameSample, boxes: &[BoundingBox], plans: &[MaskPlan]) -> Result<Vec<DistancePrediction>> {
        match &self.model {
            Some(m) => m.predict(frame, boxes, plans),
            None => Ok(usable_objects(frame)
                .iter()
                .map(|(_, a)| DistancePrediction {
                    mu: a.distance_m,
                    sigma2: VARIANCE_FLOOR,
                })
                .collect()),
        }
    }

    fn n_tokens(&self) -> usize {
        self.config.model.n_tokens()
    }

    fn flop_proxy(&self, kept_per_object: &[usize]) -> u64 {
        let n = kept_per_object.len() as u64;
        let local: u64 = kept_per_object.iter().map(|&k| (k * k) as u64).sum();
        local * self.config.model.local_depth as u64 + n * n * self.config.model.global_depth as u64
    }
}
