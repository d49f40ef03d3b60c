//! Inference over frames, with optional elastic masking and box perturbation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{derive_seed, tag, usable_objects};
use crate::data::{perturb_box, FrameSample};
use crate::error::{invalid, io_err, Error, Result};
use crate::head::DistancePrediction;
use crate::metrics::{compute_report, EvalPair, MetricsConfig, MetricsReport};
use crate::model::DistanceModel;
use crate::par::{self, Exec};
use crate::roi::{sample_mask, MaskPlan};
use crate::baselines::GeometricModel;
use crate::data::BoundingBox;

/// Predicted distances below this are raised to it before scoring.
pub const MIN_PREDICTION_M: f64 = 0.1;

/// Anything that maps a frame and its boxes to per-object distances.
pub trait Predictor: Sync {
    /// `boxes[i]` belongs to the usable object `i` of `frame`.
    fn predict(&self, frame: &FrameSample, boxes: &[BoundingBox], plans: &[MaskPlan]) -> Result<Vec<DistancePrediction>>;
    fn n_tokens(&self) -> usize;
    fn flop_proxy(&self, kept_per_object: &[usize]) -> u64;
}

impl Predictor for DistanceModel {
    fn predict(&self, frame: &FrameSample, boxes: &[BoundingBox], plans: &[MaskPlan]) -> Result<Vec<DistancePrediction>> {
        self.predict_frame(&frame.image, boxes, plans)
    }

    fn n_tokens(&self) -> usize {
        self.config.n_tokens()
    }

    fn flop_proxy(&self, kept_per_object: &[usize]) -> u64 {
        DistanceModel::flop_proxy(self, kept_per_object)
    }
}

/// The box-geometry regressor has no tokens and no variance estimate, so it
/// reports one token per object, zero attention cost, and `sigma2 = 0`.
impl Predictor for GeometricModel {
    fn predict(&self, frame: &FrameSample, boxes: &[BoundingBox], _plans: &[MaskPlan]) -> Result<Vec<DistancePrediction>> {
        let objs = usable_objects(frame);
        objs.iter()
            .zip(boxes)
            .map(|((_, a), b)| {
                let x = self.features_for(b, (frame.width(), frame.height()), &a.class_label)?;
                Ok(DistancePrediction { mu: self.predict(&x)?, sigma2: 0.0 })
            })
            .collect()
    }

    fn n_tokens(&self) -> usize {
        1
    }

    fn flop_proxy(&self, _kept_per_object: &[usize]) -> u64 {
        0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrediction {
    pub frame_id: String,
    /// Index into the frame's annotation list.
    pub object_index: usize,
    pub class_label: String,
    pub target_m: f64,
    pub predicted_m: f64,
    pub sigma2: f64,
    pub occlusion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub mask_ratio: f64,
    pub seed: u64,
    pub n_frames: usize,
    /// Tokens entering the local encoder, summed over objects.
    pub tokens_processed: u64,
    pub flop_proxy: u64,
    pub mean_sigma2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub objects: Vec<ObjectPrediction>,
}

struct FrameEval {
    objects: Vec<ObjectPrediction>,
    kept: Vec<usize>,
    flops: u64,
}

fn evaluate_inner(
    predictor: &dyn Predictor,
    frames: &[FrameSample],
    mask_ratio: f64,
    seed: u64,
    iou_floor: Option<f64>,
    metrics: &MetricsConfig,
    exec: Exec,
) -> Result<EvalOutput> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(invalid(format!("mask ratio must lie in [0, 1), got {mask_ratio}")));
    }
    if let Some(r) = iou_floor {
        if !(r > 0.0 && r <= 1.0) {
            return Err(invalid(format!("IoU floor must lie in (0, 1], got {r}")));
        }
    }
    let n_tok = predictor.n_tokens();
    let per_frame = par::map(exec, frames, |fi, frame| -> Result<Option<FrameEval>> {
        let objs = usable_objects(frame);
        if objs.is_empty() {
            return Ok(None);
        }
        let (w, h) = (frame.width() as f64, frame.height() as f64);
        let mut boxes = Vec::with_capacity(objs.len());
        let mut plans = Vec::with_capacity(objs.len());
        for (k, (_, a)) in objs.iter().enumerate() {
            let parts = [fi as u64, k as u64];
            let b = match iou_floor {
                Some(r) => {
                    let p = perturb_box(&a.bbox, r, derive_seed(seed, &[tag::PERTURB, parts[0], parts[1]]))?;
                    if p.clamp_to(w, h).is_some() {
                        p
                    } else {
                        a.bbox
                    }
                }
                None => a.bbox,
            };
            boxes.push(b);
            plans.push(if mask_ratio == 0.0 {
                MaskPlan::keep_all(n_tok)
            } else {
                sample_mask(n_tok, mask_ratio, derive_seed(seed, &[tag::EVAL_MASK, parts[0], parts[1]]))?
            });
        }
        let preds = predictor.predict(frame, &boxes, &plans)?;
        if preds.len() != objs.len() {
            return Err(Error::Shape(format!(
                "predictor returned {} outputs for {} objects",
                preds.len(),
                objs.len()
            )));
        }
        let kept: Vec<usize> = plans.iter().map(MaskPlan::n_kept).collect();
        let flops = predictor.flop_proxy(&kept);
        let objects = objs
            .iter()
            .zip(&preds)
            .map(|((idx, a), p)| ObjectPrediction {
                frame_id: frame.frame_id.clone(),
                object_index: *idx,
                class_label: a.class_label.clone(),
                target_m: a.distance_m,
                predicted_m: if p.mu.is_nan() { MIN_PREDICTION_M } else { p.mu.max(MIN_PREDICTION_M) },
                sigma2: p.sigma2,
                occlusion: a.occlusion,
            })
            .collect();
        Ok(Some(FrameEval { objects, kept, flops }))
    });
    let mut objects = Vec::new();
    let (mut tokens, mut flops, mut n_frames) = (0u64, 0u64, 0usize);
    for r in per_frame {
        if let Some(fe) = r? {
            tokens += fe.kept.iter().map(|&k| k as u64).sum::<u64>();
            flops += fe.flops;
            n_frames += 1;
            objects.extend(fe.objects);
        }
    }
    if objects.is_empty() {
        return Err(invalid("no usable objects to evaluate"));
    }
    let pairs: Vec<EvalPair> = objects
        .iter()
        .map(|o| EvalPair::new(o.predicted_m, o.target_m, o.occlusion))
        .collect();
    let report = EvalReport {
        metrics: compute_report(&pairs, metrics)?,
        mask_ratio,
        seed,
        n_frames,
        tokens_processed: tokens,
        flop_proxy: flops,
        mean_sigma2: objects.iter().map(|o| o.sigma2).sum::<f64>() / objects.len() as f64,
    };
    Ok(EvalOutput { report, objects })
}

/// Scores `predictor` on every usable object. With `mask_ratio > 0` each
/// object keeps `n - floor(ratio * n)` tokens.
pub fn evaluate(
    predictor: &dyn Predictor,
    frames: &[FrameSample],
    mask_ratio: f64,
    seed: u64,
    metrics: &MetricsConfig,
    exec: Exec,
) -> Result<EvalOutput> {
    evaluate_inner(predictor, frames, mask_ratio, seed, None, metrics, exec)
}

/// As [`evaluate`], with every box replaced by a random box of IoU at least `r`.
pub fn perturbed_evaluate(
    predictor: &dyn Predictor,
    frames: &[FrameSample],
    r: f64,
    mask_ratio: f64,
    seed: u64,
    metrics: &MetricsConfig,
    exec: Exec,
) -> Result<EvalOutput> {
    evaluate_inner(predictor, frames, mask_ratio, seed, Some(r), metrics, exec)
}

/// One row per object: frame_id, object_index, target_m, predicted_m, sigma2, occlusion.
pub fn write_predictions_csv(path: &Path, objects: &[ObjectPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["frame_id", "object_index", "target_m", "predicted_m", "sigma2", "occlusion"])
        .map_err(|e| csv_err(path, e))?;
    for o in objects {
        w.write_record([
            o.frame_id.clone(),
            o.object_index.to_string(),
            o.target_m.to_string(),
            o.predicted_m.to_string(),
            o.sigma2.to_string(),
            o.occlusion.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path)(io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}
