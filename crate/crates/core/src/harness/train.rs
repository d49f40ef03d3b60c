//! The training loop: per-frame graphs built in parallel, gradients reduced
//! in frame order, one AdamW step per batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::augment::augment;
use super::checkpoint::{Checkpoint, CheckpointKind};
use super::config::RunConfig;
use super::evaluate::evaluate;
use super::optim::AdamW;
use super::schedule::{cosine_wr_lr, loss_weight_schedule};
use super::{derive_seed, tag, usable_objects};
use crate::autodiff::Graph;
use crate::data::FrameSample;
use crate::error::{invalid, Error, Result};
use crate::head::VARIANCE_FLOOR;
use crate::mom::{extract_target, scope_rows};
use crate::model::{DistanceModel, ForwardMode};
use crate::par;
use crate::roi::sample_mask;

/// Noisy training targets never go below this.
const MIN_TARGET_M: f64 = 0.1;

/// Per-step inputs shared by all frames of a batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchContext {
    pub epoch: usize,
    pub step: usize,
    pub gnll_weight: f64,
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    /// Gradient per parameter, in store order.
    pub grads: Vec<Vec<f64>>,
    pub total: f64,
    /// Mean reconstruction loss over objects; `None` when the decoder is off.
    pub mom: Option<f64>,
    /// Mean GNLL over objects.
    pub gnll: f64,
    pub n_objects: usize,
    pub skipped_frames: usize,
}

struct FramePass {
    grads: Vec<(usize, Vec<f64>)>,
    total: f64,
    mom_sum: f64,
    gnll_sum: f64,
}

fn frame_pass(
    model: &DistanceModel,
    cfg: &RunConfig,
    frame: &FrameSample,
    frame_index: usize,
    ctx: BatchContext,
    batch_objects: usize,
) -> Result<Option<FramePass>> {
    let root = cfg.seed;
    let fi = frame_index as u64;
    let step = ctx.step as u64;
    let frame = augment(frame, &cfg.augmentation, derive_seed(root, &[tag::AUGMENT, step, fi]));
    let objs = usable_objects(&frame);
    if objs.is_empty() {
        return Ok(None);
    }
    let n_tok = model.config.n_tokens();
    let boxes: Vec<_> = objs.iter().map(|(_, a)| a.bbox).collect();
    let plans = objs
        .iter()
        .enumerate()
        .map(|(k, _)| sample_mask(n_tok, cfg.mask_ratio_train, derive_seed(root, &[tag::MASK, step, fi, k as u64])))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = objs
        .iter()
        .enumerate()
        .map(|(k, (_, a))| {
            let std = cfg.label_noise_std_by_class.get(&a.class_label).copied().unwrap_or(0.0);
            if std == 0.0 {
                return a.distance_m;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root, &[tag::NOISE, step, fi, k as u64]));
            let z: f64 = StandardNormal.sample(&mut rng);
            (a.distance_m + std * z).max(MIN_TARGET_M)
        })
        .collect();

    let mut g = Graph::new();
    let decode = cfg.mom_enabled;
    let vars = model.forward_frame(&mut g, &frame.image, &boxes, &plans, ForwardMode::Train { decode })?;
    let nb = batch_objects as f64;
    let gnll = g.gaussian_nll(vars.raw, &targets, VARIANCE_FLOOR);
    let gnll_sum = g.value(gnll).data()[0];
    let dist_term = g.scale(gnll, ctx.gnll_weight / nb);
    let (root_var, mom_sum) = if decode {
        let mut mom = None;
        for (rec, (bbox, plan)) in vars.reconstructions.iter().zip(boxes.iter().zip(&plans)) {
            let target = extract_target(&frame.image, bbox, model.grid(), model.config.patch_px)?;
            let l = g.masked_mse(*rec, &target.patches, &scope_rows(plan, cfg.mom_scope));
            mom = Some(match mom {
                None => l,
                Some(acc) => g.add(acc, l),
            });
        }
        let mom = mom.expect("at least one object");
        let mom_sum = g.value(mom).data()[0];
        let mom_term = g.scale(mom, cfg.alpha / nb);
        (g.add(mom_term, dist_term), mom_sum)
    } else {
        (dist_term, 0.0)
    };
    let total = g.value(root_var).data()[0];
    if !total.is_finite() {
        return Err(Error::Diverged {
            step: ctx.step as u64,
            message: format!("non-finite loss on frame {}", frame.frame_id),
        });
    }
    let grads = g.backward(root_var);
    Ok(Some(FramePass {
        grads: grads.params().map(|(id, s)| (id.0, s.to_vec())).collect(),
        total,
        mom_sum,
        gnll_sum,
    }))
}

/// Loss and summed parameter gradients of one batch. Frames run under
/// `cfg.exec`; the reduction is always in frame order.
pub fn batch_gradients(
    model: &DistanceModel,
    cfg: &RunConfig,
    frames: &[(usize, &FrameSample)],
    ctx: BatchContext,
) -> Result<BatchResult> {
    let batch_objects: usize = frames.iter().map(|(_, f)| usable_objects(f).len()).sum();
    let mut grads: Vec<Vec<f64>> = model.store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    if batch_objects == 0 {
        return Ok(BatchResult {
            grads,
            total: 0.0,
            mom: None,
            gnll: 0.0,
            n_objects: 0,
            skipped_frames: frames.len(),
        });
    }
    let passes = par::map(cfg.exec, frames, |_, &(fi, f)| frame_pass(model, cfg, f, fi, ctx, batch_objects));
    let (mut total, mut mom, mut gnll, mut skipped) = (0.0, 0.0, 0.0, 0);
    for p in passes {
        match p? {
            None => skipped += 1,
            Some(p) => {
                total += p.total;
                mom += p.mom_sum;
                gnll += p.gnll_sum;
                for (i, gi) in p.grads {
                    for (a, b) in grads[i].iter_mut().zip(&gi) {
                        *a += b;
                    }
                }
            }
        }
    }
    let nb = batch_objects as f64;
    Ok(BatchResult {
        grads,
        total,
        mom: cfg.mom_enabled.then_some(mom / nb),
        gnll: gnll / nb,
        n_objects: batch_objects,
        skipped_frames: skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub mom: Option<f64>,
    pub gnll: f64,
    pub gnll_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss_total: f64,
    pub loss_mom: Option<f64>,
    pub loss_gnll: f64,
    pub gnll_weight: f64,
    pub lr: f64,
    pub skipped_frames: usize,
    pub val_rmse_m: Option<f64>,
    pub val_abs_rel: Option<f64>,
    pub val_delta_1_25: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters with the best validation RMSE (or the last ones if never validated).
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub stopped_early: bool,
}

fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

pub fn train(cfg: &RunConfig, train_frames: &[FrameSample], val_frames: &[FrameSample]) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_frames.is_empty() || val_frames.is_empty() {
        return Err(invalid("training and validation sets must be non-empty"));
    }
    let targets: Vec<f64> = train_frames
        .iter()
        .flat_map(|f| usable_objects(f).into_iter().map(|(_, a)| a.distance_m))
        .collect();
    if targets.is_empty() {
        return Err(invalid("training set has no usable objects"));
    }
    let mut current = Checkpoint::fresh(cfg.clone())?;
    let mut model = current.model.take().expect("fresh model");
    if cfg.init_head_from_targets {
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        model.store.get_mut(model.head.fc2.bias).data_mut()[0] = mean;
    }
    let mut opt = AdamW::new(&model.store, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay);
    let steps_per_epoch = train_frames.len().div_ceil(cfg.batch_size);
    let period = cfg.cosine_period_steps.unwrap_or(10 * steps_per_epoch);
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut step = 0usize;
    let val_seed = derive_seed(cfg.seed, &[tag::VALIDATION]);

    for epoch in 0..cfg.max_epochs {
        if step >= max_steps {
            break;
        }
        let w = loss_weight_schedule(epoch as i64, cfg.dist_loss_delay_epochs as i64, cfg.dist_loss_warmup_epochs as i64)?;
        let mut order: Vec<usize> = (0..train_frames.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag::SHUFFLE, epoch as u64])));
        let (mut sum_total, mut sum_mom, mut sum_gnll, mut n_steps, mut skipped, mut lr) = (0.0, 0.0, 0.0, 0, 0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break;
            }
            let batch: Vec<(usize, &FrameSample)> = chunk.iter().map(|&i| (i, &train_frames[i])).collect();
            let ctx = BatchContext { epoch, step, gnll_weight: w };
            let mut r = batch_gradients(&model, cfg, &batch, ctx)?;
            skipped += r.skipped_frames;
            lr = cosine_wr_lr(step, cfg.learning_rate, cfg.min_learning_rate, period, cfg.cosine_t_mult)?;
            if r.n_objects > 0 {
                if let Some(max) = cfg.grad_clip_norm {
                    clip_gradients(&mut r.grads, max);
                }
                opt.step(&mut model.store, &r.grads, lr)?;
            }
            steps.push(StepRecord {
                step,
                epoch,
                lr,
                total: r.total,
                mom: r.mom,
                gnll: r.gnll,
                gnll_weight: w,
            });
            sum_total += r.total;
            sum_mom += r.mom.unwrap_or(0.0);
            sum_gnll += r.gnll;
            n_steps += 1;
            step += 1;
        }
        let last = epoch + 1 == cfg.max_epochs || step >= max_steps;
        let val = if (epoch + 1) % cfg.validate_every_epochs == 0 || last {
            Some(evaluate(&model, val_frames, cfg.mask_ratio_eval, val_seed, &cfg.metrics, cfg.exec)?.report.metrics)
        } else {
            None
        };
        let n = n_steps.max(1) as f64;
        epochs.push(EpochRecord {
            epoch,
            steps: n_steps,
            loss_total: sum_total / n,
            loss_mom: cfg.mom_enabled.then_some(sum_mom / n),
            loss_gnll: sum_gnll / n,
            gnll_weight: w,
            lr,
            skipped_frames: skipped,
            val_rmse_m: val.as_ref().map(|m| m.rmse_m),
            val_abs_rel: val.as_ref().map(|m| m.abs_rel),
            val_delta_1_25: val.as_ref().and_then(|m| m.delta(1.25)),
        });
        if let Some(v) = val {
            let snapshot = || Checkpoint {
                kind: CheckpointKind::Model,
                config: cfg.clone(),
                epoch: epoch + 1,
                step,
                best_val_rmse: Some(v.rmse_m),
                model: Some(model.clone()),
                optimizer: Some(opt.clone()),
            };
            match &best {
                Some((b, _)) if v.rmse_m >= *b => since_best += cfg.validate_every_epochs,
                _ => {
                    best = Some((v.rmse_m, snapshot()));
                    since_best = 0;
                }
            }
            if let Some(p) = cfg.early_stopping_patience {
                if since_best >= p && !last {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let checkpoint = match best {
        Some((_, ck)) => ck,
        None => Checkpoint {
            kind: CheckpointKind::Model,
            config: cfg.clone(),
            epoch: epochs.len(),
            step,
            best_val_rmse: None,
            model: Some(model),
            optimizer: Some(opt),
        },
    };
    Ok(TrainOutput {
        checkpoint,
        epochs,
        steps,
        stopped_early,
    })
}
