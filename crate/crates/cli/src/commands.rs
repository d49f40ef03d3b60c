use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use objdist::baselines::{GeometricModel, GeometryFeature};
use objdist::data::{generate_synthetic_dataset, write_annotations, FrameSample, SynthConfig};
use objdist::harness::{
    self, apply_override, derive_seed, evaluate, perturbed_evaluate, usable_objects, write_predictions_csv, Checkpoint,
    EpochRecord, RunConfig,
};
use serde::{Deserialize, Serialize};

use crate::output::{self, SweepRow};
use crate::plot::{Chart, Mark, Plotter, Series, PALETTE};
use crate::{BaselineArgs, Common, EvalArgs, Failure, GenerateArgs, ModelSource, PerturbArgs, ReportArgs, SweepArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

/// Seed path for the validation split of `generate`.
const VAL_SPLIT: u64 = 1;

pub fn generate(a: GenerateArgs) -> CmdResult {
    let c = &a.common;
    let mut value = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::usage)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(Failure::usage)?
        }
        None => serde_json::to_value(SynthConfig::default()).map_err(Failure::usage)?,
    };
    for o in &c.overrides {
        apply_override(&mut value, o).map_err(Failure::usage)?;
    }
    let cfg: SynthConfig = serde_json::from_value(value)
        .context("bad synthetic dataset config")
        .map_err(Failure::usage)?;
    let seed = c.seed.unwrap_or(0);
    let train = generate_synthetic_dataset(&cfg, seed).map_err(Failure::usage)?;

    output::prepare_out(&c.out)?;
    let path = write_annotations(&c.out, "train.jsonl", &train)?;
    let mut written = vec![path];
    if a.val_frames > 0 {
        let vcfg = SynthConfig {
            num_frames: a.val_frames,
            ..cfg.clone()
        };
        let val = generate_synthetic_dataset(&vcfg, derive_seed(seed, &[VAL_SPLIT]))?;
        written.push(write_annotations(&c.out, "val.jsonl", &val)?);
    }
    output::write_snapshot(&c.out, "generate", c, &cfg, seed)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    steps: usize,
    stopped_early: bool,
    best_epoch: usize,
    best_val_rmse_m: Option<f64>,
}

pub fn train(a: TrainArgs) -> CmdResult {
    let c = &a.common;
    let cfg = output::run_config(c, None)?;
    let train_frames = output::load_frames(&a.data.data, a.data.format)?;
    let val_frames = match &a.val {
        Some(p) => output::load_frames(p, a.data.format)?,
        None => train_frames.clone(),
    };
    output::prepare_out(&c.out)?;
    output::write_snapshot(&c.out, "train", c, &cfg, cfg.seed)?;

    let out = harness::train(&cfg, &train_frames, &val_frames)?;
    out.checkpoint.save(&c.out.join("model.ckpt"))?;
    output::write_jsonl(&c.out.join("train_log.jsonl"), &out.epochs)?;
    output::write_jsonl(&c.out.join("steps.jsonl"), &out.steps)?;
    let summary = TrainSummary {
        epochs: out.epochs.len(),
        steps: out.steps.len(),
        stopped_early: out.stopped_early,
        best_epoch: out.checkpoint.epoch,
        best_val_rmse_m: out.checkpoint.best_val_rmse,
    };
    output::write_json(&c.out.join("summary.json"), &summary)?;
    println!(
        "trained {} epochs / {} steps; best val RMSE {} m at epoch {}",
        summary.epochs,
        summary.steps,
        summary.best_val_rmse_m.map_or("n/a".to_string(), |r| format!("{r:.4}")),
        summary.best_epoch
    );
    Ok(())
}

/// Loads the predictor and resolves the config on top of its stored one.
fn source(common: &Common, src: &ModelSource) -> Result<(Checkpoint, RunConfig), Failure> {
    if src.oracle {
        let cfg = output::run_config(common, None)?;
        return Ok((Checkpoint::oracle(cfg.clone()), cfg));
    }
    let path = src.checkpoint.as_ref().expect("clap requires a checkpoint");
    let ck = Checkpoint::load(path)?;
    let cfg = output::run_config(common, Some(&ck.config))?;
    Ok((ck, cfg))
}

fn check_mask_ratio(r: f64) -> Result<f64, Failure> {
    if (0.0..1.0).contains(&r) {
        Ok(r)
    } else {
        Err(Failure::usage(anyhow!("mask ratio must lie in [0, 1), got {r}")))
    }
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let c = &a.common;
    let (ck, cfg) = source(c, &a.source)?;
    let ratio = check_mask_ratio(a.mask_ratio.unwrap_or(cfg.mask_ratio_eval))?;
    let frames = output::load_frames(&a.data.data, a.data.format)?;
    output::prepare_out(&c.out)?;
    output::write_snapshot(&c.out, "eval", c, &cfg, cfg.seed)?;
    let out = evaluate(&ck, &frames, ratio, cfg.seed, &cfg.metrics, cfg.exec)?;
    output::write_json(&c.out.join("metrics.json"), &out.report)?;
    write_predictions_csv(&c.out.join("predictions.csv"), &out.objects)?;
    let m = &out.report.metrics;
    println!(
        "{} objects: RMSE {:.4} m, AbsRel {:.4}, d<1.25 {:.2}%",
        m.n_objects,
        m.rmse_m,
        m.abs_rel,
        m.delta(1.25).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn print_rows(key: &str, rows: &[SweepRow]) {
    println!("{key:>10} {:>10} {:>14} {:>10} {:>9}", "tokens", "flop_proxy", "rmse_m", "d<1.25");
    for r in rows {
        let k = if key == "r" { r.r.unwrap_or(f64::NAN) } else { r.mask_ratio };
        println!(
            "{k:>10} {:>10} {:>14} {:>10.4} {:>9.2}",
            r.tokens_processed,
            r.flop_proxy,
            r.rmse_m,
            r.delta_1_25.unwrap_or(f64::NAN)
        );
    }
}

pub fn mask_sweep(a: SweepArgs) -> CmdResult {
    let c = &a.common;
    let (ck, cfg) = source(c, &a.source)?;
    for &r in &a.ratios {
        check_mask_ratio(r)?;
    }
    let frames = output::load_frames(&a.data.data, a.data.format)?;
    output::prepare_out(&c.out)?;
    output::write_snapshot(&c.out, "mask-sweep", c, &cfg, cfg.seed)?;
    let mut reports = Vec::new();
    for &r in &a.ratios {
        reports.push(evaluate(&ck, &frames, r, cfg.seed, &cfg.metrics, cfg.exec)?.report);
    }
    let rows: Vec<SweepRow> = reports.iter().map(|r| SweepRow::new(r, None)).collect();
    output::write_csv(&c.out.join("mask_sweep.csv"), &rows)?;
    output::write_json(&c.out.join("mask_sweep.json"), &reports)?;
    print_rows("mask_ratio", &rows);
    Ok(())
}

pub fn perturb(a: PerturbArgs) -> CmdResult {
    let c = &a.common;
    let (ck, cfg) = source(c, &a.source)?;
    if let Some(bad) = a.r.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Failure::usage(anyhow!("r must lie in (0, 1], got {bad}")));
    }
    let ratio = check_mask_ratio(a.mask_ratio.unwrap_or(cfg.mask_ratio_eval))?;
    let frames = output::load_frames(&a.data.data, a.data.format)?;
    output::prepare_out(&c.out)?;
    output::write_snapshot(&c.out, "perturb", c, &cfg, cfg.seed)?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &r in &a.r {
        let rep = perturbed_evaluate(&ck, &frames, r, ratio, cfg.seed, &cfg.metrics, cfg.exec)?.report;
        rows.push(SweepRow::new(&rep, Some(r)));
        reports.push(rep);
    }
    output::write_csv(&c.out.join("perturb.csv"), &rows)?;
    output::write_json(&c.out.join("perturb.json"), &reports)?;
    print_rows("r", &rows);
    Ok(())
}

pub fn baseline(a: BaselineArgs) -> CmdResult {
    let c = &a.common;
    let cfg = output::run_config(c, None)?;
    let features: Vec<GeometryFeature> = if a.features.is_empty() {
        GeometryFeature::ALL.to_vec()
    } else {
        a.features
            .iter()
            .map(|f| {
                serde_json::from_value(serde_json::Value::String(f.trim().to_string()))
                    .map_err(|_| Failure::usage(anyhow!("unknown geometry feature {f:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    if !(a.ridge >= 0.0 && a.ridge.is_finite()) {
        return Err(Failure::usage(anyhow!("ridge must be a finite non-negative number")));
    }
    let fit_frames = output::load_frames(&a.data.data, a.data.format)?;
    let eval_frames = match &a.eval {
        Some(p) => output::load_frames(p, a.data.format)?,
        None => fit_frames.clone(),
    };
    output::prepare_out(&c.out)?;
    output::write_snapshot(&c.out, "baseline", c, &cfg, cfg.seed)?;
    let model = GeometricModel::fit_frames(&fit_frames, &features, a.ridge)?;
    output::write_json(&c.out.join("geometric_model.json"), &model)?;
    let out = evaluate(&model, &eval_frames, 0.0, cfg.seed, &cfg.metrics, cfg.exec)?;
    output::write_json(&c.out.join("metrics.json"), &out.report)?;
    write_predictions_csv(&c.out.join("predictions.csv"), &out.objects)?;
    println!(
        "geometric baseline on {} objects: RMSE {:.6} m, d<1.25 {:.2}%",
        out.report.metrics.n_objects,
        out.report.metrics.rmse_m,
        out.report.metrics.delta(1.25).unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Deserialize)]
struct PredictionRow {
    frame_id: String,
    object_index: usize,
    target_m: f64,
    predicted_m: f64,
}

pub fn report(a: ReportArgs) -> CmdResult {
    let plotter = Plotter::new(a.font.as_deref()).map_err(Failure::usage)?;
    let frames = match &a.data {
        Some(p) => Some(output::load_frames(p, a.format)?),
        None => None,
    };
    output::prepare_out(&a.out)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let runs = &a.runs;

    if let Some(p) = output::find_in(runs, "train_log.jsonl") {
        let log: Vec<EpochRecord> = output::read_jsonl(&p)?;
        written.extend(loss_plots(&plotter, &a.out, &log)?);
    }
    if let Some(p) = output::find_in(runs, "mask_sweep.csv") {
        let rows: Vec<SweepRow> = output::read_csv(&p)?;
        let pts = rows.iter().map(|r| (r.mask_ratio, r.rmse_m)).collect();
        let path = a.out.join("rmse_vs_mask_ratio.png");
        let chart = Chart { title: "RMSE vs inference mask ratio", x_desc: "mask ratio", y_desc: "RMSE (m)", equal_axes: false };
        plotter.draw(&path, &chart, &[Series::new("RMSE", pts, Mark::LineDots, PALETTE[0])])?;
        written.push(path);
    }
    if let Some(p) = output::find_in(runs, "perturb.csv") {
        let rows: Vec<SweepRow> = output::read_csv(&p)?;
        let pts = rows.iter().filter_map(|r| r.r.map(|x| (x, r.rmse_m))).collect();
        let path = a.out.join("rmse_vs_r.png");
        let chart = Chart { title: "RMSE vs box IoU floor r", x_desc: "r", y_desc: "RMSE (m)", equal_axes: false };
        plotter.draw(&path, &chart, &[Series::new("RMSE", pts, Mark::LineDots, PALETTE[1])])?;
        written.push(path);
    }
    if let Some(p) = output::find_in(runs, "predictions.csv") {
        let rows: Vec<PredictionRow> = output::read_csv(&p)?;
        written.extend(prediction_plots(&plotter, &a.out, &rows, frames.as_deref(), a.frames)?);
    }
    if written.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "no train_log.jsonl, mask_sweep.csv, perturb.csv, or predictions.csv found in the run directories"
        )));
    }
    if !plotter.has_text() {
        eprintln!("warning: no TrueType font found; plots have no text (use --font)");
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn loss_plots(plotter: &Plotter, out: &Path, log: &[EpochRecord]) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if log.is_empty() {
        return Ok(written);
    }
    let ep = |f: fn(&EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        log.iter().filter_map(|e| f(e).map(|v| (e.epoch as f64, v))).collect()
    };
    let mut series = vec![
        Series::new("total", ep(|e| Some(e.loss_total)), Mark::Line, PALETTE[0]),
        Series::new("distance (GNLL)", ep(|e| Some(e.loss_gnll)), Mark::Line, PALETTE[1]),
    ];
    let mom = ep(|e| e.loss_mom);
    if !mom.is_empty() {
        series.push(Series::new("reconstruction", mom, Mark::Line, PALETTE[2]));
    }
    let path = out.join("loss_curves.png");
    let chart = Chart { title: "Training losses", x_desc: "epoch", y_desc: "loss", equal_axes: false };
    plotter.draw(&path, &chart, &series)?;
    written.push(path);

    let val = ep(|e| e.val_rmse_m);
    if !val.is_empty() {
        let path = out.join("val_rmse.png");
        let chart = Chart { title: "Validation RMSE", x_desc: "epoch", y_desc: "RMSE (m)", equal_axes: false };
        plotter.draw(&path, &chart, &[Series::new("val RMSE", val, Mark::LineDots, PALETTE[3])])?;
        written.push(path);
    }
    Ok(written)
}

fn prediction_plots(
    plotter: &Plotter,
    out: &Path,
    rows: &[PredictionRow],
    frames: Option<&[FrameSample]>,
    max_frames: usize,
) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if rows.is_empty() {
        return Ok(written);
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.target_m, r.predicted_m)).collect();
    let hi = pts.iter().map(|p| p.0.max(p.1)).fold(0.0, f64::max);
    let path = out.join("pred_vs_true.png");
    let chart = Chart { title: "Predicted vs true distance", x_desc: "true (m)", y_desc: "predicted (m)", equal_axes: true };
    plotter.draw(
        &path,
        &chart,
        &[
            Series::new("y = x", vec![(0.0, 0.0), (hi, hi)], Mark::Line, PALETTE[5]),
            Series::new("objects", pts, Mark::Dots, PALETTE[0]),
        ],
    )?;
    written.push(path);

    let Some(frames) = frames else {
        return Ok(written);
    };
    let mut by_frame: BTreeMap<&str, HashMap<usize, f64>> = BTreeMap::new();
    for r in rows {
        by_frame.entry(&r.frame_id).or_default().insert(r.object_index, r.predicted_m);
    }
    let mut drawn = 0;
    for f in frames {
        if drawn == max_frames {
            break;
        }
        let Some(preds) = by_frame.get(f.frame_id.as_str()) else { continue };
        let focal = f.camera.focal_px.unwrap_or(f.width() as f64);
        let cx0 = f.width() as f64 / 2.0;
        let (mut truth, mut pred, mut links) = (Vec::new(), Vec::new(), Vec::new());
        for (idx, obj) in usable_objects(f) {
            let Some(&d_hat) = preds.get(&idx) else { continue };
            // place both points on the viewing ray through the box center
            let theta = ((obj.bbox.center().0 - cx0) / focal).atan();
            let (s, c) = theta.sin_cos();
            let t = (obj.distance_m * s, obj.distance_m * c);
            let p = (d_hat * s, d_hat * c);
            truth.push(t);
            pred.push(p);
            links.push(Series::unlabeled(vec![t, p], Mark::Line, PALETTE[5]));
        }
        if truth.is_empty() {
            continue;
        }
        let mut series = links;
        series.push(Series::new("camera", vec![(0.0, 0.0)], Mark::Crosses, PALETTE[5]));
        series.push(Series::new("true", truth, Mark::Dots, PALETTE[2]));
        series.push(Series::new("predicted", pred, Mark::Crosses, PALETTE[1]));
        let path = out.join(format!("bev_{}.png", sanitize(&f.frame_id)));
        let title = format!("Bird's-eye view, frame {}", f.frame_id);
        let chart = Chart { title: &title, x_desc: "lateral (m)", y_desc: "forward (m)", equal_axes: true };
        plotter.draw(&path, &chart, &series)?;
        written.push(path);
        drawn += 1;
    }
    Ok(written)
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
