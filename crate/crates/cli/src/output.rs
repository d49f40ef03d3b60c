use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use objdist::data::{filter_annotations, read_annotations, AnnotationFormat, FilterPolicy, FrameSample};
use objdist::harness::{apply_override, EvalReport, RunConfig};
use serde::{Deserialize, Serialize};

use crate::{Common, Failure, Format};

/// Config file overrides in application order, with `--seed` last.
pub fn overrides(common: &Common) -> Vec<String> {
    let mut all = common.overrides.clone();
    if let Some(s) = common.seed {
        all.push(format!("seed={s}"));
    }
    all
}

/// Resolves the run config. Without `--config`, `base` (e.g. the config
/// stored in a checkpoint) is the starting point, then the defaults.
pub fn run_config(common: &Common, base: Option<&RunConfig>) -> Result<RunConfig, Failure> {
    let ovr = overrides(common);
    if common.config.is_some() || base.is_none() {
        return RunConfig::load(common.config.as_deref(), &ovr).map_err(Failure::usage);
    }
    let mut value = serde_json::to_value(base.expect("checked")).map_err(Failure::usage)?;
    for o in &ovr {
        apply_override(&mut value, o).map_err(Failure::usage)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .context("bad config")
        .map_err(Failure::usage)?;
    cfg.validate().map_err(Failure::usage)?;
    Ok(cfg)
}

pub fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Invocation<'a> {
    command: &'a str,
    config_path: Option<&'a Path>,
    overrides: Vec<String>,
    seed: u64,
}

/// Writes `config.json` (the effective config, reusable with `--config`)
/// and `invocation.json` (command, config file, and overrides).
pub fn write_snapshot<T: Serialize>(dir: &Path, command: &str, common: &Common, config: &T, seed: u64) -> anyhow::Result<()> {
    write_json(&dir.join("config.json"), config)?;
    write_json(
        &dir.join("invocation.json"),
        &Invocation {
            command,
            config_path: common.config.as_deref(),
            overrides: overrides(common),
            seed,
        },
    )
}

pub fn load_frames(path: &Path, format: Format) -> anyhow::Result<Vec<FrameSample>> {
    let fmt = match format {
        Format::Jsonl => AnnotationFormat::Jsonl,
        Format::Kitti => AnnotationFormat::KittiLabel,
    };
    let frames = read_annotations(path, fmt).with_context(|| format!("loading {}", path.display()))?;
    Ok(filter_annotations(&frames, &FilterPolicy::default())?)
}

/// One row of `mask_sweep.csv` or `perturb.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mask_ratio: f64,
    pub r: Option<f64>,
    pub tokens_processed: u64,
    pub flop_proxy: u64,
    pub n_objects: usize,
    pub rmse_m: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse_log: f64,
    pub delta_1_25: Option<f64>,
    pub mean_sigma2: f64,
}

impl SweepRow {
    pub fn new(report: &EvalReport, r: Option<f64>) -> Self {
        let m = &report.metrics;
        Self {
            mask_ratio: report.mask_ratio,
            r,
            tokens_processed: report.tokens_processed,
            flop_proxy: report.flop_proxy,
            n_objects: m.n_objects,
            rmse_m: m.rmse_m,
            abs_rel: m.abs_rel,
            sq_rel: m.sq_rel,
            rmse_log: m.rmse_log,
            delta_1_25: m.delta(1.25),
            mean_sigma2: report.mean_sigma2,
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .map(|row| row.with_context(|| format!("parsing {}", path.display())))
        .collect()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// The first of `runs` that contains `name`.
pub fn find_in(runs: &[PathBuf], name: &str) -> Option<PathBuf> {
    runs.iter().map(|d| d.join(name)).find(|p| p.is_file())
}
