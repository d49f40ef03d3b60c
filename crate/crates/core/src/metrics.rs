//! Per-object distance error metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub predicted_m: f64,
    pub target_m: f64,
    /// Fraction of the object hidden, in `[0, 1]`.
    pub occlusion: f64,
}

impl EvalPair {
    pub fn new(predicted_m: f64, target_m: f64, occlusion: f64) -> Self {
        Self {
            predicted_m,
            target_m,
            occlusion,
        }
    }
}

/// Error term used by ALE and ALOE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationMode {
    /// `|d - d*| / d*`
    #[default]
    Relative,
    /// `|d - d*|` in meters
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub taus: Vec<f64>,
    /// Relative error thresholds in percent.
    pub ks: Vec<f64>,
    /// Half-open `[lo, hi)` ground-truth distance ranges in meters.
    pub distance_ranges: Vec<(f64, f64)>,
    /// Half-open `[lo, hi)` occlusion bins in percent.
    pub occlusion_bins: Vec<(f64, f64)>,
    pub localization_mode: LocalizationMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            taus: vec![1.25, 1.25f64.powi(2), 1.25f64.powi(3)],
            ks: vec![5.0, 10.0, 15.0],
            distance_ranges: vec![(0.0, 100.0)],
            occlusion_bins: vec![(30.0, 50.0), (50.0, 75.0), (75.0, 100.0)],
            localization_mode: LocalizationMode::Relative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse_m: f64,
    pub rmse_log: f64,
    /// Percentages keyed by the threshold as written by `{}` formatting.
    pub delta_by_tau: BTreeMap<String, f64>,
    pub below_k: BTreeMap<String, f64>,
    /// `None` for ranges with no objects.
    pub ale_by_range: BTreeMap<String, Option<f64>>,
    pub aloe_by_occlusion: BTreeMap<String, Option<f64>>,
    pub n_objects: usize,
}

impl MetricsReport {
    /// `delta_by_tau` entry for `tau`.
    pub fn delta(&self, tau: f64) -> Option<f64> {
        self.delta_by_tau.get(&format!("{tau}")).copied()
    }
}

pub fn bin_label(lo: f64, hi: f64) -> String {
    format!("{lo}-{hi}")
}

fn check_targets(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(invalid("metrics need at least one pair"));
    }
    if let Some(p) = pairs.iter().find(|p| !(p.target_m > 0.0)) {
        return Err(invalid(format!("target distance must be positive, got {}", p.target_m)));
    }
    Ok(())
}

fn check_predictions(pairs: &[EvalPair]) -> Result<()> {
    if let Some(p) = pairs.iter().find(|p| !(p.predicted_m > 0.0)) {
        return Err(invalid(format!("prediction must be positive, got {}", p.predicted_m)));
    }
    Ok(())
}

/// `(abs_rel, sq_rel, rmse_m, rmse_log)`.
pub fn error_metrics(pairs: &[EvalPair]) -> Result<(f64, f64, f64, f64)> {
    check_targets(pairs)?;
    check_predictions(pairs)?;
    let n = pairs.len() as f64;
    let (mut abs, mut sq, mut se, mut sle) = (0.0, 0.0, 0.0, 0.0);
    for p in pairs {
        let e = p.predicted_m - p.target_m;
        abs += e.abs() / p.target_m;
        sq += e * e / p.target_m;
        se += e * e;
        let le = p.predicted_m.ln() - p.target_m.ln();
        sle += le * le;
    }
    Ok((abs / n, sq / n, (se / n).sqrt(), (sle / n).sqrt()))
}

/// Percentages with `max(d/d*, d*/d) < tau` and with `|d - d*| / d* < k/100`.
pub fn threshold_metrics(pairs: &[EvalPair], taus: &[f64], ks: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_targets(pairs)?;
    check_predictions(pairs)?;
    let n = pairs.len() as f64;
    let pct = |pred: &dyn Fn(&EvalPair) -> bool| 100.0 * pairs.iter().filter(|p| pred(p)).count() as f64 / n;
    let deltas = taus
        .iter()
        .map(|&tau| {
            pct(&|p: &EvalPair| (p.predicted_m / p.target_m).max(p.target_m / p.predicted_m) < tau)
        })
        .collect();
    let below = ks
        .iter()
        .map(|&k| pct(&|p: &EvalPair| (p.predicted_m - p.target_m).abs() / p.target_m < k / 100.0))
        .collect();
    Ok((deltas, below))
}

fn check_bins(bins: &[(f64, f64)], what: &str) -> Result<()> {
    for (i, &(lo, hi)) in bins.iter().enumerate() {
        if !(hi > lo) {
            return Err(invalid(format!("{what} bin [{lo}, {hi}) is empty")));
        }
        for &(lo2, hi2) in &bins[i + 1..] {
            if lo < hi2 && lo2 < hi {
                return Err(invalid(format!("{what} bins [{lo}, {hi}) and [{lo2}, {hi2}) overlap")));
            }
        }
    }
    Ok(())
}

/// One mean error per bin, `None` for empty bins.
pub type BinnedError = Vec<Option<f64>>;

/// Mean localization error per distance range and per occlusion bin.
pub fn ale_aloe(
    pairs: &[EvalPair],
    distance_ranges: &[(f64, f64)],
    occlusion_bins: &[(f64, f64)],
    mode: LocalizationMode,
) -> Result<(BinnedError, BinnedError)> {
    check_targets(pairs)?;
    check_bins(distance_ranges, "distance")?;
    check_bins(occlusion_bins, "occlusion")?;
    let err = |p: &EvalPair| {
        let e = (p.predicted_m - p.target_m).abs();
        match mode {
            LocalizationMode::Relative => e / p.target_m,
            LocalizationMode::Absolute => e,
        }
    };
    let binned = |bins: &[(f64, f64)], key: &dyn Fn(&EvalPair) -> f64| -> Vec<Option<f64>> {
        bins.iter()
            .map(|&(lo, hi)| {
                let (mut sum, mut n) = (0.0, 0usize);
                for p in pairs {
                    let k = key(p);
                    if k >= lo && k < hi {
                        sum += err(p);
                        n += 1;
                    }
                }
                (n > 0).then(|| sum / n as f64)
            })
            .collect()
    };
    Ok((
        binned(distance_ranges, &|p| p.target_m),
        binned(occlusion_bins, &|p| p.occlusion * 100.0),
    ))
}

pub fn compute_report(pairs: &[EvalPair], config: &MetricsConfig) -> Result<MetricsReport> {
    let (abs_rel, sq_rel, rmse_m, rmse_log) = error_metrics(pairs)?;
    let (deltas, below) = threshold_metrics(pairs, &config.taus, &config.ks)?;
    let (ale, aloe) = ale_aloe(
        pairs,
        &config.distance_ranges,
        &config.occlusion_bins,
        config.localization_mode,
    )?;
    let label = |bins: &[(f64, f64)], vals: Vec<Option<f64>>| {
        bins.iter().zip(vals).map(|(&(lo, hi), v)| (bin_label(lo, hi), v)).collect()
    };
    Ok(MetricsReport {
        abs_rel,
        sq_rel,
        rmse_m,
        rmse_log,
        delta_by_tau: config.taus.iter().map(|t| format!("{t}")).zip(deltas).collect(),
        below_k: config.ks.iter().map(|k| format!("{k}")).zip(below).collect(),
        ale_by_range: label(&config.distance_ranges, ale),
        aloe_by_occlusion: label(&config.occlusion_bins, aloe),
        n_objects: pairs.len(),
    })
}
