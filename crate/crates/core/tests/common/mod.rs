//! Helpers shared by integration tests: a literal re-transcription of the
//! metric formulas, one loop per formula.
#![allow(dead_code)]

use objdist::metrics::MetricsConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Oracle {
    pub abs: f64,
    pub sq: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta: Vec<f64>,
    pub below: Vec<f64>,
    pub ale: Vec<Option<f64>>,
    pub aloe: Vec<Option<f64>>,
}

pub fn oracle(d_star: &[f64], d: &[f64], occl: &[f64], cfg: &MetricsConfig) -> Oracle {
    let n = d.len() as f64;
    let mut abs = 0.0;
    for i in 0..d.len() {
        abs += (d[i] - d_star[i]).abs() / d_star[i];
    }
    let mut sq = 0.0;
    for i in 0..d.len() {
        sq += (d[i] - d_star[i]).powi(2) / d_star[i];
    }
    let mut se = 0.0;
    for i in 0..d.len() {
        se += (d[i] - d_star[i]).powi(2);
    }
    let mut sle = 0.0;
    for i in 0..d.len() {
        sle += (d[i].ln() - d_star[i].ln()).powi(2);
    }
    let mut delta = Vec::new();
    for &tau in &cfg.taus {
        let mut c = 0;
        for i in 0..d.len() {
            let r = if d[i] / d_star[i] > d_star[i] / d[i] { d[i] / d_star[i] } else { d_star[i] / d[i] };
            if r < tau {
                c += 1;
            }
        }
        delta.push(100.0 * c as f64 / n);
    }
    let mut below = Vec::new();
    for &k in &cfg.ks {
        let mut c = 0;
        for i in 0..d.len() {
            if (d[i] - d_star[i]).abs() / d_star[i] < k / 100.0 {
                c += 1;
            }
        }
        below.push(100.0 * c as f64 / n);
    }
    let bin = |bins: &[(f64, f64)], key: &dyn Fn(usize) -> f64| {
        let mut out = Vec::new();
        for &(lo, hi) in bins {
            let mut s = 0.0;
            let mut c = 0;
            for i in 0..d.len() {
                if lo <= key(i) && key(i) < hi {
                    s += (d[i] - d_star[i]).abs() / d_star[i];
                    c += 1;
                }
            }
            out.push(if c == 0 { None } else { Some(s / c as f64) });
        }
        out
    };
    Oracle {
        abs: abs / n,
        sq: sq / n,
        rmse: (se / n).sqrt(),
        rmse_log: (sle / n).sqrt(),
        delta,
        below,
        ale: bin(&cfg.distance_ranges, &|i| d_star[i]),
        aloe: bin(&cfg.occlusion_bins, &|i| occl[i] * 100.0),
    }
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

pub fn close_opt(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => close(*x, *y),
            (None, None) => true,
            _ => false,
        })
}

pub fn random_pairs(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_star: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..120.0)).collect();
    let d: Vec<f64> = d_star.iter().map(|t| t * rng.gen_range(0.6..1.6)).collect();
    let occl: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    (d_star, d, occl)
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma).powi(2);
        vb += (rb[i] - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}
