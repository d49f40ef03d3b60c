//! The metric suite against a literal, loop-per-formula re-transcription.

mod common;

use common::{close, close_opt, oracle, random_pairs};
use objdist::metrics::{ale_aloe, compute_report, error_metrics, threshold_metrics, EvalPair, LocalizationMode, MetricsConfig};
use proptest::prelude::*;

#[test]
fn thousand_pairs_match_oracle() {
    let start = std::time::Instant::now();
    let cfg = MetricsConfig {
        distance_ranges: vec![(0.0, 10.0), (10.0, 40.0), (40.0, 100.0)],
        ..MetricsConfig::default()
    };
    let (t, p, o) = random_pairs(1000, 42);
    let pairs: Vec<EvalPair> = (0..1000).map(|i| EvalPair::new(p[i], t[i], o[i])).collect();
    let want = oracle(&t, &p, &o, &cfg);
    let (abs, sq, rmse, rl) = error_metrics(&pairs).unwrap();
    assert!(close(abs, want.abs) && close(sq, want.sq) && close(rmse, want.rmse) && close(rl, want.rmse_log));
    let (delta, below) = threshold_metrics(&pairs, &cfg.taus, &cfg.ks).unwrap();
    assert!(delta.iter().zip(&want.delta).all(|(a, b)| close(*a, *b)));
    assert!(below.iter().zip(&want.below).all(|(a, b)| close(*a, *b)));
    let (ale, aloe) = ale_aloe(&pairs, &cfg.distance_ranges, &cfg.occlusion_bins, LocalizationMode::Relative).unwrap();
    assert!(close_opt(&ale, &want.ale));
    assert!(close_opt(&aloe, &want.aloe));
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_oracle_on_random_sets(seed in any::<u64>(), n in 1usize..200) {
        let cfg = MetricsConfig::default();
        let (t, p, o) = random_pairs(n, seed);
        let pairs: Vec<EvalPair> = (0..n).map(|i| EvalPair::new(p[i], t[i], o[i])).collect();
        let want = oracle(&t, &p, &o, &cfg);
        let r = compute_report(&pairs, &cfg).unwrap();
        prop_assert!(close(r.abs_rel, want.abs) && close(r.sq_rel, want.sq));
        prop_assert!(close(r.rmse_m, want.rmse) && close(r.rmse_log, want.rmse_log));
        for (tau, w) in cfg.taus.iter().zip(&want.delta) {
            prop_assert!(close(r.delta(*tau).unwrap(), *w));
        }
        let aloe: Vec<Option<f64>> = cfg.occlusion_bins.iter().map(|&(a, b)| r.aloe_by_occlusion[&objdist::metrics::bin_label(a, b)]).collect();
        prop_assert!(close_opt(&aloe, &want.aloe));
    }

    #[test]
    fn rmse_bounds_mean_error(seed in any::<u64>(), n in 1usize..100) {
        let (t, p, _) = random_pairs(n, seed);
        let pairs: Vec<EvalPair> = (0..n).map(|i| EvalPair::new(p[i], t[i], 0.0)).collect();
        let (_, _, rmse, _) = error_metrics(&pairs).unwrap();
        let mean = (0..n).map(|i| p[i] - t[i]).sum::<f64>() / n as f64;
        prop_assert!(rmse + 1e-12 >= mean.abs());
    }

    #[test]
    fn delta_monotone_in_tau(seed in any::<u64>(), n in 1usize..100, a in 1.0f64..2.0, b in 1.0f64..2.0) {
        let (t, p, _) = random_pairs(n, seed);
        let pairs: Vec<EvalPair> = (0..n).map(|i| EvalPair::new(p[i], t[i], 0.0)).collect();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (d, _) = threshold_metrics(&pairs, &[lo, hi], &[]).unwrap();
        prop_assert!(d[0] <= d[1]);
    }

    #[test]
    fn permutation_invariant(seed in any::<u64>(), n in 2usize..60) {
        let (t, p, o) = random_pairs(n, seed);
        let pairs: Vec<EvalPair> = (0..n).map(|i| EvalPair::new(p[i], t[i], o[i])).collect();
        let mut rev = pairs.clone();
        rev.reverse();
        rev.rotate_left(n / 3);
        let cfg = MetricsConfig::default();
        let (a, b) = (compute_report(&pairs, &cfg).unwrap(), compute_report(&rev, &cfg).unwrap());
        prop_assert!(close(a.rmse_m, b.rmse_m) && close(a.abs_rel, b.abs_rel) && close(a.rmse_log, b.rmse_log));
        prop_assert_eq!(a.delta_by_tau, b.delta_by_tau);
    }
}
