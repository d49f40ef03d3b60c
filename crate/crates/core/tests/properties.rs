//! Property tests over the data, token, and masking layers.

use objdist::backbone::FeatureMap;
use objdist::data::{
    build_centers_heatmap, filter_annotations, generate_synthetic_dataset, BoundingBox, FilterPolicy, SynthConfig,
};
use objdist::roi::{masked_count, roi_align, sample_mask, tokenize, untokenize, RoIFeatureGrid};
use objdist::Tensor;
use proptest::prelude::*;

fn tensor(shape: &[usize], vals: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), vals)
}

fn fm(values: Tensor, stride: usize) -> FeatureMap {
    let (h, w) = (values.shape()[1], values.shape()[2]);
    FeatureMap {
        values,
        stride,
        image_height: h * stride,
        image_width: w * stride,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn distance_filter_bounds(seed in any::<u64>(), max_d in 5.0f64..40.0) {
        let frames = generate_synthetic_dataset(&SynthConfig { num_frames: 6, ..SynthConfig::default() }, seed).unwrap();
        let policy = FilterPolicy { max_distance_m: Some(max_d), ..FilterPolicy::default() };
        for f in filter_annotations(&frames, &policy).unwrap() {
            prop_assert!(!f.annotations.is_empty());
            prop_assert!(f.annotations.iter().all(|a| a.distance_m <= max_d));
        }
    }

    #[test]
    fn heatmap_monotone_rays(cx in 5.0f64..35.0, cy in 5.0f64..25.0, sigma in 1.0f64..10.0, dir in 0usize..8) {
        let b = BoundingBox::new(cx - 2.0, cy - 3.0, 4.0, 6.0);
        let hm = build_centers_heatmap(&[b], 30, 40, sigma).unwrap();
        prop_assert!(hm.values.data().iter().all(|&v| v <= 1.0));
        let (dx, dy) = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)][dir];
        // start at the pixel nearest the center and walk outward
        let (mut x, mut y) = (cx.round() as i64, cy.round() as i64);
        let mut prev = f64::INFINITY;
        let mut first = true;
        while (0..40).contains(&x) && (0..30).contains(&y) {
            let v = hm.values.data()[(y * 40 + x) as usize];
            if !first {
                prop_assert!(v <= prev + 1e-15);
            }
            first = false;
            prev = v;
            x += dx;
            y += dy;
        }
    }

    #[test]
    fn tokenize_round_trip(c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = tensor(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let grid = RoIFeatureGrid { values, source_box: BoundingBox::new(1.0, 2.0, 3.0, 4.0) };
        let back = untokenize(&tokenize(&grid), grid.source_box).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn roi_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, x in 0.0f64..20.0, y in 0.0f64..12.0, bw in 1.0f64..20.0, bh in 1.0f64..15.0) {
        let f1: Vec<f64> = (0..2 * 8 * 12).map(|i| ((i * 7) % 13) as f64 * 0.3).collect();
        let f2: Vec<f64> = (0..2 * 8 * 12).map(|i| ((i * 5) % 11) as f64 - 4.0).collect();
        let mix: Vec<f64> = f1.iter().zip(&f2).map(|(p, q)| a * p + b * q).collect();
        let bbox = BoundingBox::new(x, y, bw, bh);
        let r1 = roi_align(&fm(tensor(&[2, 8, 12], f1), 2), &bbox, (4, 4), 2).unwrap();
        let r2 = roi_align(&fm(tensor(&[2, 8, 12], f2), 2), &bbox, (4, 4), 2).unwrap();
        let rm = roi_align(&fm(tensor(&[2, 8, 12], mix), 2), &bbox, (4, 4), 2).unwrap();
        for i in 0..rm.values.len() {
            let want = a * r1.values.data()[i] + b * r2.values.data()[i];
            prop_assert!((rm.values.data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_counts_exact(n in 1usize..200, ratio in 0.0f64..0.99, seed in any::<u64>()) {
        let plan = sample_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(plan.n_masked(), masked_count(n, ratio));
        prop_assert_eq!(plan.n_kept(), n - (ratio * n as f64 + 1e-9).floor() as usize);
    }
}

#[test]
fn mask_marginals_at_half() {
    let mut counts = [0usize; 64];
    for seed in 0..10_000u64 {
        for (c, k) in counts.iter_mut().zip(sample_mask(64, 0.5, seed).unwrap().kept) {
            *c += !k as usize;
        }
    }
    for c in counts {
        let f = c as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&f), "inclusion frequency {f}");
    }
}
