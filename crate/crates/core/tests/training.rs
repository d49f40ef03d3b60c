//! Harness behavior on a deliberately tiny model.

use objdist::data::{generate_synthetic_dataset, FrameSample, SynthConfig};
use objdist::harness::{
    batch_gradients, evaluate, train, AugmentConfig, BatchContext, Checkpoint, Predictor, RunConfig,
};
use objdist::par::Exec;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.d_model = 8;
    c.model.local_heads = 2;
    c.model.decoder_heads = 2;
    c.model.global_heads = 2;
    c.model.mlp_ratio = 2;
    c.model.grid = 4;
    c.model.patch_px = 2;
    c.model.backbone.widths = vec![4, 6, 8];
    c.model.backbone.fpn_width = 6;
    c.batch_size = 2;
    c.learning_rate = 1e-3;
    c.max_epochs = 3;
    c.dist_loss_warmup_epochs = 1;
    c.augmentation = AugmentConfig::default();
    c.seed = 5;
    c
}

fn frames(n: usize, seed: u64) -> Vec<FrameSample> {
    let cfg = SynthConfig {
        num_frames: n,
        image_width: 48,
        image_height: 32,
        focal_px: 60.0,
        distance_range_m: [5.0, 20.0],
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(&cfg, seed).unwrap()
}

#[test]
fn single_step_descends() {
    let data = frames(1, 3);
    for init in 0..5 {
        let mut cfg = tiny_config();
        cfg.seed = 100 + init;
        cfg.augmentation = AugmentConfig::none();
        let ck = Checkpoint::fresh(cfg.clone()).unwrap();
        let mut model = ck.model.unwrap();
        let batch = vec![(0usize, &data[0])];
        let ctx = BatchContext { epoch: 0, step: 0, gnll_weight: 1.0 };
        let before = batch_gradients(&model, &cfg, &batch, ctx).unwrap();
        let mut opt = objdist::harness::AdamW::new(&model.store, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay);
        opt.step(&mut model.store, &before.grads, 1e-5).unwrap();
        let after = batch_gradients(&model, &cfg, &batch, ctx).unwrap();
        assert!(after.total < before.total, "init {init}: {} -> {}", before.total, after.total);
    }
}

#[test]
fn fixed_seed_is_deterministic_across_exec_modes() {
    let data = frames(4, 1);
    let mut cfg = tiny_config();
    cfg.exec = Exec::Sequential;
    let a = train(&cfg, &data, &data).unwrap();
    cfg.exec = Exec::Parallel;
    let mut b = train(&cfg, &data, &data).unwrap();
    b.checkpoint.config.exec = Exec::Sequential;
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
}

#[test]
fn alpha_zero_matches_disabled_branch() {
    let data = frames(4, 2);
    let mut cfg = tiny_config();
    cfg.alpha = 0.0;
    let with = train(&cfg, &data, &data).unwrap();
    cfg.mom_enabled = false;
    let without = train(&cfg, &data, &data).unwrap();
    assert_eq!(with.steps.len(), without.steps.len());
    for (a, b) in with.steps.iter().zip(&without.steps) {
        assert_eq!(a.total, b.total);
        assert_eq!(a.gnll, b.gnll);
        assert!(a.mom.is_some() && b.mom.is_none());
    }
}

#[test]
fn head_gradients_ignore_reconstruction() {
    let data = frames(2, 4);
    let mut cfg = tiny_config();
    cfg.augmentation = AugmentConfig::none();
    let model = Checkpoint::fresh(cfg.clone()).unwrap().model.unwrap();
    let batch: Vec<(usize, &FrameSample)> = data.iter().enumerate().collect();
    let ctx = BatchContext { epoch: 0, step: 0, gnll_weight: 1.0 };
    let with = batch_gradients(&model, &cfg, &batch, ctx).unwrap();
    cfg.alpha = 0.0;
    let without = batch_gradients(&model, &cfg, &batch, ctx).unwrap();
    let mut backbone_differs = false;
    for (id, name, _) in model.store.iter() {
        let (a, b) = (&with.grads[id.0], &without.grads[id.0]);
        if name.starts_with("head") || name.starts_with("global") {
            assert_eq!(a, b, "{name}");
        }
        if name.starts_with("backbone") && a != b {
            backbone_differs = true;
        }
    }
    assert!(backbone_differs);
}

#[test]
fn early_stopping_respects_patience() {
    let data = frames(2, 6);
    let mut cfg = tiny_config();
    cfg.learning_rate = 0.5;
    cfg.max_epochs = 30;
    cfg.early_stopping_patience = Some(4);
    let out = train(&cfg, &data, &data).unwrap();
    let rmse: Vec<f64> = out.epochs.iter().map(|e| e.val_rmse_m.unwrap()).collect();
    // the first epoch that may stop is `patience` validations after the best so far
    let mut best = f64::INFINITY;
    let mut since = 0;
    for (i, r) in rmse.iter().enumerate() {
        if *r < best {
            best = *r;
            since = 0;
        } else {
            since += 1;
        }
        if i + 1 < rmse.len() {
            assert!(since < 4, "training continued past patience at epoch {i}");
        }
    }
    if out.stopped_early {
        assert_eq!(since, 4);
    }
    assert_eq!(out.checkpoint.best_val_rmse, Some(best));
}

#[test]
fn checkpoint_reload_reproduces_metrics() {
    let data = frames(3, 8);
    let cfg = tiny_config();
    let out = train(&cfg, &data, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let m = &cfg.metrics;
    for ratio in [0.0, 0.5] {
        let a = evaluate(&out.checkpoint, &data, ratio, 9, m, Exec::Parallel).unwrap();
        let b = evaluate(&loaded, &data, ratio, 9, m, Exec::Sequential).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    }
    assert!(loaded.flop_proxy(&[16, 16]) > loaded.flop_proxy(&[8, 8]));
}

#[test]
fn oracle_checkpoint_scores_perfectly() {
    let data = frames(3, 9);
    let ck = Checkpoint::oracle(tiny_config());
    let out = evaluate(&ck, &data, 0.0, 0, &tiny_config().metrics, Exec::Parallel).unwrap();
    assert_eq!(out.report.metrics.rmse_m, 0.0);
    assert_eq!(out.report.metrics.delta(1.25), Some(100.0));
}

#[test]
fn rejects_empty_inputs() {
    let data = frames(1, 1);
    assert!(train(&tiny_config(), &[], &data).is_err());
    assert!(train(&tiny_config(), &data, &[]).is_err());
}
