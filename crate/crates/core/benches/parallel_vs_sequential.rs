//! Frame-parallel versus sequential execution of evaluation and of one
//! training batch. Build without default features to see the fallback path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use objdist::data::{generate_synthetic_dataset, FrameSample, SynthConfig};
use objdist::harness::{batch_gradients, evaluate, BatchContext, Checkpoint, RunConfig};
use objdist::par::Exec;

fn setup() -> (RunConfig, Checkpoint, Vec<FrameSample>) {
    let mut cfg = RunConfig::default();
    cfg.model.d_model = 32;
    cfg.model.backbone.widths = vec![16, 32, 64];
    cfg.model.backbone.fpn_width = 32;
    let ck = Checkpoint::fresh(cfg.clone()).unwrap();
    let frames = generate_synthetic_dataset(&SynthConfig { num_frames: 8, ..SynthConfig::default() }, 3).unwrap();
    (cfg, ck, frames)
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_evaluate(c: &mut Criterion) {
    let (cfg, ck, frames) = setup();
    let mut group = c.benchmark_group("evaluate_8_frames");
    group.sample_size(10);
    for (name, exec) in MODES {
        for ratio in [0.0, 0.5] {
            group.bench_with_input(BenchmarkId::new(name, ratio), &ratio, |b, &r| {
                b.iter(|| evaluate(&ck, &frames, r, 0, &cfg.metrics, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_batch(c: &mut Criterion) {
    let (cfg, ck, frames) = setup();
    let model = ck.model.as_ref().unwrap();
    let batch: Vec<(usize, &FrameSample)> = frames.iter().take(4).enumerate().collect();
    let ctx = BatchContext { epoch: 0, step: 0, gnll_weight: 1.0 };
    let mut group = c.benchmark_group("batch_gradients_4_frames");
    group.sample_size(10);
    for (name, exec) in MODES {
        let run_cfg = RunConfig { exec, ..cfg.clone() };
        group.bench_function(name, |b| b.iter(|| batch_gradients(model, &run_cfg, &batch, ctx).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate, bench_batch);
criterion_main!(benches);
