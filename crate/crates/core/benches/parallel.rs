//! Sequential against data-parallel execution of the two hot loops: image
//! rendering (pixel chunks) and per-object evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hyperplanes::io::{synthetic_datasets, SyntheticSpec};
use hyperplanes::meta::{evaluate, TrainConfig};
use hyperplanes::par::ExecPolicy;
use hyperplanes::render::render_image;
use hyperplanes::target::{ConditionedField, TargetParams};

const POLICIES: [ExecPolicy; 2] = [ExecPolicy::Sequential, ExecPolicy::Parallel];

fn bench_render(c: &mut Criterion) {
    let spec = SyntheticSpec {
        objects: 1,
        test_objects: 0,
        views: 50,
        resolution: 32,
        oracle_samples: 64,
        ..SyntheticSpec::default()
    };
    let (train, _) = synthetic_datasets(&spec, ExecPolicy::Parallel).unwrap();
    let task = &train.tasks[0];
    let cfg = TrainConfig::profile("desk").unwrap();
    let params = TargetParams::init(cfg.target.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let field = ConditionedField {
        params: &params,
        planes: &task.support,
    };
    let camera = &task.query[0].camera;
    let mut group = c.benchmark_group("render_32x32");
    group.sample_size(10);
    for policy in POLICIES {
        let render_cfg = hyperplanes::render::RenderConfig {
            policy,
            chunk: 64,
            ..cfg.render_config(task.near, task.far, task.background)
        };
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{policy:?}")),
            &render_cfg,
            |b, rc| b.iter(|| render_image(&field, camera, rc).unwrap()),
        );
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let spec = SyntheticSpec {
        objects: 4,
        test_objects: 4,
        views: 50,
        resolution: 16,
        oracle_samples: 64,
        ..SyntheticSpec::default()
    };
    let (_, test) = synthetic_datasets(&spec, ExecPolicy::Parallel).unwrap();
    let base = TrainConfig::profile("desk").unwrap();
    let params = TargetParams::init(base.target.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut group = c.benchmark_group("evaluate_4_objects");
    group.sample_size(10);
    for policy in POLICIES {
        let cfg = TrainConfig { policy, ..base.clone() };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{policy:?}")), &cfg, |b, cfg| {
            b.iter(|| evaluate(cfg, &params, None, &test, 0, 1, 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_evaluate);
criterion_main!(benches);
