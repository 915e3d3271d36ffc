use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use elastic_moe::harness::{evaluate, prepare_data, sweep, verify_sampling, Mode, RunConfig};
use elastic_moe::moe::{Model, RouteMode};
use elastic_moe::Exec;

const PATHS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_evaluate(c: &mut Criterion) {
    let cfg = RunConfig::new(Mode::Emoe);
    let (_, eval_set) = prepare_data(&cfg).unwrap();
    let model = Model::init(cfg.model_shape(), 1).unwrap();
    let mut group = c.benchmark_group("evaluate_top4");
    for (name, exec) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, &eval_set, &RouteMode::TopK(4), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let cfg = RunConfig::new(Mode::Emoe);
    let (_, eval_set) = prepare_data(&cfg).unwrap();
    let model = Model::init(cfg.model_shape(), 1).unwrap();
    let reference = cfg.reference_route();
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for (name, exec) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep(&model, &eval_set, &reference, &[1, 2, 3, 4, 6, 8], "", exec).unwrap())
        });
    }
    group.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("verify_sampling_100k");
    group.sample_size(10);
    for (name, exec) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| verify_sampling(2, 8, 100_000, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate, bench_sweep, bench_sampling);
criterion_main!(benches);
