use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use gaitmeta::autodiff::{Tensor, Trace};
use gaitmeta::dataset::{group_tasks, sample_episode, EpisodeSpec};
use gaitmeta::meta::{meta_epoch, MetaConfig};
use gaitmeta::network::{forward, init_params, ForwardMode, ModelConfig};
use gaitmeta::objective::{GaitLearner, LossWeights};
use gaitmeta::synth::{generate_session, make_cohort, Benchmark, BenchmarkConfig};
use gaitmeta::domain::{Mode, TaskDescriptor};

fn matmul(c: &mut Criterion) {
    let a = Tensor::new(&[256, 256], (0..65536).map(|i| (i % 17) as f64 * 0.1).collect()).unwrap();
    let b = a.clone();
    c.bench_function("matmul 256", |bench| {
        bench.iter(|| {
            let t = Trace::new();
            let x = t.constant(a.clone());
            let y = t.constant(b.clone());
            black_box(x.matmul(y).unwrap().value().data()[0])
        })
    });
}

fn network(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    let x = Tensor::new(&[256, 4, cfg.window_len], (0..256 * 4 * cfg.window_len).map(|i| (i as f64 * 0.37).sin()).collect())
        .unwrap();
    c.bench_function("forward eval 256 windows", |b| {
        b.iter(|| black_box(forward(&cfg, &params, &x, ForwardMode::Eval).unwrap()))
    });
}

fn meta(c: &mut Criterion) {
    let bench_cfg = BenchmarkConfig { n_subjects: 1, ..BenchmarkConfig::default() };
    let data = Benchmark::in_memory(0, &bench_cfg).unwrap();
    let tasks = group_tasks(&data.sessions);
    let model = ModelConfig::default();
    let learner = GaitLearner::new(model.clone(), LossWeights::default()).unwrap();
    let theta = init_params(&model, 0).unwrap();
    let spec = EpisodeSpec { window_len: 100, stride: 10, n_support: 80, n_query: 120 };
    let episodes: Vec<_> = tasks[..4]
        .iter()
        .enumerate()
        .map(|(i, t)| sample_episode(&data.sessions, t, &spec, i as u64).unwrap())
        .collect();
    let mut group = c.benchmark_group("meta epoch, 4 tasks");
    group.sample_size(10);
    for first_order in [false, true] {
        let cfg = MetaConfig { first_order, ..MetaConfig::default() };
        let name = if first_order { "first order" } else { "second order" };
        group.bench_function(name, |b| b.iter(|| black_box(meta_epoch(&learner, &theta, &episodes, &cfg, 1).unwrap())));
    }
    group.finish();
}

fn synth(c: &mut Criterion) {
    let profile = make_cohort(0, 1).unwrap().remove(0);
    let task = TaskDescriptor::new(1, Mode::LW, 0.0, 1.1).unwrap();
    c.bench_function("generate 60 s session", |b| {
        b.iter_batched(|| 3u64, |seed| black_box(generate_session(&profile, &task, 60.0, seed).unwrap()), BatchSize::SmallInput)
    });
}

criterion_group!(benches, matmul, network, meta, synth);
criterion_main!(benches);
