use criterion::{criterion_group, criterion_main, Criterion};

use gfnet_bench::{desk_model, small_corpus};
use gfnet_core::budget::{BudgetSolution, CostModel, ExitDistribution};
use gfnet_core::engine::{Engine, InferenceConfig, InferenceMode, PolicyMode};
use gfnet_core::profile::count_ops;

fn single_episode(c: &mut Criterion) {
    let model = desk_model(5);
    let corpus = small_corpus(5);
    let ds = &corpus.test;
    let cost = count_ops(&model.config).cost_model().unwrap();
    let engine = Engine::new(&model, &ds.manifest.mean, &ds.manifest.std, cost).unwrap();
    let image = ds.image_f32(0);

    let full = InferenceConfig {
        mode: InferenceMode::Full,
        policy: PolicyMode::Learned,
    };
    c.bench_function("infer full T=4", |b| {
        b.iter(|| engine.infer(&image, Some(ds.label(0)), 0, &full).unwrap())
    });

    let glance_only = InferenceConfig {
        mode: InferenceMode::Anytime { t_star: 1 },
        policy: PolicyMode::Learned,
    };
    c.bench_function("infer glance only", |b| {
        b.iter(|| {
            engine
                .infer(&image, Some(ds.label(0)), 0, &glance_only)
                .unwrap()
        })
    });
}

fn budget_solving(c: &mut Criterion) {
    let cost = CostModel::new((1..=5).map(|t| t as f64 * 1.7).collect()).unwrap();
    c.bench_function("solve_q bisection T=5", |b| {
        b.iter(|| gfnet_core::budget::solve_q(3.4, &cost, 5).unwrap())
    });

    let confidences: Vec<Vec<f64>> = (0..1000)
        .map(|i| (0..5).map(|t| ((i * 7 + t * 13) % 100) as f64 / 100.0).collect())
        .collect();
    c.bench_function("calibrate thresholds n=1000 T=5", |b| {
        b.iter(|| BudgetSolution::solve(3.4, &cost, &confidences).unwrap())
    });

    c.bench_function("exit_distribution T=5", |b| {
        b.iter(|| ExitDistribution::geometric(0.35, 5).unwrap())
    });
}

criterion_group!(inference, single_episode, budget_solving);
criterion_main!(inference);
