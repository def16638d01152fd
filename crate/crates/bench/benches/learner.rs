use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lqmfg::sim::{rollout_with, RolloutOptions};
use lqmfg::{
    critic_gtd, critic_lstd, deploy, estimate_gap, inner_loop, solve_dare, solve_mfe, true_theta, EvalConfig,
    FeedbackPolicy, LearnerConfig,
};
use lqmfg_bench::scalar_fixture;

fn critics(c: &mut Criterion) {
    let (spec, k, mf) = scalar_fixture();
    let cfg = LearnerConfig {
        rho_theta: Some(10.0 * true_theta(&k, &mf, &spec).unwrap().norm()),
        ..Default::default()
    };
    let opts = RolloutOptions {
        restart_every: cfg.episode_len,
        ..Default::default()
    };
    let mut group = c.benchmark_group("critic");
    group.sample_size(20);
    for t in [5_000usize, 20_000] {
        let tr = rollout_with(&k, &mf, &spec, t, 1, &opts).unwrap();
        group.bench_with_input(BenchmarkId::new("rollout", t), &t, |b, &t| {
            b.iter(|| rollout_with(&k, &mf, &spec, black_box(t), 1, &opts).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("gtd", t), &tr, |b, tr| b.iter(|| critic_gtd(black_box(tr), &cfg).unwrap()));
        group.bench_with_input(BenchmarkId::new("lstd", t), &tr, |b, tr| b.iter(|| critic_lstd(black_box(tr), &cfg).unwrap()));
    }
    group.finish();
}

fn inner(c: &mut Criterion) {
    let (spec, _, mf) = scalar_fixture();
    let k0 = FeedbackPolicy::zeros(&spec);
    let cfg = LearnerConfig {
        s_inner: 5,
        t_critic: 5_000,
        rho_theta: Some(10.0 * true_theta(&k0, &mf, &spec).unwrap().norm()),
        ..Default::default()
    };
    let mut group = c.benchmark_group("inner_loop");
    group.sample_size(10);
    group.bench_function("gtd/S=5,T=5e3", |b| b.iter(|| inner_loop(black_box(&k0), &mf, &spec, &cfg, 3).unwrap()));
    group.finish();
}

fn gap(c: &mut Criterion) {
    let (spec, _, _) = scalar_fixture();
    let rd = solve_dare(&spec).unwrap();
    let sol = solve_mfe(&spec, 1e-13).unwrap();
    let dp = deploy(&sol.k_star, &sol.f_star, &spec.nu0).unwrap();
    let cfg = EvalConfig {
        horizon: 1_000,
        reps: 4,
        ..Default::default()
    };
    let mut group = c.benchmark_group("estimate_gap");
    group.sample_size(10);
    for n in [4usize, 64] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| estimate_gap(&dp, black_box(n), &spec, &rd, &cfg, 5).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, critics, inner, gap);
criterion_main!(benches);
