use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stableflow_bench::Fixture;
use stableflow_core::*;

fn flow_evaluation(c: &mut Criterion) {
    let mut group = c.benchmark_group("flow");
    for (n_flow, n_h) in [(2, 8), (4, 32)] {
        let f = Fixture::new(n_flow, n_h, 0);
        let id = format!("n_flow={n_flow},n_h={n_h}");
        let flow = &f.policy.flow;
        let x = &f.state.x;
        group.bench_with_input(BenchmarkId::new("forward", &id), x, |b, x| b.iter(|| flow_forward(flow, black_box(x))));
        group.bench_with_input(BenchmarkId::new("inverse", &id), x, |b, x| b.iter(|| flow_inverse(flow, black_box(x))));
        group.bench_with_input(BenchmarkId::new("jacobian", &id), x, |b, x| b.iter(|| flow_jacobian(flow, black_box(x))));
        group.bench_function(BenchmarkId::new("grad_through_flow", &id), |b| {
            let x_ref = f.policy.x_ref();
            b.iter(|| grad_through_flow(flow, black_box(x), &f.state.xdot, &x_ref, &f.gains))
        });
    }
    group.finish();
}

fn policy_terms(c: &mut Criterion) {
    let f = Fixture::new(2, 8, 1);
    let action = f.state.x.clone();
    c.bench_function("controller_mean", |b| b.iter(|| controller_mean(&f.policy, &f.gains, black_box(&f.state))));
    c.bench_function("policy_log_prob_grad", |b| {
        b.iter(|| policy_log_prob_grad(&f.policy, &f.gains, black_box(&f.state), &action))
    });
}

fn closed_loop(c: &mut Criterion) {
    let f = Fixture::new(2, 8, 2);
    let cfg = RolloutConfig {
        horizon: 0.2,
        ..RolloutConfig::default()
    };
    let plant = BlockInsertionPlant::default();
    let start = plant.eval_starts()[0].clone();
    c.bench_function("block_rollout_200_steps", |b| {
        b.iter(|| {
            rollout(&plant, &f.policy, &f.gains, start.clone(), &cfg, true, &mut ChaCha8Rng::seed_from_u64(3))
        })
    });
}

criterion_group!(benches, flow_evaluation, policy_terms, closed_loop);
criterion_main!(benches);
