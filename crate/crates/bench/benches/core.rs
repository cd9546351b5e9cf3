use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use sbgc::robust::loglik_grad;
use sbgc::score::ScoreModel;
use sbgc::train::dsm_loss_and_grad;
use sbgc::{log_likelihood, SolverCfg, TraceCfg};
use sbgc_bench::{analytic, mlp};

fn likelihood(c: &mut Criterion) {
    let mut g = c.benchmark_group("likelihood");
    g.sample_size(10);
    let cfg = SolverCfg::default();
    let a = analytic();
    g.bench_function("analytic_exact_d2", |b| {
        b.iter(|| log_likelihood(&a, &[0.3, -0.2], &cfg, &TraceCfg::exact(), Some(0)).unwrap())
    });
    let net = mlp(2, 3);
    g.bench_function("mlp_exact_d2", |b| {
        b.iter(|| log_likelihood(&net, &[0.3, -0.2], &cfg, &TraceCfg::exact(), Some(1)).unwrap())
    });
    let img = mlp(64, 2);
    let x = vec![0.5; 64];
    for n in [1, 10] {
        g.bench_function(format!("mlp_hutchinson{n}_d64"), |b| {
            b.iter(|| log_likelihood(&img, &x, &cfg, &TraceCfg::hutchinson(n, 0), Some(0)).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradients");
    g.sample_size(10);
    let net = mlp(2, 3);
    g.bench_function("loglik_grad_mlp_d2_64steps", |b| {
        b.iter(|| loglik_grad(&net, &[0.3, -0.2], Some(0), 64, None).unwrap())
    });
    let probes = Array2::eye(2);
    g.bench_function("score_adjoint_mlp_d2", |b| {
        b.iter(|| net.score_adjoint(&[0.3, -0.2], 0.4, Some(0), &[1.0, -1.0], &probes, 0.1).unwrap())
    });
    g.finish();
}

fn training(c: &mut Criterion) {
    let net = mlp(2, 3);
    let n = 256;
    let x0 = Array2::from_shape_fn((n, 2), |(i, j)| ((i * 3 + j) % 11) as f64 / 11.0 - 0.5);
    let z = Array2::from_shape_fn((n, 2), |(i, j)| ((i * 5 + j * 7) % 13) as f64 / 6.5 - 1.0);
    let labels: Vec<Option<usize>> = (0..n).map(|i| Some(i % 3)).collect();
    let t: Vec<f64> = (0..n).map(|i| 1e-5 + (i as f64 + 0.5) / n as f64).map(|v| v.min(1.0)).collect();
    let w = vec![1.0; n];
    c.bench_function("dsm_loss_and_grad_batch256", |b| {
        b.iter(|| dsm_loss_and_grad(&net, &x0, &labels, &t, &z, &w).unwrap())
    });
}

criterion_group!(benches, likelihood, gradients, training);
criterion_main!(benches);
