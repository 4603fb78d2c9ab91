use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use ddat_core::fusion::{fit_slr, FitOptions};
use ddat_core::metrics::ccc;
use ddat_core::network::{init_network, NetworkConfig, OutputGradients};
use ddat_core::postprocess::optimize_chain;
use ddat_core::Matrix;

fn wave(n: usize, f: f64, phase: f64) -> Vec<f64> {
    (0..n).map(|t| (t as f64 * f + phase).sin()).collect()
}

fn gru(c: &mut Criterion) {
    let cfg = NetworkConfig::new(1, 40, 20).with_seed(1);
    let net = init_network(&cfg).unwrap();
    let x = Matrix::from_vec(300, 20, wave(6000, 0.013, 0.0));
    c.bench_function("gru_forward_300x20_1x40", |b| b.iter(|| net.predict(black_box(&x)).unwrap()));
    let grads = OutputGradients {
        emotion: vec![1e-3; 300],
        aux: None,
    };
    c.bench_function("gru_forward_backward_300x20_1x40", |b| {
        b.iter(|| {
            let bundle = net.forward(black_box(&x)).unwrap();
            net.backward(&bundle, &grads).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let a = wave(13_500, 0.01, 0.0);
    let g = wave(13_500, 0.01, 0.3);
    c.bench_function("ccc_13500", |b| b.iter(|| ccc(black_box(&a), black_box(&g)).unwrap()));
    let preds: Vec<Vec<f64>> = (0..9).map(|s| wave(1500, 0.02, s as f64)).collect();
    let golds: Vec<Vec<f64>> = (0..9).map(|s| wave(1500, 0.02, s as f64 + 0.2)).collect();
    c.bench_function("optimize_chain_9x1500", |b| {
        b.iter(|| optimize_chain(black_box(&preds), black_box(&golds), 0.04).unwrap())
    });
    let streams = vec![a.clone(), g.clone(), wave(13_500, 0.011, 1.0)];
    c.bench_function("fit_slr_3x13500", |b| {
        b.iter(|| fit_slr(black_box(&streams), &a, &FitOptions::default()).unwrap())
    });
}

criterion_group!(benches, gru, metrics);
criterion_main!(benches);
