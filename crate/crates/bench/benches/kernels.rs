use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ephys_core::hmm::viterbi_path;
use ephys_core::nnet::{check::randn, Graph, ParamStore};
use ephys_core::quant::{mulaw_forward, mulaw_inverse};
use ephys_core::rng::rng_from;
use ephys_core::sim::{simulate, SimSpec, FREQS_8};
use ephys_core::spectral::{welch_psd, Window};
use ndarray::Array2;

fn conv1d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv1d_forward_backward");
    for &(ch, t) in &[(16usize, 512usize), (64, 512)] {
        let mut rng = rng_from(0);
        let mut params = ParamStore::new();
        let w = params.add("w", randn(&[ch, ch, 2], &mut rng));
        let x = randn(&[4, ch, t], &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{t}")), &x, |b, x| {
            b.iter(|| {
                let mut g = Graph::training(&params, 0);
                let xi = g.input(x.clone());
                let wv = g.param(w);
                let y = g.conv1d(xi, wv, None, 4).unwrap();
                let target = ephys_core::nnet::Tensor::zeros(g.shape(y));
                let loss = g.mse(y, &target).unwrap();
                black_box(g.backward(loss).unwrap())
            })
        });
    }
    group.finish();
}

fn welch(c: &mut Criterion) {
    let spec = SimSpec::reference(&FREQS_8, 60.0, 0);
    let (x, _) = simulate(&spec, 1).unwrap();
    c.bench_function("welch_60s_seg250", |b| b.iter(|| black_box(welch_psd(&x, 250, 0.5, Window::Hann).unwrap())));
}

fn viterbi(c: &mut Criterion) {
    let (k, t) = (8, 10_000);
    let pi = vec![1.0 / k as f64; k];
    let a: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| if i == j { 0.9 } else { 0.1 / (k - 1) as f64 }).collect()).collect();
    let mut rng = rng_from(3);
    let log_b = Array2::from_shape_vec((t, k), randn(&[t, k], &mut rng).data).unwrap();
    c.bench_function("viterbi_k8_t10000", |b| b.iter(|| black_box(viterbi_path(&pi, &a, &log_b))));
}

fn mulaw(c: &mut Criterion) {
    let xs: Vec<f64> = (0..100_000).map(|i| (i as f64 / 50_000.0) - 1.0).collect();
    c.bench_function("mulaw_roundtrip_1e5", |b| {
        b.iter(|| black_box(xs.iter().map(|&x| mulaw_inverse(mulaw_forward(x, 255.0), 255.0)).sum::<f64>()))
    });
}

criterion_group!(benches, conv1d, welch, viterbi, mulaw);
criterion_main!(benches);
