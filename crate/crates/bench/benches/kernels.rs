//! Microbenchmarks for the hot numerical kernels: transforms, the
//! integral-operator apply, symbol-network evaluation, and one training
//! step of the smallest realistic configuration.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pdno_core::autodiff::{ActKind, ParamStore, Tape};
use pdno_core::datagen::{burgers_solve, burgers_grf_spec, grf_sample};
use pdno_core::grid::{Domain, GridFunction};
use pdno_core::operators::{build_pdio_layer, pdio_apply};
use pdno_core::rng::Rng;
use pdno_core::tensor::Tensor;

fn random_field(channels: usize, n: usize, seed: u64) -> GridFunction {
    let mut rng = Rng::new(seed);
    let data = (0..channels * n).map(|_| rng.gaussian()).collect();
    GridFunction::new(Domain::Torus, Tensor::from_vec(&[channels, n], data).unwrap()).unwrap()
}

fn bench_fft(c: &mut Criterion) {
    let mut group = c.benchmark_group("rfft_1d");
    for &n in &[256usize, 1024, 2048] {
        let gf = random_field(1, n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &gf, |b, gf| {
            b.iter(|| pdno_core::fft::rfft_nd(gf).unwrap());
        });
    }
    group.finish();
}

fn bench_pdio_apply(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let layer = build_pdio_layer(
        &mut store, "b", 1, 16, 16, &[64], ActKind::Gelu, false, false, None, 1,
    )
    .unwrap();
    let f = random_field(16, 256, 2);
    c.bench_function("pdio_apply_w16_n256", |b| {
        b.iter(|| pdio_apply(&layer, &store, &f).unwrap());
    });
}

fn bench_symbol_eval(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let layer = build_pdio_layer(
        &mut store, "s", 1, 32, 32, &[64], ActKind::Tanh, false, false, None, 3,
    )
    .unwrap();
    c.bench_function("xi_symbol_eval_w32_n256", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            layer.eval_symbols(&mut tape, &store, &[256], None).unwrap()
        });
    });
}

fn bench_burgers_step(c: &mut Criterion) {
    let spec = burgers_grf_spec(2048, 5);
    let u0 = grf_sample(&spec, 1).unwrap().remove(0);
    c.bench_function("burgers_2048_t0p01", |b| {
        b.iter(|| burgers_solve(&u0, 0.1, 0.01, 2e-4, &[0.01]).unwrap());
    });
}

criterion_group!(benches, bench_fft, bench_pdio_apply, bench_symbol_eval, bench_burgers_step);
criterion_main!(benches);
