use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use placelens::econ::{self, SarOptions, SarSe};
use placelens::quantfit;
use placelens::spatial::{self, DEFAULT_SNAP_TOLERANCE};
use placelens::stackinf::{self, PairsResampler};
use placelens::{Approach, SpectralWeights, StackSpec};
use placelens_bench::{lattice_weights, quantile_data, sar_data, stacked_rows};

fn queen(c: &mut Criterion) {
    let mut g = c.benchmark_group("queen_weights");
    for side in [10, 30] {
        let geoms = spatial::lattice(side, side);
        g.bench_with_input(BenchmarkId::from_parameter(side * side), &geoms, |b, geoms| {
            b.iter(|| spatial::queen_weights(black_box(geoms), DEFAULT_SNAP_TOLERANCE).unwrap())
        });
    }
    g.finish();
}

fn sar(c: &mut Criterion) {
    let mut g = c.benchmark_group("sar");
    g.sample_size(10);
    for side in [10, 20] {
        let w = lattice_weights(side);
        let (y, x) = sar_data(&w, 0.4, 1);
        g.bench_function(BenchmarkId::new("eigendecomposition", side * side), |b| {
            b.iter(|| SpectralWeights::new(black_box(w.clone())))
        });
        let sw = SpectralWeights::new(w.clone());
        g.bench_function(BenchmarkId::new("fit", side * side), |b| {
            b.iter(|| econ::fit_sar(black_box(&y), &x, &sw, SarSe::ModelBased, SarOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn quantile(c: &mut Criterion) {
    let mut g = c.benchmark_group("quantile_fit");
    for n in [100, 1000] {
        let (y, x) = quantile_data(n, 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| quantfit::fit_quantile(black_box(&y), &x, 0.25).unwrap())
        });
    }
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let mut g = c.benchmark_group("cluster_bootstrap");
    g.sample_size(10);
    let rows = stacked_rows(15, 3);
    g.bench_function("zip_fe_b100_n225", |b| {
        b.iter(|| {
            stackinf::cluster_bootstrap(
                black_box(&rows),
                StackSpec::ZipFe,
                Approach::Authoritative,
                None,
                100,
                7,
                &PairsResampler,
            )
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, queen, sar, quantile, bootstrap);
criterion_main!(benches);
