use criterion::{black_box, criterion_group, criterion_main, Criterion};
use qiv_core::additive::fit_linear_2sls;
use qiv_core::dgp::{
    bundled, population_law, simulate_additive, simulate_late, simulate_quantile,
    DiscreteQuantileDGP,
};
use qiv_core::late::{estimate_late, LateOptions};
use qiv_core::pwl::unit_grid;
use qiv_core::quantile_solver::{empirical_law, solve_grid};

fn outcome_range(dgp: &DiscreteQuantileDGP) -> Vec<f64> {
    let s = dgp.supports();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for d in 0..s.d_card {
        for w in 0..s.w_card {
            lo = lo.min(dgp.h(d, w, 0.0));
            hi = hi.max(dgp.h(d, w, 1.0));
        }
    }
    vec![lo, hi]
}

fn quantile(c: &mut Criterion) {
    let dgp = bundled::quantile_2x2x3();
    let grid = unit_grid(101);
    let law = population_law(&dgp, &outcome_range(&dgp)).unwrap();
    c.bench_function("solve_grid/population/101", |b| {
        b.iter(|| solve_grid(black_box(&law), &grid, 1e-10, 50).unwrap())
    });

    let data = simulate_quantile(&dgp, 100_000, 0).unwrap();
    let coarse = unit_grid(21);
    c.bench_function("empirical_law/100k", |b| {
        b.iter(|| empirical_law(black_box(&data), 0.1).unwrap())
    });
    let law = empirical_law(&data, 0.1).unwrap();
    c.bench_function("solve_grid/empirical_100k/21", |b| {
        b.iter(|| solve_grid(black_box(&law), &coarse, 1e-8, 50).unwrap())
    });
}

fn linear(c: &mut Criterion) {
    let data = simulate_additive(&bundled::linear_additive(), 100_000, 0).unwrap();
    c.bench_function("fit_linear_2sls/100k", |b| {
        b.iter(|| fit_linear_2sls(black_box(&data)).unwrap())
    });
}

fn late(c: &mut Criterion) {
    let dgp = bundled::late_chain();
    let data = simulate_late(&dgp, 100_000, 0).unwrap();
    let opts = LateOptions::default();
    c.bench_function("estimate_late/100k", |b| {
        b.iter(|| estimate_late(black_box(&data), 0, 1, 2, &opts).unwrap())
    });
    c.bench_function("simulate_late/100k", |b| {
        b.iter(|| simulate_late(black_box(&dgp), 100_000, 1).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = quantile, linear, late
}
criterion_main!(benches);
