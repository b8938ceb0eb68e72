use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfbdsde_bench::fixture;
use mfbdsde_core::bdsde::regress;
use mfbdsde_core::{
    build_base, evaluate_u, lq_solve, parse, sample_ensemble, solve_mf_bdsde, Bindings, SolverConfig, TimeGrid, Var,
};

fn dsl(c: &mut Criterion) {
    let src = "0.5*y + 0.5*yp + sin(z*zp) - tanh(v)^2 / (1 + y^2)";
    c.bench_function("dsl/parse", |b| b.iter(|| parse(black_box(src)).unwrap()));
    let e = parse(src).unwrap();
    let bind = Bindings::from_pairs(&[(Var::Y, 0.3), (Var::Yp, -0.2), (Var::Z, 1.1), (Var::Zp, 0.4), (Var::V, 0.7)]);
    c.bench_function("dsl/eval", |b| b.iter(|| e.eval(black_box(&bind)).unwrap()));
}

fn ensembles(c: &mut Criterion) {
    let grid = TimeGrid::horizon(1.0, 64).unwrap();
    c.bench_function("scenario/sample_8x1024x64", |b| b.iter(|| sample_ensemble(grid, 8, 1024, black_box(3)).unwrap()));
}

fn regression(c: &mut Criterion) {
    let mut g = c.benchmark_group("regression");
    for degree in [1usize, 3] {
        let x: Vec<f64> = (0..8192).map(|i| ((i as f64) * 0.37).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v + 0.1 * v).collect();
        g.bench_with_input(BenchmarkId::new("fit_8192", degree), &degree, |b, &d| {
            b.iter(|| regress(black_box(&y), &x, None, 1024, &SolverConfig::grouped(d)).unwrap())
        });
    }
    g.finish();
}

fn picard(c: &mut Criterion) {
    let mut g = c.benchmark_group("picard");
    g.sample_size(10);
    let (p, ens) = fixture("linear-mean", 64, (8, 1024));
    g.bench_function("linear_mean_8x1024x64", |b| {
        b.iter(|| solve_mf_bdsde(&p.coeffs, &ens, &p.solver, 1e-8, 20).unwrap())
    });
    let (p, ens) = fixture("spde-basic", 32, (8, 256));
    let base = build_base(&p.coeffs, p.x0.unwrap(), &ens, &p.solver, 1e-8, 20).unwrap();
    g.bench_function("spde_query_8x256x32", |b| {
        b.iter(|| evaluate_u(0.5, black_box(1.5), &base, &p.coeffs, &p.solver).unwrap())
    });
    let (p, ens) = fixture("lq-basic", 32, (2048, 1));
    let lq = p.lq.clone().unwrap();
    g.bench_function("lq_basic_2048x1x32", |b| b.iter(|| lq_solve(&lq, &ens, &p.solver, 1e-10, 50).unwrap()));
    g.finish();
}

criterion_group!(benches, dsl, ensembles, regression, picard);
criterion_main!(benches);
