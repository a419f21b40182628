use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use kinfilt::bito::backward_integral;
use kinfilt::filter::{forward_spde_step, particle_oracle, GridDensity, OracleSpec};
use kinfilt::kernels::{exact_langevin_kernel, langevin_gaussian, log_gaussian_bound_kernel, AnisotropicPoint};
use kinfilt::model::ObservableFn;
use kinfilt::rng::NormalStream;
use kinfilt::sde::TimeGrid;
use kinfilt::{CoefficientSet, Lattice2};

fn kernels(c: &mut Criterion) {
    c.bench_function("exact_langevin_kernel", |b| {
        b.iter(|| exact_langevin_kernel(black_box(0.9), black_box(0.3), [0.1, -0.2], [0.4, 0.3]).unwrap())
    });
    c.bench_function("log_gaussian_bound_kernel", |b| {
        b.iter(|| log_gaussian_bound_kernel(black_box(2.0), AnisotropicPoint::new(0.3, 0.1, -0.4)).unwrap())
    });
}

fn forward_step(c: &mut Criterion) {
    let coeffs = CoefficientSet::from_id("sinusoidal").unwrap();
    let lattice = Lattice2::square(4.0, 129).unwrap();
    let g = langevin_gaussian(1.0, 0.5, [0.0, 0.5]).unwrap();
    let u = GridDensity::from_gaussian(0.0, lattice, 0.0, &g, 1.0).unwrap();
    c.bench_function("forward_spde_step_129", |b| b.iter(|| forward_spde_step(black_box(&u), &coeffs, 0.1, 0.01, 1e-4).unwrap()));
}

fn oracle(c: &mut Criterion) {
    let coeffs = CoefficientSet::from_id("constant").unwrap();
    let grid = TimeGrid::new(0.0, 0.5, 100).unwrap();
    let dw = NormalStream::new(3, 0, 0).increments(100, grid.dt());
    let phis = [ObservableFn::from_id("v").unwrap()];
    let spec = OracleSpec::default();
    let mut group = c.benchmark_group("particle_oracle");
    group.sample_size(10);
    group.bench_function("2000x100", |b| {
        b.iter(|| particle_oracle(&coeffs, [0.0, 0.5], 0.0, grid, &dw, &phis, 2000, 1, &spec).unwrap())
    });
    group.finish();
}

fn backward_ito(c: &mut Criterion) {
    let n = 10_000;
    let w: Vec<f64> = std::iter::once(0.0)
        .chain(NormalStream::new(5, 0, 0).increments(n, 1.0 / n as f64).into_iter().scan(0.0, |s, d| {
            *s += d;
            Some(*s)
        }))
        .collect();
    let u: Vec<f64> = w.iter().map(|x| x.tanh()).collect();
    c.bench_function("backward_integral_1e4", |b| b.iter(|| backward_integral(black_box(&u), &w, 1.0 / n as f64).unwrap()));
}

criterion_group!(benches, kernels, forward_step, oracle, backward_ito);
criterion_main!(benches);
