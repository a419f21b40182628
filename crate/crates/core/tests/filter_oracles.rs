use kinfilt::filter::*;
use kinfilt::kernels::langevin_covariance;
use kinfilt::rng::{mix_seed, NormalStream};
use kinfilt::sde::{simulate_system, TimeGrid};
use kinfilt::verify::shipped_scenarios;
use kinfilt::{CoefficientSet, ObservableFn};
use proptest::prelude::*;

fn scenario(i: usize) -> (CoefficientSet, TimeGrid, Vec<f64>) {
    let cfg = shipped_scenarios().unwrap()[i].clone();
    let c = cfg.coefficients().unwrap();
    let grid = cfg.grid().unwrap();
    let (z, y) = cfg.start();
    let dw = simulate_system(&c, (z[0], z[1], y), grid, cfg.seed).unwrap().tilde_w_increments();
    (c, grid, dw)
}

// With constant coefficients the first observation channel reveals W¹ exactly, so the
// posterior is the Langevin kernel of the remaining noise, recentred on the observed part.
#[test]
fn constant_preset_matches_exact_posterior() {
    let (c, grid, dw) = scenario(0);
    let (s1, sh, h) = (0.5, 1.0, 0.3);
    let dt = grid.dt();
    let t = grid.t1 - grid.t0;
    let mut w1 = 0.0;
    let mut int_w1 = 0.0;
    for d in &dw {
        let next = w1 + d - h * dt;
        int_w1 += 0.5 * (w1 + next) * dt;
        w1 = next;
    }
    let mean = [0.5 * t + s1 * int_w1, 0.5 + s1 * w1];
    let cov = langevin_covariance(sh, t);

    let run = forward_fundamental(&c, [0.0, 0.5], 0.0, grid, &dw, &ForwardSpec::default()).unwrap();
    let (m, p) = normalize(&run.density).unwrap().moments();
    assert!((m[1] - mean[1]).abs() < 1e-4, "{m:?} {mean:?}");
    assert!((m[0] - mean[0]).abs() < 3e-4, "{m:?} {mean:?}");
    for r in 0..2 {
        for q in 0..2 {
            assert!((p[r][q] - cov[r][q]).abs() < 3e-4, "{p:?} {cov:?}");
        }
    }
    assert!(run.clipped_fraction < 1e-6);
}

#[test]
fn halving_the_start_width_changes_little() {
    let phis = [ObservableFn::V, ObservableFn::TanhXi];
    for i in 0..2 {
        let (c, grid, dw) = scenario(i);
        let at = |w: f64| {
            let spec = ForwardSpec { init_width: w, ..Default::default() };
            let run = forward_fundamental(&c, [0.0, 0.5], 0.0, grid, &dw, &spec).unwrap();
            let u = normalize(&run.density).unwrap();
            phis.clone().map(|phi| estimate_forward(&u, None, &phi, "").unwrap().value)
        };
        let (a, b) = (at(2.0), at(1.0));
        for q in 0..2 {
            assert!((a[q] - b[q]).abs() < 1e-3, "scenario {i}: {a:?} vs {b:?}");
        }
    }
}

#[test]
fn backward_ratio_agrees_with_ks() {
    let c = CoefficientSet::from_id("sinusoidal").unwrap();
    let grid = TimeGrid::new(0.0, 0.2, 400).unwrap();
    let dw = NormalStream::new(11, 0, 0).increments(grid.n_steps, grid.dt());
    let z = [0.0, 0.5];
    let spec = BackwardSpec { n_eta: 41, n_v: 41, n_y: 9, n_std: 8.0 };
    let phis = [ObservableFn::V, ObservableFn::TanhXi];
    let ks = ks_backward_estimates(&c, z, 0.0, grid, &dw, &phis, 40_000, mix_seed(11, 1)).unwrap();
    for (q, phi) in phis.iter().enumerate() {
        let b = backward_estimate(&c, z, 0.0, grid, &dw, phi, &spec, "").unwrap();
        assert!(b.discrepancy(&ks[q]) < 3.0, "{b:?} {:?}", ks[q]);
    }
}

#[test]
fn forward_and_oracle_agree_on_a_short_horizon() {
    let c = CoefficientSet::from_id("sinusoidal").unwrap();
    let grid = TimeGrid::new(0.0, 0.3, 1000).unwrap();
    let dw = NormalStream::new(12, 0, 0).increments(grid.n_steps, grid.dt());
    let phis = [ObservableFn::One, ObservableFn::V];
    let (_, fwd) = forward_estimates(&c, [0.0, 0.5], 0.0, grid, &dw, &ForwardSpec::default(), &phis, "").unwrap();
    let or = particle_oracle(&c, [0.0, 0.5], 0.0, grid, &dw, &phis, 20_000, 3, &OracleSpec::default()).unwrap();
    assert_eq!(fwd[0].value, 1.0);
    assert_eq!(or[0].value, 1.0);
    assert!(fwd[1].discrepancy(&or[1]) < 3.0, "{:?} {:?}", fwd[1], or[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimates_ignore_density_scale(k in 1e-6f64..1e6, s in 0.05f64..0.4, mv in -0.5f64..0.5) {
        let lat = kinfilt::Lattice2::square(3.0, 41).unwrap();
        let g = kinfilt::Gaussian2::new([0.1, mv], [[s * s, 0.3 * s * s], [0.3 * s * s, 2.0 * s * s]]).unwrap();
        let u = GridDensity::from_gaussian(0.0, lat, 0.0, &g, 1.0).unwrap();
        for phi in [ObservableFn::One, ObservableFn::V, ObservableFn::TanhXi] {
            let a = estimate_forward(&normalize(&u).unwrap(), None, &phi, "").unwrap().value;
            let b = estimate_forward(&normalize(&u.scaled(k)).unwrap(), None, &phi, "").unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        let n = normalize(&u.scaled(k)).unwrap();
        prop_assert!((n.total_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_transport_conserves_mass(shift in 0.0f64..0.5, steps in 1usize..20) {
        let c = CoefficientSet::constant(0.0, 0.0, 0.0, 0.0, 1.0);
        let lat = kinfilt::Lattice2::square(3.0, 33).unwrap();
        let g = kinfilt::Gaussian2::new([0.0, 0.2], [[0.2, 0.05], [0.05, 0.3]]).unwrap();
        let mut u = GridDensity::from_gaussian(shift, lat, 0.0, &g, 1.0).unwrap();
        let m0 = u.total_mass;
        for _ in 0..steps {
            u = forward_spde_step(&u, &c, 0.0, 0.01, 0.01).unwrap();
        }
        prop_assert!((u.total_mass - m0).abs() < 1e-12 * m0);
    }
}
