use crate::Session;
use anyhow::{Context, Result};
use kinfilt::bito::{backward_diffusion_spde_check, backward_integral_sweep, invariance_check, BackwardDiffusionSpec, ScalarSde, TestFunction};
use kinfilt::filter::{
    backward_estimate, fingerprint, forward_estimates, ks_backward_estimates, normalize, FilterEstimate,
};
use kinfilt::io::{fmt_f64, write_artifact, Manifest, Table};
use kinfilt::itow::{fit_flow_bounds, save_schedule, solve_forward_flow, transformed_coefficients, AdjointCoefficients, DirectCoefficients};
use kinfilt::kernels::{exact_langevin_kernel, gaussian_bound_kernel, AnisotropicPoint};
use kinfilt::parametrix::{
    certify_sandwich, frozen_kernel, parametrix_series, parametrix_z, series_sandwich_points, whitened_box, DeterministicField, LatticeField,
    QuadratureSpec, SandwichPoint, SandwichReport,
};
use kinfilt::rng::mix_seed;
use kinfilt::sde::{simulate_path, simulate_system, PathBundle, TimeGrid};
use kinfilt::tolerances::acceptance as acc;
use kinfilt::tolerances::CLIP_BUDGET;
use kinfilt::verify::{results_table, run, timing_table, Profile, VerifyOptions, CRITERIA};
use kinfilt::{CoefficientSet, Lattice2, ObservableFn};

fn emit(s: &Session, file: &str, command: &str, table: &Table, extra: &[&[u8]]) -> Result<()> {
    let manifest = Manifest::new(&format!("kinfilt {}", s.command_line), &s.cfg.to_toml(), extra);
    let path = s.out.join(file);
    write_artifact(&path, &manifest, table).with_context(|| format!("writing {}", path.display()))?;
    log::info!("{command}: wrote {}", path.display());
    Ok(())
}

fn observed(s: &Session) -> Result<(CoefficientSet, TimeGrid, PathBundle)> {
    let c = s.cfg.coefficients()?;
    let grid = s.cfg.grid()?;
    let (z, y) = s.cfg.start();
    let bundle = simulate_system(&c, (z[0], z[1], y), grid, s.cfg.seed)?;
    Ok((c, grid, bundle))
}

fn status(name: &str, pass: bool, detail: &str) -> bool {
    println!("{name}: {} {detail}", if pass { "pass" } else { "FAIL" });
    pass
}

pub fn simulate(s: &Session, paths: u64) -> Result<bool> {
    let c = s.cfg.coefficients()?;
    let grid = s.cfg.grid()?;
    let (z, y) = s.cfg.start();
    let mut t = Table::new(&["path", "step", "t", "x", "v", "y", "rho", "tilde_w"]);
    for p in 0..paths {
        let b = simulate_path(&c, (z[0], z[1], y), grid, s.cfg.seed, p)?;
        for k in 0..=grid.n_steps {
            t.push(vec![
                p.to_string(),
                k.to_string(),
                fmt_f64(grid.time(k)),
                fmt_f64(b.x[k]),
                fmt_f64(b.v[k]),
                fmt_f64(b.y[k]),
                fmt_f64(b.rho[k]),
                fmt_f64(b.tilde_w[k]),
            ]);
        }
    }
    emit(s, "simulate.csv", "simulate", &t, &[&paths.to_le_bytes()])?;
    Ok(status("simulate", true, &format!("paths={paths} steps={}", grid.n_steps)))
}

pub fn flow(s: &Session, dump_every: usize) -> Result<bool> {
    let (c, grid, bundle) = observed(s)?;
    let p = &s.cfg.parametrix;
    let lat = Lattice2::square(p.flow_half, p.flow_nodes)?;
    let schedule = save_schedule(grid.n_steps, dump_every, true);
    let f = solve_forward_flow(&DirectCoefficients(&c), &bundle.shared_increments(), grid, lat, &schedule)?;
    let mut t = Table::new(&["step", "time", "xi", "nu", "gamma", "d_nu", "d_xi"]);
    for (slot, sl) in f.slices.iter().enumerate() {
        for i in 0..lat.xi.n {
            for j in 0..lat.nu.n {
                let (xi, nu) = lat.point(i, j);
                let k = lat.index(i, j);
                t.push(vec![
                    f.saved_steps[slot].to_string(),
                    fmt_f64(sl.time),
                    fmt_f64(xi),
                    fmt_f64(nu),
                    fmt_f64(sl.gamma[k]),
                    fmt_f64(sl.d_nu[k]),
                    fmt_f64(sl.d_xi[k]),
                ]);
            }
        }
    }
    emit(s, "flow.csv", "flow", &t, &[])?;
    let rep = fit_flow_bounds(&f, c.flatten_eps);
    let mut b = Table::new(&["quantity", "value"]);
    for (k, v) in [
        ("eps", rep.eps),
        ("c_growth", rep.c_growth),
        ("c_dnu", rep.c_dnu),
        ("c_dxi", rep.c_dxi),
        ("c_second", rep.c_second),
        ("min_dnu", rep.min_dnu),
    ] {
        b.push(vec![k.into(), fmt_f64(v)]);
    }
    emit(s, "flow_bounds.csv", "flow", &b, &[])?;
    let pass = rep.finite() && rep.min_dnu > 0.0;
    Ok(status("flow", pass, &format!("min_dnu={} constants_finite={}", fmt_f64(rep.min_dnu), rep.finite())))
}

pub fn kernel(s: &Session) -> Result<bool> {
    let c = s.cfg.coefficients()?;
    let p = &s.cfg.parametrix;
    let (z, y) = s.cfg.start();
    let t0 = s.cfg.time.t0;
    let field = DeterministicField::new(DirectCoefficients(&c));
    let sigma = c.sigma_sq_jet(t0, z[0], z[1], y).v.sqrt();
    let mut t = Table::new(&["lag", "xi", "nu", "frozen", "prototype", "bound_lower", "bound_upper"]);
    let mut pass = true;
    let mut lambdas = Vec::new();
    for &lag in &p.lags {
        let g = frozen_kernel(&field, t0, z, t0 + lag)?.gauss;
        let pts = whitened_box(&g, p.box_nodes, p.box_half)?;
        let vals = pts.iter().map(|q| parametrix_z(&field, t0, z, t0 + lag, *q)).collect::<kinfilt::Result<Vec<_>>>()?;
        let sp: Vec<SandwichPoint> = pts
            .iter()
            .zip(&vals)
            .map(|(q, v)| SandwichPoint { lag, offset: [q[0] - g.mean[0], q[1] - g.mean[1]], value: *v, d_nu: None, d_nunu: None })
            .collect();
        let rep = certify_sandwich(&sp);
        pass &= rep.pass();
        let l = rep.lambda().unwrap_or(f64::INFINITY);
        lambdas.push(format!("{lag}:{}", fmt_f64(l)));
        for (q, v) in pts.iter().zip(&vals) {
            let ap = AnisotropicPoint::new(lag, q[0] - g.mean[0], q[1] - g.mean[1]);
            let (lo, hi) = if l.is_finite() { (gaussian_bound_kernel(1.0 / l, ap)?, gaussian_bound_kernel(l, ap)?) } else { (f64::NAN, f64::NAN) };
            t.push(vec![
                fmt_f64(lag),
                fmt_f64(q[0]),
                fmt_f64(q[1]),
                fmt_f64(*v),
                fmt_f64(exact_langevin_kernel(sigma, lag, z, *q)?),
                fmt_f64(lo),
                fmt_f64(hi),
            ]);
        }
    }
    emit(s, "kernel.csv", "kernel", &t, &[])?;
    Ok(status("kernel", pass, &format!("lambda={}", lambdas.join(","))))
}

fn sandwich_row(t: &mut Table, lag: f64, rep: &SandwichReport, decay: &[f64]) {
    let f = |x: Option<f64>| x.map_or("none".to_string(), fmt_f64);
    t.push(vec![
        fmt_f64(lag),
        f(rep.lambda_value),
        f(rep.lambda_d_nu),
        f(rep.lambda_d_nunu),
        rep.points.to_string(),
        decay.iter().map(|d| fmt_f64(*d)).collect::<Vec<_>>().join(" "),
        rep.pass().to_string(),
    ]);
}

pub fn parametrix(s: &Session) -> Result<bool> {
    let (c, _, bundle) = observed(s)?;
    let p = &s.cfg.parametrix;
    let (z, _) = s.cfg.start();
    let t0 = s.cfg.time.t0;
    let shared = bundle.shared_increments();
    let mut series_t = Table::new(&["lag", "xi", "nu", "value", "d_nu", "d_nunu"]);
    let mut report_t = Table::new(&["lag", "lambda_value", "lambda_d_nu", "lambda_d_nunu", "points", "decay", "pass"]);
    let mut pass = true;
    for &lag in &p.lags {
        let n_steps = ((lag * p.steps_per_unit as f64).round() as usize).max(2);
        let grid = TimeGrid::new(t0, t0 + lag, n_steps)?;
        // the observation path is resampled onto the parametrix grid by summing whole steps
        let ratio = s.cfg.grid()?.dt().recip() / p.steps_per_unit as f64;
        anyhow::ensure!(
            ratio >= 1.0 - 1e-9 && (ratio - ratio.round()).abs() < 1e-9,
            "parametrix steps_per_unit = {} must divide the scenario's steps per unit time",
            p.steps_per_unit
        );
        let per = ratio.round() as usize;
        let dw: Vec<f64> = shared.chunks(per).take(n_steps).map(|ch| ch.iter().sum()).collect();
        anyhow::ensure!(dw.len() == n_steps, "observation path shorter than lag {lag}");
        let lat = Lattice2::square(p.flow_half, p.flow_nodes)?;
        let flow = solve_forward_flow(&DirectCoefficients(&c), &dw, grid, lat, &save_schedule(n_steps, p.save_stride, true))?;
        let tc = transformed_coefficients(&AdjointCoefficients(&c), &flow, &flow.likelihood)?;
        let field = LatticeField::new(tc, 5e-3)?;
        let g = frozen_kernel(&field, t0, z, t0 + lag)?.gauss;
        let pts = whitened_box(&g, p.box_nodes, p.box_half)?;
        let series = parametrix_series(&field, p.order, t0, z, t0 + lag, &pts, &QuadratureSpec::default())?;
        for (i, q) in pts.iter().enumerate() {
            series_t.push(vec![fmt_f64(lag), fmt_f64(q[0]), fmt_f64(q[1]), fmt_f64(series.value(i)), fmt_f64(series.d_nu(i)), fmt_f64(series.d_nunu(i))]);
        }
        let rep = certify_sandwich(&series_sandwich_points(&series, true));
        pass &= rep.pass();
        sandwich_row(&mut report_t, lag, &rep, &series.decay);
    }
    emit(s, "parametrix_series.csv", "parametrix", &series_t, &[])?;
    emit(s, "parametrix_sandwich.csv", "parametrix", &report_t, &[])?;
    Ok(status("parametrix", pass, &format!("lags={}", p.lags.len())))
}

fn estimate_row(t: &mut Table, phi: &ObservableFn, e: &FilterEstimate) {
    t.push(vec![
        phi.id().into(),
        e.method.to_string(),
        fmt_f64(e.value),
        fmt_f64(e.stderr),
        e.ess.map_or(String::new(), fmt_f64),
        e.warning.clone().unwrap_or_default(),
        e.fingerprint.clone(),
    ]);
}

const ESTIMATE_HEADER: [&str; 7] = ["observable", "method", "value", "stderr", "ess", "warning", "fingerprint"];

pub fn filter_forward(s: &Session) -> Result<bool> {
    let (c, grid, bundle) = observed(s)?;
    let (z, y) = s.cfg.start();
    let dw = bundle.tilde_w_increments();
    let phi = s.cfg.observable.clone();
    let fp = fingerprint(&c, grid, s.cfg.seed, &format!("lattice={}x{}", s.cfg.lattice.n_xi, s.cfg.lattice.n_nu));
    let (run, est) = forward_estimates(&c, z, y, grid, &dw, &s.cfg.forward_spec(), std::slice::from_ref(&phi), &fp)?;
    let u = normalize(&run.density)?;
    let mut d = Table::new(&["i", "j", "x", "v", "density"]);
    for i in 0..u.lattice.xi.n {
        for j in 0..u.lattice.nu.n {
            let p = u.physical(i, j);
            d.push(vec![i.to_string(), j.to_string(), fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(u.values[u.lattice.index(i, j)])]);
        }
    }
    emit(s, "filter_forward_density.csv", "filter-forward", &d, &[])?;
    let mut t = Table::new(&ESTIMATE_HEADER);
    estimate_row(&mut t, &phi, &est[0]);
    emit(s, "filter_forward.csv", "filter-forward", &t, &[])?;
    let pass = run.clipped_fraction <= CLIP_BUDGET && est[0].value.is_finite();
    Ok(status(
        "filter-forward",
        pass,
        &format!(
            "{}={} stderr={} start_time={} clipped={}",
            phi.id(),
            fmt_f64(est[0].value),
            fmt_f64(est[0].stderr),
            fmt_f64(run.start.time),
            fmt_f64(run.clipped_fraction)
        ),
    ))
}

pub fn filter_backward(s: &Session) -> Result<bool> {
    let (c, grid, bundle) = observed(s)?;
    let (z, y) = s.cfg.start();
    let dw = bundle.tilde_w_increments();
    let phi = s.cfg.observable.clone();
    let ks = ks_backward_estimates(&c, z, y, grid, &dw, std::slice::from_ref(&phi), s.cfg.particles.ks, mix_seed(s.cfg.seed, 1))?;
    let fp = fingerprint(&c, grid, s.cfg.seed, &format!("backward={}x{}x{}", s.cfg.lattice.backward_n_x, s.cfg.lattice.backward_n_v, s.cfg.lattice.backward_n_y));
    let lattice = backward_estimate(&c, z, y, grid, &dw, &phi, &s.cfg.backward_spec(), &fp)?;
    let mut t = Table::new(&ESTIMATE_HEADER);
    estimate_row(&mut t, &phi, &ks[0]);
    estimate_row(&mut t, &phi, &lattice);
    emit(s, "filter_backward.csv", "filter-backward", &t, &[])?;
    let d = ks[0].discrepancy(&lattice);
    Ok(status(
        "filter-backward",
        d <= acc::CONSISTENCY_SIGMAS,
        &format!("{}: ks={} lattice={} discrepancy={:.2} se", phi.id(), fmt_f64(ks[0].value), fmt_f64(lattice.value), d),
    ))
}

pub fn bito_check(s: &Session) -> Result<bool> {
    let seed = s.cfg.seed;
    let integral = backward_integral_sweep(1.0, 12, (4, 10), acc::BACKWARD_ITO_SEEDS, seed);
    let spec = BackwardDiffusionSpec { base_seed: seed, ..Default::default() };
    let spde = backward_diffusion_spde_check(ScalarSde::ou(), &spec);
    let inv = invariance_check(ScalarSde::ou(), TestFunction::Sigmoid, &spec);
    let mut t = Table::new(&["check", "mesh", "median_residual", "rate"]);
    for (name, rep) in [("backward-integral", &integral), ("backward-diffusion", &spde), ("invariance", &inv)] {
        for (mesh, r) in &rep.rows {
            t.push(vec![name.into(), fmt_f64(*mesh), fmt_f64(*r), fmt_f64(rep.rate)]);
        }
    }
    emit(s, "bito_check.csv", "bito-check", &t, &[])?;
    let rates = [integral.rate, spde.rate, inv.rate];
    Ok(status(
        "bito-check",
        rates.iter().all(|r| *r >= acc::MIN_RATE),
        &format!("rates={:.3}/{:.3}/{:.3}", rates[0], rates[1], rates[2]),
    ))
}

pub fn verify(s: &Session, quick: bool, criteria: &[u8]) -> Result<bool> {
    let profile = if quick { Profile::Quick } else { Profile::Full };
    let mut opts = VerifyOptions::new(profile, s.cfg.seed)?;
    if s.explicit_config {
        opts.scenarios = vec![s.cfg.clone()];
    }
    let ids: Vec<u8> = if criteria.is_empty() { CRITERIA.iter().map(|c| c.0).collect() } else { criteria.to_vec() };
    let results = run(&opts, &ids)?;
    let mut all = true;
    for r in &results {
        let ok = r.pass && r.within_budget();
        all &= ok;
        status(&format!("criterion {} {}", r.id, r.name), ok, &format!("metric={} ({:.1}s) {}", fmt_f64(r.metric), r.seconds, r.detail));
    }
    let scenario_text: Vec<String> = opts.scenarios.iter().map(|c| c.to_toml()).collect();
    let joined = scenario_text.join("\n");
    emit(s, "verify.csv", "verify", &results_table(&results), &[joined.as_bytes(), format!("{profile:?}").as_bytes()])?;
    emit(s, "verify_timing.csv", "verify", &timing_table(&results), &[])?;
    Ok(all)
}
