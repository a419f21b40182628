//! Acceptance suite: nine numerical criteria with pinned thresholds.
//!
//! Results tables hold only deterministic quantities; wall-clock times are reported
//! separately so that two runs with the same inputs produce identical bytes.

use crate::bito::{backward_diffusion_spde_check, backward_integral_sweep, invariance_check, BackwardDiffusionSpec, ScalarSde, TestFunction};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::filter::{
    backward_filtering_density, backward_kernel_family, forward_estimates, forward_fundamental, ks_backward_estimates, normalize,
    particle_oracle, estimate_forward, terminal_grid, BackwardSpec, FilterEstimate, ForwardSpec,
};
use crate::io::{fmt_f64, Table};
use crate::itow::{fit_flow_bounds, save_schedule, solve_forward_flow, transformed_coefficients, AdjointCoefficients, DirectCoefficients};
use crate::kernels::{langevin_covariance, langevin_gaussian, Gaussian2, Point};
use crate::lattice::{Axis, Lattice2};
use crate::model::{CoefficientSet, ObservableFn, Preset};
use crate::parametrix::{
    certify_sandwich, fit_gradient_exponent, frozen_kernel, kernel_h, parametrix_series, series_sandwich_points, solve_backward_cauchy,
    whitened_box, CauchySpec, DeterministicField, LatticeField, QuadratureSpec,
};
use crate::rng::{mix_seed, NormalStream, CH_SHARED};
use crate::sde::{simulate_system, TimeGrid};
use crate::tolerances::acceptance as acc;
use std::time::Instant;

/// Problem sizes: `Full` runs the criteria as specified, `Quick` is a smoke-scale replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Full,
    Quick,
}

impl Profile {
    fn full(self) -> bool {
        self == Profile::Full
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub profile: Profile,
    pub seed: u64,
    /// Observation scenarios for the consistency and normalization criteria.
    pub scenarios: Vec<ScenarioConfig>,
}

impl VerifyOptions {
    pub fn new(profile: Profile, seed: u64) -> Result<Self> {
        Ok(Self { profile, seed, scenarios: shipped_scenarios()? })
    }
}

/// Scenario files shipped with the crate.
pub const SHIPPED_SCENARIOS: [(&str, &str); 2] =
    [("constant", include_str!("../scenarios/constant.toml")), ("sinusoidal", include_str!("../scenarios/sinusoidal.toml"))];

pub fn shipped_scenarios() -> Result<Vec<ScenarioConfig>> {
    SHIPPED_SCENARIOS.iter().map(|(_, text)| ScenarioConfig::parse(text)).collect()
}

/// Outcome of one criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    /// Headline measurement compared against `threshold`.
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
    /// Wall-clock budget of the full-scale criterion.
    pub budget: f64,
}

impl CriterionResult {
    pub fn within_budget(&self) -> bool {
        self.seconds <= self.budget
    }
}

struct Outcome {
    pass: bool,
    metric: f64,
    detail: String,
}

pub const CRITERIA: [(u8, &str, f64, f64); 9] = [
    (1, "prototype-kernel", acc::PROTOTYPE_L1, acc::PROTOTYPE_SECONDS),
    (2, "parametrix-degeneracy", acc::DEGENERATE_H, acc::DEGENERATE_SECONDS),
    (3, "gaussian-sandwich", crate::tolerances::LAMBDA_MAX, acc::SANDWICH_SECONDS),
    (4, "filtering-consistency", acc::CONSISTENCY_SIGMAS, acc::CONSISTENCY_SECONDS),
    (5, "normalization", acc::NORMALIZATION, 60.0),
    (6, "flow-bounds", acc::FLOW_SHORT_DEVIATION, acc::FLOW_SECONDS),
    (7, "backward-ito", acc::MIN_RATE, acc::BACKWARD_ITO_SECONDS),
    (8, "backward-cauchy", acc::CAUCHY_GAUSSIAN, acc::CAUCHY_SECONDS),
    (9, "reproducibility", 0.0, 120.0),
];

/// Runs one criterion; numerical failures are reported as a failed criterion.
pub fn run_criterion(id: u8, opts: &VerifyOptions) -> Result<CriterionResult> {
    let &(_, name, threshold, budget) = CRITERIA.iter().find(|c| c.0 == id).ok_or_else(|| Error::OutOfRange(format!("criterion {id}")))?;
    let clock = Instant::now();
    let out = match id {
        1 => prototype(opts),
        2 => degeneracy(opts),
        3 => sandwich(opts),
        4 => consistency(opts),
        5 => normalization(opts),
        6 => flow_bounds(opts),
        7 => backward_ito(opts),
        8 => backward_cauchy(opts),
        _ => reproducibility(opts),
    };
    let out = out.unwrap_or_else(|e| Outcome { pass: false, metric: f64::NAN, detail: format!("error: {e}") });
    log::info!("criterion {id} {name}: {} ({})", if out.pass { "pass" } else { "FAIL" }, out.detail);
    Ok(CriterionResult { id, name, pass: out.pass, metric: out.metric, threshold, detail: out.detail, seconds: clock.elapsed().as_secs_f64(), budget })
}

pub fn run(opts: &VerifyOptions, ids: &[u8]) -> Result<Vec<CriterionResult>> {
    ids.iter().map(|id| run_criterion(*id, opts)).collect()
}

/// Deterministic results table.
pub fn results_table(results: &[CriterionResult]) -> Table {
    let mut t = Table::new(&["criterion", "name", "pass", "metric", "threshold", "detail"]);
    for r in results {
        t.push(vec![r.id.to_string(), r.name.into(), r.pass.to_string(), fmt_f64(r.metric), fmt_f64(r.threshold), r.detail.clone()]);
    }
    t
}

pub fn timing_table(results: &[CriterionResult]) -> Table {
    let mut t = Table::new(&["criterion", "seconds", "budget", "within_budget"]);
    for r in results {
        t.push(vec![r.id.to_string(), format!("{:.3}", r.seconds), fmt_f64(r.budget), r.within_budget().to_string()]);
    }
    t
}

fn shared_increments(seed: u64, grid: TimeGrid) -> Vec<f64> {
    NormalStream::new(seed, 0, CH_SHARED).increments(grid.n_steps, grid.dt())
}

fn prototype(opts: &VerifyOptions) -> Result<Outcome> {
    let c = CoefficientSet::from_id("langevin-pure")?;
    let sigma = match c.preset {
        Preset::LangevinPure { sigma_hat } => sigma_hat,
        _ => unreachable!(),
    };
    let grid = TimeGrid::new(0.0, acc::PROTOTYPE_HORIZON, 1000)?;
    let dw = shared_increments(opts.seed, grid);
    let n = acc::PROTOTYPE_LATTICE;
    let run = forward_fundamental(&c, [0.0, 0.0], 0.0, grid, &dw, &ForwardSpec { n_eta: n, n_nu: n, ..Default::default() })?;
    let exact = langevin_gaussian(sigma, acc::PROTOTYPE_HORIZON, [0.0, 0.0])?;
    let d = &run.density;
    let ny = d.lattice.nu.n;
    let diff: Vec<f64> = (0..d.values.len()).map(|k| (d.values[k] - exact.density(d.physical(k / ny, k % ny))).abs()).collect();
    let l1 = d.lattice.trapezoid(&diff);
    Ok(Outcome {
        pass: l1 <= acc::PROTOTYPE_L1 && run.density.min_ratio >= -1e-8,
        metric: l1,
        detail: format!("lattice={n}x{n} min_ratio={} start_time={}", fmt_f64(run.density.min_ratio), fmt_f64(run.start.time)),
    })
}

fn degeneracy(opts: &VerifyOptions) -> Result<Outcome> {
    let c = CoefficientSet::from_id("constant")?;
    let f = DeterministicField::new(DirectCoefficients(&c));
    let z = [0.0, 0.5];
    let (box_n, spec) = if opts.profile.full() {
        (9, QuadratureSpec::default())
    } else {
        (5, QuadratureSpec { space_nodes: 10, inner_space_nodes: 6, time_per_half: 3, inner_time_per_half: 2, ..Default::default() })
    };
    let (mut sup_h, mut sup_tail) = (0.0f64, 0.0f64);
    for lag in acc::SANDWICH_LAGS {
        let g = frozen_kernel(&f, 0.0, z, lag)?.gauss;
        let pts = whitened_box(&g, box_n, 3.0)?;
        for p in &pts {
            sup_h = sup_h.max(kernel_h(&f, 0.0, z, lag, *p)?.abs());
        }
        let s = parametrix_series(&f, 3, 0.0, z, lag, &pts, &spec)?;
        for i in 0..pts.len() {
            sup_tail = sup_tail.max((s.value(i) - s.terms[0][i][0]).abs());
        }
    }
    let metric = sup_h.max(sup_tail);
    Ok(Outcome { pass: metric < acc::DEGENERATE_H, metric, detail: format!("sup_h={} sup_series_minus_first={}", fmt_f64(sup_h), fmt_f64(sup_tail)) })
}

fn sandwich(opts: &VerifyOptions) -> Result<Outcome> {
    let c = CoefficientSet::from_id("sinusoidal")?;
    let p = crate::config::ParametrixConfig::default();
    let (lags, order, box_n, flow_n, spec): (Vec<f64>, usize, usize, usize, QuadratureSpec) = if opts.profile.full() {
        (p.lags.clone(), p.order, p.box_nodes, p.flow_nodes, QuadratureSpec::default())
    } else {
        (vec![0.1], 2, 7, 33, QuadratureSpec { space_nodes: 12, inner_space_nodes: 8, time_per_half: 4, inner_time_per_half: 3, ..Default::default() })
    };
    let z = [0.0, 0.5];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    let mut pass = true;
    for lag in lags {
        let n_steps = ((lag * p.steps_per_unit as f64).round() as usize).max(2);
        let grid = TimeGrid::new(0.0, lag, n_steps)?;
        let dw = shared_increments(opts.seed, grid);
        let lat = Lattice2::square(p.flow_half, flow_n)?;
        let flow = solve_forward_flow(&DirectCoefficients(&c), &dw, grid, lat, &save_schedule(n_steps, p.save_stride, true))?;
        let tc = transformed_coefficients(&AdjointCoefficients(&c), &flow, &flow.likelihood)?;
        let field = LatticeField::new(tc, 5e-3)?;
        let g = frozen_kernel(&field, 0.0, z, lag)?.gauss;
        let pts = whitened_box(&g, box_n, p.box_half)?;
        let series = parametrix_series(&field, order, 0.0, z, lag, &pts, &spec)?;
        let rep = certify_sandwich(&series_sandwich_points(&series, true));
        pass &= rep.pass();
        let l = rep.lambda().unwrap_or(f64::INFINITY);
        worst = worst.max(l);
        parts.push(format!(
            "lag={lag}:lambda={}/{}/{} decay={}",
            fmt_f64(rep.lambda_value.unwrap_or(f64::INFINITY)),
            fmt_f64(rep.lambda_d_nu.unwrap_or(f64::INFINITY)),
            fmt_f64(rep.lambda_d_nunu.unwrap_or(f64::INFINITY)),
            series.decay.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join("/")
        ));
    }
    Ok(Outcome { pass: pass && worst <= crate::tolerances::LAMBDA_MAX, metric: worst, detail: parts.join(" ") })
}

fn scaled_scenario(cfg: &ScenarioConfig, full: bool) -> ScenarioConfig {
    let mut cfg = cfg.clone();
    if !full {
        // same cell size as the full lattice, narrower cover
        cfg.lattice.n_xi = 97;
        cfg.lattice.n_nu = 97;
        cfg.lattice.n_std = 6.0;
        cfg.particles.ks = 4000;
        cfg.particles.oracle = 4000;
    } else {
        cfg.particles.ks = acc::CONSISTENCY_PARTICLES;
        cfg.particles.oracle = acc::CONSISTENCY_PARTICLES;
    }
    cfg
}

const CONSISTENCY_OBSERVABLES: [ObservableFn; 3] = [ObservableFn::One, ObservableFn::V, ObservableFn::TanhXi];

/// Forward, Kallianpur-Striebel and oracle estimates on one shared observation path.
pub fn scenario_estimates(cfg: &ScenarioConfig, phis: &[ObservableFn]) -> Result<[Vec<FilterEstimate>; 3]> {
    let c = cfg.coefficients()?;
    let grid = cfg.grid()?;
    let (z, y0) = cfg.start();
    let bundle = simulate_system(&c, (z[0], z[1], y0), grid, cfg.seed)?;
    let dw = bundle.tilde_w_increments();
    let fp = crate::filter::fingerprint(&c, grid, cfg.seed, &format!("lattice={}x{}", cfg.lattice.n_xi, cfg.lattice.n_nu));
    let (_, fwd) = forward_estimates(&c, z, y0, grid, &dw, &cfg.forward_spec(), phis, &fp)?;
    let ks = ks_backward_estimates(&c, z, y0, grid, &dw, phis, cfg.particles.ks, mix_seed(cfg.seed, 1))?;
    let or = particle_oracle(&c, z, y0, grid, &dw, phis, cfg.particles.oracle, mix_seed(cfg.seed, 2), &cfg.oracle_spec())?;
    Ok([fwd, ks, or])
}

fn consistency(opts: &VerifyOptions) -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut exact_one = true;
    let mut parts = Vec::new();
    for base in &opts.scenarios {
        let cfg = scaled_scenario(base, opts.profile.full());
        let est = scenario_estimates(&cfg, &CONSISTENCY_OBSERVABLES)?;
        for m in &est {
            exact_one &= m[0].value == 1.0;
        }
        for (q, phi) in CONSISTENCY_OBSERVABLES.iter().enumerate().skip(1) {
            let d = [est[0][q].discrepancy(&est[1][q]), est[0][q].discrepancy(&est[2][q]), est[1][q].discrepancy(&est[2][q])];
            let m = d.iter().cloned().fold(0.0, f64::max);
            worst = worst.max(m);
            parts.push(format!(
                "{}:{}={}/{}/{}(max {:.2} se)",
                cfg.name,
                phi.id(),
                fmt_f64(est[0][q].value),
                fmt_f64(est[1][q].value),
                fmt_f64(est[2][q].value),
                m
            ));
        }
    }
    Ok(Outcome { pass: exact_one && worst <= acc::CONSISTENCY_SIGMAS, metric: worst, detail: format!("one_exact={exact_one} {}", parts.join(" ")) })
}

fn normalization(opts: &VerifyOptions) -> Result<Outcome> {
    let mut worst_norm = 0.0f64;
    let mut worst_scale = 0.0f64;
    for base in &opts.scenarios {
        let cfg = if opts.profile.full() { base.clone() } else { scaled_scenario(base, false) };
        let c = cfg.coefficients()?;
        let grid = cfg.grid()?;
        let (z, y0) = cfg.start();
        let dw = simulate_system(&c, (z[0], z[1], y0), grid, cfg.seed)?.tilde_w_increments();
        let run = forward_fundamental(&c, z, y0, grid, &dw, &cfg.forward_spec())?;
        let u = normalize(&run.density)?;
        worst_norm = worst_norm.max((u.total_mass - 1.0).abs()).max((u.integrate(|_| 1.0) - 1.0).abs());
        let big = normalize(&run.density.scaled(acc::SCALE_FACTOR))?;
        for phi in [ObservableFn::V, ObservableFn::TanhXi] {
            let a = estimate_forward(&u, None, &phi, "")?.value;
            let b = estimate_forward(&big, None, &phi, "")?.value;
            worst_scale = worst_scale.max((a - b).abs());
        }
    }
    // backward family on the kinetic prototype
    let c = CoefficientSet::from_id("langevin-pure")?;
    let grid = TimeGrid::new(0.0, 0.2, 400)?;
    let dw = shared_increments(opts.seed, grid);
    let nodes = terminal_grid(Axis::new(-1.0, 1.0, 5)?, Axis::new(-1.5, 1.5, 5)?, Axis::new(-0.6, 0.6, 3)?);
    let spec = BackwardSpec { n_eta: 21, n_v: 21, n_y: 5, n_std: 6.0 };
    let fam = backward_kernel_family(&c, [0.0, 0.0], 0.0, grid, &dw, &nodes, [0.4, 0.6, 0.4], &spec)?;
    let dens = backward_filtering_density(&fam, &nodes)?;
    let total: f64 = dens.iter().zip(&nodes).map(|(d, n)| d * n.weight).sum();
    worst_norm = worst_norm.max((total - 1.0).abs());
    let scaled: Vec<f64> = fam.iter().map(|f| f * acc::SCALE_FACTOR).collect();
    let dens2 = backward_filtering_density(&scaled, &nodes)?;
    let mean = |d: &[f64]| -> f64 { d.iter().zip(&nodes).map(|(d, n)| d * n.weight * n.zeta[1].tanh()).sum() };
    worst_scale = worst_scale.max((mean(&dens) - mean(&dens2)).abs());
    Ok(Outcome {
        pass: worst_norm <= acc::NORMALIZATION && worst_scale < acc::SCALE_INVARIANCE,
        metric: worst_norm,
        detail: format!("mass_error={} scale_change={}", fmt_f64(worst_norm), fmt_f64(worst_scale)),
    })
}

fn flow_bounds(opts: &VerifyOptions) -> Result<Outcome> {
    let c = CoefficientSet::from_id("sinusoidal")?;
    let seeds = if opts.profile.full() { acc::FLOW_SEEDS } else { 8 };
    let n_steps = 1000;
    let grid = TimeGrid::new(0.0, 0.1, n_steps)?;
    let short_step = (acc::FLOW_SHORT_LAG / grid.dt()).round() as usize;
    let lat = Lattice2::square(6.0, 33)?;
    let mut schedule = save_schedule(n_steps, 50, true);
    if !schedule.contains(&short_step) {
        schedule.push(short_step);
        schedule.sort_unstable();
    }
    let mut min_dnu = f64::INFINITY;
    let mut worst_dev = 0.0f64;
    let mut finite = true;
    let mut worst_const = 0.0f64;
    for k in 0..seeds {
        let dw = shared_increments(mix_seed(opts.seed, 100 + k), grid);
        let f = solve_forward_flow(&DirectCoefficients(&c), &dw, grid, lat, &schedule)?;
        let rep = fit_flow_bounds(&f, c.flatten_eps);
        min_dnu = min_dnu.min(rep.min_dnu);
        finite &= rep.finite();
        worst_const = worst_const.max(rep.c_growth).max(rep.c_dnu).max(rep.c_dxi).max(rep.c_second);
        for (lag, dev) in &rep.dnu_deviation {
            if (lag - acc::FLOW_SHORT_LAG).abs() < 0.5 * grid.dt() {
                worst_dev = worst_dev.max(*dev);
            }
        }
    }
    Ok(Outcome {
        pass: min_dnu > 0.0 && finite && worst_dev < acc::FLOW_SHORT_DEVIATION,
        metric: worst_dev,
        detail: format!("seeds={seeds} min_dnu={} constants_finite={finite} max_constant={}", fmt_f64(min_dnu), fmt_f64(worst_const)),
    })
}

fn backward_ito(opts: &VerifyOptions) -> Result<Outcome> {
    let (seeds, spde_seeds) = if opts.profile.full() { (acc::BACKWARD_ITO_SEEDS, 200) } else { (100, 40) };
    let integral = backward_integral_sweep(1.0, 12, (4, 10), seeds, opts.seed);
    let spec = BackwardDiffusionSpec { seeds: spde_seeds, base_seed: opts.seed, ..Default::default() };
    let spde = backward_diffusion_spde_check(ScalarSde::ou(), &spec);
    let inv = invariance_check(ScalarSde::ou(), TestFunction::Sigmoid, &spec);
    let rates = [integral.rate, spde.rate, inv.rate];
    let metric = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Outcome {
        pass: metric >= acc::MIN_RATE,
        metric,
        detail: format!("integral_rate={:.4} spde_rate={:.4} invariance_rate={:.4}", rates[0], rates[1], rates[2]),
    })
}

fn backward_cauchy(opts: &VerifyOptions) -> Result<Outcome> {
    let sigma = 0.9;
    let c = CoefficientSet::new(Preset::LangevinPure { sigma_hat: sigma });
    let (center, var) = ([0.3, -0.2], [0.2, 0.5]);
    let phi = ObservableFn::Gaussian { center, var };
    let horizon = 0.5;
    let pts: Vec<Point> = vec![[0.0, 0.0], [0.5, 0.4], [-0.3, 0.8], [1.0, -1.0]];
    let sol = solve_backward_cauchy(&c, &phi, 0.0, horizon, &pts, 1, &CauchySpec::default())?;
    let cov = langevin_covariance(sigma, horizon);
    let g = Gaussian2::new(center, [[cov[0][0] + var[0], cov[0][1]], [cov[1][0], cov[1][1] + var[1]]])?;
    let norm = 2.0 * std::f64::consts::PI * (var[0] * var[1]).sqrt();
    let err = pts.iter().zip(&sol.values).map(|(z, v)| (v - norm * g.density([z[0] + horizon * z[1], z[1]])).abs()).fold(0.0, f64::max);
    let alpha = 0.5;
    let lags: Vec<f64> = if opts.profile.full() { (4..=8).rev().map(|k| 0.5f64.powi(k)).collect() } else { vec![1.0 / 64.0, 1.0 / 16.0] };
    let fit = fit_gradient_exponent(
        &CoefficientSet::new(Preset::LangevinPure { sigma_hat: 1.0 }),
        &ObservableFn::Holder { alpha, center: 0.0 },
        1.0,
        &lags,
        0.0,
        &CauchySpec::default(),
    )?;
    let target = (1.0 - alpha) / 2.0;
    Ok(Outcome {
        pass: err <= acc::CAUCHY_GAUSSIAN && (fit.exponent - target).abs() <= acc::CAUCHY_EXPONENT_BAND,
        metric: err,
        detail: format!("holder_exponent={:.4} target={target}", fit.exponent),
    })
}

fn reproducibility(opts: &VerifyOptions) -> Result<Outcome> {
    let quick = VerifyOptions { profile: Profile::Quick, ..opts.clone() };
    let ids: Vec<u8> = (1..=8).collect();
    let a = results_table(&run(&quick, &ids)?).to_csv()?;
    let b = results_table(&run(&quick, &ids)?).to_csv()?;
    let differing = a.bytes().zip(b.bytes()).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
    Ok(Outcome { pass: differing == 0, metric: differing as f64, detail: format!("bytes={} differing={differing}", a.len()) })
}
