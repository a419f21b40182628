//! Filtering engines.
//!
//! The forward filtering equation is solved on a sheared lattice whose nodes move with
//! the free transport `ξ ↦ ξ + dt ν`, so the transport part is exact and only the
//! velocity operators are discretized. Lattices store `(η, ν)` with the physical position
//! `ξ = η + (time - anchor) ν`; in these coordinates `∂_ν` at fixed `ξ` reads
//! `∂_ν - (time - anchor) ∂_η`.

use crate::error::{domain, Error, Result};
use crate::kernels::{Gaussian2, Mat2, Point};
use crate::lattice::{Axis, Lattice2};
use crate::model::{CoefficientSet, ObservableFn};
use crate::rng::{uniform_at, NormalStream, CH_ORACLE, CH_RESAMPLE};
use crate::sde::{q_terminal, TimeGrid};
use crate::tolerances::{DIFFUSION_CFL, ESS_WARNING, MASS_FLOOR, OBSERVATION_CAP};
use rayon::prelude::*;
use std::fmt;

/// Unnormalized or normalized density on a sheared `(η, ν)` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub time: f64,
    pub lattice: Lattice2,
    /// Time at which the lattice is unsheared.
    pub anchor: f64,
    pub values: Vec<f64>,
    pub total_mass: f64,
    /// Mass removed by clipping negative nodes, accumulated over steps.
    pub clipped_mass: f64,
    /// Most negative `min/max` node ratio seen before clipping.
    pub min_ratio: f64,
}

impl GridDensity {
    pub fn new(time: f64, lattice: Lattice2, anchor: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::LengthMismatch { expected: lattice.len(), got: values.len() });
        }
        if lattice.xi.n < 3 || lattice.nu.n < 3 {
            return Err(Error::EmptyLattice);
        }
        let total_mass = lattice.trapezoid(&values);
        Ok(Self { time, lattice, anchor, values, total_mass, clipped_mass: 0.0, min_ratio: 0.0 })
    }

    /// Samples a Gaussian of the given mass on the lattice.
    pub fn from_gaussian(time: f64, lattice: Lattice2, anchor: f64, g: &Gaussian2, mass: f64) -> Result<Self> {
        let shear = time - anchor;
        let values = (0..lattice.len())
            .map(|k| {
                let (eta, nu) = lattice.point(k / lattice.nu.n, k % lattice.nu.n);
                mass * g.density([eta + shear * nu, nu])
            })
            .collect();
        Self::new(time, lattice, anchor, values)
    }

    pub fn shear(&self) -> f64 {
        self.time - self.anchor
    }

    /// Physical point of node `(i, j)`.
    pub fn physical(&self, i: usize, j: usize) -> Point {
        let (eta, nu) = self.lattice.point(i, j);
        [eta + self.shear() * nu, nu]
    }

    /// Trapezoid rule for `∫ u f`.
    pub fn integrate(&self, f: impl Fn(Point) -> f64) -> f64 {
        let ny = self.lattice.nu.n;
        let prod: Vec<f64> =
            self.values.iter().enumerate().map(|(k, u)| if *u == 0.0 { 0.0 } else { u * f(self.physical(k / ny, k % ny)) }).collect();
        self.lattice.trapezoid(&prod)
    }

    /// Density at a physical point; zero off the lattice.
    pub fn value_at(&self, p: Point) -> f64 {
        let eta = p[0] - self.shear() * p[1];
        self.lattice.interp_cubic_linear(&self.values, eta, p[1]).unwrap_or(0.0)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * k).collect(),
            total_mass: self.total_mass * k,
            clipped_mass: self.clipped_mass * k,
            ..self.clone()
        }
    }

    /// Mean and covariance of the normalized density.
    pub fn moments(&self) -> (Point, Mat2) {
        let m = self.total_mass;
        let mx = self.integrate(|p| p[0]) / m;
        let mv = self.integrate(|p| p[1]) / m;
        let cxx = self.integrate(|p| (p[0] - mx) * (p[0] - mx)) / m;
        let cxv = self.integrate(|p| (p[0] - mx) * (p[1] - mv)) / m;
        let cvv = self.integrate(|p| (p[1] - mv) * (p[1] - mv)) / m;
        ([mx, mv], [[cxx, cxv], [cxv, cvv]])
    }
}

/// Divides by the total mass.
pub fn normalize(u: &GridDensity) -> Result<GridDensity> {
    if !(u.total_mass > MASS_FLOOR) {
        return Err(Error::DegenerateMass(u.total_mass));
    }
    let k = 1.0 / u.total_mass;
    let mut out = u.scaled(k);
    out.total_mass = out.lattice.trapezoid(&out.values);
    Ok(out)
}

/// Fourth-order central first difference on offsets -2..=2.
const FIRST: [f64; 5] = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
/// Fourth-order central second difference on offsets -2..=2.
const SECOND: [f64; 5] = [-1.0 / 12.0, 4.0 / 3.0, -2.5, 4.0 / 3.0, -1.0 / 12.0];
/// Spectral radius of `SECOND` relative to the three-point stencil.
const SECOND_RADIUS: f64 = 4.0 / 3.0;

#[inline]
fn second_difference_cfl(a_max: f64, dt: f64, h_eta: f64, h_nu: f64, shear: f64) -> f64 {
    SECOND_RADIUS * a_max * dt * (1.0 / (h_nu * h_nu) + shear * shear / (h_eta * h_eta))
}

/// Derivatives `(D, D²)` of a field sampled by `at` on offsets, with `D = ∂_ν - κ ∂_η`.
#[inline]
fn sheared_derivatives(at: impl Fn(isize, isize) -> f64, he: f64, hn: f64, kappa: f64) -> (f64, f64) {
    let (mut dn, mut de, mut dnn, mut dee, mut den) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for a in 0..5 {
        let o = a as isize - 2;
        let along_nu = at(0, o);
        let along_eta = at(o, 0);
        dn += FIRST[a] * along_nu;
        de += FIRST[a] * along_eta;
        dnn += SECOND[a] * along_nu;
        dee += SECOND[a] * along_eta;
        if a != 2 {
            for b in [0usize, 1, 3, 4] {
                den += FIRST[a] * FIRST[b] * at(o, b as isize - 2);
            }
        }
    }
    let (dn, de) = (dn / hn, de / he);
    let (dnn, dee, den) = (dnn / (hn * hn), dee / (he * he), den / (he * hn));
    (dn - kappa * de, dnn - 2.0 * kappa * den + kappa * kappa * dee)
}

/// Time discretization of the observation-driven term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseScheme {
    Euler,
    /// Adds `½ (ΔW² - dt) 𝒢𝒢u`; strong order one along a fixed observation path.
    #[default]
    Milstein,
}

/// One explicit Euler step of the forward filtering equation driven by the increment `dwt` of `W̃`.
///
/// `y` is the observation value at the left endpoint. Nodes outside the lattice are zero.
pub fn forward_spde_step(u: &GridDensity, c: &CoefficientSet, y: f64, dwt: f64, dt: f64) -> Result<GridDensity> {
    forward_spde_step_with(u, c, y, dwt, dt, NoiseScheme::Euler)
}

pub fn forward_spde_step_with(u: &GridDensity, c: &CoefficientSet, y: f64, dwt: f64, dt: f64, scheme: NoiseScheme) -> Result<GridDensity> {
    if !(dt > 0.0) || !dwt.is_finite() {
        return Err(domain(format!("invalid step dt = {dt}, dW = {dwt}")));
    }
    let s = u.time;
    let kappa = u.shear();
    let (ne, nn) = (u.lattice.xi.n, u.lattice.nu.n);
    let (he, hn) = (u.lattice.xi.step(), u.lattice.nu.step());
    let len = ne * nn;
    let mut g = vec![0.0; len];
    let mut f = vec![0.0; len];
    let mut s1 = vec![0.0; len];
    let mut ht = vec![0.0; len];
    let (mut a_max, mut h_max) = (0.0f64, 0.0f64);
    for i in 0..ne {
        for j in 0..nn {
            let idx = i * nn + j;
            let p = u.physical(i, j);
            let a = c.sigma_sq_jet(s, p[0], p[1], y).v;
            ht[idx] = c.tilde_h(s, p[0], p[1], y)?;
            a_max = a_max.max(a);
            h_max = h_max.max(ht[idx].abs());
            let val = u.values[idx];
            g[idx] = a * val;
            f[idx] = c.b(s, p[0], p[1], y) * val;
            s1[idx] = c.sigma1(s, p[0], p[1], y);
        }
    }
    let cfl = second_difference_cfl(a_max, dt, he, hn, kappa);
    if cfl > DIFFUSION_CFL {
        return Err(Error::Stability(format!("diffusion number {cfl:.3} exceeds {DIFFUSION_CFL}")));
    }
    if h_max * h_max * dt > OBSERVATION_CAP {
        return Err(Error::Stability(format!("|h̃|² dt = {:.3} exceeds {OBSERVATION_CAP}", h_max * h_max * dt)));
    }
    let at = |arr: &[f64], i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= ne as isize || j >= nn as isize {
            0.0
        } else {
            arr[i as usize * nn + j as usize]
        }
    };
    // 𝒢w = -D(σ¹w) + h̃w
    let noise = |w: &[f64]| -> Vec<f64> {
        let sw: Vec<f64> = w.iter().zip(&s1).map(|(a, b)| a * b).collect();
        let mut out = vec![0.0; len];
        out.par_chunks_mut(nn).enumerate().for_each(|(i, row)| {
            let i = i as isize;
            for (j, o) in row.iter_mut().enumerate() {
                let j = j as isize;
                let idx = i as usize * nn + j as usize;
                let (d, _) = sheared_derivatives(|a, b| at(&sw, i + a, j + b), he, hn, kappa);
                *o = ht[idx] * w[idx] - d;
            }
        });
        out
    };
    let gu = noise(&u.values);
    let ggu = match scheme {
        NoiseScheme::Euler => None,
        NoiseScheme::Milstein => Some(noise(&gu)),
    };
    let ito = 0.5 * (dwt * dwt - dt);
    let mut values = vec![0.0; len];
    values.par_chunks_mut(nn).enumerate().for_each(|(i, row)| {
        let i = i as isize;
        for (j, out) in row.iter_mut().enumerate() {
            let j = j as isize;
            let idx = i as usize * nn + j as usize;
            let (_, d2g) = sheared_derivatives(|a, b| at(&g, i + a, j + b), he, hn, kappa);
            let (df, _) = sheared_derivatives(|a, b| at(&f, i + a, j + b), he, hn, kappa);
            *out = u.values[idx] + dt * (0.5 * d2g - df) + dwt * gu[idx] + ggu.as_ref().map_or(0.0, |v| ito * v[idx]);
        }
    });
    let vmax = values.iter().cloned().fold(0.0, f64::max);
    let vmin = values.iter().cloned().fold(0.0, f64::min);
    let mut negative = 0.0;
    for v in values.iter_mut() {
        if *v < 0.0 {
            negative -= *v;
            *v = 0.0;
        }
    }
    let mut out = GridDensity::new(s + dt, u.lattice, u.anchor, values)?;
    out.clipped_mass = u.clipped_mass + negative * u.lattice.cell_area();
    let ratio = if vmax > 0.0 { vmin / vmax } else { 0.0 };
    out.min_ratio = u.min_ratio.min(ratio);
    Ok(out)
}

/// Gaussian approximation of the filter started from a point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianStart {
    pub time: f64,
    pub mean: Point,
    pub cov: Mat2,
    pub log_mass: f64,
}

fn moment_rhs(c: &CoefficientSet, s: f64, y: f64, m: Point, p: &Mat2, observe: bool) -> Result<(Point, Mat2)> {
    let bj = c.b_jet(s, m[0], m[1], y);
    let a = c.sigma_sq_jet(s, m[0], m[1], y).v;
    let jm = [[0.0, 1.0], [bj.x, bj.n]];
    let mut dm = [m[1], bj.v];
    let mut dp = [[0.0; 2]; 2];
    for r in 0..2 {
        for q in 0..2 {
            let mut acc = 0.0;
            for l in 0..2 {
                acc += jm[r][l] * p[l][q] + p[r][l] * jm[q][l];
            }
            dp[r][q] = acc;
        }
    }
    dp[1][1] += a;
    if observe {
        let (gain, ht) = kalman_gain(c, s, y, m, p)?;
        dm[0] -= gain[0] * ht;
        dm[1] -= gain[1] * ht;
        for r in 0..2 {
            for q in 0..2 {
                dp[r][q] -= gain[r] * gain[q];
            }
        }
    }
    Ok((dm, dp))
}

fn kalman_gain(c: &CoefficientSet, s: f64, y: f64, m: Point, p: &Mat2) -> Result<(Point, f64)> {
    let hj = c.tilde_h_jet(s, m[0], m[1], y)?;
    let s1 = c.sigma1(s, m[0], m[1], y);
    Ok(([p[0][0] * hj.x + p[0][1] * hj.n, p[1][0] * hj.x + p[1][1] * hj.n + s1], hj.v))
}

/// RK4 step of the moment equations; with `observe`, adds the gain times the increment.
fn moment_step(
    c: &CoefficientSet,
    s: f64,
    y: f64,
    dt: f64,
    m: Point,
    p: Mat2,
    dwt: Option<f64>,
) -> Result<(Point, Mat2)> {
    let observe = dwt.is_some();
    let add = |m: Point, p: &Mat2, dm: &Point, dp: &Mat2, h: f64| -> (Point, Mat2) {
        (
            [m[0] + h * dm[0], m[1] + h * dm[1]],
            [[p[0][0] + h * dp[0][0], p[0][1] + h * dp[0][1]], [p[1][0] + h * dp[1][0], p[1][1] + h * dp[1][1]]],
        )
    };
    let (k1m, k1p) = moment_rhs(c, s, y, m, &p, observe)?;
    let (m2, p2) = add(m, &p, &k1m, &k1p, 0.5 * dt);
    let (k2m, k2p) = moment_rhs(c, s + 0.5 * dt, y, m2, &p2, observe)?;
    let (m3, p3) = add(m, &p, &k2m, &k2p, 0.5 * dt);
    let (k3m, k3p) = moment_rhs(c, s + 0.5 * dt, y, m3, &p3, observe)?;
    let (m4, p4) = add(m, &p, &k3m, &k3p, dt);
    let (k4m, k4p) = moment_rhs(c, s + dt, y, m4, &p4, observe)?;
    let mut mn = [0.0; 2];
    let mut pn = [[0.0; 2]; 2];
    for r in 0..2 {
        mn[r] = m[r] + dt / 6.0 * (k1m[r] + 2.0 * k2m[r] + 2.0 * k3m[r] + k4m[r]);
        for q in 0..2 {
            pn[r][q] = p[r][q] + dt / 6.0 * (k1p[r][q] + 2.0 * k2p[r][q] + 2.0 * k3p[r][q] + k4p[r][q]);
        }
    }
    if let Some(dw) = dwt {
        let (gain, _) = kalman_gain(c, s, y, m, &p)?;
        mn[0] += gain[0] * dw;
        mn[1] += gain[1] * dw;
    }
    pn[0][1] = 0.5 * (pn[0][1] + pn[1][0]);
    pn[1][0] = pn[0][1];
    Ok((mn, pn))
}

fn sheared_cov(p: &Mat2, shear: f64) -> Mat2 {
    let c01 = p[0][1] - shear * p[1][1];
    [[p[0][0] - 2.0 * shear * p[0][1] + shear * shear * p[1][1], c01], [c01, p[1][1]]]
}

/// Observation path `Y` generated by `dY = θ(t, Y) dW̃`.
pub fn observation_path(c: &CoefficientSet, y0: f64, grid: TimeGrid, tilde_w_increments: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(tilde_w_increments.len() + 1);
    y.push(y0);
    for (k, dw) in tilde_w_increments.iter().enumerate() {
        let last = y[k];
        y.push(last + c.theta(grid.time(k), last) * dw);
    }
    y
}

/// Resolution and start-up parameters of the forward solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardSpec {
    pub n_eta: usize,
    pub n_nu: usize,
    /// Lattice half-extent in prior standard deviations.
    pub n_std: f64,
    /// Width of the Gaussian start, in lattice cells along its thinnest direction.
    pub init_width: f64,
    pub scheme: NoiseScheme,
}

impl Default for ForwardSpec {
    fn default() -> Self {
        Self { n_eta: 129, n_nu: 129, n_std: 8.0, init_width: 2.0, scheme: NoiseScheme::Milstein }
    }
}

impl ForwardSpec {
    /// Half resolution: `(n - 1) / 2 + 1` nodes per axis.
    pub fn coarse(&self) -> Self {
        Self { n_eta: (self.n_eta - 1) / 2 + 1, n_nu: (self.n_nu - 1) / 2 + 1, ..*self }
    }
}

/// Sheared lattice covering the prior law of the signal started at `z` over `grid`.
pub fn auto_lattice(
    c: &CoefficientSet,
    z: Point,
    y0: f64,
    grid: TimeGrid,
    anchor: f64,
    n_eta: usize,
    n_nu: usize,
    n_std: f64,
) -> Result<Lattice2> {
    let dt = grid.dt();
    let (mut m, mut p) = (z, [[0.0; 2]; 2]);
    let (mut lo, mut hi) = ([z[0] - (grid.t0 - anchor) * z[1], z[1]], [z[0] - (grid.t0 - anchor) * z[1], z[1]]);
    for k in 0..grid.n_steps {
        (m, p) = moment_step(c, grid.time(k), y0, dt, m, p, None)?;
        let shear = grid.time(k + 1) - anchor;
        let cs = sheared_cov(&p, shear);
        let centre = [m[0] - shear * m[1], m[1]];
        for d in 0..2 {
            let sd = cs[d][d].max(0.0).sqrt();
            lo[d] = lo[d].min(centre[d] - n_std * sd);
            hi[d] = hi[d].max(centre[d] + n_std * sd);
        }
    }
    if !(hi[0] > lo[0] && hi[1] > lo[1]) {
        return Err(domain("prior law has no spread over the horizon"));
    }
    Ok(Lattice2::new(Axis::new(lo[0], hi[0], n_eta)?, Axis::new(lo[1], hi[1], n_nu)?))
}

/// Extended Kalman-Bucy run from a point mass until the Gaussian is resolved by the lattice.
pub fn gaussian_start(
    c: &CoefficientSet,
    z: Point,
    y_path: &[f64],
    grid: TimeGrid,
    tilde_w_increments: &[f64],
    lattice: &Lattice2,
    anchor: f64,
    width: f64,
) -> Result<(usize, GaussianStart)> {
    let dt = grid.dt();
    let (he, hn) = (lattice.xi.step(), lattice.nu.step());
    let (mut m, mut p) = (z, [[0.0; 2]; 2]);
    let mut log_mass = 0.0;
    for k in 0..grid.n_steps {
        let s = grid.time(k);
        let dw = tilde_w_increments[k];
        let ht = c.tilde_h(s, m[0], m[1], y_path[k])?;
        log_mass += ht * dw - 0.5 * ht * ht * dt;
        (m, p) = moment_step(c, s, y_path[k], dt, m, p, Some(dw))?;
        let shear = grid.time(k + 1) - anchor;
        let cs = sheared_cov(&p, shear);
        // smallest eigenvalue in cell units
        let (a, b, d) = (cs[0][0] / (he * he), cs[0][1] / (he * hn), cs[1][1] / (hn * hn));
        let lmin = 0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt();
        if lmin >= width * width && k + 1 < grid.n_steps {
            return Ok((k + 1, GaussianStart { time: grid.time(k + 1), mean: m, cov: p, log_mass }));
        }
    }
    Err(domain("lattice too coarse: the start-up Gaussian is never resolved before the horizon"))
}

/// Forward run and its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRun {
    pub density: GridDensity,
    pub start: GaussianStart,
    pub start_step: usize,
    /// Clipped mass as a fraction of the final total mass.
    pub clipped_fraction: f64,
}

/// Fundamental solution of the forward filtering equation from `z` at `grid.t0`,
/// driven by the increments of `W̃` on `grid`.
pub fn forward_fundamental(
    c: &CoefficientSet,
    z: Point,
    y0: f64,
    grid: TimeGrid,
    tilde_w_increments: &[f64],
    spec: &ForwardSpec,
) -> Result<ForwardRun> {
    if tilde_w_increments.len() != grid.n_steps {
        return Err(Error::LengthMismatch { expected: grid.n_steps, got: tilde_w_increments.len() });
    }
    let anchor = 0.5 * (grid.t0 + grid.t1);
    let lattice = auto_lattice(c, z, y0, grid, anchor, spec.n_eta, spec.n_nu, spec.n_std)?;
    forward_on_lattice(c, z, y0, grid, tilde_w_increments, lattice, anchor, spec.init_width, spec.scheme)
}

/// As [`forward_fundamental`] on a given lattice.
pub fn forward_on_lattice(
    c: &CoefficientSet,
    z: Point,
    y0: f64,
    grid: TimeGrid,
    tilde_w_increments: &[f64],
    lattice: Lattice2,
    anchor: f64,
    init_width: f64,
    scheme: NoiseScheme,
) -> Result<ForwardRun> {
    let y_path = observation_path(c, y0, grid, tilde_w_increments);
    let (k0, start) = gaussian_start(c, z, &y_path, grid, tilde_w_increments, &lattice, anchor, init_width)?;
    let g = Gaussian2::new(start.mean, start.cov)?;
    let mut u = GridDensity::from_gaussian(start.time, lattice, anchor, &g, start.log_mass.exp())?;
    let dt = grid.dt();
    for k in k0..grid.n_steps {
        u = forward_spde_step_with(&u, c, y_path[k], tilde_w_increments[k], dt, scheme)?;
    }
    u.time = grid.t1;
    let clipped_fraction = u.clipped_mass / u.total_mass;
    Ok(ForwardRun { density: u, start, start_step: k0, clipped_fraction })
}

/// How an estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SpdeForward,
    KsBackward,
    ParticleOracle,
    SpdeBackward,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::SpdeForward => "spde-forward",
            Method::KsBackward => "ks-backward",
            Method::ParticleOracle => "particle-oracle",
            Method::SpdeBackward => "spde-backward",
        })
    }
}

/// Conditional expectation estimate with its error.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterEstimate {
    pub value: f64,
    pub method: Method,
    /// Monte Carlo standard error, or discretization estimate for lattice methods.
    pub stderr: f64,
    pub fingerprint: String,
    pub ess: Option<f64>,
    pub warning: Option<String>,
}

impl FilterEstimate {
    /// `|a - b| / sqrt(se_a² + se_b²)`.
    pub fn discrepancy(&self, other: &FilterEstimate) -> f64 {
        let se = (self.stderr * self.stderr + other.stderr * other.stderr).sqrt();
        let d = (self.value - other.value).abs();
        if d == 0.0 {
            0.0
        } else {
            d / se
        }
    }
}

/// Scenario fingerprint: preset, grid and seed.
pub fn fingerprint(c: &CoefficientSet, grid: TimeGrid, seed: u64, extra: &str) -> String {
    let params: Vec<String> = c.preset.params().iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{}({})|t={}..{}/{}|seed={seed}|{extra}", c.id(), params.join(","), grid.t0, grid.t1, grid.n_steps)
}

fn check_observable(u: &GridDensity, phi: &ObservableFn) -> Result<()> {
    let ny = u.lattice.nu.n;
    let bound = phi.bound();
    for k in 0..u.values.len() {
        let v = phi.eval(u.physical(k / ny, k % ny));
        if !v.is_finite() || v.abs() > bound {
            return Err(Error::Unbounded);
        }
    }
    Ok(())
}

/// Richardson order assumed for the lattice discretization error.
pub const RICHARDSON_ORDER: i32 = 1;

/// `∫ û φ` on the lattice; with a half-resolution density the difference sets the error.
pub fn estimate_forward(u_hat: &GridDensity, coarse: Option<&GridDensity>, phi: &ObservableFn, fingerprint: &str) -> Result<FilterEstimate> {
    if (u_hat.total_mass - 1.0).abs() > 1e-9 {
        return Err(domain(format!("density not normalized (mass {})", u_hat.total_mass)));
    }
    check_observable(u_hat, phi)?;
    // ratio form: φ ≡ 1 gives exactly 1
    let value = u_hat.integrate(|p| phi.eval(p)) / u_hat.integrate(|_| 1.0);
    let stderr = match coarse {
        Some(cu) => {
            let cv = cu.integrate(|p| phi.eval(p)) / cu.total_mass;
            (value - cv).abs() / (2f64.powi(RICHARDSON_ORDER) - 1.0)
        }
        None => 0.0,
    };
    Ok(FilterEstimate { value, method: Method::SpdeForward, stderr, fingerprint: fingerprint.to_string(), ess: None, warning: None })
}

/// Forward estimates for several observables, with the Richardson error from a run at
/// half spatial resolution and doubled time step.
pub fn forward_estimates(
    c: &CoefficientSet,
    z: Point,
    y0: f64,
    grid: TimeGrid,
    tilde_w_increments: &[f64],
    spec: &ForwardSpec,
    phis: &[ObservableFn],
    fingerprint: &str,
) -> Result<(ForwardRun, Vec<FilterEstimate>)> {
    let fine = forward_fundamental(c, z, y0, grid, tilde_w_increments, spec)?;
    let coarse_grid = grid.coarsened(2)?;
    let paired: Vec<f64> = tilde_w_increments.chunks(2).map(|p| p[0] + p[1]).collect();
    let coarse = forward_fundamental(c, z, y0, coarse_grid, &paired, &spec.coarse())?;
    let uf = normalize(&fine.density)?;
    let uc = normalize(&coarse.density)?;
    let mut out = Vec::with_capacity(phis.len());
    for phi in phis {
        out.push(estimate_forward(&uf, Some(&uc), phi, fingerprint)?);
    }
    Ok((fine, out))
}

fn ratio_estimates(logs: &[f64], vals: &[Vec<f64>], method: Method, fingerprint: &str) -> Vec<FilterEstimate> {
    let lmax = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - lmax).exp()).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    let ess = sw * sw / sw2;
    let warning = (ess < ESS_WARNING).then(|| format!("effective sample size {ess:.1} below {ESS_WARNING}"));
    if let Some(msg) = &warning {
        log::warn!("{msg}");
    }
    (0..vals.first().map_or(0, |v| v.len()))
        .map(|q| {
            let num: f64 = w.iter().zip(vals).map(|(wi, v)| wi * v[q]).sum();
            let value = num / sw;
            let var: f64 = w.iter().zip(vals).map(|(wi, v)| (wi / sw).powi(2) * (v[q] - value).powi(2)).sum();
            FilterEstimate { value, method, stderr: var.sqrt(), fingerprint: fingerprint.to_string(), ess: Some(ess), warning: warning.clone() }
        })
        .collect()
}

/// Kallianpur-Striebel estimates: reference-measure particles sharing the increments of `W̃`,
/// weighted by their likelihoods; delta-method standard errors.
pub fn ks_backward_estimates(
    c: &CoefficientSet,
    z: Point,
    y0: f64,
    grid: TimeGrid,
    tilde_w_increments: &[f64],
    phis: &[ObservableFn],
    n_particles: usize,
    seed: u64,
) -> Result<Vec<FilterEstimate>> {
    if n_particles < 2 {
        return Err(domain("need at least two particles"));
    }
    if tilde_w_increments.len() != grid.n_steps {
        return Err(Error::LengthMismatch { expected: grid.n_steps, got: tilde_w_increments.len() });
    }
    let rows: Vec<(f64, Vec<f64>)> = (0..n_particles as u64)
        .into_par_iter()
        .map(|p| -> Result<(f64, Vec<f64>)> {
            let s = q_terminal(c, (z[0], z[1], y0), tilde_w_increments, grid, seed, p)?;
            Ok((s.log_rho, phis.iter().map(|phi| phi.eval([s.x, s.v])).collect()))
        })
        .collect::<Result<_>>()?;
    let (logs, vals): (Vec<f64>, Vec<Vec<f64>>) = rows.into_iter().unzip();
    Ok(ratio_estimates(&logs, &vals, Method::KsBackward, &fingerprint(c, grid, seed, &format!("particles={n_particles}"))))
}

/// Resampling of the particle oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resampling {
    None,
    /// Stratified resampling when the effective sample size falls below this fraction.
    Stratified(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSpec {
    /// Independent sub-filters; the standard error is their spread.
    pub batches: usize,
    pub resampling: Resampling,
    /// Particles come in pairs driven by negated noise.
    pub antithetic: bool,
    /// Fold the doubled-step change into the standard error.
    pub time_error: bool,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self { batches: 20, resampling: Resampling::Stratified(0.5), antithetic: true, time_error: true }
    }
}

/// One batch of the oracle: `per` particles from stream slots `base..`, each step of length
/// `stride` fine steps. Returns the weighted means and the smallest effective sample size.
fn oracle_batch(
    c: &CoefficientSet,
    z: Point,
    grid: TimeGrid,
    y_path: &[f64],
    phis: &[ObservableFn],
    per: usize,
    base: u64,
    seed: u64,
    spec: &OracleSpec,
    stride: usize,
) -> (Vec<f64>, f64) {
    let n_streams = if spec.antithetic { per / 2 } else { per };
    let mut noise: Vec<NormalStream> = (0..n_streams as u64).map(|i| NormalStream::new(seed, base + i, CH_ORACLE)).collect();
    let mut draws = vec![0.0; per];
    let dt = grid.dt() * stride as f64;
    let sq = dt.sqrt();
    let norm = (stride as f64).sqrt();
    let mut x = vec![z[0]; per];
    let mut v = vec![z[1]; per];
    let mut logw = vec![0.0; per];
    let mut min_ess = per as f64;
    for k in (0..grid.n_steps).step_by(stride) {
        let s = grid.time(k);
        let yk = y_path[k];
        let dy = y_path[k + stride] - yk;
        let th = c.theta(s, yk);
        let next = |st: &mut NormalStream| (0..stride).map(|_| st.next_normal()).sum::<f64>() / norm;
        if spec.antithetic {
            for (pair, stream) in draws.chunks_exact_mut(2).zip(noise.iter_mut()) {
                let g = next(stream);
                pair[0] = g;
                pair[1] = -g;
            }
        } else {
            draws.iter_mut().zip(noise.iter_mut()).for_each(|(d, st)| *d = next(st));
        }
        for i in 0..per {
            let (xi, vi) = (x[i], v[i]);
            let h = c.h(s, xi, vi, yk);
            let s1 = c.sigma1(s, xi, vi, yk);
            let sh = c.sigma_hat(s, xi, vi, yk)[0];
            logw[i] += h / (th * th) * dy - 0.5 * (h / th) * (h / th) * dt;
            x[i] = xi + vi * dt;
            v[i] = vi + (c.b(s, xi, vi, yk) - s1 * h / th) * dt + s1 * dy / th + sh * sq * draws[i];
        }
        if let Resampling::Stratified(frac) = spec.resampling {
            let lmax = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - lmax).exp()).collect();
            let sw: f64 = w.iter().sum();
            let ess = sw * sw / w.iter().map(|a| a * a).sum::<f64>();
            min_ess = min_ess.min(ess);
            if ess < frac * per as f64 {
                let mut cum = 0.0;
                let mut src = 0;
                let (mut nx, mut nv) = (Vec::with_capacity(per), Vec::with_capacity(per));
                for i in 0..per {
                    let target = (i as f64 + uniform_at(seed, base + i as u64, k as u64, CH_RESAMPLE)) / per as f64;
                    while src + 1 < per && cum + w[src] / sw < target {
                        cum += w[src] / sw;
                        src += 1;
                    }
                    nx.push(x[src]);
                    nv.push(v[src]);
                }
                x = nx;
                v = nv;
                logw.iter_mut().for_each(|l| *l = 0.0);
            }
        }
    }
    let lmax = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - lmax).exp()).collect();
    let sw: f64 = w.iter().sum();
    let ess = sw * sw / w.iter().map(|a| a * a).sum::<f64>();
    let est = phis.iter().map(|phi| (0..per).map(|i| w[i] * phi.eval([x[i], v[i]])).sum::<f64>() / sw).collect();
    (est, min_ess.min(ess))
}

/// Sequential importance sampling with optional stratified resampling, run in independent
/// batches. Weights come from the observation increments `dY` directly.
///
/// The standard error is the batch spread, plus the change under a doubled time step
/// (same noise, paired increments) when `spec.time_error` is set.
pub fn particle_oracle(
    c: &CoefficientSet,
    z: Point,
    y0: f64,
    grid: TimeGrid,
    tilde_w_increments: &[f64],
    phis: &[ObservableFn],
    n_particles: usize,
    seed: u64,
    spec: &OracleSpec,
) -> Result<Vec<FilterEstimate>> {
    if spec.batches < 2 || n_particles < 2 * spec.batches {
        return Err(domain(format!("need at least two particles in each of at least two batches ({n_particles}/{})", spec.batches)));
    }
    if tilde_w_increments.len() != grid.n_steps {
        return Err(Error::LengthMismatch { expected: grid.n_steps, got: tilde_w_increments.len() });
    }
    let per = n_particles / spec.batches;
    if spec.antithetic && per % 2 == 1 {
        return Err(domain(format!("antithetic pairs need an even batch size, got {per}")));
    }
    if spec.time_error && grid.n_steps % 2 == 1 {
        return Err(domain(format!("time-step error needs an even step count, got {}", grid.n_steps)));
    }
    let y_path = observation_path(c, y0, grid, tilde_w_increments);
    let strides: &[usize] = if spec.time_error { &[1, 2] } else { &[1] };
    let runs: Vec<Vec<(Vec<f64>, f64)>> = strides
        .iter()
        .map(|&stride| {
            (0..spec.batches)
                .into_par_iter()
                .map(|b| oracle_batch(c, z, grid, &y_path, phis, per, (b * per) as u64, seed, spec, stride))
                .collect()
        })
        .collect();
    let nb = spec.batches as f64;
    let min_ess = runs[0].iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let warning = (min_ess < ESS_WARNING).then(|| format!("batch effective sample size {min_ess:.1} below {ESS_WARNING}"));
    let fp = fingerprint(
        c,
        grid,
        seed,
        &format!("particles={n_particles},batches={},antithetic={},time_error={}", spec.batches, spec.antithetic, spec.time_error),
    );
    let mean_of = |run: &[(Vec<f64>, f64)], q: usize| {
        let vals: Vec<f64> = run.iter().map(|r| r.0[q]).collect();
        if vals.iter().all(|v| *v == vals[0]) {
            (vals[0], 0.0)
        } else {
            let mean = vals.iter().sum::<f64>() / nb;
            (mean, vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nb - 1.0))
        }
    };
    Ok((0..phis.len())
        .map(|q| {
            let (value, var) = mean_of(&runs[0], q);
            let time = runs.get(1).map_or(0.0, |r| (value - mean_of(r, q).0).abs() / (2f64.powi(RICHARDSON_ORDER) - 1.0));
            FilterEstimate {
                value,
                method: Method::ParticleOracle,
                stderr: (var / nb + time * time).sqrt(),
                fingerprint: fp.clone(),
                ess: Some(min_ess * nb),
                warning: warning.clone(),
            }
        })
        .collect())
}

/// Three-dimensional sheared lattice `(η, v, y)` with `x = η + (time - anchor) v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice3 {
    pub eta: Axis,
    pub v: Axis,
    pub y: Axis,
}

impl Lattice3 {
    pub fn len(&self) -> usize {
        self.eta.n * self.v.n * self.y.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, l: usize) -> usize {
        (i * self.v.n + j) * self.y.n + l
    }
}

/// Solution of the backward filtering equation at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardField {
    pub time: f64,
    pub lattice: Lattice3,
    pub anchor: f64,
    pub values: Vec<f64>,
}

impl BackwardField {
    pub fn from_fn(time: f64, lattice: Lattice3, anchor: f64, f: impl Fn(Point, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(lattice.len());
        for i in 0..lattice.eta.n {
            for j in 0..lattice.v.n {
                let v = lattice.v.coord(j);
                let x = lattice.eta.coord(i) + (time - anchor) * v;
                for l in 0..lattice.y.n {
                    values.push(f([x, v], lattice.y.coord(l)));
                }
            }
        }
        Self { time, lattice, anchor, values }
    }

    /// Value at the node nearest to a physical point, with its distance in cells.
    pub fn nearest(&self, z: Point, y: f64) -> Result<(f64, f64)> {
        let eta = z[0] - (self.time - self.anchor) * z[1];
        let lat = &self.lattice;
        let mut idx = [0usize; 3];
        let mut off = 0.0f64;
        for (d, (ax, c)) in [(lat.eta, eta), (lat.v, z[1]), (lat.y, y)].into_iter().enumerate() {
            if !ax.contains(c) {
                return Err(Error::OutOfRange(format!("{c} outside [{}, {}]", ax.min, ax.max)));
            }
            let r = (c - ax.min) / ax.step();
            idx[d] = (r.round() as usize).min(ax.n - 1);
            off = off.max((r - r.round()).abs());
        }
        Ok((self.values[lat.index(idx[0], idx[1], idx[2])], off))
    }
}

/// One explicit step of the backward filtering equation from `u.time` to `u.time - dt`,
/// driven by `dwt = W̃(u.time) - W̃(u.time - dt)` with coefficients at the right endpoint.
///
/// Boundary values are extended linearly.
pub fn backward_spde_step(u: &BackwardField, c: &CoefficientSet, dwt: f64, dt: f64) -> Result<BackwardField> {
    if !(dt > 0.0) || !dwt.is_finite() {
        return Err(domain(format!("invalid step dt = {dt}, dW = {dwt}")));
    }
    let lat = u.lattice;
    let (ne, nv, ny) = (lat.eta.n, lat.v.n, lat.y.n);
    if ne < 3 || nv < 3 || ny < 3 {
        return Err(Error::EmptyLattice);
    }
    let s = u.time;
    let kappa = s - u.anchor;
    let (he, hv, hy) = (lat.eta.step(), lat.v.step(), lat.y.step());
    let mut worst = 0.0f64;
    let mut h_max = 0.0f64;
    for i in 0..ne {
        for j in 0..nv {
            let v = lat.v.coord(j);
            let x = lat.eta.coord(i) + kappa * v;
            for l in 0..ny {
                let y = lat.y.coord(l);
                let a = c.sigma_sq_jet(s, x, v, y).v;
                let th = c.theta(s, y);
                let s1 = c.sigma1(s, x, v, y);
                let num = SECOND_RADIUS * a * (1.0 / (hv * hv) + kappa * kappa / (he * he)) + th * th / (hy * hy) + (th * s1).abs() * (1.0 / hv + kappa.abs() / he) / hy;
                worst = worst.max(num * dt);
                h_max = h_max.max(c.tilde_h(s, x, v, y)?.abs());
            }
        }
    }
    if worst > DIFFUSION_CFL {
        return Err(Error::Stability(format!("diffusion number {worst:.3} exceeds {DIFFUSION_CFL}")));
    }
    if h_max * h_max * dt > OBSERVATION_CAP {
        return Err(Error::Stability(format!("|h̃|² dt = {:.3} exceeds {OBSERVATION_CAP}", h_max * h_max * dt)));
    }
    let dims = [ne as isize, nv as isize, ny as isize];
    let get = |i: isize, j: isize, l: isize| -> f64 {
        // linear extension across each face
        let mut idx = [i, j, l];
        let mut val = 0.0;
        let mut extra = [0isize; 3];
        for d in 0..3 {
            if idx[d] < 0 {
                extra[d] = idx[d];
                idx[d] = 0;
            } else if idx[d] >= dims[d] {
                extra[d] = idx[d] - dims[d] + 1;
                idx[d] = dims[d] - 1;
            }
        }
        let at = |p: [isize; 3]| u.values[lat.index(p[0] as usize, p[1] as usize, p[2] as usize)];
        let base = at(idx);
        val += base;
        for d in 0..3 {
            if extra[d] != 0 {
                let mut inner = idx;
                inner[d] += if extra[d] < 0 { 1 } else { -1 };
                val += extra[d].abs() as f64 * (base - at(inner));
            }
        }
        val
    };
    let mut values = vec![0.0; lat.len()];
    values.par_chunks_mut(nv * ny).enumerate().try_for_each(|(i, block)| -> Result<()> {
        let ii = i as isize;
        for j in 0..nv {
            let jj = j as isize;
            let v = lat.v.coord(j);
            let x = lat.eta.coord(i) + kappa * v;
            for l in 0..ny {
                let ll = l as isize;
                let y = lat.y.coord(l);
                let u0 = get(ii, jj, ll);
                let plane = |dl: isize| sheared_derivatives(|a, b| get(ii + a, jj + b, ll + dl), he, hv, kappa);
                let (d_v, d_vv) = plane(0);
                let d_vy = (plane(1).0 - plane(-1).0) / (2.0 * hy);
                let dy = (get(ii, jj, ll + 1) - get(ii, jj, ll - 1)) / (2.0 * hy);
                let dyy = (get(ii, jj, ll + 1) - 2.0 * u0 + get(ii, jj, ll - 1)) / (hy * hy);
                let a = c.sigma_sq_jet(s, x, v, y).v;
                let th = c.theta(s, y);
                let s1 = c.sigma1(s, x, v, y);
                let gen = 0.5 * (a * d_vv + 2.0 * th * s1 * d_vy + th * th * dyy) + c.b(s, x, v, y) * d_v + c.h(s, x, v, y) * dy;
                let noise = s1 * d_v + th * dy + c.tilde_h(s, x, v, y)? * u0;
                block[j * ny + l] = u0 + gen * dt + noise * dwt;
            }
        }
        Ok(())
    })?;
    Ok(BackwardField { time: s - dt, lattice: lat, anchor: u.anchor, values })
}

/// Resolution of the backward solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardSpec {
    pub n_eta: usize,
    pub n_v: usize,
    pub n_y: usize,
    pub n_std: f64,
}

impl Default for BackwardSpec {
    fn default() -> Self {
        Self { n_eta: 65, n_v: 65, n_y: 9, n_std: 8.0 }
    }
}

/// Lattice for a backward solve queried at `(z, y0)` at `grid.t0`, unsheared at that time,
/// with the query on a node.
pub fn backward_lattice(
    c: &CoefficientSet,
    z: Point,
    y0: f64,
    grid: TimeGrid,
    tilde_w_increments: &[f64],
    spec: &BackwardSpec,
) -> Result<Lattice3> {
    let prior = auto_lattice(c, z, y0, grid, grid.t0, spec.n_eta, spec.n_v, spec.n_std)?;
    let sym = |centre: f64, ax: Axis| -> Result<Axis> {
        let half = (ax.max - centre).abs().max((centre - ax.min).abs());
        Axis::new(centre - half, centre + half, ax.n | 1)
    };
    let y_path = observation_path(c, y0, grid, tilde_w_increments);
    let spread = y_path.iter().map(|y| (y - y0).abs()).fold(0.0, f64::max);
    let th = c.theta(grid.t0, y0).abs();
    let y_half = (spread + 4.0 * th * (grid.t1 - grid.t0).sqrt()).max(1e-3);
    Ok(Lattice3 { eta: sym(z[0], prior.xi)?, v: sym(z[1], prior.nu)?, y: Axis::new(y0 - y_half, y0 + y_half, spec.n_y | 1)? })
}

/// Backward solve from terminal data `phi(ζ, η)` at `grid.t1` down to `grid.t0`.
pub fn solve_backward_filter(
    c: &CoefficientSet,
    grid: TimeGrid,
    tilde_w_increments: &[f64],
    lattice: Lattice3,
    terminal: impl Fn(Point, f64) -> f64,
) -> Result<BackwardField> {
    if tilde_w_increments.len() != grid.n_steps {
        return Err(Error::LengthMismatch { expected: grid.n_steps, got: tilde_w_increments.len() });
    }
    let mut u = BackwardField::from_fn(grid.t1, lattice, grid.t0, terminal);
    let dt = grid.dt();
    for k in (0..grid.n_steps).rev() {
        u = backward_spde_step(&u, c, tilde_w_increments[k], dt)?;
        u.time = grid.time(k);
    }
    Ok(u)
}

/// Ratio `u^(φ) / u^(1)` at the query point, with the half-resolution difference as error.
pub fn backward_estimate(
    c: &CoefficientSet,
    z: Point,
    y0: f64,
    grid: TimeGrid,
    tilde_w_increments: &[f64],
    phi: &ObservableFn,
    spec: &BackwardSpec,
    fingerprint: &str,
) -> Result<FilterEstimate> {
    let run = |grid: TimeGrid, dw: &[f64], spec: &BackwardSpec| -> Result<f64> {
        let lat = backward_lattice(c, z, y0, grid, dw, spec)?;
        let num = solve_backward_filter(c, grid, dw, lat, |p, _| phi.eval(p))?;
        let den = solve_backward_filter(c, grid, dw, lat, |_, _| 1.0)?;
        let (a, _) = num.nearest(z, y0)?;
        let (b, _) = den.nearest(z, y0)?;
        if !(b > MASS_FLOOR) {
            return Err(Error::DegenerateMass(b));
        }
        Ok(a / b)
    };
    let value = run(grid, tilde_w_increments, spec)?;
    let paired: Vec<f64> = tilde_w_increments.chunks(2).map(|p| p.iter().sum()).collect();
    let coarse_spec = BackwardSpec { n_eta: (spec.n_eta - 1) / 2 + 1, n_v: (spec.n_v - 1) / 2 + 1, ..*spec };
    let coarse = run(grid.coarsened(2)?, &paired, &coarse_spec)?;
    Ok(FilterEstimate {
        value,
        method: Method::SpdeBackward,
        stderr: (value - coarse).abs() / (2f64.powi(RICHARDSON_ORDER) - 1.0),
        fingerprint: fingerprint.to_string(),
        ess: None,
        warning: None,
    })
}

/// Terminal node of a backward kernel family with its quadrature weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalNode {
    pub zeta: Point,
    pub eta: f64,
    pub weight: f64,
}

/// Tensor grid of terminal nodes with trapezoid weights.
pub fn terminal_grid(x: Axis, v: Axis, y: Axis) -> Vec<TerminalNode> {
    let w = |ax: &Axis, i: usize| if ax.n == 1 { 1.0 } else if i == 0 || i == ax.n - 1 { 0.5 * ax.step() } else { ax.step() };
    let mut out = Vec::with_capacity(x.n * v.n * y.n);
    for i in 0..x.n {
        for j in 0..v.n {
            for l in 0..y.n {
                out.push(TerminalNode { zeta: [x.coord(i), v.coord(j)], eta: y.coord(l), weight: w(&x, i) * w(&v, j) * w(&y, l) });
            }
        }
    }
    out
}

/// `Γ̌(t, z, y; T, ·)` at terminal nodes: one backward solve per node with a normalized
/// Gaussian bump of standard deviations `width` as terminal data.
pub fn backward_kernel_family(
    c: &CoefficientSet,
    z: Point,
    y0: f64,
    grid: TimeGrid,
    tilde_w_increments: &[f64],
    nodes: &[TerminalNode],
    width: [f64; 3],
    spec: &BackwardSpec,
) -> Result<Vec<f64>> {
    let lat = backward_lattice(c, z, y0, grid, tilde_w_increments, spec)?;
    let norm = (2.0 * std::f64::consts::PI).powf(1.5) * width[0] * width[1] * width[2];
    nodes
        .par_iter()
        .map(|n| {
            let bump = |p: Point, y: f64| {
                let q = ((p[0] - n.zeta[0]) / width[0]).powi(2) + ((p[1] - n.zeta[1]) / width[1]).powi(2) + ((y - n.eta) / width[2]).powi(2);
                (-0.5 * q).exp() / norm
            };
            let u = solve_backward_filter(c, grid, tilde_w_increments, lat, bump)?;
            Ok(u.nearest(z, y0)?.0)
        })
        .collect()
}

/// Normalized backward filtering density over the terminal nodes.
pub fn backward_filtering_density(family: &[f64], nodes: &[TerminalNode]) -> Result<Vec<f64>> {
    if family.len() != nodes.len() {
        return Err(Error::LengthMismatch { expected: nodes.len(), got: family.len() });
    }
    let mass: f64 = family.iter().zip(nodes).map(|(f, n)| f * n.weight).sum();
    if !(mass > MASS_FLOOR) {
        return Err(Error::DegenerateMass(mass));
    }
    Ok(family.iter().map(|f| f / mass).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::langevin_gaussian;
    use crate::parametrix::{solve_backward_cauchy, CauchySpec};

    fn lattice(half: [f64; 2], n: usize) -> Lattice2 {
        Lattice2::new(Axis::new(-half[0], half[0], n).unwrap(), Axis::new(-half[1], half[1], n).unwrap())
    }

    #[test]
    fn zero_operators_are_pure_transport() {
        let c = CoefficientSet::constant(0.0, 0.0, 1e-9, 0.0, 1.0);
        let g = Gaussian2::new([0.1, 0.3], [[0.05, 0.01], [0.01, 0.2]]).unwrap();
        let u = GridDensity::from_gaussian(0.0, lattice([2.0, 3.0], 65), 0.0, &g, 1.0).unwrap();
        let u1 = forward_spde_step(&u, &c, 0.0, 0.7, 0.01).unwrap();
        for i in 5..60 {
            for j in 5..60 {
                let p = u1.physical(i, j);
                let back = [p[0] - 0.01 * p[1], p[1]];
                assert!((u1.values[i * 65 + j] - g.density(back)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_observation_mass_is_stochastic_exponential() {
        let c = CoefficientSet::constant(0.0, 0.0, 1e-9, 0.4, 1.0);
        let g = Gaussian2::new([0.0, 0.0], [[0.05, 0.0], [0.0, 0.1]]).unwrap();
        let u = GridDensity::from_gaussian(0.0, lattice([2.0, 3.0], 65), 0.0, &g, 2.0).unwrap();
        let dw = 0.05;
        let u1 = forward_spde_step(&u, &c, 0.0, dw, 1e-3).unwrap();
        assert!((u1.total_mass - u.total_mass * (1.0 + 0.4 * dw)).abs() < 1e-12);
    }

    #[test]
    fn stability_refusal() {
        let c = CoefficientSet::from_id("langevin-pure").unwrap();
        let u = GridDensity::from_gaussian(0.0, lattice([1.0, 1.0], 65), 0.0, &Gaussian2::new([0.0, 0.0], [[0.1, 0.0], [0.0, 0.1]]).unwrap(), 1.0).unwrap();
        assert!(matches!(forward_spde_step(&u, &c, 0.0, 0.0, 0.01), Err(Error::Stability(_))));
    }

    #[test]
    fn prototype_matches_exact_kernel() {
        let c = CoefficientSet::from_id("langevin-pure").unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 1000).unwrap();
        let dw = vec![0.0; 1000];
        let run = forward_fundamental(&c, [0.0, 0.0], 0.0, grid, &dw, &ForwardSpec::default()).unwrap();
        let exact = langevin_gaussian(1.0, 0.5, [0.0, 0.0]).unwrap();
        let l1 = run.density.integrate(|_| 1.0);
        let diff = {
            let d = &run.density;
            let ny = d.lattice.nu.n;
            let v: Vec<f64> = (0..d.values.len()).map(|k| (d.values[k] - exact.density(d.physical(k / ny, k % ny))).abs()).collect();
            d.lattice.trapezoid(&v)
        };
        assert!(diff < 1e-3, "L1 {diff}, mass {l1}, start {:?}", run.start);
        assert!(run.density.min_ratio >= -1e-8);
    }

    #[test]
    fn normalization_and_scale_invariance() {
        let g = Gaussian2::new([0.2, -0.1], [[0.05, 0.02], [0.02, 0.3]]).unwrap();
        let u = GridDensity::from_gaussian(0.3, lattice([2.0, 3.0], 81), 0.1, &g, 3.0).unwrap();
        let n = normalize(&u).unwrap();
        assert!((n.total_mass - 1.0).abs() < 1e-12);
        let n7 = normalize(&u.scaled(7.0)).unwrap();
        let phi = ObservableFn::TanhXi;
        let a = estimate_forward(&n, None, &phi, "").unwrap().value;
        let b = estimate_forward(&n7, None, &phi, "").unwrap().value;
        assert!((a - b).abs() < 1e-14);
        assert_eq!(estimate_forward(&n, None, &ObservableFn::One, "").unwrap().value, 1.0);
        let sym = GridDensity::from_gaussian(0.0, lattice([2.0, 3.0], 81), 0.0, &Gaussian2::new([0.0, 0.0], [[0.05, 0.0], [0.0, 0.3]]).unwrap(), 1.0).unwrap();
        assert!(estimate_forward(&normalize(&sym).unwrap(), None, &ObservableFn::X, "").unwrap().value.abs() < 1e-14);
        assert!(matches!(normalize(&u.scaled(0.0)), Err(Error::DegenerateMass(_))));
    }

    #[test]
    fn ks_trivial_cases() {
        let c = CoefficientSet::from_id("sinusoidal").unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 100).unwrap();
        let dw = NormalStream::new(5, 0, 0).increments(100, grid.dt());
        let est = ks_backward_estimates(&c, [0.0, 0.3], 0.0, grid, &dw, &[ObservableFn::One, ObservableFn::V], 200, 1).unwrap();
        assert_eq!(est[0].value, 1.0);
        let lp = CoefficientSet::from_id("langevin-pure").unwrap();
        let est = ks_backward_estimates(&lp, [0.0, 0.3], 0.0, grid, &dw, &[ObservableFn::V], 400, 2).unwrap();
        let plain: f64 = (0..400).map(|p| q_terminal(&lp, (0.0, 0.3, 0.0), &dw, grid, 2, p).unwrap().v).sum::<f64>() / 400.0;
        assert!((est[0].value - plain).abs() < 1e-12);
        assert!(ks_backward_estimates(&c, [0.0, 0.3], 0.0, grid, &dw, &[ObservableFn::One], 1, 1).is_err());
    }

    #[test]
    fn oracle_agrees_with_ks_and_scales() {
        let c = CoefficientSet::from_id("sinusoidal").unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 100).unwrap();
        let dw = NormalStream::new(8, 0, 0).increments(100, grid.dt());
        let phis = [ObservableFn::One, ObservableFn::V, ObservableFn::TanhXi];
        let ks = ks_backward_estimates(&c, [0.0, 0.3], 0.0, grid, &dw, &phis, 8000, 3).unwrap();
        let or = particle_oracle(&c, [0.0, 0.3], 0.0, grid, &dw, &phis, 8000, 3, &OracleSpec::default()).unwrap();
        assert_eq!(or[0].value, 1.0);
        for q in 1..3 {
            assert!(ks[q].discrepancy(&or[q]) < 3.0, "{:?} {:?}", ks[q], or[q]);
        }
        let sampling = OracleSpec { time_error: false, ..Default::default() };
        let small = particle_oracle(&c, [0.0, 0.3], 0.0, grid, &dw, &phis, 8000, 3, &sampling).unwrap();
        let big = particle_oracle(&c, [0.0, 0.3], 0.0, grid, &dw, &phis, 32000, 4, &sampling).unwrap();
        assert_eq!(small[1].value, or[1].value);
        assert!(small[1].stderr <= or[1].stderr);
        let r = small[1].stderr / big[1].stderr;
        assert!(r > 1.3 && r < 3.0, "stderr ratio {r}");
    }

    #[test]
    fn backward_constant_terminal_is_preserved() {
        let c = CoefficientSet::from_id("langevin-pure").unwrap();
        let grid = TimeGrid::new(0.0, 0.2, 100).unwrap();
        let dw = NormalStream::new(1, 0, 0).increments(100, grid.dt());
        let spec = BackwardSpec { n_eta: 21, n_v: 21, n_y: 5, n_std: 6.0 };
        let lat = backward_lattice(&c, [0.0, 0.0], 0.0, grid, &dw, &spec).unwrap();
        let u = solve_backward_filter(&c, grid, &dw, lat, |_, _| 1.0).unwrap();
        assert!(u.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn backward_matches_deterministic_cauchy() {
        let c = CoefficientSet::from_id("langevin-pure").unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 1000).unwrap();
        let dw = NormalStream::new(2, 0, 0).increments(1000, grid.dt());
        let phi = ObservableFn::Gaussian { center: [0.2, 0.1], var: [0.1, 0.3] };
        let spec = BackwardSpec { n_eta: 81, n_v: 81, n_y: 3, n_std: 6.0 };
        for z in [[0.0, 0.0], [0.3, -0.4]] {
            let lat = backward_lattice(&c, z, 0.0, grid, &dw, &spec).unwrap();
            let u = solve_backward_filter(&c, grid, &dw, lat, |p, _| phi.eval(p)).unwrap();
            let (val, off) = u.nearest(z, 0.0).unwrap();
            assert!(off < 1e-9);
            let exact = solve_backward_cauchy(&c, &phi, 0.0, 0.5, &[z], 1, &CauchySpec::default()).unwrap().values[0];
            assert!((val - exact).abs() < 1e-3, "{val} {exact}");
        }
    }
}
