//! Itô-Wentzell flows `dγ = -σ(ξ, γ) dW` with their tangent processes, the
//! transported vector field and the coefficients of the transformed equation.
//!
//! Generic forward equation read by this module:
//!
//! ```text
//! du = (½ a ∂_νν u + b ∂_ν u + c u - ν ∂_ξ u) ds + (σ ∂_ν u + h u) dW
//! ```
//!
//! Composing with the flow removes the `σ ∂_ν` noise term; multiplying by the
//! likelihood along the flow removes `h u dW`. What remains is a kinetic PDE
//! `∂_s v + Y·∇v = a* ∂_νν v + b* ∂_ν v + c* v` with random coefficients.

use crate::error::{domain, Error, Result};
use crate::lattice::Lattice2;
use crate::model::{CoefficientSet, Jet2};
use crate::sde::TimeGrid;
use crate::tolerances::{FLOW_DERIVATIVE_GUARD, INVERSION_TOL};
use rayon::prelude::*;

/// Coefficients of the generic forward equation at `(s, ξ, ν)`.
pub trait SpdeCoefficients: Sync {
    fn a(&self, s: f64, xi: f64, nu: f64) -> f64;
    fn b(&self, s: f64, xi: f64, nu: f64) -> f64;
    fn c(&self, s: f64, xi: f64, nu: f64) -> f64;
    fn sigma(&self, s: f64, xi: f64, nu: f64) -> Jet2;
    fn h(&self, s: f64, xi: f64, nu: f64) -> Jet2;
}

/// Reads a preset as `a = |σ|²`, `b = b`, `c = 0`, `σ = σ¹`, `h = h̃`.
///
/// Presets do not depend on the observation value, which is evaluated at 0.
pub struct DirectCoefficients<'a>(pub &'a CoefficientSet);

impl SpdeCoefficients for DirectCoefficients<'_> {
    fn a(&self, s: f64, xi: f64, nu: f64) -> f64 {
        self.0.sigma_sq_jet(s, xi, nu, 0.0).v
    }
    fn b(&self, s: f64, xi: f64, nu: f64) -> f64 {
        self.0.b(s, xi, nu, 0.0)
    }
    fn c(&self, _s: f64, _xi: f64, _nu: f64) -> f64 {
        0.0
    }
    fn sigma(&self, s: f64, xi: f64, nu: f64) -> Jet2 {
        self.0.sigma1_jet(s, xi, nu, 0.0)
    }
    fn h(&self, s: f64, xi: f64, nu: f64) -> Jet2 {
        self.0.tilde_h_jet(s, xi, nu, 0.0).unwrap_or_default()
    }
}

/// Reads a preset in divergence form, expanded: the Fokker-Planck operator
/// `½∂_νν(|σ|² u) - ∂_ν(b u)` becomes `a = |σ|²`, `b = ∂_ν|σ|² - b`, `c = ½∂_νν|σ|² - ∂_ν b`,
/// and the noise operator `-∂_ν(σ¹ u) + h̃ u` gives `σ = -σ¹`, `h = h̃ - ∂_νσ¹`.
///
/// Second derivatives of `∂_νσ¹` are dropped from the `h` jet; every preset has `∂_νσ¹ = 0`.
pub struct AdjointCoefficients<'a>(pub &'a CoefficientSet);

impl SpdeCoefficients for AdjointCoefficients<'_> {
    fn a(&self, s: f64, xi: f64, nu: f64) -> f64 {
        self.0.sigma_sq_jet(s, xi, nu, 0.0).v
    }
    fn b(&self, s: f64, xi: f64, nu: f64) -> f64 {
        self.0.sigma_sq_jet(s, xi, nu, 0.0).n - self.0.b(s, xi, nu, 0.0)
    }
    fn c(&self, s: f64, xi: f64, nu: f64) -> f64 {
        0.5 * self.0.sigma_sq_jet(s, xi, nu, 0.0).nn - self.0.b_jet(s, xi, nu, 0.0).n
    }
    fn sigma(&self, s: f64, xi: f64, nu: f64) -> Jet2 {
        self.0.sigma1_jet(s, xi, nu, 0.0).scale(-1.0)
    }
    fn h(&self, s: f64, xi: f64, nu: f64) -> Jet2 {
        let s1 = self.0.sigma1_jet(s, xi, nu, 0.0);
        let mut h = self.0.tilde_h_jet(s, xi, nu, 0.0).unwrap_or_default();
        h.v -= s1.n;
        h.x -= s1.xn;
        h.n -= s1.nn;
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Flow values on the lattice at one saved time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSlice {
    pub time: f64,
    pub gamma: Vec<f64>,
    pub d_nu: Vec<f64>,
    pub d_xi: Vec<f64>,
    pub d_nunu: Vec<f64>,
    pub d_nuxi: Vec<f64>,
    pub d_xixi: Vec<f64>,
}

/// `L = ln ρ̂⁻¹` accumulated along the flow, with its derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodSlice {
    pub l: Vec<f64>,
    pub l_nu: Vec<f64>,
    pub l_nunu: Vec<f64>,
    pub l_xi: Vec<f64>,
}

/// A realization of the flow on a lattice of starting points.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    pub direction: Direction,
    pub anchor_time: f64,
    pub lattice: Lattice2,
    pub grid: TimeGrid,
    /// Step indices of the saved slices.
    pub saved_steps: Vec<usize>,
    pub slices: Vec<FlowSlice>,
    /// Present for forward flows.
    pub likelihood: Vec<LikelihoodSlice>,
    pub driving_increments: Vec<f64>,
}

/// Saved step indices: every `stride` steps, the final step, and optionally step 1.
pub fn save_schedule(n_steps: usize, stride: usize, include_first_step: bool) -> Vec<usize> {
    let stride = stride.max(1);
    let mut v: Vec<usize> = (0..=n_steps).step_by(stride).collect();
    if *v.last().unwrap() != n_steps {
        v.push(n_steps);
    }
    if include_first_step && n_steps >= 1 && !v.contains(&1) {
        v.insert(1, 1);
    }
    v
}

#[derive(Clone, Copy, Default)]
struct NodeState {
    g: f64,
    gn: f64,
    gx: f64,
    gnn: f64,
    gnx: f64,
    gxx: f64,
    l: f64,
    ln: f64,
    lnn: f64,
    lx: f64,
}

impl NodeState {
    fn identity(nu: f64) -> Self {
        Self { g: nu, gn: 1.0, ..Default::default() }
    }

    /// One Euler step; `sign = -1` forward, `+1` backward.
    #[inline]
    fn step(&mut self, sj: Jet2, dw: f64, sign: f64) {
        let (g, gn, gx, gnn, gnx, gxx) = (self.g, self.gn, self.gx, self.gnn, self.gnx, self.gxx);
        self.g = g + sign * sj.v * dw;
        self.gn = gn + sign * sj.n * gn * dw;
        self.gx = gx + sign * (sj.x + sj.n * gx) * dw;
        self.gnn = gnn + sign * (sj.nn * gn * gn + sj.n * gnn) * dw;
        self.gnx = gnx + sign * (sj.xn * gn + sj.nn * gx * gn + sj.n * gnx) * dw;
        self.gxx = gxx + sign * (sj.xx + 2.0 * sj.xn * gx + sj.nn * gx * gx + sj.n * gxx) * dw;
    }

    #[inline]
    fn accumulate_likelihood(&mut self, hj: Jet2, dw: f64, dt: f64) {
        let h = hj.v;
        let hn = hj.n * self.gn;
        let hnn = hj.nn * self.gn * self.gn + hj.n * self.gnn;
        let hx = hj.x + hj.n * self.gx;
        self.l += h * dw + 0.5 * h * h * dt;
        self.ln += hn * dw + h * hn * dt;
        self.lnn += hnn * dw + (hn * hn + h * hnn) * dt;
        self.lx += hx * dw + h * hx * dt;
    }
}

fn empty_slice(time: f64, n: usize) -> FlowSlice {
    FlowSlice {
        time,
        gamma: vec![0.0; n],
        d_nu: vec![0.0; n],
        d_xi: vec![0.0; n],
        d_nunu: vec![0.0; n],
        d_nuxi: vec![0.0; n],
        d_xixi: vec![0.0; n],
    }
}

fn solve_flow<C: SpdeCoefficients>(
    coeffs: &C,
    increments: &[f64],
    grid: TimeGrid,
    lattice: Lattice2,
    saved_steps: &[usize],
    direction: Direction,
) -> Result<FlowSolution> {
    if lattice.xi.n < 4 || lattice.nu.n < 4 {
        return Err(Error::EmptyLattice);
    }
    let n = grid.n_steps;
    if increments.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: increments.len() });
    }
    if saved_steps.iter().any(|&k| k > n) || saved_steps.is_empty() {
        return Err(domain("saved steps must lie within the time grid"));
    }
    let dt = grid.dt();
    let nxi = lattice.xi.n;
    let nnu = lattice.nu.n;
    let nsave = saved_steps.len();
    // rows[i] = per saved slot, per ν node state
    let rows: Vec<Vec<Vec<NodeState>>> = (0..nxi)
        .into_par_iter()
        .map(|i| {
            let xi = lattice.xi.coord(i);
            let mut out = vec![vec![NodeState::default(); nnu]; nsave];
            for j in 0..nnu {
                let mut st = NodeState::identity(lattice.nu.coord(j));
                match direction {
                    Direction::Forward => {
                        let mut slot = 0;
                        for k in 0..=n {
                            while slot < nsave && saved_steps[slot] == k {
                                out[slot][j] = st;
                                slot += 1;
                            }
                            if k == n {
                                break;
                            }
                            let s = grid.time(k);
                            let sj = coeffs.sigma(s, xi, st.g);
                            let hj = coeffs.h(s, xi, st.g);
                            st.accumulate_likelihood(hj, increments[k], dt);
                            st.step(sj, increments[k], -1.0);
                        }
                    }
                    Direction::Backward => {
                        // slot for step k holds γ̌_{t_k, t_n}
                        let mut k = n;
                        loop {
                            for (slot, &sk) in saved_steps.iter().enumerate() {
                                if sk == k {
                                    out[slot][j] = st;
                                }
                            }
                            if k == 0 {
                                break;
                            }
                            let s = grid.time(k);
                            let sj = coeffs.sigma(s, xi, st.g);
                            st.step(sj, increments[k - 1], 1.0);
                            k -= 1;
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut slices: Vec<FlowSlice> = saved_steps.iter().map(|&k| empty_slice(grid.time(k), lattice.len())).collect();
    let mut likelihood: Vec<LikelihoodSlice> = Vec::new();
    if direction == Direction::Forward {
        likelihood = (0..nsave)
            .map(|_| LikelihoodSlice {
                l: vec![0.0; lattice.len()],
                l_nu: vec![0.0; lattice.len()],
                l_nunu: vec![0.0; lattice.len()],
                l_xi: vec![0.0; lattice.len()],
            })
            .collect();
    }
    for (i, row) in rows.iter().enumerate() {
        for (slot, states) in row.iter().enumerate() {
            for (j, st) in states.iter().enumerate() {
                let idx = lattice.index(i, j);
                let sl = &mut slices[slot];
                sl.gamma[idx] = st.g;
                sl.d_nu[idx] = st.gn;
                sl.d_xi[idx] = st.gx;
                sl.d_nunu[idx] = st.gnn;
                sl.d_nuxi[idx] = st.gnx;
                sl.d_xixi[idx] = st.gxx;
                if let Some(lk) = likelihood.get_mut(slot) {
                    lk.l[idx] = st.l;
                    lk.l_nu[idx] = st.ln;
                    lk.l_nunu[idx] = st.lnn;
                    lk.l_xi[idx] = st.lx;
                }
            }
        }
    }
    Ok(FlowSolution {
        direction,
        anchor_time: match direction {
            Direction::Forward => grid.t0,
            Direction::Backward => grid.t1,
        },
        lattice,
        grid,
        saved_steps: saved_steps.to_vec(),
        slices,
        likelihood,
        driving_increments: increments.to_vec(),
    })
}

/// Forward flow from `grid.t0`, Euler scheme with left-endpoint increments.
pub fn solve_forward_flow<C: SpdeCoefficients>(
    coeffs: &C,
    increments: &[f64],
    grid: TimeGrid,
    lattice: Lattice2,
    saved_steps: &[usize],
) -> Result<FlowSolution> {
    solve_flow(coeffs, increments, grid, lattice, saved_steps, Direction::Forward)
}

/// Backward flow anchored at `grid.t1`, integrand evaluated at right endpoints.
pub fn solve_backward_flow<C: SpdeCoefficients>(
    coeffs: &C,
    increments: &[f64],
    grid: TimeGrid,
    lattice: Lattice2,
    saved_steps: &[usize],
) -> Result<FlowSolution> {
    solve_flow(coeffs, increments, grid, lattice, saved_steps, Direction::Backward)
}

impl FlowSolution {
    pub fn slice_at_step(&self, step: usize) -> Option<&FlowSlice> {
        self.saved_steps.iter().position(|&k| k == step).map(|i| &self.slices[i])
    }

    /// `ν` with `γ(ξ, ν) = w` at saved slot `slot`.
    pub fn invert(&self, slot: usize, xi: f64, w: f64) -> Result<f64> {
        invert_flow(self, slot, xi, w)
    }
}

/// Solves `γ(ξ, ν) = w` on the interpolated flow by bisection, then Newton polishing.
pub fn invert_flow(f: &FlowSolution, slot: usize, xi: f64, w: f64) -> Result<f64> {
    let sl = f.slices.get(slot).ok_or_else(|| Error::OutOfRange(format!("slot {slot}")))?;
    let lat = &f.lattice;
    let g = |nu: f64| lat.interp_cubic_linear(&sl.gamma, xi, nu);
    let (mut lo, mut hi) = (lat.nu.min, lat.nu.max);
    let (glo, ghi) = (g(lo)?, g(hi)?);
    if !(glo <= w && w <= ghi) {
        return Err(Error::OutOfRange(format!("w = {w} outside flow image [{glo}, {ghi}] at xi = {xi}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid)? < w {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let mut nu = 0.5 * (lo + hi);
    for _ in 0..5 {
        let (v, d) = lat.interp_with_dnu(&sl.gamma, xi, nu)?;
        let r = v - w;
        if r.abs() < 0.1 * INVERSION_TOL || d.abs() < FLOW_DERIVATIVE_GUARD {
            break;
        }
        let cand = nu - r / d;
        if cand < lat.nu.min || cand > lat.nu.max {
            break;
        }
        nu = cand;
    }
    let r = (g(nu)? - w).abs();
    if r >= INVERSION_TOL {
        return Err(Error::OutOfRange(format!("flow inversion residual {r:e}")));
    }
    Ok(nu)
}

/// Transported field `Y = (γ, -γ (∂_νγ)⁻¹ ∂_ξγ)` on the lattice, per saved slice.
pub fn transported_field(f: &FlowSolution) -> Result<Vec<[Vec<f64>; 2]>> {
    f.slices
        .iter()
        .map(|sl| {
            let mut y2 = vec![0.0; sl.gamma.len()];
            for k in 0..y2.len() {
                let gn = sl.d_nu[k];
                if gn.abs() < FLOW_DERIVATIVE_GUARD {
                    return Err(Error::DegenerateFlow(gn));
                }
                y2[k] = -sl.gamma[k] * sl.d_xi[k] / gn;
            }
            Ok([sl.gamma.clone(), y2])
        })
        .collect()
}

/// Realized bounds of the transformed equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformReport {
    pub a_min: f64,
    pub a_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Smallest `m₁` with `m₁⁻¹ ≤ a* ≤ m₁`.
    pub m1: f64,
    /// Smallest `m₂` with `m₂⁻¹ ≤ ∂_ν Y₁ ≤ m₂`.
    pub m2: f64,
    pub pass: bool,
}

/// Coefficients of the transformed equation on the lattice at the saved times.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedCoefficients {
    pub lattice: Lattice2,
    pub times: Vec<f64>,
    pub a_star: Vec<Vec<f64>>,
    pub b_star: Vec<Vec<f64>>,
    pub c_star: Vec<Vec<f64>>,
    pub y1: Vec<Vec<f64>>,
    pub y2: Vec<Vec<f64>>,
    /// `∂_ν Y₁`
    pub beta: Vec<Vec<f64>>,
    pub report: TransformReport,
}

/// Pointwise assembly of the transformed coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformedPoint {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub y1: f64,
    pub y2: f64,
    pub beta: f64,
}

fn transform_point<C: SpdeCoefficients>(
    coeffs: &C,
    s: f64,
    xi: f64,
    g: f64,
    gn: f64,
    gx: f64,
    gnn: f64,
    l1: f64,
    l2: f64,
    lx: f64,
) -> Result<TransformedPoint> {
    if gn.abs() < FLOW_DERIVATIVE_GUARD {
        return Err(Error::DegenerateFlow(gn));
    }
    let sj = coeffs.sigma(s, xi, g);
    let hj = coeffs.h(s, xi, g);
    let a_hat = coeffs.a(s, xi, g);
    let b_hat = coeffs.b(s, xi, g);
    let c_hat = coeffs.c(s, xi, g);
    let inv = 1.0 / gn;
    let a_bar = 0.5 * inv * inv * (a_hat - sj.v * sj.v);
    let b_bar = inv * (b_hat - sj.v * hj.v - sj.v * sj.n - a_bar * gnn);
    let c_bar = c_hat - sj.v * hj.n;
    let y1 = g;
    let y2 = -g * gx * inv;
    Ok(TransformedPoint {
        a: a_bar,
        b: b_bar + 2.0 * a_bar * l1,
        c: c_bar + b_bar * l1 + a_bar * (l1 * l1 + l2) - (y1 * lx + y2 * l1) - hj.v * hj.v,
        y1,
        y2,
        beta: gn,
    })
}

/// Coefficients `a*, b*, c*` and the field `Y` from a forward flow and its likelihood.
pub fn transformed_coefficients<C: SpdeCoefficients>(
    coeffs: &C,
    f: &FlowSolution,
    rho_hat: &[LikelihoodSlice],
) -> Result<TransformedCoefficients> {
    if f.direction != Direction::Forward {
        return Err(domain("transformed coefficients need a forward flow"));
    }
    if rho_hat.len() != f.slices.len() {
        return Err(Error::LengthMismatch { expected: f.slices.len(), got: rho_hat.len() });
    }
    let lat = f.lattice;
    let ns = f.slices.len();
    let mut out = TransformedCoefficients {
        lattice: lat,
        times: f.slices.iter().map(|s| s.time).collect(),
        a_star: Vec::with_capacity(ns),
        b_star: Vec::with_capacity(ns),
        c_star: Vec::with_capacity(ns),
        y1: Vec::with_capacity(ns),
        y2: Vec::with_capacity(ns),
        beta: Vec::with_capacity(ns),
        report: TransformReport {
            a_min: f64::INFINITY,
            a_max: f64::NEG_INFINITY,
            beta_min: f64::INFINITY,
            beta_max: f64::NEG_INFINITY,
            m1: f64::NAN,
            m2: f64::NAN,
            pass: false,
        },
    };
    for (sl, lk) in f.slices.iter().zip(rho_hat) {
        let mut fields: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; lat.len()]);
        for i in 0..lat.xi.n {
            let xi = lat.xi.coord(i);
            for j in 0..lat.nu.n {
                let k = lat.index(i, j);
                let p = transform_point(
                    coeffs,
                    sl.time,
                    xi,
                    sl.gamma[k],
                    sl.d_nu[k],
                    sl.d_xi[k],
                    sl.d_nunu[k],
                    lk.l_nu[k],
                    lk.l_nunu[k],
                    lk.l_xi[k],
                )?;
                fields[0][k] = p.a;
                fields[1][k] = p.b;
                fields[2][k] = p.c;
                fields[3][k] = p.y1;
                fields[4][k] = p.y2;
                fields[5][k] = p.beta;
                let r = &mut out.report;
                r.a_min = r.a_min.min(p.a);
                r.a_max = r.a_max.max(p.a);
                r.beta_min = r.beta_min.min(p.beta);
                r.beta_max = r.beta_max.max(p.beta);
            }
        }
        let [a, b, c, y1, y2, beta] = fields;
        out.a_star.push(a);
        out.b_star.push(b);
        out.c_star.push(c);
        out.y1.push(y1);
        out.y2.push(y2);
        out.beta.push(beta);
    }
    let r = &mut out.report;
    r.pass = r.a_min > 0.0 && r.beta_min > 0.0 && r.a_max.is_finite() && r.beta_max.is_finite();
    if r.pass {
        r.m1 = r.a_max.max(1.0 / r.a_min).max(1.0);
        r.m2 = r.beta_max.max(1.0 / r.beta_min).max(1.0);
    } else {
        r.m1 = f64::INFINITY;
        r.m2 = f64::INFINITY;
    }
    Ok(out)
}

/// Fitted constants of the pathwise flow bounds for one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBoundReport {
    pub eps: f64,
    /// `|γ| ≤ c √(1+|ζ|²)`
    pub c_growth: f64,
    /// `e^{-c lag^ε} ≤ ∂_νγ ≤ e^{c lag^ε}`
    pub c_dnu: f64,
    /// `|∂_ξγ| ≤ c lag^ε`
    pub c_dxi: f64,
    /// `|∂²γ| ≤ c lag^ε / √(1+|ζ|²)`
    pub c_second: f64,
    pub min_dnu: f64,
    /// `(lag, sup |∂_νγ - 1|)` per saved slice.
    pub dnu_deviation: Vec<(f64, f64)>,
}

impl FlowBoundReport {
    pub fn finite(&self) -> bool {
        [self.c_growth, self.c_dnu, self.c_dxi, self.c_second].iter().all(|c| c.is_finite())
    }
}

/// Fits the smallest constants consistent with the flow bounds on the lattice.
pub fn fit_flow_bounds(f: &FlowSolution, eps: f64) -> FlowBoundReport {
    let lat = f.lattice;
    let mut rep = FlowBoundReport {
        eps,
        c_growth: 0.0,
        c_dnu: 0.0,
        c_dxi: 0.0,
        c_second: 0.0,
        min_dnu: f64::INFINITY,
        dnu_deviation: Vec::new(),
    };
    for sl in &f.slices {
        let lag = (sl.time - f.anchor_time).abs();
        let mut dev: f64 = 0.0;
        for i in 0..lat.xi.n {
            for j in 0..lat.nu.n {
                let k = lat.index(i, j);
                let (x, v) = lat.point(i, j);
                let w = (1.0 + x * x + v * v).sqrt();
                rep.c_growth = rep.c_growth.max(sl.gamma[k].abs() / w);
                let gn = sl.d_nu[k];
                rep.min_dnu = rep.min_dnu.min(gn);
                dev = dev.max((gn - 1.0).abs());
                if lag > 0.0 {
                    let le = lag.powf(eps);
                    let lnd = if gn > 0.0 { gn.ln().abs() } else { f64::INFINITY };
                    rep.c_dnu = rep.c_dnu.max(lnd / le);
                    rep.c_dxi = rep.c_dxi.max(sl.d_xi[k].abs() / le);
                    let second = sl.d_nunu[k].abs().max(sl.d_nuxi[k].abs()).max(sl.d_xixi[k].abs());
                    rep.c_second = rep.c_second.max(second * w / le);
                }
            }
        }
        rep.dnu_deviation.push((lag, dev));
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{Axis, Lattice2};
    use crate::rng::NormalStream;

    struct VelocityLoading;

    impl SpdeCoefficients for VelocityLoading {
        fn a(&self, _s: f64, _xi: f64, nu: f64) -> f64 {
            1.0 + 0.25 * nu.sin().powi(2) + 0.3
        }
        fn b(&self, _s: f64, _xi: f64, nu: f64) -> f64 {
            0.2 * nu.cos()
        }
        fn c(&self, _s: f64, _xi: f64, _nu: f64) -> f64 {
            0.0
        }
        fn sigma(&self, _s: f64, xi: f64, nu: f64) -> Jet2 {
            // 0.5 sin(ν) (1 + 0.2 sin ξ)
            let (sn, cn) = nu.sin_cos();
            let (sx, cx) = xi.sin_cos();
            let f = 1.0 + 0.2 * sx;
            Jet2 {
                v: 0.5 * sn * f,
                n: 0.5 * cn * f,
                nn: -0.5 * sn * f,
                x: 0.5 * sn * 0.2 * cx,
                xx: -0.5 * sn * 0.2 * sx,
                xn: 0.5 * cn * 0.2 * cx,
            }
        }
        fn h(&self, _s: f64, xi: f64, nu: f64) -> Jet2 {
            Jet2 { v: 0.3 * xi.tanh() + 0.1 * nu, x: 0.3 * (1.0 - xi.tanh().powi(2)), n: 0.1, ..Default::default() }
        }
    }

    fn increments(seed: u64, n: usize, dt: f64) -> Vec<f64> {
        NormalStream::new(seed, 0, 0).increments(n, dt)
    }

    #[test]
    fn constant_loading_closed_form() {
        let c = CoefficientSet::constant(0.0, 0.7, 1.0, 0.0, 1.0);
        let grid = TimeGrid::new(0.0, 0.5, 50).unwrap();
        let dw = increments(1, 50, grid.dt());
        let lat = Lattice2::square(3.0, 9).unwrap();
        let f = solve_forward_flow(&DirectCoefficients(&c), &dw, grid, lat, &save_schedule(50, 10, false)).unwrap();
        let w: f64 = dw.iter().sum();
        let last = f.slices.last().unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let k = lat.index(i, j);
                assert!((last.gamma[k] - (lat.nu.coord(j) - 0.7 * w)).abs() < 1e-12);
                assert_eq!(last.d_nu[k], 1.0);
                assert_eq!(last.d_xi[k], 0.0);
            }
        }
        let first = &f.slices[0];
        assert_eq!(first.gamma[lat.index(2, 3)], lat.nu.coord(3));
        let b = solve_backward_flow(&DirectCoefficients(&c), &dw, grid, lat, &[0, 50]).unwrap();
        let k = lat.index(4, 5);
        assert!((b.slices[0].gamma[k] - (lat.nu.coord(5) + 0.7 * w)).abs() < 1e-12);
        assert_eq!(b.slices[1].gamma[k], lat.nu.coord(5));
    }

    #[test]
    fn tangents_match_finite_differences() {
        let grid = TimeGrid::new(0.0, 0.5, 200).unwrap();
        let dw = increments(4, 200, grid.dt());
        let h = 1e-2;
        let lat = Lattice2::new(Axis::new(-1.0, 1.0, 201).unwrap(), Axis::new(-2.0, 2.0, 401).unwrap());
        let f = solve_forward_flow(&VelocityLoading, &dw, grid, lat, &[200]).unwrap();
        let sl = &f.slices[0];
        for &(i, j) in &[(100usize, 200usize), (50, 120), (150, 300)] {
            let k = lat.index(i, j);
            let fd_nu = (sl.gamma[lat.index(i, j + 1)] - sl.gamma[lat.index(i, j - 1)]) / (2.0 * h);
            assert!(((sl.d_nu[k] - fd_nu) / sl.d_nu[k]).abs() < 1e-3);
            let fd_xi = (sl.gamma[lat.index(i + 1, j)] - sl.gamma[lat.index(i - 1, j)]) / (2.0 * h);
            assert!((sl.d_xi[k] - fd_xi).abs() < 1e-3 * (1.0 + sl.d_xi[k].abs()));
            let fd_nn = (sl.d_nu[lat.index(i, j + 1)] - sl.d_nu[lat.index(i, j - 1)]) / (2.0 * h);
            assert!((sl.d_nunu[k] - fd_nn).abs() < 1e-3 * (1.0 + fd_nn.abs()));
            let fd_nx = (sl.d_nu[lat.index(i + 1, j)] - sl.d_nu[lat.index(i - 1, j)]) / (2.0 * h);
            assert!((sl.d_nuxi[k] - fd_nx).abs() < 1e-3 * (1.0 + fd_nx.abs()));
            let fd_xx = (sl.d_xi[lat.index(i + 1, j)] - sl.d_xi[lat.index(i - 1, j)]) / (2.0 * h);
            assert!((sl.d_xixi[k] - fd_xx).abs() < 1e-3 * (1.0 + fd_xx.abs()));
        }
        let lk = &f.likelihood[0];
        let (i, j) = (80, 210);
        let k = lat.index(i, j);
        let fd = (lk.l[lat.index(i, j + 1)] - lk.l[lat.index(i, j - 1)]) / (2.0 * h);
        assert!((lk.l_nu[k] - fd).abs() < 1e-3);
        let fd = (lk.l_nu[lat.index(i, j + 1)] - lk.l_nu[lat.index(i, j - 1)]) / (2.0 * h);
        assert!((lk.l_nunu[k] - fd).abs() < 1e-3);
        let fd = (lk.l[lat.index(i + 1, j)] - lk.l[lat.index(i - 1, j)]) / (2.0 * h);
        assert!((lk.l_xi[k] - fd).abs() < 1e-3);
    }

    #[test]
    fn inversion_round_trip() {
        let grid = TimeGrid::new(0.0, 0.3, 60).unwrap();
        let dw = increments(6, 60, grid.dt());
        let lat = Lattice2::square(3.0, 61).unwrap();
        let f = solve_forward_flow(&VelocityLoading, &dw, grid, lat, &[0, 60]).unwrap();
        assert!((invert_flow(&f, 0, 0.3, 0.77).unwrap() - 0.77).abs() < 1e-10);
        for &(xi, w) in &[(0.1, 0.5), (-1.3, -1.0), (2.0, 1.7)] {
            let nu = invert_flow(&f, 1, xi, w).unwrap();
            let back = lat.interp_cubic_linear(&f.slices[1].gamma, xi, nu).unwrap();
            assert!((back - w).abs() < 1e-10);
        }
        assert!(matches!(invert_flow(&f, 1, 0.0, 50.0), Err(Error::OutOfRange(_))));
        let c = CoefficientSet::constant(0.0, 0.7, 1.0, 0.0, 1.0);
        let g = solve_forward_flow(&DirectCoefficients(&c), &dw, grid, lat, &[60]).unwrap();
        let w: f64 = dw.iter().sum();
        assert!((invert_flow(&g, 0, 0.0, 0.2).unwrap() - (0.2 + 0.7 * w)).abs() < 1e-10);
    }

    #[test]
    fn field_at_anchor_and_constant_loading() {
        let c = CoefficientSet::constant(0.0, 0.7, 1.0, 0.0, 1.0);
        let grid = TimeGrid::new(0.0, 0.2, 20).unwrap();
        let dw = increments(2, 20, grid.dt());
        let lat = Lattice2::square(2.0, 5).unwrap();
        let f = solve_forward_flow(&DirectCoefficients(&c), &dw, grid, lat, &[0, 20]).unwrap();
        let y = transported_field(&f).unwrap();
        let w: f64 = dw.iter().sum();
        for j in 0..5 {
            let k = lat.index(1, j);
            assert_eq!(y[0][0][k], lat.nu.coord(j));
            assert_eq!(y[0][1][k], 0.0);
            assert!((y[1][0][k] - (lat.nu.coord(j) - 0.7 * w)).abs() < 1e-12);
            assert_eq!(y[1][1][k], 0.0);
        }
    }

    #[test]
    fn transformed_constant_coefficients() {
        let c = CoefficientSet::constant(0.4, 0.7, 1.1, 0.0, 1.0);
        let grid = TimeGrid::new(0.0, 0.2, 20).unwrap();
        let dw = increments(3, 20, grid.dt());
        let lat = Lattice2::square(2.0, 5).unwrap();
        let coeffs = DirectCoefficients(&c);
        let f = solve_forward_flow(&coeffs, &dw, grid, lat, &[0, 10, 20]).unwrap();
        let tc = transformed_coefficients(&coeffs, &f, &f.likelihood).unwrap();
        let a = c.sigma_sq_jet(0.0, 0.0, 0.0, 0.0).v;
        for s in 0..3 {
            for k in 0..lat.len() {
                assert!((tc.a_star[s][k] - 0.5 * (a - 0.49)).abs() < 1e-14);
                assert!((tc.b_star[s][k] - 0.4).abs() < 1e-14);
                assert!(tc.c_star[s][k].abs() < 1e-14);
            }
        }
        assert!(tc.report.pass);
        // no shared noise, no observation drift: identity transform
        let d = CoefficientSet::constant(0.4, 0.0, 1.1, 0.0, 1.0);
        let coeffs = AdjointCoefficients(&d);
        let f = solve_forward_flow(&coeffs, &dw, grid, lat, &[20]).unwrap();
        let tc = transformed_coefficients(&coeffs, &f, &f.likelihood).unwrap();
        assert!((tc.a_star[0][7] - 0.5 * 1.21).abs() < 1e-14);
        assert!((tc.b_star[0][7] + 0.4).abs() < 1e-14);
        assert_eq!(tc.c_star[0][7], 0.0);
    }

    #[test]
    fn deterministic_time_only_loading_reflects() {
        struct TimeOnly;
        impl SpdeCoefficients for TimeOnly {
            fn a(&self, _: f64, _: f64, _: f64) -> f64 {
                1.0
            }
            fn b(&self, _: f64, _: f64, _: f64) -> f64 {
                0.0
            }
            fn c(&self, _: f64, _: f64, _: f64) -> f64 {
                0.0
            }
            fn sigma(&self, s: f64, _: f64, _: f64) -> Jet2 {
                Jet2::constant(1.0 + s)
            }
            fn h(&self, _: f64, _: f64, _: f64) -> Jet2 {
                Jet2::default()
            }
        }
        let grid = TimeGrid::new(0.0, 1.0, 4000).unwrap();
        let dw = increments(7, 4000, grid.dt());
        let lat = Lattice2::square(1.0, 5).unwrap();
        let fwd = solve_forward_flow(&TimeOnly, &dw, grid, lat, &[4000]).unwrap();
        let bwd = solve_backward_flow(&TimeOnly, &dw, grid, lat, &[0]).unwrap();
        let k = lat.index(2, 2);
        // γ̌ - ν = ∫σ⋆dW, ν - γ = ∫σ dW
        let a = bwd.slices[0].gamma[k] - lat.nu.coord(2);
        let b = lat.nu.coord(2) - fwd.slices[0].gamma[k];
        assert!((a - b).abs() < 0.05, "{a} {b}");
    }

    #[test]
    fn sinusoidal_flow_bound_constants() {
        let c = CoefficientSet::from_id("sinusoidal").unwrap();
        let grid = TimeGrid::new(0.0, 0.1, 100).unwrap();
        let dw = increments(9, 100, grid.dt());
        let lat = Lattice2::square(6.0, 33).unwrap();
        let f = solve_forward_flow(&DirectCoefficients(&c), &dw, grid, lat, &save_schedule(100, 25, true)).unwrap();
        let r = fit_flow_bounds(&f, c.flatten_eps);
        assert!(r.finite());
        assert!(r.min_dnu > 0.0);
        assert!(r.dnu_deviation[1].1 < 0.05);
    }
}
