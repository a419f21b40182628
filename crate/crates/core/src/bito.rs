//! Backward Itô calculus: right-endpoint integrals, the backward Itô formula and
//! the backward diffusion equation satisfied by `x ↦ X^{t,x}_T`.

use crate::error::{Error, Result};
use crate::rng::NormalStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Right-endpoint sum with its dyadic refinement trace.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardIntegralResult {
    pub value: f64,
    pub mesh: f64,
    /// `(mesh, value)` from the coarsest dyadic coarsening to the native grid.
    pub refinement_trace: Vec<(f64, f64)>,
}

fn check_lengths(u: &[f64], w: &[f64]) -> Result<()> {
    if u.len() != w.len() {
        return Err(Error::LengthMismatch { expected: w.len(), got: u.len() });
    }
    if w.len() < 2 {
        return Err(Error::LengthMismatch { expected: 2, got: w.len() });
    }
    Ok(())
}

fn sum_with_stride(u: &[f64], w: &[f64], stride: usize, right: bool) -> f64 {
    let n = (w.len() - 1) / stride;
    (1..=n)
        .map(|k| {
            let (a, b) = ((k - 1) * stride, k * stride);
            let ui = if right { u[b] } else { u[a] };
            ui * (w[b] - w[a])
        })
        .sum()
}

/// `Σ u_{t_k} (W_{t_k} - W_{t_{k-1}})` on the common grid of `u` and `w`.
pub fn backward_integral(u: &[f64], w: &[f64], dt: f64) -> Result<BackwardIntegralResult> {
    check_lengths(u, w)?;
    let n = w.len() - 1;
    let mut trace = Vec::new();
    let mut stride = 1;
    while n % (stride * 2) == 0 && n / (stride * 2) >= 1 {
        stride *= 2;
    }
    while stride >= 1 {
        trace.push((dt * stride as f64, sum_with_stride(u, w, stride, true)));
        stride /= 2;
    }
    Ok(BackwardIntegralResult { value: sum_with_stride(u, w, 1, true), mesh: dt, refinement_trace: trace })
}

/// Left-endpoint (forward Itô) sum on the same grid.
pub fn forward_integral(u: &[f64], w: &[f64]) -> Result<f64> {
    check_lengths(u, w)?;
    Ok(sum_with_stride(u, w, 1, false))
}

/// Builds the backward Itô process `X_{k-1} = X_k + ½(b_{k-1} + b_k) dt + σ_k (W_k - W_{k-1})`.
pub fn backward_ito_process(x_terminal: f64, b: &[f64], sigma: &[f64], w: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_lengths(b, w)?;
    check_lengths(sigma, w)?;
    let n = w.len() - 1;
    let mut x = vec![0.0; n + 1];
    x[n] = x_terminal;
    for k in (1..=n).rev() {
        x[k - 1] = x[k] + 0.5 * (b[k - 1] + b[k]) * dt + sigma[k] * (w[k] - w[k - 1]);
    }
    Ok(x)
}

/// Smooth test functions `v(t, x)` with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum TestFunction {
    Identity,
    Square,
    /// `1 / (1 + e^{-x})`
    Sigmoid,
    /// `sin(ω t)`, independent of `x`.
    TimeSine { omega: f64 },
}

/// `(v, ∂_t v, ∂_x v, ∂_xx v)`.
impl TestFunction {
    pub fn jet(&self, t: f64, x: f64) -> [f64; 4] {
        match *self {
            TestFunction::Identity => [x, 0.0, 1.0, 0.0],
            TestFunction::Square => [x * x, 0.0, 2.0 * x, 2.0],
            TestFunction::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                [s, 0.0, s * (1.0 - s), s * (1.0 - s) * (1.0 - 2.0 * s)]
            }
            TestFunction::TimeSine { omega } => [(omega * t).sin(), omega * (omega * t).cos(), 0.0, 0.0],
        }
    }
}

/// Residual of the backward Itô formula on one path.
///
/// With `-dX = b dt + σ ⋆ dW` the identity checked is
/// `v(t_0, X_0) - v(T, X_T) = ∫ (-∂_t v + ½σ²∂_xx v + b ∂_x v) dt + ∫ σ ∂_x v ⋆ dW`,
/// with trapezoid sums for the `dt` part and right-endpoint sums for the `⋆ dW` part.
pub fn backward_ito_check(
    v: TestFunction,
    times: &[f64],
    x: &[f64],
    b: &[f64],
    sigma: &[f64],
    w: &[f64],
) -> Result<f64> {
    check_lengths(x, w)?;
    check_lengths(b, w)?;
    check_lengths(sigma, w)?;
    check_lengths(times, w)?;
    let n = w.len() - 1;
    let drift = |k: usize| {
        let j = v.jet(times[k], x[k]);
        -j[1] + 0.5 * sigma[k] * sigma[k] * j[3] + b[k] * j[2]
    };
    let mut rhs = 0.0;
    for k in 1..=n {
        let dt = times[k] - times[k - 1];
        rhs += 0.5 * dt * (drift(k - 1) + drift(k));
        rhs += sigma[k] * v.jet(times[k], x[k])[2] * (w[k] - w[k - 1]);
    }
    let lhs = v.jet(times[0], x[0])[0] - v.jet(times[n], x[n])[0];
    Ok((lhs - rhs).abs())
}

/// Scalar autonomous diffusion `dX = b(X) ds + σ(X) dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum ScalarSde {
    /// `b = -κ x`, constant `σ`.
    OrnsteinUhlenbeck { kappa: f64, sigma: f64 },
    /// Constant drift and diffusion.
    Constant { b: f64, sigma: f64 },
}

impl ScalarSde {
    pub fn ou() -> Self {
        ScalarSde::OrnsteinUhlenbeck { kappa: 1.0, sigma: 1.0 }
    }

    #[inline]
    pub fn b(&self, x: f64) -> f64 {
        match *self {
            ScalarSde::OrnsteinUhlenbeck { kappa, .. } => -kappa * x,
            ScalarSde::Constant { b, .. } => b,
        }
    }

    #[inline]
    pub fn sigma(&self, _x: f64) -> f64 {
        match *self {
            ScalarSde::OrnsteinUhlenbeck { sigma, .. } | ScalarSde::Constant { sigma, .. } => sigma,
        }
    }

    fn deterministic(&self) -> bool {
        self.sigma(0.0) == 0.0
    }

    /// Terminal value from `x` at fine index `start` using fine increments `dw`
    /// (Euler; RK4 when `σ ≡ 0`).
    pub fn solve(&self, x: f64, dw: &[f64], start: usize, dt: f64) -> f64 {
        let mut y = x;
        if self.deterministic() {
            for _ in start..dw.len() {
                let k1 = self.b(y);
                let k2 = self.b(y + 0.5 * dt * k1);
                let k3 = self.b(y + 0.5 * dt * k2);
                let k4 = self.b(y + dt * k3);
                y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        } else {
            for d in &dw[start..] {
                y += self.b(y) * dt + self.sigma(y) * d;
            }
        }
        y
    }
}

/// Settings of the backward diffusion checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardDiffusionSpec {
    pub horizon: f64,
    pub x0: f64,
    /// Reference mesh `2^fine_log2` used to solve the flow.
    pub fine_log2: u32,
    /// Check meshes `2^k` for `k` in this range.
    pub coarse_log2: (u32, u32),
    pub seeds: u64,
    pub fd_step: f64,
    pub base_seed: u64,
}

impl Default for BackwardDiffusionSpec {
    fn default() -> Self {
        Self { horizon: 1.0, x0: 0.5, fine_log2: 11, coarse_log2: (4, 8), seeds: 200, fd_step: 1e-3, base_seed: 2024 }
    }
}

/// Median residual per mesh and the fitted convergence rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// `(mesh, median residual)` ordered from coarse to fine.
    pub rows: Vec<(f64, f64)>,
    pub rate: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_rate(rows: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.1 > 0.0).map(|r| (r.0.ln(), r.1.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

pub(crate) fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Per-seed residuals for every check mesh; `transform` maps terminal values through `v`.
fn diffusion_residuals(sde: ScalarSde, spec: &BackwardDiffusionSpec, v: TestFunction, seed: u64) -> Vec<f64> {
    let nf = 1usize << spec.fine_log2;
    let dt = spec.horizon / nf as f64;
    let mut stream = NormalStream::new(seed, 0, 0);
    let dw = stream.increments(nf, dt);
    let mut w = vec![0.0; nf + 1];
    for k in 0..nf {
        w[k + 1] = w[k] + dw[k];
    }
    let (lo, hi) = spec.coarse_log2;
    let finest = 1usize << hi;
    let stride = nf / finest;
    let x = spec.x0;
    let h = spec.fd_step;
    // ∂_x V, ∂_xx V at every node of the finest check mesh
    let mut dv = vec![0.0; finest + 1];
    let mut dvv = vec![0.0; finest + 1];
    for j in 0..=finest {
        let start = j * stride;
        let xm = sde.solve(x - h, &dw, start, dt);
        let xc = sde.solve(x, &dw, start, dt);
        let xp = sde.solve(x + h, &dw, start, dt);
        let d1 = (xp - xm) / (2.0 * h);
        let d2 = (xp - 2.0 * xc + xm) / (h * h);
        let jv = v.jet(0.0, xc);
        dv[j] = jv[2] * d1;
        dvv[j] = jv[3] * d1 * d1 + jv[2] * d2;
    }
    let terminal = v.jet(0.0, sde.solve(x, &dw, 0, dt))[0];
    let start_value = v.jet(0.0, x)[0];
    let (b, s) = (sde.b(x), sde.sigma(x));
    (lo..=hi)
        .map(|m| {
            let n = 1usize << m;
            let step = finest / n;
            let dtc = spec.horizon / n as f64;
            let gen = |j: usize| 0.5 * s * s * dvv[j] + b * dv[j];
            let mut sum = 0.0;
            for k in 1..=n {
                let (a, c) = ((k - 1) * step, k * step);
                sum += 0.5 * dtc * (gen(a) + gen(c));
                sum += s * dv[c] * (w[c * stride] - w[a * stride]);
            }
            (terminal - start_value - sum).abs()
        })
        .collect()
}

fn residual_report(sde: ScalarSde, spec: &BackwardDiffusionSpec, v: TestFunction) -> ResidualReport {
    let per_seed: Vec<Vec<f64>> = (0..spec.seeds)
        .into_par_iter()
        .map(|i| diffusion_residuals(sde, spec, v, spec.base_seed.wrapping_add(i)))
        .collect();
    let (lo, hi) = spec.coarse_log2;
    let rows: Vec<(f64, f64)> = (lo..=hi)
        .enumerate()
        .map(|(idx, m)| {
            let mesh = spec.horizon / (1u64 << m) as f64;
            (mesh, median(per_seed.iter().map(|r| r[idx]).collect()))
        })
        .collect();
    ResidualReport { rate: fit_rate(&rows), rows }
}

/// Residual of the backward diffusion equation for `X^{t,x}_T` against the mesh.
pub fn backward_diffusion_spde_check(sde: ScalarSde, spec: &BackwardDiffusionSpec) -> ResidualReport {
    residual_report(sde, spec, TestFunction::Identity)
}

/// Same residual for `V = v(X^{t,x}_T)`, derivatives assembled by the chain rule.
pub fn invariance_check(sde: ScalarSde, v: TestFunction, spec: &BackwardDiffusionSpec) -> ResidualReport {
    residual_report(sde, spec, v)
}

/// Median over seeds of `|∫W⋆dW - (W_T²/2 + T/2)|` per dyadic mesh.
pub fn backward_integral_sweep(horizon: f64, fine_log2: u32, coarse_log2: (u32, u32), seeds: u64, base_seed: u64) -> ResidualReport {
    let nf = 1usize << fine_log2;
    let dt = horizon / nf as f64;
    let per_seed: Vec<Vec<(f64, f64)>> = (0..seeds)
        .into_par_iter()
        .map(|i| {
            let mut s = NormalStream::new(base_seed.wrapping_add(i), 0, 0);
            let mut w = vec![0.0; nf + 1];
            for k in 0..nf {
                w[k + 1] = w[k] + dt.sqrt() * s.next_normal();
            }
            let r = backward_integral(&w, &w, dt).expect("grid lengths agree");
            let target = 0.5 * w[nf] * w[nf] + 0.5 * horizon;
            r.refinement_trace.iter().map(|(m, v)| (*m, (v - target).abs())).collect()
        })
        .collect();
    let (lo, hi) = coarse_log2;
    let rows = (lo..=hi)
        .map(|m| {
            let mesh = horizon / (1u64 << m) as f64;
            let col = per_seed
                .iter()
                .map(|tr| tr.iter().find(|(mm, _)| (mm / mesh - 1.0).abs() < 1e-9).map(|p| p.1).unwrap_or(f64::NAN))
                .collect();
            (mesh, median(col))
        })
        .collect::<Vec<_>>();
    ResidualReport { rate: fit_rate(&rows), rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brownian(seed: u64, n: usize, dt: f64) -> Vec<f64> {
        let mut s = NormalStream::new(seed, 0, 0);
        let mut w = vec![0.0; n + 1];
        for k in 0..n {
            w[k + 1] = w[k] + dt.sqrt() * s.next_normal();
        }
        w
    }

    #[test]
    fn constant_integrand() {
        let w = brownian(1, 64, 1.0 / 64.0);
        let u = vec![2.5; 65];
        let r = backward_integral(&u, &w, 1.0 / 64.0).unwrap();
        for (_, v) in &r.refinement_trace {
            assert!((v - 2.5 * w[64]).abs() < 1e-12);
        }
        assert_eq!(r.refinement_trace.len(), 7);
    }

    #[test]
    fn deterministic_integrand_matches_forward_sum_in_the_limit() {
        // time-only integrand: both sums approximate the same Wiener integral
        let n = 1 << 14;
        let dt = 1.0 / n as f64;
        let w = brownian(3, n, dt);
        let u: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).cos()).collect();
        let b = backward_integral(&u, &w, dt).unwrap().value;
        let f = forward_integral(&u, &w).unwrap();
        assert!((b - f).abs() < 1e-2);
    }

    #[test]
    fn discrepancy_is_quadratic_variation() {
        let n = 1 << 14;
        let dt = 1.0 / n as f64;
        let w = brownian(5, n, dt);
        let b = backward_integral(&w, &w, dt).unwrap().value;
        let f = forward_integral(&w, &w).unwrap();
        assert!((b - f - 1.0).abs() < 0.05);
    }

    #[test]
    fn mismatched_grids() {
        assert!(backward_integral(&[1.0, 2.0], &[0.0, 1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn identity_reduces_to_process_definition() {
        let n = 256;
        let dt = 1.0 / n as f64;
        let w = brownian(8, n, dt);
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        let b: Vec<f64> = times.iter().map(|t| t.sin()).collect();
        let s: Vec<f64> = times.iter().map(|t| 1.0 + 0.5 * t).collect();
        let x = backward_ito_process(0.3, &b, &s, &w, dt).unwrap();
        let r = backward_ito_check(TestFunction::Identity, &times, &x, &b, &s, &w).unwrap();
        assert!(r < 1e-12, "{r}");
    }

    #[test]
    fn time_only_function() {
        let n = 1 << 14;
        let dt = 1.0 / n as f64;
        let w = brownian(9, n, dt);
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        let zeros = vec![0.0; n + 1];
        let ones = vec![-1.0; n + 1];
        let r = backward_ito_check(TestFunction::TimeSine { omega: 1.3 }, &times, &w, &zeros, &ones, &w).unwrap();
        assert!(r < 1e-8, "{r}");
    }

    #[test]
    fn deterministic_flow_residual() {
        let spec = BackwardDiffusionSpec { seeds: 1, coarse_log2: (8, 10), fine_log2: 11, ..Default::default() };
        let r = backward_diffusion_spde_check(ScalarSde::OrnsteinUhlenbeck { kappa: 1.0, sigma: 0.0 }, &spec);
        assert!(r.rows.last().unwrap().1 < 1e-6, "{:?}", r.rows);
    }

    #[test]
    fn additive_noise_is_exact() {
        let spec = BackwardDiffusionSpec { seeds: 3, ..Default::default() };
        let r = backward_diffusion_spde_check(ScalarSde::Constant { b: 0.0, sigma: 0.7 }, &spec);
        assert!(r.rows.iter().all(|row| row.1 < 1e-9), "{:?}", r.rows);
    }

    #[test]
    fn fitted_rate_of_power_law() {
        let rows: Vec<(f64, f64)> = (1..6).map(|k| (0.5f64.powi(k), 3.0 * 0.5f64.powi(k).powf(0.7))).collect();
        assert!((fit_rate(&rows) - 0.7).abs() < 1e-12);
    }
}
