//! Closed-form Gaussian kernels of degenerate kinetic operators.
//!
//! Conventions: a phase point is `[ξ, ν]` (position, velocity). All densities are
//! evaluated in log-space and exponentiated at the end.

use crate::error::{domain, Error, Result};
use crate::quadrature::adaptive_simpson;
use crate::tolerances::{COVARIANCE_ATOL, SINGULAR_DET};

pub type Point = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

/// Time lag and phase-space offset fed to the bounding kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisotropicPoint {
    pub dt: f64,
    pub dx: f64,
    pub dv: f64,
}

impl AnisotropicPoint {
    pub fn new(dt: f64, dx: f64, dv: f64) -> Self {
        Self { dt, dx, dv }
    }
}

/// `ln Γ_λ(dt, dx, dv)` of the anisotropic bounding kernel.
pub fn log_gaussian_bound_kernel(lambda: f64, p: AnisotropicPoint) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(domain(format!("lambda must be positive, got {lambda}")));
    }
    if !(p.dt > 0.0) {
        return Err(domain(format!("time lag must be positive, got {}", p.dt)));
    }
    let q = p.dx * p.dx / (p.dt * p.dt * p.dt) + p.dv * p.dv / p.dt;
    Ok(lambda.ln() - 2.0 * p.dt.ln() - q / (2.0 * lambda))
}

/// Bounding kernel `Γ_λ = λ dt⁻² exp(-(dx²/dt³ + dv²/dt)/(2λ))`.
pub fn gaussian_bound_kernel(lambda: f64, p: AnisotropicPoint) -> Result<f64> {
    log_gaussian_bound_kernel(lambda, p).map(f64::exp)
}

/// Free transport along `ν ∂_ξ`.
pub fn characteristic_shift(dt: f64, z: Point) -> Point {
    [z[0] + dt * z[1], z[1]]
}

/// Bivariate Gaussian density with cached precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2 {
    pub mean: Point,
    pub cov: Mat2,
    pub precision: Mat2,
    pub det: f64,
    pub log_norm: f64,
}

impl Gaussian2 {
    pub fn new(mean: Point, cov: Mat2) -> Result<Self> {
        let c12 = 0.5 * (cov[0][1] + cov[1][0]);
        let det = cov[0][0] * cov[1][1] - c12 * c12;
        if !(det > SINGULAR_DET) || !(cov[0][0] > 0.0) || !det.is_finite() {
            return Err(Error::SingularKernel { det });
        }
        let precision = [[cov[1][1] / det, -c12 / det], [-c12 / det, cov[0][0] / det]];
        Ok(Self {
            mean,
            cov: [[cov[0][0], c12], [c12, cov[1][1]]],
            precision,
            det,
            log_norm: -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln(),
        })
    }

    #[inline]
    fn offset(&self, z: Point) -> Point {
        [z[0] - self.mean[0], z[1] - self.mean[1]]
    }

    #[inline]
    pub fn precision_times(&self, d: Point) -> Point {
        let p = &self.precision;
        [p[0][0] * d[0] + p[0][1] * d[1], p[1][0] * d[0] + p[1][1] * d[1]]
    }

    /// Squared Mahalanobis distance from the mean.
    #[inline]
    pub fn quadratic(&self, z: Point) -> f64 {
        let d = self.offset(z);
        let pd = self.precision_times(d);
        d[0] * pd[0] + d[1] * pd[1]
    }

    #[inline]
    pub fn log_density(&self, z: Point) -> f64 {
        self.log_norm - 0.5 * self.quadratic(z)
    }

    #[inline]
    pub fn density(&self, z: Point) -> f64 {
        self.log_density(z).exp()
    }

    /// Density together with its gradient and Hessian in the evaluation point.
    #[inline]
    pub fn jet(&self, z: Point) -> (f64, Point, Mat2) {
        let d = self.offset(z);
        let pd = self.precision_times(d);
        let q = d[0] * pd[0] + d[1] * pd[1];
        let f = (self.log_norm - 0.5 * q).exp();
        let g = [-pd[0] * f, -pd[1] * f];
        let p = &self.precision;
        let h = [
            [(pd[0] * pd[0] - p[0][0]) * f, (pd[0] * pd[1] - p[0][1]) * f],
            [(pd[1] * pd[0] - p[1][0]) * f, (pd[1] * pd[1] - p[1][1]) * f],
        ];
        (f, g, h)
    }

    /// Lower-triangular square root of the covariance, ν-first ordering:
    /// returns `L` with `cov = L Lᵀ` where the first column loads the ν coordinate.
    pub fn sqrt_nu_first(&self) -> Mat2 {
        let c = &self.cov;
        let s_nu = c[1][1].sqrt();
        let k = c[0][1] / s_nu;
        let r = (c[0][0] - k * k).max(0.0).sqrt();
        // ξ = m_ξ + k u + r w, ν = m_ν + s_nu u
        [[k, r], [s_nu, 0.0]]
    }

    /// Standard deviations of the two marginals.
    pub fn std(&self) -> Point {
        [self.cov[0][0].sqrt(), self.cov[1][1].sqrt()]
    }
}

/// Covariance of the kinetic prototype `dX = V dt, dV = σ dW` after lag `dt`.
pub fn langevin_covariance(sigma: f64, dt: f64) -> Mat2 {
    let s2 = sigma * sigma;
    [
        [s2 * dt * dt * dt / 3.0, s2 * dt * dt / 2.0],
        [s2 * dt * dt / 2.0, s2 * dt],
    ]
}

/// Transition law of the kinetic prototype started at `z`.
pub fn langevin_gaussian(sigma: f64, dt: f64, z: Point) -> Result<Gaussian2> {
    if !(sigma > 0.0) {
        return Err(domain(format!("sigma must be positive, got {sigma}")));
    }
    if !(dt > 0.0) {
        return Err(domain(format!("time lag must be positive, got {dt}")));
    }
    Gaussian2::new(characteristic_shift(dt, z), langevin_covariance(sigma, dt))
}

/// Exact transition density of `dX = V dt, dV = σ dW` from `z` to `zeta` over `dt`.
pub fn exact_langevin_kernel(sigma: f64, dt: f64, z: Point, zeta: Point) -> Result<f64> {
    Ok(langevin_gaussian(sigma, dt, z)?.density(zeta))
}

type ScalarPath = Box<dyn Fn(f64) -> f64 + Send + Sync>;
type MatrixPath = Box<dyn Fn(f64) -> Mat2 + Send + Sync>;
type PointPath = Box<dyn Fn(f64) -> Point + Send + Sync>;

/// Frozen data of a linearized kinetic operator `a_s ∂_νν + (Y(γ_s) + DY_s (ζ-γ_s))·∇`.
pub struct LinearizedKernelSpec {
    pub freeze_time: f64,
    pub freeze_point: Point,
    /// `s ↦ a_s(γ_s)`, the coefficient of `∂_νν`.
    pub frozen_diffusion: ScalarPath,
    /// `s ↦ DY_s`; only the `(ξ, ν)` entry may be nonzero.
    pub drift_matrix_path: MatrixPath,
    /// `s ↦ γ_s`.
    pub frozen_trajectory: PointPath,
}

impl LinearizedKernelSpec {
    /// Kinetic prototype: `a ≡ σ²/2`, `DY = [[0,1],[0,0]]`, free-transport trajectory.
    pub fn prototype(sigma: f64, t0: f64, z0: Point) -> Self {
        Self {
            freeze_time: t0,
            freeze_point: z0,
            frozen_diffusion: Box::new(move |_| 0.5 * sigma * sigma),
            drift_matrix_path: Box::new(|_| [[0.0, 1.0], [0.0, 0.0]]),
            frozen_trajectory: Box::new(move |s| characteristic_shift(s - t0, z0)),
        }
    }

    fn coupling(&self, s: f64) -> Result<f64> {
        let m = (self.drift_matrix_path)(s);
        let scale = 1.0 + m[0][1].abs();
        if m[0][0].abs() > 1e-14 * scale || m[1][0].abs() > 1e-14 * scale || m[1][1].abs() > 1e-14 * scale {
            return Err(domain("drift matrix must have the reduced shape [[0, β], [0, 0]]"));
        }
        Ok(m[0][1])
    }

    /// `∫_τ^s β`.
    fn accumulated_coupling(&self, tau: f64, s: f64) -> f64 {
        adaptive_simpson(|r| (self.drift_matrix_path)(r)[0][1], tau, s, COVARIANCE_ATOL)
    }
}

/// Law of the linearized kernel: mean and covariance at time `s` from `(t, z)`.
///
/// The reduced drift matrix is nilpotent, so the resolvent is
/// `E(s,τ) = I + (∫_τ^s β) N` with `N = [[0,1],[0,0]]`.
pub fn linearized_gaussian(spec: &LinearizedKernelSpec, t: f64, z: Point, s: f64) -> Result<Gaussian2> {
    if !(s > t) {
        return Err(domain(format!("need t < s, got t = {t}, s = {s}")));
    }
    for r in [t, 0.5 * (t + s), s] {
        spec.coupling(r)?;
    }
    let gt = (spec.frozen_trajectory)(t);
    let gs = (spec.frozen_trajectory)(s);
    let p_t = spec.accumulated_coupling(t, s);
    let d = [z[0] - gt[0], z[1] - gt[1]];
    let mean = [gs[0] + d[0] + p_t * d[1], gs[1] + d[1]];
    let two_a = |tau: f64| 2.0 * (spec.frozen_diffusion)(tau);
    let c11 = adaptive_simpson(
        |tau| {
            let p = spec.accumulated_coupling(tau, s);
            two_a(tau) * p * p
        },
        t,
        s,
        COVARIANCE_ATOL,
    );
    let c12 = adaptive_simpson(|tau| two_a(tau) * spec.accumulated_coupling(tau, s), t, s, COVARIANCE_ATOL);
    let c22 = adaptive_simpson(two_a, t, s, COVARIANCE_ATOL);
    Gaussian2::new(mean, [[c11, c12], [c12, c22]])
}

/// Density of the linearized kernel at `zeta`.
pub fn linearized_kernel(spec: &LinearizedKernelSpec, t: f64, z: Point, s: f64, zeta: Point) -> Result<f64> {
    Ok(linearized_gaussian(spec, t, z, s)?.density(zeta))
}
