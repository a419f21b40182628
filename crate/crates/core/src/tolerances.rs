//! Numerical thresholds shared across modules and the acceptance suite.

/// Covariance determinants below this are reported as singular.
pub const SINGULAR_DET: f64 = 1e-30;
/// Absolute tolerance of the adaptive Simpson covariance integral.
pub const COVARIANCE_ATOL: f64 = 1e-10;
/// Guard on |θ| before dividing.
pub const THETA_GUARD: f64 = 1e-12;
/// Guard on |∂_ν γ| before dividing.
pub const FLOW_DERIVATIVE_GUARD: f64 = 1e-12;
/// Masses at or below this cannot be normalized.
pub const MASS_FLOOR: f64 = 1e-30;
/// Residual target of flow inversion.
pub const INVERSION_TOL: f64 = 1e-10;
/// Parabolic stability cap for explicit lattice steps.
pub const DIFFUSION_CFL: f64 = 0.5;
/// Cap on |h̃|² dt for the explicit stochastic step.
pub const OBSERVATION_CAP: f64 = 0.1;
/// Allowed clipped mass as a fraction of the total per run.
pub const CLIP_BUDGET: f64 = 1e-4;
/// Largest admissible sandwich constant.
pub const LAMBDA_MAX: f64 = 1e3;
/// Multiplicative resolution of the sandwich bisection.
pub const LAMBDA_RESOLUTION: f64 = 1.01;
/// Effective sample sizes below this attach a degeneracy warning.
pub const ESS_WARNING: f64 = 10.0;

/// Acceptance thresholds, one group per criterion.
pub mod acceptance {
    /// L¹ distance between lattice density and exact kinetic kernel.
    pub const PROTOTYPE_L1: f64 = 1e-3;
    pub const PROTOTYPE_HORIZON: f64 = 0.5;
    pub const PROTOTYPE_LATTICE: usize = 129;
    pub const PROTOTYPE_SECONDS: f64 = 60.0;

    /// sup |H| for frozen-exact coefficients.
    pub const DEGENERATE_H: f64 = 1e-10;
    pub const DEGENERATE_SECONDS: f64 = 30.0;

    pub const SANDWICH_LAGS: [f64; 3] = [0.1, 0.25, 0.5];
    pub const SANDWICH_SECONDS: f64 = 600.0;

    /// Agreement band in combined standard errors.
    pub const CONSISTENCY_SIGMAS: f64 = 3.0;
    pub const CONSISTENCY_PARTICLES: usize = 100_000;
    pub const CONSISTENCY_SECONDS: f64 = 600.0;

    pub const NORMALIZATION: f64 = 1e-12;
    pub const SCALE_FACTOR: f64 = 1e3;
    pub const SCALE_INVARIANCE: f64 = 1e-10;

    pub const FLOW_SEEDS: u64 = 100;
    pub const FLOW_SHORT_LAG: f64 = 1e-3;
    pub const FLOW_SHORT_DEVIATION: f64 = 0.05;
    pub const FLOW_SECONDS: f64 = 300.0;

    pub const BACKWARD_ITO_SEEDS: u64 = 1000;
    pub const MIN_RATE: f64 = 0.4;
    pub const BACKWARD_ITO_SECONDS: f64 = 300.0;

    pub const CAUCHY_GAUSSIAN: f64 = 1e-4;
    pub const CAUCHY_EXPONENT_BAND: f64 = 0.15;
    pub const CAUCHY_SECONDS: f64 = 120.0;
}
