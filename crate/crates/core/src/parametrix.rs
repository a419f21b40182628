//! Gaussian parametrix for the transformed kinetic equation
//! `∂_s v = a* ∂_νν v + b* ∂_ν v + c* v - Y·∇v`.
//!
//! The frozen kernel `Z(t,z;s,·)` is the law of the linear SDE obtained by
//! linearizing `Y` along the characteristic from `(t,z)` with the reduced
//! Jacobian. The series `Z + H⊗Z + H⊗H⊗Z` is assembled by nested quadrature.

use crate::error::{domain, Error, Result};
use crate::itow::{FlowSolution, SpdeCoefficients, TransformedCoefficients, TransformedPoint};
use crate::kernels::{log_gaussian_bound_kernel, AnisotropicPoint, Gaussian2, Mat2, Point};
use crate::lattice::lagrange4;
use crate::model::{CoefficientSet, ObservableFn};
use crate::quadrature::{endpoint_clustered, gauss_hermite, legendre_on, Rule};
use crate::tolerances::{LAMBDA_MAX, LAMBDA_RESOLUTION};
use rayon::prelude::*;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Coefficients of a transformed equation, evaluated pointwise.
pub trait Field: Sync {
    fn eval(&self, s: f64, z: Point) -> Result<TransformedPoint>;
    /// Largest step of the characteristic integrator.
    fn max_step(&self) -> f64;
}

/// Lattice-backed coefficients: linear in time between saved slices,
/// cubic in ν and linear in ξ.
pub struct LatticeField {
    pub coeffs: TransformedCoefficients,
    pub max_step: f64,
}

impl LatticeField {
    pub fn new(coeffs: TransformedCoefficients, max_step: f64) -> Result<Self> {
        if coeffs.times.is_empty() {
            return Err(Error::EmptyLattice);
        }
        if !(max_step > 0.0) {
            return Err(domain("characteristic step must be positive"));
        }
        Ok(Self { coeffs, max_step })
    }
}

impl Field for LatticeField {
    fn eval(&self, s: f64, z: Point) -> Result<TransformedPoint> {
        let tc = &self.coeffs;
        let times = &tc.times;
        let n = times.len();
        let tol = 1e-12 * (1.0 + s.abs());
        if s < times[0] - tol || s > times[n - 1] + tol {
            return Err(Error::Extrapolation(format!("time {s} outside [{}, {}]", times[0], times[n - 1])));
        }
        let (k0, k1, w) = if n == 1 {
            (0, 0, 0.0)
        } else {
            let k1 = times.partition_point(|&x| x <= s).clamp(1, n - 1);
            let k0 = k1 - 1;
            (k0, k1, ((s - times[k0]) / (times[k1] - times[k0])).clamp(0.0, 1.0))
        };
        let st = tc.lattice.stencil(z[0], z[1])?;
        let g = |f: &[Vec<f64>]| {
            let lo = st.apply(&f[k0]);
            if w == 0.0 {
                lo
            } else {
                (1.0 - w) * lo + w * st.apply(&f[k1])
            }
        };
        Ok(TransformedPoint {
            a: g(&tc.a_star),
            b: g(&tc.b_star),
            c: g(&tc.c_star),
            y1: g(&tc.y1),
            y2: g(&tc.y2),
            beta: g(&tc.beta),
        })
    }

    fn max_step(&self) -> f64 {
        self.max_step
    }
}

/// Identity-flow coefficients: `a* = a/2`, `b* = b`, `c* = c`, `Y = (ν, 0)`.
pub struct DeterministicField<C> {
    pub coeffs: C,
    pub max_step: f64,
}

impl<C: SpdeCoefficients> DeterministicField<C> {
    pub fn new(coeffs: C) -> Self {
        Self { coeffs, max_step: 1e-2 }
    }
}

impl<C: SpdeCoefficients> Field for DeterministicField<C> {
    fn eval(&self, s: f64, z: Point) -> Result<TransformedPoint> {
        let c = &self.coeffs;
        Ok(TransformedPoint {
            a: 0.5 * c.a(s, z[0], z[1]),
            b: c.b(s, z[0], z[1]),
            c: c.c(s, z[0], z[1]),
            y1: z[1],
            y2: 0.0,
            beta: 1.0,
        })
    }

    fn max_step(&self) -> f64 {
        self.max_step
    }
}

/// Frozen kernel from a pole to a later time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenKernel {
    /// Law in the forward variable.
    pub gauss: Gaussian2,
    /// Field values at the end of the frozen characteristic.
    pub endpoint: TransformedPoint,
    /// `∫ ∂_νY₁` along the characteristic.
    pub coupling: f64,
}

/// Frozen kernel `Z(t, z; s, ·)`: RK4 along the characteristic of `Y`.
pub fn frozen_kernel<F: Field + ?Sized>(f: &F, t: f64, z: Point, s: f64) -> Result<FrozenKernel> {
    if !(s > t) {
        return Err(domain(format!("need t < s, got t = {t}, s = {s}")));
    }
    let n = (((s - t) / f.max_step()).ceil() as usize).max(2);
    let h = (s - t) / n as f64;
    let deriv = |tau: f64, x: &[f64; 6]| -> Result<[f64; 6]> {
        let p = f.eval(tau, [x[0], x[1]])?;
        let two_a = 2.0 * p.a;
        Ok([p.y1, p.y2, p.beta, two_a, two_a * x[2], two_a * x[2] * x[2]])
    };
    let mut x = [z[0], z[1], 0.0, 0.0, 0.0, 0.0];
    let add = |x: &[f64; 6], k: &[f64; 6], c: f64| -> [f64; 6] { std::array::from_fn(|i| x[i] + c * k[i]) };
    for i in 0..n {
        let tau = t + i as f64 * h;
        let k1 = deriv(tau, &x)?;
        let k2 = deriv(tau + 0.5 * h, &add(&x, &k1, 0.5 * h))?;
        let k3 = deriv(tau + 0.5 * h, &add(&x, &k2, 0.5 * h))?;
        let k4 = deriv(tau + h, &add(&x, &k3, h))?;
        for j in 0..6 {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    let p = x[2];
    let c22 = x[3];
    let c12 = p * x[3] - x[4];
    let c11 = p * p * x[3] - 2.0 * p * x[4] + x[5];
    let mean = [x[0], x[1]];
    Ok(FrozenKernel {
        gauss: Gaussian2::new(mean, [[c11, c12], [c12, c22]])?,
        endpoint: f.eval(s, mean)?,
        coupling: p,
    })
}

/// Forward parametrix `Z(t,z;s,ζ)`.
pub fn parametrix_z<F: Field + ?Sized>(f: &F, t: f64, z: Point, s: f64, zeta: Point) -> Result<f64> {
    Ok(frozen_kernel(f, t, z, s)?.gauss.density(zeta))
}

#[inline]
fn h_from(fk: &FrozenKernel, p: &TransformedPoint, w: Point) -> f64 {
    let (zv, g, hs) = fk.gauss.jet(w);
    if zv == 0.0 {
        return 0.0;
    }
    let m = fk.gauss.mean;
    let e = &fk.endpoint;
    let dy1 = p.y1 - e.y1 - e.beta * (w[1] - m[1]);
    let dy2 = p.y2 - e.y2;
    (p.a - e.a) * hs[1][1] - dy1 * g[0] - dy2 * g[1] + p.b * g[1] + p.c * zv
}

/// Remainder kernel `H(t,z;s,ζ)`: the full operator minus the frozen one, applied to `Z`.
pub fn kernel_h<F: Field + ?Sized>(f: &F, t: f64, z: Point, s: f64, zeta: Point) -> Result<f64> {
    let fk = frozen_kernel(f, t, z, s)?;
    Ok(h_from(&fk, &f.eval(s, zeta)?, zeta))
}

/// Quadrature parameters of the Duhamel convolutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub time_per_half: usize,
    pub inner_time_per_half: usize,
    /// Gauss-Hermite nodes per axis.
    pub space_nodes: usize,
    pub inner_space_nodes: usize,
    /// Standard-deviation multiplier of the node cloud.
    pub inflation: f64,
    pub table_nodes: usize,
    /// Table extent in standard deviations.
    pub table_half_width: f64,
    /// Relative tensor weight below which nodes are dropped.
    pub prune: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            time_per_half: 6,
            inner_time_per_half: 4,
            space_nodes: 32,
            inner_space_nodes: 16,
            inflation: 1.25,
            table_nodes: 17,
            table_half_width: 6.5,
            prune: 1e-16,
        }
    }
}

impl QuadratureSpec {
    pub fn refined(&self) -> Self {
        Self {
            time_per_half: self.time_per_half + 2,
            inner_time_per_half: self.inner_time_per_half + 2,
            space_nodes: self.space_nodes + 8,
            inner_space_nodes: self.inner_space_nodes + 8,
            ..*self
        }
    }
}

struct Hermite {
    x: Vec<f64>,
    w: Vec<f64>,
    /// `ω e^{x²}`
    w_scaled: Vec<f64>,
}

impl Hermite {
    fn new(n: usize) -> Self {
        let Rule { nodes, weights } = gauss_hermite(n);
        let w_scaled = nodes.iter().zip(&weights).map(|(x, w)| w * (x * x).exp()).collect();
        Self { x: nodes, w: weights, w_scaled }
    }
}

fn chol(c: &Mat2) -> Result<Mat2> {
    let l11 = c[0][0].sqrt();
    let l21 = c[0][1] / l11;
    let r = c[1][1] - l21 * l21;
    if !(c[0][0] > 0.0) || !(r > 0.0) {
        return Err(Error::SingularKernel { det: c[0][0] * c[1][1] - c[0][1] * c[0][1] });
    }
    Ok([[l11, 0.0], [l21, r.sqrt()]])
}

fn inv2(m: &Mat2) -> Result<Mat2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !(det.abs() > 0.0) || !det.is_finite() {
        return Err(Error::SingularKernel { det });
    }
    Ok([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

fn mat_vec(m: &Mat2, v: Point) -> Point {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Tensor Gauss-Hermite nodes for `∫ g(w) dw` aligned with `N(center, cov)`.
fn aligned_nodes(center: Point, cov: &Mat2, gh: &Hermite, prune: f64, out: &mut Vec<(Point, f64)>) -> Result<()> {
    out.clear();
    let l = chol(cov)?;
    let jac = 2.0 * l[0][0] * l[1][1];
    let wmax = gh.w.iter().cloned().fold(0.0, f64::max);
    let sq2 = std::f64::consts::SQRT_2;
    for a in 0..gh.x.len() {
        for b in 0..gh.x.len() {
            if gh.w[a] * gh.w[b] < prune * wmax * wmax {
                continue;
            }
            let u = [sq2 * gh.x[a], sq2 * gh.x[b]];
            let w = [center[0] + l[0][0] * u[0], center[1] + l[1][0] * u[0] + l[1][1] * u[1]];
            out.push((w, gh.w_scaled[a] * gh.w_scaled[b] * jac));
        }
    }
    Ok(())
}

/// Product of `N(m₁, C₁)` with a Gaussian of precision `p2` centered at `w2`, inflated.
fn product_cloud(g1: &Gaussian2, w2: Point, p2: &Mat2, inflation: f64) -> Result<(Point, Mat2)> {
    let p1 = &g1.precision;
    let p = [[p1[0][0] + p2[0][0], p1[0][1] + p2[0][1]], [p1[1][0] + p2[1][0], p1[1][1] + p2[1][1]]];
    let cov = inv2(&p)?;
    let a = mat_vec(p1, g1.mean);
    let b = mat_vec(p2, w2);
    let center = mat_vec(&cov, [a[0] + b[0], a[1] + b[1]]);
    let k = inflation * inflation;
    Ok((center, [[cov[0][0] * k, cov[0][1] * k], [cov[1][0] * k, cov[1][1] * k]]))
}

/// Pull-back of the target `ζ` through the frozen map started at `w0`:
/// returns the start point whose kernel is centered at `ζ` and the precision in the start variable.
fn pull(fk: &FrozenKernel, w0: Point, zeta: Point) -> (Point, Mat2) {
    let p = fk.coupling;
    let d = [zeta[0] - fk.gauss.mean[0], zeta[1] - fk.gauss.mean[1]];
    let w2 = [w0[0] + d[0] - p * d[1], w0[1] + d[1]];
    // Jᵀ Π J with J = [[1, p], [0, 1]]
    let q = &fk.gauss.precision;
    let m00 = q[0][0];
    let m01 = q[0][0] * p + q[0][1];
    let m11 = p * p * q[0][0] + 2.0 * p * q[0][1] + q[1][1];
    (w2, [[m00, m01], [m01, m11]])
}

/// Uniform grid in the whitened coordinates of a Gaussian.
#[derive(Debug, Clone, Copy)]
struct WhitenedGrid {
    origin: Point,
    l: Mat2,
    linv: Mat2,
    n: usize,
    half: f64,
}

impl WhitenedGrid {
    fn from_gaussian(g: &Gaussian2, n: usize, half: f64) -> Result<Self> {
        let l = chol(&g.cov)?;
        Ok(Self { origin: g.mean, l, linv: inv2(&l)?, n: n.max(4), half })
    }

    fn node(&self, a: usize, b: usize) -> Point {
        let step = 2.0 * self.half / (self.n - 1) as f64;
        let u = [-self.half + a as f64 * step, -self.half + b as f64 * step];
        let lu = mat_vec(&self.l, u);
        [self.origin[0] + lu[0], self.origin[1] + lu[1]]
    }

    fn nodes(&self) -> Vec<Point> {
        (0..self.n * self.n).map(|k| self.node(k / self.n, k % self.n)).collect()
    }

    /// Bicubic stencil: start indices and weights, `None` outside the grid.
    fn stencil(&self, w: Point) -> Option<(usize, [f64; 4], usize, [f64; 4])> {
        let u = mat_vec(&self.linv, [w[0] - self.origin[0], w[1] - self.origin[1]]);
        let scale = (self.n - 1) as f64 / (2.0 * self.half);
        let g = [(u[0] + self.half) * scale, (u[1] + self.half) * scale];
        let top = (self.n - 1) as f64;
        if !(g[0] >= 0.0 && g[0] <= top && g[1] >= 0.0 && g[1] <= top) {
            return None;
        }
        let start = |x: f64| ((x.floor() as isize - 1).max(0) as usize).min(self.n - 4);
        let (a, b) = (start(g[0]), start(g[1]));
        Some((a, lagrange4(g[0] - a as f64), b, lagrange4(g[1] - b as f64)))
    }

    fn interp_scalar(&self, vals: &[f64], w: Point) -> Option<f64> {
        let (a, wa, b, wb) = self.stencil(w)?;
        let mut acc = 0.0;
        for (i, ca) in wa.iter().enumerate() {
            let row = (a + i) * self.n + b;
            acc += ca * (wb[0] * vals[row] + wb[1] * vals[row + 1] + wb[2] * vals[row + 2] + wb[3] * vals[row + 3]);
        }
        Some(acc)
    }
}

const TABLE_WIDTH: usize = 9;

/// Frozen kernels `(τ₀, w) → τ₁` tabulated over a whitened grid in `w`.
struct TrajectoryTable {
    t0: f64,
    t1: f64,
    grid: WhitenedGrid,
    /// mean displacement (2), covariance (3), endpoint a, y1, y2, β, coupling
    vals: Vec<[f64; TABLE_WIDTH + 1]>,
}

impl TrajectoryTable {
    fn build<F: Field + ?Sized>(f: &F, t0: f64, t1: f64, grid: WhitenedGrid) -> Self {
        let vals = grid
            .nodes()
            .into_iter()
            .map(|w| match frozen_kernel(f, t0, w, t1) {
                Ok(fk) => {
                    let g = &fk.gauss;
                    let e = &fk.endpoint;
                    [
                        g.mean[0] - w[0],
                        g.mean[1] - w[1],
                        g.cov[0][0],
                        g.cov[0][1],
                        g.cov[1][1],
                        e.a,
                        e.y1,
                        e.y2,
                        e.beta,
                        fk.coupling,
                    ]
                }
                Err(_) => [f64::NAN; TABLE_WIDTH + 1],
            })
            .collect();
        Self { t0, t1, grid, vals }
    }

    fn interp(&self, w: Point) -> Option<[f64; TABLE_WIDTH + 1]> {
        let (a, wa, b, wb) = self.grid.stencil(w)?;
        let mut acc = [0.0; TABLE_WIDTH + 1];
        let n = self.grid.n;
        for (i, ca) in wa.iter().enumerate() {
            for (j, cb) in wb.iter().enumerate() {
                let v = &self.vals[(a + i) * n + b + j];
                let c = ca * cb;
                for k in 0..=TABLE_WIDTH {
                    acc[k] += c * v[k];
                }
            }
        }
        if acc.iter().any(|x| !x.is_finite()) {
            return None;
        }
        Some(acc)
    }

    fn lookup<F: Field + ?Sized>(&self, f: &F, w: Point) -> Result<FrozenKernel> {
        if let Some(v) = self.interp(w) {
            if let Ok(gauss) = Gaussian2::new([w[0] + v[0], w[1] + v[1]], [[v[2], v[3]], [v[3], v[4]]]) {
                return Ok(FrozenKernel {
                    gauss,
                    endpoint: TransformedPoint { a: v[5], b: 0.0, c: 0.0, y1: v[6], y2: v[7], beta: v[8] },
                    coupling: v[9],
                });
            }
        }
        frozen_kernel(f, self.t0, w, self.t1)
    }
}

/// Node cloud for `∫ K(…; τ, w) Z(τ, w; s, ζ) dw` given the pole kernel `g1` at `τ`.
fn convolution_nodes<F: Field + ?Sized>(
    f: &F,
    g1: &Gaussian2,
    to_target: &TrajectoryTable,
    zeta: Point,
    gh: &Hermite,
    spec: &QuadratureSpec,
    out: &mut Vec<(Point, f64)>,
) -> Result<()> {
    let mut w0 = g1.mean;
    let mut fk = to_target.lookup(f, w0)?;
    let (mut w2, mut p2) = pull(&fk, w0, zeta);
    if let Ok(next) = to_target.lookup(f, w2) {
        w0 = w2;
        fk = next;
        (w2, p2) = pull(&fk, w0, zeta);
    }
    let (center, cov) = product_cloud(g1, w2, &p2, spec.inflation)?;
    aligned_nodes(center, &cov, gh, spec.prune, out)
}

/// Result of a single Duhamel convolution with a refinement check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DuhamelResult {
    pub value: f64,
    pub refined: f64,
    pub discrepancy: f64,
}

/// `∫_t^s ∫ K₁(t,z;τ,w) K₂(τ,w;s,ζ) dw dτ`, with nodes placed by the frozen kernels of `f`.
pub fn duhamel_convolve<F, K1, K2>(
    f: &F,
    k1: &K1,
    k2: &K2,
    t: f64,
    z: Point,
    s: f64,
    zeta: Point,
    spec: &QuadratureSpec,
) -> Result<DuhamelResult>
where
    F: Field + ?Sized,
    K1: Fn(f64, Point, f64, Point) -> Result<f64> + Sync,
    K2: Fn(f64, Point, f64, Point) -> Result<f64> + Sync,
{
    let once = |sp: &QuadratureSpec| -> Result<f64> {
        let rule = endpoint_clustered(sp.time_per_half, t, s);
        let gh = Hermite::new(sp.space_nodes);
        let mut nodes = Vec::new();
        let mut acc = 0.0;
        for (&tau, &wt) in rule.nodes.iter().zip(&rule.weights) {
            let g1 = frozen_kernel(f, t, z, tau)?;
            let fk0 = frozen_kernel(f, tau, g1.gauss.mean, s)?;
            let (w2, p2) = pull(&fk0, g1.gauss.mean, zeta);
            let (center, cov) = product_cloud(&g1.gauss, w2, &p2, sp.inflation)?;
            aligned_nodes(center, &cov, &gh, sp.prune, &mut nodes)?;
            let mut inner = 0.0;
            for &(w, om) in &nodes {
                let a = k1(t, z, tau, w)?;
                if a == 0.0 {
                    continue;
                }
                inner += om * a * k2(tau, w, s, zeta)?;
            }
            acc += wt * inner;
        }
        Ok(acc)
    };
    if !(s > t) {
        return Err(domain(format!("need t < s, got t = {t}, s = {s}")));
    }
    let value = once(spec)?;
    let refined = once(&spec.refined())?;
    Ok(DuhamelResult { value, refined, discrepancy: (refined - value).abs() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesDirection {
    Forward,
    Backward,
}

/// Truncated parametrix series evaluated on a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametrixSeries {
    pub order: usize,
    pub direction: SeriesDirection,
    pub t: f64,
    pub z: Point,
    pub s: f64,
    pub points: Vec<Point>,
    /// `terms[k][i] = (value, ∂_ν, ∂_νν)` of the `k`-th term at `points[i]`.
    pub terms: Vec<Vec<[f64; 3]>>,
    /// Mean of the frozen kernel `Z(t,z;s,·)`.
    pub frozen_mean: Point,
    pub sup: Vec<f64>,
    /// `sup|term_{k+1}| / sup|term_k|`.
    pub decay: Vec<f64>,
    /// Quadrature nodes dropped because they left the coefficient lattice.
    pub skipped: usize,
    pub quadrature: QuadratureSpec,
    pub warning: Option<String>,
}

impl ParametrixSeries {
    fn component(&self, i: usize, c: usize) -> f64 {
        self.terms.iter().map(|t| t[i][c]).sum()
    }

    pub fn value(&self, i: usize) -> f64 {
        self.component(i, 0)
    }

    pub fn d_nu(&self, i: usize) -> f64 {
        self.component(i, 1)
    }

    pub fn d_nunu(&self, i: usize) -> f64 {
        self.component(i, 2)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.points.len()).map(|i| self.value(i)).collect()
    }
}

struct OuterNode {
    tau: f64,
    weight: f64,
    g1: FrozenKernel,
    to_s: TrajectoryTable,
    phi2: Option<Vec<f64>>,
}

/// `(H⊗H)(t,z;τ,w)` on the whitened grid of `Z(t,z;τ,·)`.
fn tabulate_second_iterate<F: Field + ?Sized>(
    f: &F,
    t: f64,
    z: Point,
    tau: f64,
    grid: &WhitenedGrid,
    spec: &QuadratureSpec,
    skipped: &AtomicUsize,
) -> Result<Vec<f64>> {
    let rule = endpoint_clustered(spec.inner_time_per_half, t, tau);
    let gh = Hermite::new(spec.inner_space_nodes);
    let mut inner = Vec::with_capacity(rule.nodes.len());
    for (&r, &wt) in rule.nodes.iter().zip(&rule.weights) {
        let g1r = frozen_kernel(f, t, z, r)?;
        let gr = WhitenedGrid::from_gaussian(&g1r.gauss, spec.table_nodes, spec.table_half_width)?;
        let table = TrajectoryTable::build(f, r, tau, gr);
        inner.push((r, wt, g1r, table));
    }
    let targets = grid.nodes();
    let vals = targets
        .par_iter()
        .map(|&w| {
            let pw = match f.eval(tau, w) {
                Ok(p) => p,
                Err(_) => {
                    skipped.fetch_add(1, Ordering::Relaxed);
                    return 0.0;
                }
            };
            let mut nodes = Vec::new();
            let mut acc = 0.0;
            for (r, wt, g1r, table) in &inner {
                if convolution_nodes(f, &g1r.gauss, table, w, &gh, spec, &mut nodes).is_err() {
                    skipped.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                let mut part = 0.0;
                for &(y, om) in &nodes {
                    let py = match f.eval(*r, y) {
                        Ok(p) => p,
                        Err(_) => {
                            skipped.fetch_add(1, Ordering::Relaxed);
                            continue;
                        }
                    };
                    let h1 = h_from(g1r, &py, y);
                    if h1 == 0.0 {
                        continue;
                    }
                    match table.lookup(f, y) {
                        Ok(fk) => part += om * h1 * h_from(&fk, &pw, w),
                        Err(_) => {
                            skipped.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
                acc += wt * part;
            }
            acc
        })
        .collect();
    Ok(vals)
}

/// Series `Σ_{k<N} H^{⊗k}⊗Z` at `points`, with ν-derivatives; orders 1 to 3.
pub fn parametrix_series<F: Field + ?Sized>(
    f: &F,
    order: usize,
    t: f64,
    z: Point,
    s: f64,
    points: &[Point],
    spec: &QuadratureSpec,
) -> Result<ParametrixSeries> {
    if order == 0 {
        return Err(domain("truncation order must be at least 1"));
    }
    if order > 3 {
        return Err(domain(format!("truncation order {order} above 3 is not implemented")));
    }
    let main = frozen_kernel(f, t, z, s)?;
    let skipped = AtomicUsize::new(0);
    let outer: Vec<OuterNode> = if order >= 2 {
        let rule = endpoint_clustered(spec.time_per_half, t, s);
        rule.nodes
            .par_iter()
            .zip(rule.weights.par_iter())
            .map(|(&tau, &weight)| -> Result<OuterNode> {
                let g1 = frozen_kernel(f, t, z, tau)?;
                let grid = WhitenedGrid::from_gaussian(&g1.gauss, spec.table_nodes, spec.table_half_width)?;
                let to_s = TrajectoryTable::build(f, tau, s, grid);
                let phi2 = if order >= 3 {
                    Some(tabulate_second_iterate(f, t, z, tau, &grid, spec, &skipped)?)
                } else {
                    None
                };
                Ok(OuterNode { tau, weight, g1, to_s, phi2 })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let gh = Hermite::new(spec.space_nodes);
    let terms_per_point: Vec<Vec<[f64; 3]>> = points
        .par_iter()
        .map(|&zeta| {
            let mut out = vec![[0.0; 3]; order];
            let (v, g, h) = main.gauss.jet(zeta);
            out[0] = [v, g[1], h[1][1]];
            let mut nodes = Vec::new();
            for node in &outer {
                if convolution_nodes(f, &node.g1.gauss, &node.to_s, zeta, &gh, spec, &mut nodes).is_err() {
                    skipped.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                let mut acc = [[0.0; 3]; 2];
                for &(w, om) in &nodes {
                    let fk = match node.to_s.lookup(f, w) {
                        Ok(fk) => fk,
                        Err(_) => {
                            skipped.fetch_add(1, Ordering::Relaxed);
                            continue;
                        }
                    };
                    let (zv, zg, zh) = fk.gauss.jet(zeta);
                    if zv == 0.0 {
                        continue;
                    }
                    let jet = [zv, zg[1], zh[1][1]];
                    let phi1 = match f.eval(node.tau, w) {
                        Ok(p) => h_from(&node.g1, &p, w),
                        Err(_) => {
                            skipped.fetch_add(1, Ordering::Relaxed);
                            continue;
                        }
                    };
                    let phi2 = node.phi2.as_ref().and_then(|tab| node.to_s.grid.interp_scalar(tab, w)).unwrap_or(0.0);
                    for c in 0..3 {
                        acc[0][c] += om * phi1 * jet[c];
                        acc[1][c] += om * phi2 * jet[c];
                    }
                }
                for c in 0..3 {
                    out[1][c] += node.weight * acc[0][c];
                    if order >= 3 {
                        out[2][c] += node.weight * acc[1][c];
                    }
                }
            }
            out
        })
        .collect();
    let terms: Vec<Vec<[f64; 3]>> = (0..order).map(|k| terms_per_point.iter().map(|p| p[k]).collect()).collect();
    let sup: Vec<f64> = terms.iter().map(|t| t.iter().map(|x| x[0].abs()).fold(0.0, f64::max)).collect();
    let decay: Vec<f64> = sup.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
    let warning = decay.iter().position(|&r| r >= 1.0).map(|k| {
        let msg = format!("series terms {k} -> {} do not decay (ratio {:.3})", k + 1, decay[k]);
        log::warn!("{msg}");
        msg
    });
    Ok(ParametrixSeries {
        order,
        direction: SeriesDirection::Forward,
        t,
        z,
        s,
        points: points.to_vec(),
        terms,
        frozen_mean: main.gauss.mean,
        sup,
        decay,
        skipped: skipped.into_inner(),
        quadrature: *spec,
        warning,
    })
}

/// Gauss-Hermite point set aligned with `Z(t,z;s,·)` and its weights, for mass checks.
pub fn mass_nodes<F: Field + ?Sized>(f: &F, t: f64, z: Point, s: f64, n: usize, inflation: f64) -> Result<Vec<(Point, f64)>> {
    let g = frozen_kernel(f, t, z, s)?.gauss;
    let k = inflation * inflation;
    let cov = [[g.cov[0][0] * k, g.cov[0][1] * k], [g.cov[1][0] * k, g.cov[1][1] * k]];
    let mut out = Vec::new();
    aligned_nodes(g.mean, &cov, &Hermite::new(n), 1e-16, &mut out)?;
    Ok(out)
}

/// Grid of `n × n` points spanning `±half` standard deviations of a Gaussian.
pub fn whitened_box(g: &Gaussian2, n: usize, half: f64) -> Result<Vec<Point>> {
    let grid = WhitenedGrid::from_gaussian(g, n.max(4), half)?;
    Ok(grid.nodes())
}

/// Maps original-coordinate points to the transformed chart: `(ξ, ν) ↦ (ξ, γ⁻¹(ξ, ν))`.
pub fn pullback_points(flow: &FlowSolution, slot: usize, points: &[Point]) -> Result<Vec<Point>> {
    points.iter().map(|p| Ok([p[0], flow.invert(slot, p[0], p[1])?])).collect()
}

/// Maps transformed-chart points to original coordinates: `(ξ, ν) ↦ (ξ, γ(ξ, ν))`.
pub fn pushforward_point(flow: &FlowSolution, slot: usize, p: Point) -> Result<Point> {
    let sl = flow.slices.get(slot).ok_or_else(|| Error::OutOfRange(format!("slot {slot}")))?;
    Ok([p[0], flow.lattice.interp_cubic_linear(&sl.gamma, p[0], p[1])?])
}

/// One evaluation of a kernel against the bound kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichPoint {
    pub lag: f64,
    /// Chart point minus the frozen mean.
    pub offset: Point,
    pub value: f64,
    pub d_nu: Option<f64>,
    pub d_nunu: Option<f64>,
}

/// Smallest certified `λ` for each inequality; `None` when no `λ ≤ 10³` works.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichReport {
    pub lambda_value: Option<f64>,
    pub lambda_d_nu: Option<f64>,
    pub lambda_d_nunu: Option<f64>,
    pub points: usize,
    pub min_value: f64,
    pub failure: Option<String>,
}

impl SandwichReport {
    pub fn lambda(&self) -> Option<f64> {
        let mut l = self.lambda_value?;
        for d in [self.lambda_d_nu, self.lambda_d_nunu].into_iter().flatten() {
            l = l.max(d);
        }
        Some(l)
    }

    pub fn pass(&self) -> bool {
        self.failure.is_none() && self.lambda().is_some()
    }
}

/// Smallest `λ ∈ [1, λ_max]` with `ok(λ)`, assuming `ok` is monotone.
fn bisect_lambda(ok: impl Fn(f64) -> bool) -> Option<f64> {
    if !ok(LAMBDA_MAX) {
        return None;
    }
    if ok(1.0) {
        return Some(1.0);
    }
    let (mut lo, mut hi) = (1.0f64, LAMBDA_MAX);
    while hi / lo > LAMBDA_RESOLUTION {
        let mid = (lo * hi).sqrt();
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Two-sided bound `Γ_{1/λ} ≤ K ≤ Γ_λ`, plus `|∂_νK|√lag ≤ Γ_λ` and `|∂_ννK| lag ≤ Γ_λ` when present.
pub fn certify_sandwich(points: &[SandwichPoint]) -> SandwichReport {
    let min_value = points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
    let mut rep = SandwichReport {
        lambda_value: None,
        lambda_d_nu: None,
        lambda_d_nunu: None,
        points: points.len(),
        min_value,
        failure: None,
    };
    if points.is_empty() {
        rep.failure = Some("empty evaluation grid".into());
        return rep;
    }
    if !(min_value > 0.0) {
        rep.failure = Some(format!("kernel not positive on grid (min {min_value:e})"));
        return rep;
    }
    let bound = |lambda: f64, p: &SandwichPoint| {
        log_gaussian_bound_kernel(lambda, AnisotropicPoint::new(p.lag, p.offset[0], p.offset[1])).unwrap_or(f64::NAN)
    };
    rep.lambda_value = bisect_lambda(|l| {
        points.iter().all(|p| {
            let lv = p.value.ln();
            lv >= bound(1.0 / l, p) && lv <= bound(l, p)
        })
    });
    if points.iter().all(|p| p.d_nu.is_some()) {
        rep.lambda_d_nu = bisect_lambda(|l| points.iter().all(|p| (p.d_nu.unwrap().abs() * p.lag.sqrt()).ln() <= bound(l, p)));
        if rep.lambda_d_nu.is_none() {
            rep.failure = Some("first ν-derivative exceeds every envelope".into());
        }
    }
    if points.iter().all(|p| p.d_nunu.is_some()) {
        rep.lambda_d_nunu = bisect_lambda(|l| points.iter().all(|p| (p.d_nunu.unwrap().abs() * p.lag).ln() <= bound(l, p)));
        if rep.lambda_d_nunu.is_none() {
            rep.failure = Some("second ν-derivative exceeds every envelope".into());
        }
    }
    if rep.lambda_value.is_none() && rep.failure.is_none() {
        rep.failure = Some("no λ in range bounds the kernel".into());
    }
    rep
}

/// Sandwich points of a series, with or without derivative checks.
pub fn series_sandwich_points(series: &ParametrixSeries, derivatives: bool) -> Vec<SandwichPoint> {
    let lag = series.s - series.t;
    (0..series.points.len())
        .map(|i| {
            let p = series.points[i];
            SandwichPoint {
                lag,
                offset: [p[0] - series.frozen_mean[0], p[1] - series.frozen_mean[1]],
                value: series.value(i),
                d_nu: derivatives.then(|| series.d_nu(i)),
                d_nunu: derivatives.then(|| series.d_nunu(i)),
            }
        })
        .collect()
}

/// Quadrature parameters of the backward Cauchy solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CauchySpec {
    /// Gauss-Legendre nodes per ν panel.
    pub panel_nodes: usize,
    /// ν range in standard deviations.
    pub nu_range: f64,
    /// Gauss-Hermite nodes in the conditional ξ direction.
    pub hermite: usize,
    pub time_per_half: usize,
    /// Gauss-Hermite nodes per axis for the intermediate point of the second term.
    pub space_nodes: usize,
}

impl Default for CauchySpec {
    fn default() -> Self {
        Self { panel_nodes: 16, nu_range: 9.0, hermite: 24, time_per_half: 6, space_nodes: 12 }
    }
}

/// Values and velocity derivatives of `f(t,·) = ∫ Γ̌(t,·;T,ζ) φ(ζ) dζ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CauchySolution {
    pub t: f64,
    pub horizon: f64,
    pub order: usize,
    pub points: Vec<Point>,
    pub values: Vec<f64>,
    pub d_v: Vec<f64>,
    pub d_vv: Vec<f64>,
}

/// Kernel of the deterministic Kolmogorov operator `½|σ|²∂_vv + b ∂_v + v ∂_x`,
/// frozen at the terminal pole.
struct BackwardKernel<'a> {
    c: &'a CoefficientSet,
    gl: Rule,
}

impl<'a> BackwardKernel<'a> {
    fn new(c: &'a CoefficientSet) -> Self {
        Self { c, gl: legendre_on(16, 0.0, 1.0) }
    }

    fn a(&self, s: f64, z: Point) -> f64 {
        self.c.sigma_sq_jet(s, z[0], z[1], 0.0).v
    }

    /// Covariance of the frozen kernel from `t` to the pole `(T, ζ)`, and `a` at the start of
    /// the backward characteristic.
    fn frozen(&self, t: f64, tt: f64, zeta: Point) -> (Mat2, f64) {
        let lag = tt - t;
        let mut c = [[0.0; 2]; 2];
        for (u, w) in self.gl.nodes.iter().zip(&self.gl.weights) {
            let r = t + u * lag;
            let back = tt - r;
            let a = self.a(r, [zeta[0] - back * zeta[1], zeta[1]]) * w * lag;
            c[0][0] += a * back * back;
            c[0][1] += a * back;
            c[1][1] += a;
        }
        c[1][0] = c[0][1];
        (c, self.a(t, [zeta[0] - lag * zeta[1], zeta[1]]))
    }

    /// `(Z̆, ∂_v Z̆, ∂_vv Z̆)` in the starting point, and the frozen `a`.
    fn jet(&self, t: f64, z: Point, tt: f64, zeta: Point) -> Result<([f64; 3], f64)> {
        let lag = tt - t;
        let (cov, a0) = self.frozen(t, tt, zeta);
        let g = Gaussian2::new([z[0] + lag * z[1], z[1]], cov)?;
        let (v, gr, h) = g.jet(zeta);
        let e = [lag, 1.0];
        let dv = -(gr[0] * e[0] + gr[1] * e[1]);
        let dvv = e[0] * e[0] * h[0][0] + 2.0 * e[0] * e[1] * h[0][1] + e[1] * e[1] * h[1][1];
        Ok(([v, dv, dvv], a0))
    }

    fn reference(&self, t: f64, z: Point, tt: f64) -> Result<Gaussian2> {
        let lag = tt - t;
        let m = [z[0] + lag * z[1], z[1]];
        Gaussian2::new(m, self.frozen(t, tt, m).0)
    }
}

/// ν-panel breakpoints of an observable, in original coordinates.
fn kinks(phi: &ObservableFn) -> Vec<f64> {
    match phi {
        ObservableFn::Holder { center, .. } => vec![*center, center - 1.0, center + 1.0],
        _ => Vec::new(),
    }
}

/// Rule for `∫ g(ζ) dζ` against a reference Gaussian, composite in ν with grading at kinks.
fn terminal_rule(reference: &Gaussian2, phi: &ObservableFn, spec: &CauchySpec) -> Vec<(Point, f64)> {
    let l = reference.sqrt_nu_first();
    let (k, r, s_nu) = (l[0][0], l[0][1], l[1][0]);
    let m = reference.mean;
    let range = spec.nu_range;
    let panels = (range).ceil() as usize;
    let mut breaks: Vec<f64> = (0..=panels).map(|k| -range + 2.0 * range * k as f64 / panels as f64).collect();
    for nu in kinks(phi) {
        let uk = (nu - m[1]) / s_nu;
        for d in [0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.5] {
            for x in [uk - d, uk + d] {
                if x > -range && x < range {
                    breaks.push(x);
                }
            }
        }
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let gh = Hermite::new(spec.hermite);
    let sq2 = std::f64::consts::SQRT_2;
    let jac = r * s_nu;
    let mut out = Vec::new();
    for pair in breaks.windows(2) {
        let rule = legendre_on(spec.panel_nodes, pair[0], pair[1]);
        for (u, wu) in rule.nodes.iter().zip(&rule.weights) {
            for (x, wx) in gh.x.iter().zip(&gh.w_scaled) {
                let w = sq2 * x;
                out.push(([m[0] + k * u + r * w, m[1] + s_nu * u], wu * wx * sq2 * jac));
            }
        }
    }
    out
}

/// Deterministic backward Cauchy problem by the backward parametrix, orders 1 and 2.
pub fn solve_backward_cauchy(
    c: &CoefficientSet,
    phi: &ObservableFn,
    t: f64,
    horizon: f64,
    points: &[Point],
    order: usize,
    spec: &CauchySpec,
) -> Result<CauchySolution> {
    if !(t < horizon) {
        return Err(domain(format!("need t < T, got t = {t}, T = {horizon}")));
    }
    if !c.is_decoupled() {
        return Err(domain("backward Cauchy solver needs σ¹ ≡ 0 and h ≡ 0"));
    }
    if !(1..=2).contains(&order) {
        return Err(domain(format!("backward parametrix order {order} not in 1..=2")));
    }
    let bk = BackwardKernel::new(c);
    let phi_eval = |zeta: Point| phi.eval(zeta);
    // ∫ [½(a(w) − a_frozen) ∂_vv Z̆ + b(w) ∂_v Z̆](τ, w; T, ζ) φ(ζ) dζ
    let psi = |tau: f64, w: Point| -> Result<f64> {
        let reference = bk.reference(tau, w, horizon)?;
        let aw = bk.a(tau, w);
        let bw = c.b(tau, w[0], w[1], 0.0);
        let mut acc = 0.0;
        for (zeta, om) in terminal_rule(&reference, phi, spec) {
            let (j, a0) = bk.jet(tau, w, horizon, zeta)?;
            acc += om * (0.5 * (aw - a0) * j[2] + bw * j[1]) * phi_eval(zeta);
        }
        Ok(acc)
    };
    let rows: Vec<[f64; 3]> = points
        .par_iter()
        .map(|&z| -> Result<[f64; 3]> {
            let reference = bk.reference(t, z, horizon)?;
            let mut out = [0.0; 3];
            for (zeta, om) in terminal_rule(&reference, phi, spec) {
                let (j, _) = bk.jet(t, z, horizon, zeta)?;
                let p = phi_eval(zeta);
                for k in 0..3 {
                    out[k] += om * j[k] * p;
                }
            }
            if order == 2 {
                let rule = endpoint_clustered(spec.time_per_half, t, horizon);
                let gh = Hermite::new(spec.space_nodes);
                let mut nodes = Vec::new();
                for (&tau, &wt) in rule.nodes.iter().zip(&rule.weights) {
                    let g = bk.reference(t, z, tau)?;
                    aligned_nodes(g.mean, &g.cov, &gh, 1e-14, &mut nodes)?;
                    for &(w, om) in &nodes {
                        let (j, _) = bk.jet(t, z, tau, w)?;
                        if j[0] == 0.0 {
                            continue;
                        }
                        let ps = psi(tau, w)?;
                        for k in 0..3 {
                            out[k] += wt * om * j[k] * ps;
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(CauchySolution {
        t,
        horizon,
        order,
        points: points.to_vec(),
        values: rows.iter().map(|r| r[0]).collect(),
        d_v: rows.iter().map(|r| r[1]).collect(),
        d_vv: rows.iter().map(|r| r[2]).collect(),
    })
}

/// Backward kernel `Γ̌(t,z;T,ζ)` at order 1, frozen at the terminal pole.
pub fn backward_parametrix_z(c: &CoefficientSet, t: f64, z: Point, horizon: f64, zeta: Point) -> Result<f64> {
    if !(t < horizon) {
        return Err(domain(format!("need t < T, got t = {t}, T = {horizon}")));
    }
    Ok(BackwardKernel::new(c).jet(t, z, horizon, zeta)?.0[0])
}

/// Fitted blow-up `sup_v |∂_v f(t, ·)| ≈ C (T-t)^{-e}` over a set of lags.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientFit {
    pub lags: Vec<f64>,
    pub sup_grad: Vec<f64>,
    /// Fitted `e`.
    pub exponent: f64,
    pub constant: f64,
}

/// Sweeps `T - t` and fits the velocity-gradient blow-up for the observable `phi`.
///
/// Velocities are sampled in `center ± 4 sd` where `sd` is the velocity spread at each lag.
pub fn fit_gradient_exponent(
    c: &CoefficientSet,
    phi: &ObservableFn,
    horizon: f64,
    lags: &[f64],
    center: f64,
    spec: &CauchySpec,
) -> Result<GradientFit> {
    if lags.len() < 2 {
        return Err(domain("need at least two lags"));
    }
    let mut sup_grad = Vec::with_capacity(lags.len());
    for &lag in lags {
        let sd = (c.sigma_sq_jet(horizon - lag, 0.0, center, 0.0).v * lag).sqrt();
        let pts: Vec<Point> = (0..41).map(|k| [0.0, center + sd * (-4.0 + 0.2 * k as f64)]).collect();
        let sol = solve_backward_cauchy(c, phi, horizon - lag, horizon, &pts, 1, spec)?;
        sup_grad.push(sol.d_v.iter().map(|d| d.abs()).fold(0.0, f64::max));
    }
    let xs: Vec<f64> = lags.iter().map(|l| l.ln()).collect();
    let ys: Vec<f64> = sup_grad.iter().map(|g| g.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    Ok(GradientFit { lags: lags.to_vec(), sup_grad, exponent: -slope, constant: (my - slope * mx).exp() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::itow::{AdjointCoefficients, DirectCoefficients};
    use crate::kernels::{exact_langevin_kernel, langevin_gaussian, linearized_gaussian, LinearizedKernelSpec};

    fn prototype_field(sigma: f64) -> DeterministicField<DirectCoefficients<'static>> {
        let c: &'static CoefficientSet = Box::leak(Box::new(CoefficientSet::new(crate::Preset::LangevinPure { sigma_hat: sigma })));
        DeterministicField::new(DirectCoefficients(c))
    }

    #[test]
    fn constant_coefficients_give_exact_kernel() {
        let f = prototype_field(1.3);
        let z = [0.2, -0.4];
        for zeta in [[0.0, 0.0], [0.3, -0.1], [-0.2, 0.5]] {
            let a = parametrix_z(&f, 0.1, z, 0.6, zeta).unwrap();
            let b = exact_langevin_kernel(1.3, 0.5, z, zeta).unwrap();
            assert!((a - b).abs() < 1e-12 * b.max(1.0), "{a} {b}");
            assert!(kernel_h(&f, 0.1, z, 0.6, zeta).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_kernel_matches_variation_of_constants() {
        struct Bent;
        impl Field for Bent {
            fn eval(&self, s: f64, z: Point) -> Result<TransformedPoint> {
                Ok(TransformedPoint {
                    a: 0.3 + 0.1 * z[1].sin() + 0.05 * s,
                    b: 0.0,
                    c: 0.0,
                    y1: z[1] + 0.2 * z[1].sin(),
                    y2: 0.1 * z[0].cos(),
                    beta: 1.0 + 0.2 * z[1].cos(),
                })
            }
            fn max_step(&self) -> f64 {
                1e-3
            }
        }
        let (t, z, s) = (0.0, [0.3, 0.5], 0.4);
        let fk = frozen_kernel(&Bent, t, z, s).unwrap();
        let traj = move |r: f64| -> Point {
            if r <= t {
                z
            } else {
                frozen_kernel(&Bent, t, z, r).unwrap().gauss.mean
            }
        };
        let spec = LinearizedKernelSpec {
            freeze_time: t,
            freeze_point: z,
            frozen_diffusion: Box::new(move |r| Bent.eval(r, traj(r)).unwrap().a),
            drift_matrix_path: Box::new(move |r| [[0.0, Bent.eval(r, traj(r)).unwrap().beta], [0.0, 0.0]]),
            frozen_trajectory: Box::new(traj),
        };
        let g = linearized_gaussian(&spec, t, z, s).unwrap();
        for i in 0..2 {
            assert!((g.mean[i] - fk.gauss.mean[i]).abs() < 1e-9);
            for j in 0..2 {
                assert!((g.cov[i][j] - fk.gauss.cov[i][j]).abs() < 1e-7 * g.cov[1][1], "{:?} {:?}", g.cov, fk.gauss.cov);
            }
        }
    }

    #[test]
    fn chapman_kolmogorov_convolution() {
        let f = prototype_field(1.0);
        let (t, z, s) = (0.0, [0.1, 0.2], 0.5);
        let zk = |t: f64, z: Point, s: f64, zeta: Point| exact_langevin_kernel(1.0, s - t, z, zeta);
        let spec = QuadratureSpec { space_nodes: 16, ..Default::default() };
        for zeta in [[0.2, 0.3], [0.0, -0.4], [0.35, 0.9]] {
            let r = duhamel_convolve(&f, &zk, &zk, t, z, s, zeta, &spec).unwrap();
            let exact = (s - t) * zk(t, z, s, zeta).unwrap();
            assert!((r.value - exact).abs() < 1e-4, "{} {exact}", r.value);
            assert!(r.discrepancy < 1e-4);
        }
        let zero = |_: f64, _: Point, _: f64, _: Point| Ok(0.0);
        assert_eq!(duhamel_convolve(&f, &zk, &zero, t, z, s, [0.0, 0.0], &spec).unwrap().value, 0.0);
        let double = |t: f64, z: Point, s: f64, zeta: Point| Ok(2.0 * zk(t, z, s, zeta)?);
        let a = duhamel_convolve(&f, &zk, &zk, t, z, s, [0.2, 0.3], &spec).unwrap().value;
        let b = duhamel_convolve(&f, &double, &zk, t, z, s, [0.2, 0.3], &spec).unwrap().value;
        assert!((b - 2.0 * a).abs() < 1e-12 * a.abs());
    }

    #[test]
    fn constant_series_is_first_term() {
        let f = prototype_field(1.0);
        let g = langevin_gaussian(1.0, 0.3, [0.0, 0.0]).unwrap();
        let pts = whitened_box(&g, 5, 2.0).unwrap();
        let spec = QuadratureSpec { space_nodes: 12, inner_space_nodes: 8, inner_time_per_half: 3, time_per_half: 4, ..Default::default() };
        let s = parametrix_series(&f, 3, 0.0, [0.0, 0.0], 0.3, &pts, &spec).unwrap();
        for i in 0..pts.len() {
            assert_eq!(s.terms[1][i][0], 0.0);
            assert_eq!(s.terms[2][i][0], 0.0);
            assert!((s.value(i) - exact_langevin_kernel(1.0, 0.3, [0.0, 0.0], pts[i]).unwrap()).abs() < 1e-12);
        }
        assert!(matches!(parametrix_series(&f, 0, 0.0, [0.0, 0.0], 0.3, &pts, &spec), Err(Error::Domain(_))));
    }

    #[test]
    fn adjoint_sinusoidal_series_conserves_mass() {
        let c = CoefficientSet::new(crate::Preset::Sinusoidal { b0: 0.3, s0: 0.0, s1: 0.0, sigma_hat: 0.8, h0: 0.0, theta0: 1.0 });
        let f = DeterministicField::new(AdjointCoefficients(&c));
        let (t, z, s) = (0.0, [0.0, 0.7], 0.5);
        let nodes = mass_nodes(&f, t, z, s, 20, 1.6).unwrap();
        let pts: Vec<Point> = nodes.iter().map(|n| n.0).collect();
        let spec = QuadratureSpec { space_nodes: 16, inner_space_nodes: 10, ..Default::default() };
        let series = parametrix_series(&f, 3, t, z, s, &pts, &spec).unwrap();
        let mass: f64 = nodes.iter().enumerate().map(|(i, n)| n.1 * series.value(i)).sum();
        assert!((mass - 1.0).abs() < 2e-3, "mass {mass}");
        assert!(series.decay[0] < 0.5, "{:?}", series.decay);
        assert_eq!(series.skipped, 0);
    }

    #[test]
    fn sandwich_certifies_exact_kernel_and_scales_with_spread() {
        let sigma = 1.0;
        let lag = 0.25;
        let g = langevin_gaussian(sigma, lag, [0.0, 0.0]).unwrap();
        let pts = whitened_box(&g, 15, 2.5).unwrap();
        let good: Vec<SandwichPoint> = pts
            .iter()
            .map(|p| {
                let (v, gr, h) = g.jet(*p);
                SandwichPoint { lag, offset: *p, value: v, d_nu: Some(gr[1]), d_nunu: Some(h[1][1]) }
            })
            .collect();
        let rep = certify_sandwich(&good);
        assert!(rep.pass() && rep.lambda().unwrap() <= 10.0, "{rep:?}");
        let broad = Gaussian2::new([0.0, 0.0], g.cov.map(|r| r.map(|x| 25.0 * x))).unwrap();
        let spread: Vec<SandwichPoint> =
            pts.iter().map(|p| SandwichPoint { lag, offset: *p, value: broad.density(*p), d_nu: None, d_nunu: None }).collect();
        let wide = certify_sandwich(&spread);
        assert!(wide.pass() && wide.lambda().unwrap() > 4.0 * rep.lambda().unwrap(), "{wide:?}");
        let mut signed = spread.clone();
        signed[7].value = -1e-12;
        let neg = certify_sandwich(&signed);
        assert!(!neg.pass() && neg.failure.is_some());
    }

    #[test]
    fn backward_cauchy_gaussian_closed_form() {
        let sigma = 0.9;
        let c = CoefficientSet::new(crate::Preset::LangevinPure { sigma_hat: sigma });
        let (center, var) = ([0.3, -0.2], [0.2, 0.5]);
        let phi = ObservableFn::Gaussian { center, var };
        let pts = vec![[0.0, 0.0], [0.5, 0.4], [-0.3, 0.8]];
        let sol = solve_backward_cauchy(&c, &phi, 0.0, 0.5, &pts, 1, &CauchySpec::default()).unwrap();
        for (i, z) in pts.iter().enumerate() {
            let cov = crate::kernels::langevin_covariance(sigma, 0.5);
            let sum = [[cov[0][0] + var[0], cov[0][1]], [cov[1][0], cov[1][1] + var[1]]];
            let g = Gaussian2::new(center, sum).unwrap();
            let exact = 2.0 * std::f64::consts::PI * (var[0] * var[1]).sqrt() * g.density([z[0] + 0.5 * z[1], z[1]]);
            assert!((sol.values[i] - exact).abs() < 1e-8, "{} {exact}", sol.values[i]);
        }
        let one = solve_backward_cauchy(&c, &ObservableFn::One, 0.0, 0.5, &pts, 1, &CauchySpec::default()).unwrap();
        assert!(one.values.iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(one.d_v.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn backward_and_forward_kernels_agree() {
        let c = CoefficientSet::new(crate::Preset::LangevinPure { sigma_hat: 0.7 });
        let f = DeterministicField::new(DirectCoefficients(&c));
        for zeta in [[0.1, 0.2], [-0.3, 0.0]] {
            let a = backward_parametrix_z(&c, 0.0, [0.0, 0.1], 0.4, zeta).unwrap();
            let b = parametrix_z(&f, 0.0, [0.0, 0.1], 0.4, zeta).unwrap();
            assert!((a - b).abs() < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn holder_gradient_exponent() {
        let c = CoefficientSet::new(crate::Preset::LangevinPure { sigma_hat: 1.0 });
        let alpha = 0.5;
        let phi = ObservableFn::Holder { alpha, center: 0.0 };
        let lags = [1.0 / 256.0, 1.0 / 128.0, 1.0 / 64.0, 1.0 / 32.0, 1.0 / 16.0];
        let fit = fit_gradient_exponent(&c, &phi, 1.0, &lags, 0.0, &CauchySpec::default()).unwrap();
        assert!((fit.exponent - (1.0 - alpha) / 2.0).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn second_order_backward_improves_variable_drift() {
        let c = CoefficientSet::new(crate::Preset::Sinusoidal { b0: 0.5, s0: 0.0, s1: 0.0, sigma_hat: 0.8, h0: 0.0, theta0: 1.0 });
        let phi = ObservableFn::TanhXi;
        let z = [0.0, 0.6];
        let horizon = 0.5;
        let spec = CauchySpec { panel_nodes: 12, hermite: 12, time_per_half: 5, space_nodes: 10, ..Default::default() };
        let o1 = solve_backward_cauchy(&c, &phi, 0.0, horizon, &[z], 1, &spec).unwrap().values[0];
        let o2 = solve_backward_cauchy(&c, &phi, 0.0, horizon, &[z], 2, &spec).unwrap().values[0];
        let n = 40_000;
        let steps = 200;
        let dt = horizon / steps as f64;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for p in 0..n {
            let mut s = crate::rng::NormalStream::new(77, p, 0);
            let (mut x, mut v) = (z[0], z[1]);
            for _ in 0..steps {
                let dw = s.next_normal() * dt.sqrt();
                x += v * dt;
                v += 0.5 * v.sin() * dt + 0.8 * dw;
            }
            let y = x.tanh();
            acc += y;
            acc2 += y * y;
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((o2 - mean).abs() < (o1 - mean).abs(), "o1 {o1} o2 {o2} mc {mean}");
        assert!((o2 - mean).abs() < 4.0 * se + 2e-3, "o2 {o2} mc {mean} se {se}");
    }
}
