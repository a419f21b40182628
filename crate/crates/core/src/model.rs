//! Coefficient presets of the signal/observation system and their checks.
//!
//! The system, in canonical form with Brownian dimension `n = 2`:
//!
//! ```text
//! dX = V dt
//! dV = b dt + σ¹ dW¹ + σ̂ dW²
//! dY = h dt + θ dW¹
//! ```

use crate::error::{domain, Error, Result};
use crate::tolerances::THETA_GUARD;
use serde::{Deserialize, Serialize};

/// Value and derivatives up to second order in `(ξ, ν)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet2 {
    pub v: f64,
    pub x: f64,
    pub n: f64,
    pub xx: f64,
    pub xn: f64,
    pub nn: f64,
}

impl Jet2 {
    pub fn constant(v: f64) -> Self {
        Self { v, ..Default::default() }
    }

    pub fn scale(self, c: f64) -> Self {
        Self { v: c * self.v, x: c * self.x, n: c * self.n, xx: c * self.xx, xn: c * self.xn, nn: c * self.nn }
    }

}

impl std::ops::Add for Jet2 {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            x: self.x + o.x,
            n: self.n + o.n,
            xx: self.xx + o.xx,
            xn: self.xn + o.xn,
            nn: self.nn + o.nn,
        }
    }

}

/// Leibniz rule.
impl std::ops::Mul for Jet2 {
    type Output = Self;

    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            x: self.x * o.v + self.v * o.x,
            n: self.n * o.v + self.v * o.n,
            xx: self.xx * o.v + 2.0 * self.x * o.x + self.v * o.xx,
            xn: self.xn * o.v + self.x * o.n + self.n * o.x + self.v * o.xn,
            nn: self.nn * o.v + 2.0 * self.n * o.n + self.v * o.nn,
        }
    }
}

/// Named coefficient families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Preset {
    /// All coefficients constant.
    Constant { b: f64, sigma1: f64, sigma_hat: f64, h: f64, theta: f64 },
    /// `b = b0 sin v`, `σ¹ = s0 + s1 sin x / (1 + x²)`, `h = h0 tanh x`, `θ = θ0`.
    Sinusoidal { b0: f64, s0: f64, s1: f64, sigma_hat: f64, h0: f64, theta0: f64 },
    /// Kinetic prototype: independent velocity noise only, `θ = 1`.
    LangevinPure { sigma_hat: f64 },
}

impl Preset {
    pub fn id(&self) -> &'static str {
        match self {
            Preset::Constant { .. } => "constant",
            Preset::Sinusoidal { .. } => "sinusoidal",
            Preset::LangevinPure { .. } => "langevin-pure",
        }
    }

    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Preset::Constant { b, sigma1, sigma_hat, h, theta } => {
                vec![("b", b), ("sigma1", sigma1), ("sigma_hat", sigma_hat), ("h", h), ("theta", theta)]
            }
            Preset::Sinusoidal { b0, s0, s1, sigma_hat, h0, theta0 } => vec![
                ("b0", b0),
                ("s0", s0),
                ("s1", s1),
                ("sigma_hat", sigma_hat),
                ("h0", h0),
                ("theta0", theta0),
            ],
            Preset::LangevinPure { sigma_hat } => vec![("sigma_hat", sigma_hat)],
        }
    }
}

/// Registered preset ids.
pub const PRESET_IDS: [&str; 3] = ["constant", "sinusoidal", "langevin-pure"];

/// A preset together with its assumption metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub preset: Preset,
    /// Coercivity constant.
    pub m: f64,
    pub holder_alpha: f64,
    pub flatten_eps: f64,
    pub flatten_m: f64,
    /// Bound on coefficient magnitudes over sampled grids.
    pub bound: f64,
}

fn sin_ratio(x: f64) -> [f64; 3] {
    // g = sin x · q with q = 1/(1+x²)
    let q = 1.0 / (1.0 + x * x);
    let q1 = -2.0 * x * q * q;
    let q2 = (6.0 * x * x - 2.0) * q * q * q;
    let (s, c) = x.sin_cos();
    [s * q, c * q + s * q1, -s * q + 2.0 * c * q1 + s * q2]
}

impl CoefficientSet {
    pub fn new(preset: Preset) -> Self {
        let (m, flatten_m) = match preset {
            Preset::Sinusoidal { .. } => (0.5, 100.0),
            _ => (0.5, 10.0),
        };
        Self { preset, m, holder_alpha: 0.5, flatten_eps: 0.25, flatten_m, bound: 10.0 }
    }

    /// Preset with default parameters by registry id.
    pub fn from_id(id: &str) -> Result<Self> {
        let p = match id {
            "constant" => Preset::Constant { b: 0.0, sigma1: 0.5, sigma_hat: 1.0, h: 0.3, theta: 1.0 },
            "sinusoidal" => Preset::Sinusoidal { b0: 0.3, s0: 0.5, s1: 0.2, sigma_hat: 0.8, h0: 0.3, theta0: 1.0 },
            "langevin-pure" => Preset::LangevinPure { sigma_hat: 1.0 },
            other => return Err(domain(format!("unknown preset id '{other}'"))),
        };
        Ok(Self::new(p))
    }

    pub fn constant(b: f64, sigma1: f64, sigma_hat: f64, h: f64, theta: f64) -> Self {
        Self::new(Preset::Constant { b, sigma1, sigma_hat, h, theta })
    }

    pub fn id(&self) -> &'static str {
        self.preset.id()
    }

    /// Brownian dimension.
    pub fn n(&self) -> usize {
        2
    }

    pub fn b(&self, t: f64, x: f64, v: f64, y: f64) -> f64 {
        self.b_jet(t, x, v, y).v
    }

    pub fn b_jet(&self, _t: f64, _x: f64, v: f64, _y: f64) -> Jet2 {
        match self.preset {
            Preset::Constant { b, .. } => Jet2::constant(b),
            Preset::Sinusoidal { b0, .. } => {
                let (s, c) = v.sin_cos();
                Jet2 { v: b0 * s, n: b0 * c, nn: -b0 * s, ..Default::default() }
            }
            Preset::LangevinPure { .. } => Jet2::default(),
        }
    }

    pub fn sigma1(&self, t: f64, x: f64, v: f64, y: f64) -> f64 {
        self.sigma1_jet(t, x, v, y).v
    }

    pub fn sigma1_jet(&self, _t: f64, x: f64, _v: f64, _y: f64) -> Jet2 {
        match self.preset {
            Preset::Constant { sigma1, .. } => Jet2::constant(sigma1),
            Preset::Sinusoidal { s0, s1, .. } => {
                let g = sin_ratio(x);
                Jet2 { v: s0 + s1 * g[0], x: s1 * g[1], xx: s1 * g[2], ..Default::default() }
            }
            Preset::LangevinPure { .. } => Jet2::default(),
        }
    }

    /// Independent noise loadings, length `n - 1`.
    pub fn sigma_hat(&self, _t: f64, _x: f64, _v: f64, _y: f64) -> Vec<f64> {
        match self.preset {
            Preset::Constant { sigma_hat, .. }
            | Preset::Sinusoidal { sigma_hat, .. }
            | Preset::LangevinPure { sigma_hat } => vec![sigma_hat],
        }
    }

    pub fn sigma_hat_sq(&self, t: f64, x: f64, v: f64, y: f64) -> f64 {
        self.sigma_hat(t, x, v, y).iter().map(|s| s * s).sum()
    }

    /// `|σ|² = (σ¹)² + |σ̂|²` with derivatives.
    pub fn sigma_sq_jet(&self, t: f64, x: f64, v: f64, y: f64) -> Jet2 {
        let s1 = self.sigma1_jet(t, x, v, y);
        let mut j = s1 * s1;
        j.v += self.sigma_hat_sq(t, x, v, y);
        j
    }

    pub fn theta(&self, _t: f64, _y: f64) -> f64 {
        match self.preset {
            Preset::Constant { theta, .. } => theta,
            Preset::Sinusoidal { theta0, .. } => theta0,
            Preset::LangevinPure { .. } => 1.0,
        }
    }

    pub fn h(&self, t: f64, x: f64, v: f64, y: f64) -> f64 {
        self.h_jet(t, x, v, y).v
    }

    pub fn h_jet(&self, _t: f64, x: f64, _v: f64, _y: f64) -> Jet2 {
        match self.preset {
            Preset::Constant { h, .. } => Jet2::constant(h),
            Preset::Sinusoidal { h0, .. } => {
                let th = x.tanh();
                let sech2 = 1.0 - th * th;
                Jet2 { v: h0 * th, x: h0 * sech2, xx: -2.0 * h0 * th * sech2, ..Default::default() }
            }
            Preset::LangevinPure { .. } => Jet2::default(),
        }
    }

    /// Normalized observation drift `h / θ`.
    pub fn tilde_h(&self, t: f64, x: f64, v: f64, y: f64) -> Result<f64> {
        Ok(self.tilde_h_jet(t, x, v, y)?.v)
    }

    pub fn tilde_h_jet(&self, t: f64, x: f64, v: f64, y: f64) -> Result<Jet2> {
        let th = self.theta(t, y);
        if th.abs() < THETA_GUARD {
            return Err(Error::DivisionGuard { what: "theta", value: th });
        }
        Ok(self.h_jet(t, x, v, y).scale(1.0 / th))
    }

    /// True when `σ¹` and `h` are both identically zero.
    pub fn is_decoupled(&self) -> bool {
        match self.preset {
            Preset::Constant { sigma1, h, .. } => sigma1 == 0.0 && h == 0.0,
            Preset::Sinusoidal { s0, s1, h0, .. } => s0 == 0.0 && s1 == 0.0 && h0 == 0.0,
            Preset::LangevinPure { .. } => true,
        }
    }

    pub fn check_coercivity(&self, grid: &SampleGrid) -> CoercivityReport {
        let mut theta_margin = f64::INFINITY;
        let mut sigma_margin = f64::INFINITY;
        let mut finite = true;
        for &t in &grid.times {
            for &y in &grid.ys {
                let th = self.theta(t, y);
                finite &= th.is_finite();
                theta_margin = theta_margin.min(th * th - self.m);
                for &x in &grid.xs {
                    for &v in &grid.vs {
                        let s = self.sigma_hat_sq(t, x, v, y);
                        finite &= s.is_finite();
                        sigma_margin = sigma_margin.min(s - self.m);
                    }
                }
            }
        }
        let margin = theta_margin.min(sigma_margin);
        CoercivityReport { pass: finite && margin >= 0.0, theta_margin, sigma_hat_margin: sigma_margin, margin }
    }

    /// Fails with [`Error::Coercivity`] when the default grid check does not pass.
    pub fn require_coercive(&self) -> Result<()> {
        let r = self.check_coercivity(&SampleGrid::default_verification());
        if r.pass {
            Ok(())
        } else {
            Err(Error::Coercivity { margin: r.margin })
        }
    }

    pub fn check_flattening(&self, grid: &SampleGrid) -> FlatteningReport {
        let mut worst = FlatteningReport::empty(self.flatten_m);
        for &t in &grid.times {
            for &y in &grid.ys {
                let r = check_flattening_fn(
                    |x, v| self.sigma1(t, x, v, y),
                    |x, v| self.h(t, x, v, y),
                    self.flatten_eps,
                    self.flatten_m,
                    &grid.xs,
                    &grid.vs,
                );
                worst = worst.merge(r);
            }
        }
        worst
    }
}

/// Outcome of the coercivity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityReport {
    pub pass: bool,
    pub theta_margin: f64,
    pub sigma_hat_margin: f64,
    pub margin: f64,
}

/// Weighted-derivative suprema against the flattening bound.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatteningReport {
    pub pass: bool,
    /// `sup (1+|w|²)^ε |∇σ¹|`
    pub sigma1_first: f64,
    /// `sup (1+|w|²)^{1/2+ε} |∂^β σ¹|` over orders two and three
    pub sigma1_higher: f64,
    /// `sup (1+|w|²)^{1/2} |∇h|`
    pub h_first: f64,
    pub total: f64,
    pub bound: f64,
    /// `(radius, total)` per radial shell, for growth inspection.
    pub shells: Vec<(f64, f64)>,
}

impl FlatteningReport {
    fn empty(bound: f64) -> Self {
        Self { pass: true, sigma1_first: 0.0, sigma1_higher: 0.0, h_first: 0.0, total: 0.0, bound, shells: vec![] }
    }

    fn merge(self, o: Self) -> Self {
        let sigma1_first = self.sigma1_first.max(o.sigma1_first);
        let sigma1_higher = self.sigma1_higher.max(o.sigma1_higher);
        let h_first = self.h_first.max(o.h_first);
        let total = sigma1_first + sigma1_higher + h_first;
        let shells = if o.total >= self.total { o.shells } else { self.shells };
        Self { pass: total <= self.bound, sigma1_first, sigma1_higher, h_first, total, bound: self.bound, shells }
    }
}

/// Flattening check for arbitrary `σ¹(x, v)` and `h(x, v)` by finite differences.
pub fn check_flattening_fn(
    sigma1: impl Fn(f64, f64) -> f64,
    h: impl Fn(f64, f64) -> f64,
    eps: f64,
    bound: f64,
    xs: &[f64],
    vs: &[f64],
) -> FlatteningReport {
    let d = 1e-3;
    let grad = |f: &dyn Fn(f64, f64) -> f64, x: f64, v: f64| -> f64 {
        let gx = (f(x + d, v) - f(x - d, v)) / (2.0 * d);
        let gv = (f(x, v + d) - f(x, v - d)) / (2.0 * d);
        gx.abs().max(gv.abs())
    };
    let e = 1e-2;
    let higher = |x: f64, v: f64| -> f64 {
        let f = |a: f64, b: f64| sigma1(a, b);
        let mut m: f64 = 0.0;
        // second order
        m = m.max(((f(x + e, v) - 2.0 * f(x, v) + f(x - e, v)) / (e * e)).abs());
        m = m.max(((f(x, v + e) - 2.0 * f(x, v) + f(x, v - e)) / (e * e)).abs());
        m = m.max(
            ((f(x + e, v + e) - f(x + e, v - e) - f(x - e, v + e) + f(x - e, v - e)) / (4.0 * e * e)).abs(),
        );
        // third order along the axes
        let third = |g: &dyn Fn(f64) -> f64| (g(2.0 * e) - 2.0 * g(e) + 2.0 * g(-e) - g(-2.0 * e)) / (2.0 * e * e * e);
        m = m.max(third(&|s| f(x + s, v)).abs());
        m = m.max(third(&|s| f(x, v + s)).abs());
        m
    };
    let mut s1f: f64 = 0.0;
    let mut s1h: f64 = 0.0;
    let mut hf: f64 = 0.0;
    let mut shells: Vec<(f64, f64)> = Vec::new();
    for &x in xs {
        for &v in vs {
            let r2 = x * x + v * v;
            let a = (1.0 + r2).powf(eps) * grad(&sigma1, x, v);
            let b = (1.0 + r2).powf(0.5 + eps) * higher(x, v);
            let c = (1.0 + r2).sqrt() * grad(&h, x, v);
            s1f = s1f.max(a);
            s1h = s1h.max(b);
            hf = hf.max(c);
            let r = r2.sqrt();
            let key = (r.log2().max(-4.0)).ceil();
            let shell_r = key.exp2();
            match shells.iter_mut().find(|(rr, _)| *rr == shell_r) {
                Some(entry) => entry.1 = entry.1.max(a + b + c),
                None => shells.push((shell_r, a + b + c)),
            }
        }
    }
    shells.sort_by(|p, q| p.0.total_cmp(&q.0));
    let total = s1f + s1h + hf;
    FlatteningReport {
        pass: total.is_finite() && total <= bound,
        sigma1_first: s1f,
        sigma1_higher: s1h,
        h_first: hf,
        total,
        bound,
        shells,
    }
}

/// Sample points for assumption checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub vs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl SampleGrid {
    pub fn default_verification() -> Self {
        let line: Vec<f64> = (0..25).map(|i| -6.0 + 0.5 * i as f64).collect();
        Self { times: vec![0.0, 0.5, 1.0], xs: line.clone(), vs: line, ys: vec![-2.0, 0.0, 2.0] }
    }

    /// Symmetric grid with geometrically growing radii up to `r_max`.
    pub fn radial(r_max: f64, per_side: usize) -> Self {
        let mut line = vec![0.0];
        for k in 0..per_side {
            let r = r_max.powf((k + 1) as f64 / per_side as f64);
            line.push(r);
            line.push(-r);
        }
        line.sort_by(f64::total_cmp);
        Self { times: vec![0.0], xs: line.clone(), vs: line, ys: vec![0.0] }
    }
}

/// Test functions applied to the signal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservableFn {
    One,
    V,
    X,
    TanhXi,
    /// Unnormalized Gaussian bump `exp(-½ (ζ-c)ᵀ S⁻¹ (ζ-c))` with diagonal `S`.
    Gaussian { center: [f64; 2], var: [f64; 2] },
    /// `min(|ν - c|^α, 1)`.
    Holder { alpha: f64, center: f64 },
}

impl ObservableFn {
    pub fn from_id(id: &str) -> Result<Self> {
        Ok(match id {
            "one" => Self::One,
            "v" => Self::V,
            "x" => Self::X,
            "tanh-xi" => Self::TanhXi,
            other => return Err(domain(format!("unknown observable id '{other}'"))),
        })
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::One => "one",
            Self::V => "v",
            Self::X => "x",
            Self::TanhXi => "tanh-xi",
            Self::Gaussian { .. } => "gaussian",
            Self::Holder { .. } => "holder",
        }
    }

    #[inline]
    pub fn eval(&self, z: [f64; 2]) -> f64 {
        match self {
            Self::One => 1.0,
            Self::V => z[1],
            Self::X => z[0],
            Self::TanhXi => z[0].tanh(),
            Self::Gaussian { center, var } => {
                let dx = z[0] - center[0];
                let dv = z[1] - center[1];
                (-0.5 * (dx * dx / var[0] + dv * dv / var[1])).exp()
            }
            Self::Holder { alpha, center } => (z[1] - center).abs().powf(*alpha).min(1.0),
        }
    }

    /// Sup-norm bound; infinite for the coordinate functions.
    pub fn bound(&self) -> f64 {
        match self {
            Self::V | Self::X => f64::INFINITY,
            _ => 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_round_trip() {
        for id in PRESET_IDS {
            let c = CoefficientSet::from_id(id).unwrap();
            assert_eq!(c.id(), id);
        }
        assert!(CoefficientSet::from_id("nope").is_err());
    }

    #[test]
    fn coercivity_examples() {
        let g = SampleGrid::default_verification();
        let c = CoefficientSet::constant(0.0, 0.0, 1.0, 0.0, 1.0);
        let r = c.check_coercivity(&g);
        assert!(r.pass);
        assert!((r.margin - 0.5).abs() < 1e-15);
        let bad = CoefficientSet::constant(0.0, 0.0, 1.0, 0.0, 0.1);
        assert!(!bad.check_coercivity(&g).pass);
    }

    #[test]
    fn shipped_presets_pass_checks() {
        let g = SampleGrid::default_verification();
        for id in PRESET_IDS {
            let c = CoefficientSet::from_id(id).unwrap();
            assert!(c.check_coercivity(&g).pass, "{id}");
            let f = c.check_flattening(&g);
            assert!(f.pass, "{id}: {f:?}");
        }
    }

    #[test]
    fn tilde_h_examples() {
        let c = CoefficientSet::constant(0.0, 0.0, 1.0, 0.0, 1.0);
        assert_eq!(c.tilde_h(0.0, 1.0, 2.0, 0.0).unwrap(), 0.0);
        let c = CoefficientSet::constant(0.0, 0.0, 1.0, 0.7, 0.7);
        assert_eq!(c.tilde_h(0.0, 1.0, 2.0, 0.0).unwrap(), 1.0);
        let s = CoefficientSet::from_id("sinusoidal").unwrap();
        assert!((s.tilde_h(0.0, 0.4, 0.0, 0.0).unwrap() - 0.3 * 0.4f64.tanh()).abs() < 1e-15);
        let z = CoefficientSet::constant(0.0, 0.0, 1.0, 0.3, 0.0);
        assert!(matches!(z.tilde_h(0.0, 0.0, 0.0, 0.0), Err(Error::DivisionGuard { .. })));
    }

    #[test]
    fn flattening_examples() {
        let g = SampleGrid::radial(1e5, 20);
        let flat = check_flattening_fn(|_, _| 0.7, |_, _| 0.1, 0.25, 10.0, &g.xs, &g.vs);
        assert!(flat.pass);
        assert_eq!(flat.total, 0.0);
        // compactly supported gradient
        let bump = |x: f64, v: f64| {
            let r2 = x * x + v * v;
            if r2 < 1.0 { (1.0 - r2).powi(4) } else { 0.0 }
        };
        assert!(check_flattening_fn(bump, |_, _| 0.0, 0.25, 10.0, &g.xs, &g.vs).pass);
        let linear = check_flattening_fn(|x, _| x, |_, _| 0.0, 0.25, 10.0, &g.xs, &g.vs);
        assert!(!linear.pass);
        let last = linear.shells.last().unwrap().1;
        let mid = linear.shells[linear.shells.len() / 2].1;
        assert!(last > mid);
    }

    #[test]
    fn analytic_jets_match_differences() {
        let c = CoefficientSet::from_id("sinusoidal").unwrap();
        let d = 1e-5;
        for &x in &[-2.3, -0.4, 0.0, 0.9, 3.1] {
            let j = c.sigma1_jet(0.0, x, 0.2, 0.0);
            let fd = (c.sigma1(0.0, x + d, 0.2, 0.0) - c.sigma1(0.0, x - d, 0.2, 0.0)) / (2.0 * d);
            assert!((j.x - fd).abs() < 1e-8);
            let fd2 = (c.sigma1_jet(0.0, x + d, 0.2, 0.0).x - c.sigma1_jet(0.0, x - d, 0.2, 0.0).x) / (2.0 * d);
            assert!((j.xx - fd2).abs() < 1e-7);
            let hj = c.h_jet(0.0, x, 0.0, 0.0);
            let fd = (c.h(0.0, x + d, 0.0, 0.0) - c.h(0.0, x - d, 0.0, 0.0)) / (2.0 * d);
            assert!((hj.x - fd).abs() < 1e-8);
            let bj = c.b_jet(0.0, 0.0, x, 0.0);
            let fd = (c.b(0.0, 0.0, x + d, 0.0) - c.b(0.0, 0.0, x - d, 0.0)) / (2.0 * d);
            assert!((bj.n - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn presets_are_pure() {
        let c = CoefficientSet::from_id("sinusoidal").unwrap();
        let a = c.sigma1(0.3, 1.234, -0.5, 0.1).to_bits();
        assert_eq!(a, c.sigma1(0.3, 1.234, -0.5, 0.1).to_bits());
    }

    #[test]
    fn observables() {
        assert_eq!(ObservableFn::One.eval([3.0, 4.0]), 1.0);
        assert_eq!(ObservableFn::V.eval([3.0, 4.0]), 4.0);
        assert_eq!(ObservableFn::Holder { alpha: 0.5, center: 0.0 }.eval([0.0, 0.25]), 0.5);
        assert_eq!(ObservableFn::Holder { alpha: 0.5, center: 0.0 }.eval([0.0, 4.0]), 1.0);
    }
}
