//! Euler-Maruyama simulation of the signal/observation system and of the
//! reference-measure dynamics.

use crate::error::{domain, Error, Result};
use crate::model::CoefficientSet;
use crate::rng::{NormalStream, CH_REFERENCE, CH_SHARED, CH_SIGNAL};
use serde::{Deserialize, Serialize};

/// Uniform time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t1 > t0) || n_steps == 0 {
            return Err(domain(format!("invalid time grid [{t0}, {t1}] with {n_steps} steps")));
        }
        Ok(Self { t0, t1, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t1
        } else {
            self.t0 + self.dt() * k as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Grid with every `factor` steps merged.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(domain(format!("cannot coarsen {} steps by {factor}", self.n_steps)));
        }
        Self::new(self.t0, self.t1, self.n_steps / factor)
    }
}

/// Simulated trajectories on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    /// Brownian increments per step, one entry per channel.
    pub dw: Vec<Vec<f64>>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub y: Vec<f64>,
    pub rho: Vec<f64>,
    pub tilde_w: Vec<f64>,
    pub seed: u64,
    pub scheme: &'static str,
}

impl PathBundle {
    /// Increments of the observation-driven Brownian motion.
    pub fn tilde_w_increments(&self) -> Vec<f64> {
        self.tilde_w.windows(2).map(|p| p[1] - p[0]).collect()
    }

    /// Increments of the shared channel `W¹`.
    pub fn shared_increments(&self) -> Vec<f64> {
        self.dw.iter().map(|d| d[0]).collect()
    }
}

/// Reference-measure state carried along a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QState {
    pub x: f64,
    pub v: f64,
    pub y: f64,
    pub log_rho: f64,
}

/// Simulates path 0 of the system.
pub fn simulate_system(c: &CoefficientSet, init: (f64, f64, f64), grid: TimeGrid, seed: u64) -> Result<PathBundle> {
    simulate_path(c, init, grid, seed, 0)
}

/// Euler-Maruyama path `path` of the system under the physical measure.
pub fn simulate_path(
    c: &CoefficientSet,
    init: (f64, f64, f64),
    grid: TimeGrid,
    seed: u64,
    path: u64,
) -> Result<PathBundle> {
    c.require_coercive()?;
    let n = grid.n_steps;
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut shared = NormalStream::new(seed, path, CH_SHARED);
    let mut signal = NormalStream::new(seed, path, CH_SIGNAL);
    let (mut x, mut v, mut y) = init;
    let mut out = PathBundle {
        grid,
        dw: Vec::with_capacity(n),
        x: Vec::with_capacity(n + 1),
        v: Vec::with_capacity(n + 1),
        y: Vec::with_capacity(n + 1),
        rho: Vec::with_capacity(n + 1),
        tilde_w: Vec::with_capacity(n + 1),
        seed,
        scheme: "euler",
    };
    let mut log_rho = 0.0;
    let mut tw = 0.0;
    out.x.push(x);
    out.v.push(v);
    out.y.push(y);
    out.rho.push(1.0);
    out.tilde_w.push(0.0);
    for k in 0..n {
        let t = grid.time(k);
        let dw1 = sq * shared.next_normal();
        let dw2 = sq * signal.next_normal();
        let b = c.b(t, x, v, y);
        let s1 = c.sigma1(t, x, v, y);
        let sh = c.sigma_hat(t, x, v, y)[0];
        let h = c.h(t, x, v, y);
        let th = c.theta(t, y);
        let ht = c.tilde_h(t, x, v, y)?;
        let dy = h * dt + th * dw1;
        let dwt = dy / th;
        log_rho += ht * dwt - 0.5 * ht * ht * dt;
        tw += dwt;
        x += v * dt;
        v += b * dt + s1 * dw1 + sh * dw2;
        y += dy;
        out.dw.push(vec![dw1, dw2]);
        out.x.push(x);
        out.v.push(v);
        out.y.push(y);
        out.rho.push(log_rho.exp());
        out.tilde_w.push(tw);
    }
    Ok(out)
}

/// One Euler step of the reference-measure dynamics driven by `dwt` on the shared channel
/// and `dw_hat` on the independent channel.
#[inline]
pub fn q_step(c: &CoefficientSet, t: f64, dt: f64, s: QState, dwt: f64, dw_hat: f64) -> Result<QState> {
    let ht = c.tilde_h(t, s.x, s.v, s.y)?;
    let b = c.b(t, s.x, s.v, s.y);
    let s1 = c.sigma1(t, s.x, s.v, s.y);
    let sh = c.sigma_hat(t, s.x, s.v, s.y)[0];
    let th = c.theta(t, s.y);
    Ok(QState {
        x: s.x + s.v * dt,
        v: s.v + (b - ht * s1) * dt + s1 * dwt + sh * dw_hat,
        y: s.y + th * dwt,
        log_rho: s.log_rho + ht * dwt - 0.5 * ht * ht * dt,
    })
}

/// Terminal reference-measure state of particle `path`; `log_rho` excludes the initial weight.
pub fn q_terminal(
    c: &CoefficientSet,
    init: (f64, f64, f64),
    tilde_w_increments: &[f64],
    grid: TimeGrid,
    seed: u64,
    path: u64,
) -> Result<QState> {
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut noise = NormalStream::new(seed, path, CH_REFERENCE + CH_SIGNAL);
    let mut s = QState { x: init.0, v: init.1, y: init.2, log_rho: 0.0 };
    for (k, &dwt) in tilde_w_increments.iter().enumerate() {
        s = q_step(c, grid.time(k), dt, s, dwt, sq * noise.next_normal())?;
    }
    Ok(s)
}

/// Reference-measure path: shared channel driven by the supplied `W̃`, fresh noise elsewhere.
pub fn simulate_under_q(
    c: &CoefficientSet,
    init: (f64, f64, f64, f64),
    tilde_w_path: &[f64],
    grid: TimeGrid,
    seed: u64,
    path: u64,
) -> Result<PathBundle> {
    let n = grid.n_steps;
    if tilde_w_path.len() != n + 1 {
        return Err(Error::LengthMismatch { expected: n + 1, got: tilde_w_path.len() });
    }
    let (x0, v0, y0, eta) = init;
    if !(eta > 0.0) {
        return Err(domain(format!("initial weight must be positive, got {eta}")));
    }
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut noise = NormalStream::new(seed, path, CH_REFERENCE + CH_SIGNAL);
    let mut s = QState { x: x0, v: v0, y: y0, log_rho: 0.0 };
    let mut out = PathBundle {
        grid,
        dw: Vec::with_capacity(n),
        x: vec![x0],
        v: vec![v0],
        y: vec![y0],
        rho: vec![eta],
        tilde_w: vec![tilde_w_path[0]],
        seed,
        scheme: "euler",
    };
    for k in 0..n {
        let dwt = tilde_w_path[k + 1] - tilde_w_path[k];
        let dwh = sq * noise.next_normal();
        s = q_step(c, grid.time(k), dt, s, dwt, dwh)?;
        out.dw.push(vec![dwt, dwh]);
        out.x.push(s.x);
        out.v.push(s.v);
        out.y.push(s.y);
        out.rho.push(eta * s.log_rho.exp());
        out.tilde_w.push(tilde_w_path[k + 1]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoefficientSet;

    #[test]
    fn frozen_signal_and_brownian_observation() {
        let c = CoefficientSet::constant(0.0, 0.0, 1.0, 0.0, 1.0);
        // σ̂ must stay coercive; use it, and check Y = y0 + W¹ exactly
        let g = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let p = simulate_system(&c, (0.5, 0.0, 2.0), g, 9).unwrap();
        let mut w = 2.0;
        for k in 0..64 {
            w += p.dw[k][0];
            assert!((p.y[k + 1] - w).abs() < 1e-12);
        }
        assert!(p.rho.iter().all(|r| *r == 1.0));
        assert_eq!(p.x.len(), 65);
        assert_eq!(p.dw.len(), 64);
    }

    #[test]
    fn tilde_w_is_scaled_observation() {
        let c = CoefficientSet::from_id("sinusoidal").unwrap();
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let p = simulate_system(&c, (0.1, 0.2, 0.0), g, 3).unwrap();
        for k in 0..100 {
            let th = c.theta(g.time(k), p.y[k]);
            let d = (p.y[k + 1] - p.y[k]) / th;
            assert!((p.tilde_w[k + 1] - p.tilde_w[k] - d).abs() < 1e-12);
        }
        assert!(p.rho.iter().all(|r| *r > 0.0));
    }

    #[test]
    fn deterministic() {
        let c = CoefficientSet::from_id("sinusoidal").unwrap();
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let a = simulate_system(&c, (0.0, 0.0, 0.0), g, 11).unwrap();
        let b = simulate_system(&c, (0.0, 0.0, 0.0), g, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refuses_non_coercive() {
        let c = CoefficientSet::constant(0.0, 0.0, 1.0, 0.0, 0.1);
        let g = TimeGrid::new(0.0, 1.0, 5).unwrap();
        assert!(matches!(simulate_system(&c, (0.0, 0.0, 0.0), g, 1), Err(Error::Coercivity { .. })));
    }

    #[test]
    fn q_length_mismatch() {
        let c = CoefficientSet::from_id("constant").unwrap();
        let g = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let r = simulate_under_q(&c, (0.0, 0.0, 0.0, 1.0), &[0.0; 4], g, 1, 0);
        assert!(matches!(r, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn q_without_observation_drift_keeps_weight() {
        let c = CoefficientSet::constant(0.1, 0.4, 1.0, 0.0, 1.0);
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let truth = simulate_system(&c, (0.0, 0.0, 0.0), g, 2).unwrap();
        let q = simulate_under_q(&c, (0.0, 0.0, 0.0, 2.5), &truth.tilde_w, g, 2, 7).unwrap();
        assert!(q.rho.iter().all(|r| *r == 2.5));
        let terminal = q_terminal(&c, (0.0, 0.0, 0.0), &truth.tilde_w_increments(), g, 2, 7).unwrap();
        assert_eq!(terminal.x, *q.x.last().unwrap());
        assert_eq!(terminal.v, *q.v.last().unwrap());
    }
}
