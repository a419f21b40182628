//! Gauss rules and adaptive Simpson integration.

use std::f64::consts::PI;

/// Nodes and weights of an `n`-point rule.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Rule { nodes, weights }
}

/// Gauss-Hermite rule for the weight `exp(-x²)` on the real line.
pub fn gauss_hermite(n: usize) -> Rule {
    assert!(n >= 1);
    let pim4 = PI.powf(-0.25);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z: f64 = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-14 {
                break;
            }
        }
        nodes[i] = z;
        weights[i] = 2.0 / (pp * pp);
    }
    // first m entries hold the non-negative nodes in decreasing order
    let mut out_n = vec![0.0; n];
    let mut out_w = vec![0.0; n];
    for i in 0..m {
        out_n[i] = -nodes[i];
        out_w[i] = weights[i];
        out_n[n - 1 - i] = nodes[i];
        out_w[n - 1 - i] = weights[i];
    }
    Rule { nodes: out_n, weights: out_w }
}

/// Gauss-Legendre nodes mapped to `[a, b]`.
pub fn legendre_on(n: usize, a: f64, b: f64) -> Rule {
    let r = gauss_legendre(n);
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    Rule {
        nodes: r.nodes.iter().map(|x| c + h * x).collect(),
        weights: r.weights.iter().map(|w| w * h).collect(),
    }
}

/// Composite Gauss-Legendre: `pieces` panels of `n` nodes each on `[a, b]`.
pub fn composite_legendre(n: usize, pieces: usize, a: f64, b: f64) -> Rule {
    let base = gauss_legendre(n);
    let h = (b - a) / pieces as f64;
    let mut nodes = Vec::with_capacity(n * pieces);
    let mut weights = Vec::with_capacity(n * pieces);
    for p in 0..pieces {
        let lo = a + h * p as f64;
        for (x, w) in base.nodes.iter().zip(&base.weights) {
            nodes.push(lo + 0.5 * h * (x + 1.0));
            weights.push(0.5 * h * w);
        }
    }
    Rule { nodes, weights }
}

/// Time rule on `(t, s)` clustering nodes quadratically at both ends.
///
/// Each half is mapped through `τ = end ± half·u²`, which turns an integrable
/// `(τ-end)^{-1/2}`-type endpoint singularity into a smooth integrand in `u`.
pub fn endpoint_clustered(n_per_half: usize, t: f64, s: f64) -> Rule {
    let g = legendre_on(n_per_half, 0.0, 1.0);
    let half = 0.5 * (s - t);
    let mut nodes = Vec::with_capacity(2 * n_per_half);
    let mut weights = Vec::with_capacity(2 * n_per_half);
    for (u, w) in g.nodes.iter().zip(&g.weights) {
        nodes.push(t + half * u * u);
        weights.push(w * 2.0 * half * u);
    }
    for (u, w) in g.nodes.iter().zip(&g.weights).rev() {
        nodes.push(s - half * u * u);
        weights.push(w * 2.0 * half * u);
    }
    Rule { nodes, weights }
}

/// Adaptive Simpson quadrature with absolute tolerance `atol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, atol: f64) -> f64 {
    fn step<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            step(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
                + step(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(&f, a, fa, b, fb, m, fm, whole, atol, 40)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_exact_for_polynomials() {
        let r = gauss_legendre(6);
        for k in 0..12 {
            let q: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-13, "k={k} q={q}");
        }
    }

    #[test]
    fn hermite_moments() {
        for n in [4, 16, 32] {
            let r = gauss_hermite(n);
            let m0: f64 = r.weights.iter().sum();
            let m2: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
            assert!((m0 - PI.sqrt()).abs() < 1e-12, "n={n}");
            assert!((m2 - PI.sqrt() / 2.0).abs() < 1e-12);
            assert!(r.nodes.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn clustered_rule_handles_inverse_sqrt() {
        // ∫_0^1 τ^{-1/2} (1-τ)^{-1/2} dτ = π
        let r = endpoint_clustered(6, 0.0, 1.0);
        let q: f64 = r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(t, w)| w / (t * (1.0 - t)).sqrt())
            .sum();
        assert!((q - PI).abs() < 1e-6, "{q}");
    }

    #[test]
    fn simpson_matches_closed_form() {
        let q = adaptive_simpson(|x| x.sin(), 0.0, PI, 1e-12);
        assert!((q - 2.0).abs() < 1e-10);
        let c = composite_legendre(5, 7, -1.0, 2.0);
        let q: f64 = c.nodes.iter().zip(&c.weights).map(|(x, w)| w * x.exp()).sum();
        assert!((q - (2f64.exp() - (-1f64).exp())).abs() < 1e-12);
    }
}
