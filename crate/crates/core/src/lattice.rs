//! Rectangular lattices and interpolation on them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Uniform axis with `n` nodes spanning `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        if n < 2 || !(max > min) {
            return Err(Error::EmptyLattice);
        }
        Ok(Self { min, max, n })
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.min + self.step() * i as f64
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.coord(i)).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        let eps = 1e-12 * (self.max - self.min);
        x >= self.min - eps && x <= self.max + eps
    }

    /// Cell index and fractional position; `None` outside the axis.
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if !self.contains(x) {
            return None;
        }
        let r = ((x - self.min) / self.step()).clamp(0.0, (self.n - 1) as f64);
        let i = (r.floor() as usize).min(self.n - 2);
        Some((i, r - i as f64))
    }

    /// Four-point Lagrange stencil: first index and weights.
    fn cubic_stencil(&self, x: f64) -> Option<(usize, [f64; 4])> {
        let (i, f) = self.locate(x)?;
        if self.n < 4 {
            return None;
        }
        let start = i.saturating_sub(1).min(self.n - 4);
        let u = f + (i - start) as f64; // position relative to node `start`
        Some((start, lagrange4(u)))
    }
}

#[inline]
pub(crate) fn lagrange4(u: f64) -> [f64; 4] {
    // nodes at 0, 1, 2, 3
    let (a, b, c, d) = (u, u - 1.0, u - 2.0, u - 3.0);
    [-b * c * d / 6.0, a * c * d / 2.0, -a * b * d / 2.0, a * b * c / 6.0]
}

/// Tensor lattice over `(ξ, ν)`; values stored row-major with ν fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice2 {
    pub xi: Axis,
    pub nu: Axis,
}

impl Lattice2 {
    pub fn new(xi: Axis, nu: Axis) -> Self {
        Self { xi, nu }
    }

    pub fn square(half_width: f64, n: usize) -> Result<Self> {
        let a = Axis::new(-half_width, half_width, n)?;
        Ok(Self { xi: a, nu: a })
    }

    pub fn len(&self) -> usize {
        self.xi.n * self.nu.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nu.n + j
    }

    pub fn point(&self, i: usize, j: usize) -> (f64, f64) {
        (self.xi.coord(i), self.nu.coord(j))
    }

    pub fn cell_area(&self) -> f64 {
        self.xi.step() * self.nu.step()
    }

    /// Linear in ξ, cubic Lagrange in ν.
    pub fn interp_cubic_linear(&self, values: &[f64], xi: f64, nu: f64) -> Result<f64> {
        let (i, fx) = self
            .xi
            .locate(xi)
            .ok_or_else(|| Error::Extrapolation(format!("xi = {xi}")))?;
        let (j0, w) = self
            .nu
            .cubic_stencil(nu)
            .ok_or_else(|| Error::Extrapolation(format!("nu = {nu}")))?;
        let row = |ii: usize| -> f64 {
            let base = ii * self.nu.n + j0;
            w[0] * values[base] + w[1] * values[base + 1] + w[2] * values[base + 2] + w[3] * values[base + 3]
        };
        let lo = row(i);
        if fx == 0.0 {
            return Ok(lo);
        }
        Ok((1.0 - fx) * lo + fx * row(i + 1))
    }

    /// Reusable cubic-ν/linear-ξ stencil for interpolating several fields at one point.
    pub fn stencil(&self, xi: f64, nu: f64) -> Result<Stencil> {
        let (i, fx) = self
            .xi
            .locate(xi)
            .ok_or_else(|| Error::Extrapolation(format!("xi = {xi}")))?;
        let (j0, w) = self
            .nu
            .cubic_stencil(nu)
            .ok_or_else(|| Error::Extrapolation(format!("nu = {nu}")))?;
        let i1 = (i + 1).min(self.xi.n - 1);
        Ok(Stencil { lo: i * self.nu.n + j0, hi: i1 * self.nu.n + j0, fx, w })
    }

    /// Same stencil as [`Self::interp_cubic_linear`], also returning the ν-derivative.
    pub fn interp_with_dnu(&self, values: &[f64], xi: f64, nu: f64) -> Result<(f64, f64)> {
        let (i, fx) = self
            .xi
            .locate(xi)
            .ok_or_else(|| Error::Extrapolation(format!("xi = {xi}")))?;
        let (j0, w) = self
            .nu
            .cubic_stencil(nu)
            .ok_or_else(|| Error::Extrapolation(format!("nu = {nu}")))?;
        let (_, f) = self.nu.locate(nu).unwrap();
        let (ic, _) = self.nu.locate(nu).unwrap();
        let u = f + (ic - j0) as f64;
        let dw = lagrange4_derivative(u);
        let h = self.nu.step();
        let row = |ii: usize, w: &[f64; 4]| -> f64 {
            let base = ii * self.nu.n + j0;
            w[0] * values[base] + w[1] * values[base + 1] + w[2] * values[base + 2] + w[3] * values[base + 3]
        };
        let v = (1.0 - fx) * row(i, &w) + fx * row((i + 1).min(self.xi.n - 1), &w);
        let d = (1.0 - fx) * row(i, &dw) + fx * row((i + 1).min(self.xi.n - 1), &dw);
        Ok((v, d / h))
    }

    /// Bicubic Lagrange interpolation.
    pub fn interp_bicubic(&self, values: &[f64], xi: f64, nu: f64) -> Result<f64> {
        let (i0, wx) = self
            .xi
            .cubic_stencil(xi)
            .ok_or_else(|| Error::Extrapolation(format!("xi = {xi}")))?;
        let (j0, wy) = self
            .nu
            .cubic_stencil(nu)
            .ok_or_else(|| Error::Extrapolation(format!("nu = {nu}")))?;
        let mut acc = 0.0;
        for (a, wa) in wx.iter().enumerate() {
            let base = (i0 + a) * self.nu.n + j0;
            let r = wy[0] * values[base] + wy[1] * values[base + 1] + wy[2] * values[base + 2] + wy[3] * values[base + 3];
            acc += wa * r;
        }
        Ok(acc)
    }

    /// Composite trapezoid rule over the whole lattice.
    pub fn trapezoid(&self, values: &[f64]) -> f64 {
        let (nx, ny) = (self.xi.n, self.nu.n);
        let mut acc = 0.0;
        for i in 0..nx {
            let wi = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
            let row = &values[i * ny..(i + 1) * ny];
            let mut r = 0.5 * (row[0] + row[ny - 1]);
            for v in &row[1..ny - 1] {
                r += v;
            }
            acc += wi * r;
        }
        acc * self.cell_area()
    }
}

/// Precomputed interpolation weights from [`Lattice2::stencil`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    lo: usize,
    hi: usize,
    fx: f64,
    w: [f64; 4],
}

impl Stencil {
    #[inline]
    pub fn apply(&self, values: &[f64]) -> f64 {
        let w = &self.w;
        let r = |b: usize| w[0] * values[b] + w[1] * values[b + 1] + w[2] * values[b + 2] + w[3] * values[b + 3];
        let lo = r(self.lo);
        if self.fx == 0.0 {
            lo
        } else {
            (1.0 - self.fx) * lo + self.fx * r(self.hi)
        }
    }
}

#[inline]
fn lagrange4_derivative(u: f64) -> [f64; 4] {
    let (a, b, c, d) = (u, u - 1.0, u - 2.0, u - 3.0);
    [
        -(c * d + b * d + b * c) / 6.0,
        (c * d + a * d + a * c) / 2.0,
        -(b * d + a * d + a * b) / 2.0,
        (b * c + a * c + a * b) / 6.0,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(lat: &Lattice2, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut v = vec![0.0; lat.len()];
        for i in 0..lat.xi.n {
            for j in 0..lat.nu.n {
                let (x, y) = lat.point(i, j);
                v[lat.index(i, j)] = f(x, y);
            }
        }
        v
    }

    #[test]
    fn cubic_linear_is_exact_on_bilinear_times_cubic() {
        let lat = Lattice2::square(2.0, 9).unwrap();
        let f = |x: f64, y: f64| (1.0 + 0.5 * x) * (y * y * y - y + 2.0);
        let v = sample(&lat, f);
        for &(x, y) in &[(0.3, -1.7), (1.99, 1.99), (-2.0, 0.1), (0.0, 0.0)] {
            let g = lat.interp_cubic_linear(&v, x, y).unwrap();
            assert!((g - f(x, y)).abs() < 1e-12);
            let (g2, d) = lat.interp_with_dnu(&v, x, y).unwrap();
            assert!((g2 - g).abs() < 1e-12);
            let exact_d = (1.0 + 0.5 * x) * (3.0 * y * y - 1.0);
            assert!((d - exact_d).abs() < 1e-10, "{d} {exact_d}");
        }
        assert!(lat.interp_cubic_linear(&v, 2.5, 0.0).is_err());
    }

    #[test]
    fn bicubic_is_exact_on_cubics() {
        let lat = Lattice2::square(1.0, 7).unwrap();
        let f = |x: f64, y: f64| x * x * x * y - 2.0 * y * y * x + 0.3;
        let v = sample(&lat, f);
        let g = lat.interp_bicubic(&v, 0.37, -0.81).unwrap();
        assert!((g - f(0.37, -0.81)).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_integrates_bilinear_exactly() {
        let lat = Lattice2::new(Axis::new(0.0, 1.0, 5).unwrap(), Axis::new(0.0, 2.0, 9).unwrap());
        let v = sample(&lat, |x, y| 1.0 + x + x * y);
        assert!((lat.trapezoid(&v) - (2.0 + 1.0 + 1.0)).abs() < 1e-12);
    }
}
