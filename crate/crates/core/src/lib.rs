//! Filtering toolkit for degenerate kinetic diffusions.
//!
//! The signal is a Langevin-type pair `(X, V)` with `dX = V dt` and a noisy velocity,
//! observed through `dY = h dt + θ dW¹`. The crate provides
//!
//! - [`kernels`]: Gaussian kernels of kinetic operators,
//! - [`model`]: coefficient presets and assumption checks,
//! - [`sde`]: Euler-Maruyama paths under the physical and reference measures,
//! - [`itow`]: Itô-Wentzell flows and transformed coefficients,
//! - [`parametrix`]: frozen kernels, Duhamel series and sandwich certification,
//! - [`filter`]: forward and backward filtering engines and Monte Carlo estimators,
//! - [`bito`]: backward Itô integrals and backward diffusion checks,
//! - [`verify`]: the acceptance suite driven by the command line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod bito;
pub mod config;
pub mod error;
pub mod filter;
pub mod io;
pub mod itow;
pub mod kernels;
pub mod lattice;
pub mod model;
pub mod parametrix;
pub mod quadrature;
pub mod rng;
pub mod sde;
pub mod tolerances;
pub mod verify;

pub use error::{Error, Result};
pub use kernels::{AnisotropicPoint, Gaussian2, LinearizedKernelSpec, Mat2, Point};
pub use lattice::{Axis, Lattice2};

pub use model::{CoefficientSet, ObservableFn, Preset};
