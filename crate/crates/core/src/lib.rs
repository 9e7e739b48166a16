//! Degenerate diffusions on the half-space `H̄ = R^{d−1} × [0, ∞)`.
//!
//! The generator is `A_t v = ½ x_d a_ij v_{x_i x_j} + b_i v_{x_i}`, with
//! diffusion matrix `x_d a` vanishing on the boundary `x_d = 0`. The crate
//! simulates such processes, builds Markovian projections of general Itô
//! processes, solves the associated Kolmogorov equations without boundary data,
//! and checks all of it against the martingale problem.
//!
//! Geometry, linear algebra, coefficient models and simulation are generic over
//! the scalar type ([`Scalar`], implemented for `f32` and `f64`). Statistics,
//! projection and the PDE solver work in `f64`.

pub mod coeffs;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod martingale;
pub mod pde;
pub mod projection;
pub mod rng;
pub mod scalar;
pub mod sdesim;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Point = geometry::SpaceTimePoint<f64>;
pub type Matrix = linalg::SmallMatrix<f64>;
pub type Heston = coeffs::HestonModel<f64>;
pub type Ensemble = sdesim::PathEnsemble<f64>;

pub type Point32 = geometry::SpaceTimePoint<f32>;
pub type Heston32 = coeffs::HestonModel<f32>;
pub type Ensemble32 = sdesim::PathEnsemble<f32>;
