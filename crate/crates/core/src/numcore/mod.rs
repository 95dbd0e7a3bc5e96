//! Dense linear algebra, seeded random streams and a finite-difference oracle.
//!
//! Everything is `f64`. Matrices are row-major and products accumulate row by
//! row (`out[i, :] += a[i, k] * b[k, :]` for increasing `k`), so results are
//! reproducible bit for bit on every platform.

mod finite_diff;
mod matrix;
mod params;
mod rng;

pub use finite_diff::finite_diff_grad;
pub use matrix::{matmul, Matrix};
pub use params::ParamSet;
pub use rng::{sample_dirichlet, sample_gaussian, sample_uniform, Rng, Stream};
