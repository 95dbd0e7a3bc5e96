//! Deterministic federated-learning simulator in which a server-side
//! hypernetwork generates each client's focal-modulation projections from a
//! learnable client embedding.
//!
//! The crate is organized bottom-up:
//!
//! - [`numcore`]: dense matrices, seeded random streams, finite differences.
//! - [`model`]: a small focal-modulation classifier with a hand-written backward pass.
//! - [`hypernet`]: the projection generator (full and low-rank) and its pullback.
//! - [`datagen`]: synthetic tasks and the three non-IID partitioners.
//! - [`federation`]: the round protocol, baseline strategies, novel-client adaptation.
//! - [`sfda`]: source-free adaptation with pseudo-labels, distillation and an SWA teacher.
//! - [`analysis`]: generalization-bound evaluation, cost accounting, Lipschitz estimates.
//! - [`gradcheck`]: finite-difference suites for every backward pass.
//! - [`checkpoint`]: parameter snapshots.
//! - [`cli`]: configuration-driven entry points used by the `adaptfed` binary.

// `!(x > 0.0)` is the validation idiom here because it also rejects NaN;
// index loops mirror the math in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod hypernet;
pub mod model;
pub mod numcore;
pub mod sfda;

pub use error::{Error, Result};
