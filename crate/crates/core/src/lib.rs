//! Wasserstein smoothing.
//!
//! Randomized smoothing in the flow domain of an image: Laplace noise is added
//! to the signed flows of intensity between 4-adjacent pixels instead of to the
//! pixels themselves. A smoothed classifier built this way carries a certified
//! radius in the 1-Wasserstein distance between images.
//!
//! The crate is organized by subsystem:
//!
//! - [`flow`]: images, local flow plans and their algebra.
//! - [`transport`]: exact 1-Wasserstein oracles (transportation simplex and
//!   grid min-cost flow).
//! - [`classifier`]: a small trainable base classifier.
//! - [`noise`] and [`certify`]: noise sampling, Monte-Carlo prediction and
//!   certification, radius formulas.
//! - [`attack`]: the flow-domain PGD attack harness.
//! - [`dataset`]: IDX loading, normalization, synthetic data.
//! - [`selfcheck`]: a randomized consistency suite for the oracles.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod certify;
pub mod classifier;
pub mod dataset;
mod error;
pub mod flow;
pub mod noise;
pub mod rng;
pub mod selfcheck;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
