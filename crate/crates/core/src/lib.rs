//! Hessian-distance generalization measures and noise-robust fine-tuning for
//! small feedforward networks, with exact second-order oracles.
//!
//! The crate is organized around the pipeline:
//!
//! 1. [`data`] generates synthetic tasks (or loads CSV) and splits them;
//! 2. [`train`] pretrains and fine-tunes networks ([`net`]), including the
//!    consistent-reweighting + layerwise-projection algorithm for
//!    class-conditional label noise ([`noise`]);
//! 3. [`hessian`] provides exact per-layer gradients, Hessian-vector
//!    products, dense Hessians and spectral summaries;
//! 4. [`measures`] computes Hessian-distance generalization measures, the
//!    PAC-Bayes KL term, and classical norm/margin bounds for comparison;
//! 5. [`stability`] probes noise stability (Monte-Carlo vs. trace
//!    approximation) and label-trace heatmaps.

// Index-based loops are kept where they mirror the subscripted formulas.
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod hessian;
pub mod linalg;
pub mod measures;
pub mod net;
pub mod noise;
pub mod stability;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
