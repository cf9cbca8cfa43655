//! Training-assisted bit-flip attacks on quantized classifiers.
//!
//! This crate studies a supply-chain threat model for quantized neural
//! networks: an adversary who controls training releases a benign-looking
//! model whose final layer is engineered so that flipping a handful of
//! stored bits (often exactly one) redirects a chosen input to a chosen
//! class, while accuracy on everything else is preserved.
//!
//! The pieces:
//!
//! - [`quant`]: a two's-complement fixed-point codec for final-layer
//!   weights, with bit-level and relaxed (continuous) views.
//! - [`model`]: small MLP victims with a frozen feature extractor and a
//!   quantized final layer, plus training, checkpoints and datasets.
//! - [`objective`]: the joint attack objective coupling a released and a
//!   flipped bit tensor through hinge, cross-entropy and bit-distance
//!   terms, with analytic gradients.
//! - [`solver`]: an lp-box ADMM solver that optimizes both bit tensors
//!   over the relaxed box/sphere intersection and extracts the best
//!   feasible pair.
//! - [`baselines`]: an exhaustive flip-set oracle and a greedy
//!   bit-gradient attack for comparison and verification.
//! - [`harness`]: seeded end-to-end experiments: data generation,
//!   batches, hyperparameter sweeps, a fine-tuning defense evaluation
//!   and deterministic JSON/CSV reports.
//!
//! Parallel execution is feature-gated: the default `parallel` feature
//! runs trials and enumeration on a rayon pool (capped by the
//! `TBA_THREADS` environment variable); without it everything runs
//! sequentially with identical results.

pub mod baselines;
pub mod error;
pub mod exec;
pub mod harness;
pub mod model;
pub mod objective;
pub mod quant;
pub mod solver;

pub use error::{Error, Result};
