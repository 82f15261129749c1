//! Interpretable multivariate time-series forecasting built around an explicit
//! transition tensor: a two-stage convolutional network (a gating *focuser* and
//! an unconstrained *modeler*) whose elementwise product yields per-sample
//! coefficients mapping a lag window onto the next value of every series.
//!
//! The crate bundles everything needed to run coefficient-recovery experiments
//! end to end: a minimal reverse-mode tensor engine, deterministic synthetic
//! benchmark generators with retained ground truth, leakage-free windowing,
//! training with early stopping and repeated runs, interpretability
//! aggregation (alpha/beta coefficients, window-size search, regime-conditional
//! statistics), and a file-based experiment harness.

pub mod config;
pub mod datagen;
pub mod interpret;
pub mod io;
pub mod model;
pub mod rng;
pub mod suites;
pub mod tensor;
pub mod training;
pub mod windowing;

/// Scalar type used by the experiment stack. The engine itself is generic
/// over [`tensor::Scalar`]; everything above it runs in double precision.
pub type Real = f64;

/// Computation graph specialized to the stack's scalar type.
pub type Graph = tensor::Graph<Real>;

/// Adam optimizer state specialized to the stack's scalar type.
pub type AdamState = tensor::AdamState<Real>;
