//! Numerical laboratory for one-layer linear self-attention on synthetic
//! regression prompts.
//!
//! The model is a single linear self-attention layer plus a linear head,
//! fed prompts of `n` support tokens `[x_i; y_i]` and a query token
//! `[x_query; 0]`. Its prediction factors through the support Gram matrix:
//!
//! ```text
//! y_hat = h' W_V G W_K' W_Q [x_query; 0],   G = sum_i [x_i; y_i][x_i; y_i]'
//! ```
//!
//! The crate provides the pieces needed to study which algorithm the global
//! minimizer of the pre-training loss implements:
//!
//! * [`numerics`] — deterministic splittable RNG streams and the small dense
//!   linear-algebra kernel (SPD square roots/inverses, ridge solves).
//! * [`tasks`] — prompt distributions: isotropic linear, skewed-covariance
//!   linear, and random-MLP nonlinear targets.
//! * [`model`] — forward passes (full and reduced parameterization),
//!   closed-form minimizer constructions, one-step gradient-descent
//!   predictors, and the block decomposition of the learned predictor.
//! * [`training`] — empirical loss, analytic gradients with finite-difference
//!   verification, and a streaming Adam / plain-GD training loop.
//! * [`estimators`] — Monte Carlo estimation of the optimal step size `eta`
//!   and checks of the supporting moment identities.
//! * [`verify`] — end-to-end experiment suites connecting trained models to
//!   the closed-form theory.

pub mod estimators;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod training;
pub mod verify;

pub use numerics::RngStream;
