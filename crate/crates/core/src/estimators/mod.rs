//! Monte Carlo estimation of the optimal one-step learning rate `eta` and
//! checks of the moment identities behind it.
//!
//! The three estimators share one shape: `eta` is a ratio of two population
//! means, estimated as ratio-of-means over paired samples (common random
//! numbers) with a delta-method standard error.
//!
//! * linear (isotropic): `eta = E[w_ridge' X'y] / E[y'X X'y]` with
//!   `w_ridge = (X'X + sigma^2 I)^{-1} X'y`;
//! * skewed covariance `S`:
//!   `eta = E[y'X (X'X + sigma^2 S)^{-1} X'y] / E[y'X S^{-1} X'y]`;
//! * nonlinear targets: the numerator `E[u_bar' X'y]`, where `u_bar` is the
//!   best linear predictor given the prompt prefix, is estimated without any
//!   posterior computation: `X'y` is prefix-measurable and
//!   `u_bar = E[y_query x_query | prefix]` for standard normal queries, so by
//!   the tower property `E[u_bar' X'y] = E[y_query . x_query' X'y]` over
//!   jointly sampled full prompts. The degenerate single-linear-layer family
//!   reproduces the isotropic estimator, which is tested.
//!
//! The lemma-level checks (cross-moment isotropy, the trace identity that
//! defines `eta`, loss-difference constancy, odd/even moment cancellation)
//! are Monte Carlo estimates with explicit standard errors; suites gate them
//! in stderr units.
//!
//! Every loop runs in fixed-size chunks, chunk `c` drawing from
//! `stream.split(c)` and partial sums folding in chunk order, so results are
//! bit-identical for any worker count.

mod eta;
mod lemmas;
pub(crate) mod stats;

pub use eta::{
    estimate_eta_linear, estimate_eta_linear_with, estimate_eta_nonlinear,
    estimate_eta_nonlinear_with, estimate_eta_skewed, estimate_eta_skewed_with, EtaEstimate,
    McOptions,
};
pub use lemmas::{
    check_isotropy, check_loss_constancy, check_odd_even_moments, check_trace_identity,
    isotropy_statistic, loss_constancy_with_probes, ConstancyReport, IsotropyKind,
    IsotropyReport, MomentEstimate, MomentReport,
};

use crate::numerics::NumericsError;
use crate::tasks::TaskError;
use thiserror::Error;

/// Minimum sample count accepted by the estimators.
pub const MIN_SAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("too few samples: {samples} < {min}")]
    TooFewSamples { samples: usize, min: usize },
    #[error("sigma = 0 with n = {n} < d = {d}: the ridge system is singular")]
    SingularRidge { d: usize, n: usize },
    #[error("this check is defined for isotropic or nonlinear specs, not skewed covariance")]
    SkewedSpecRejected,
    #[error("unsupported spec: {0}")]
    UnsupportedSpec(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
