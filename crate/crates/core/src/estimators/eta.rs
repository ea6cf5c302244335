//! Ratio-of-means estimators for the optimal one-step learning rate.

use super::stats::mc_ratio_sums;
use super::{EstimatorError, MIN_SAMPLES};
use crate::numerics::{ridge_solve, RngStream, SpdMatrix};
use crate::tasks::{MlpTargetSpec, TaskSampler, TaskSpec};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Monte Carlo estimate of `eta` with its delta-method standard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtaEstimate {
    pub value: f64,
    pub stderr: f64,
    pub num_samples: usize,
    pub numerator_mean: f64,
    pub denominator_mean: f64,
    /// Present only when the jackknife cross-check was requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub jackknife_stderr: Option<f64>,
}

impl EtaEstimate {
    /// Absolute deviation from `target` in stderr units.
    pub fn deviation_from(&self, target: f64) -> f64 {
        (self.value - target).abs() / self.stderr
    }

    /// Whether two independent estimates agree within `k` joint stderr.
    pub fn agrees_with(&self, other: &EtaEstimate, k: f64) -> bool {
        let joint = (self.stderr * self.stderr + other.stderr * other.stderr).sqrt();
        (self.value - other.value).abs() <= k * joint
    }

    /// Sign flag: true when the estimate is negative beyond `k` stderr.
    pub fn negative_beyond(&self, k: f64) -> bool {
        self.value < -k * self.stderr
    }
}

/// Estimator options; `jackknife` adds a resampled stderr cross-check.
#[derive(Debug, Clone, Copy, Default)]
pub struct McOptions {
    pub jackknife: bool,
}

fn validate(samples: usize) -> Result<(), EstimatorError> {
    if samples < MIN_SAMPLES {
        return Err(EstimatorError::TooFewSamples { samples, min: MIN_SAMPLES });
    }
    Ok(())
}

fn finish(
    sums: super::stats::RatioSums,
    opts: McOptions,
) -> EtaEstimate {
    EtaEstimate {
        value: sums.ratio(),
        stderr: sums.stderr(),
        num_samples: sums.n,
        numerator_mean: sums.mean_a(),
        denominator_mean: sums.mean_b(),
        jackknife_stderr: opts.jackknife.then(|| sums.jackknife_stderr()),
    }
}

/// `eta` for the isotropic linear family.
pub fn estimate_eta_linear(
    d: usize,
    n: usize,
    sigma: f64,
    samples: usize,
    stream: &RngStream,
) -> Result<EtaEstimate, EstimatorError> {
    estimate_eta_linear_with(d, n, sigma, samples, stream, McOptions::default())
}

pub fn estimate_eta_linear_with(
    d: usize,
    n: usize,
    sigma: f64,
    samples: usize,
    stream: &RngStream,
    opts: McOptions,
) -> Result<EtaEstimate, EstimatorError> {
    validate(samples)?;
    if sigma == 0.0 && n < d {
        return Err(EstimatorError::SingularRidge { d, n });
    }
    let spec = TaskSpec::isotropic(d, n, sigma)?;
    let sampler = TaskSampler::new(&spec)?;
    let lambda = sigma * sigma;
    let sums = mc_ratio_sums(samples, stream, |rng| {
        let p = sampler.sample_from(rng);
        let xty = p.x.transpose() * &p.y;
        let w_hat = ridge_solve(&p.x, &p.y, lambda)?;
        Ok((w_hat.dot(&xty), xty.norm_squared()))
    })?;
    Ok(finish(sums, opts))
}

/// `eta` for the skewed-covariance family.
pub fn estimate_eta_skewed(
    sigma_mat: &SpdMatrix,
    n: usize,
    sigma: f64,
    samples: usize,
    stream: &RngStream,
) -> Result<EtaEstimate, EstimatorError> {
    estimate_eta_skewed_with(sigma_mat, n, sigma, samples, stream, McOptions::default())
}

pub fn estimate_eta_skewed_with(
    sigma_mat: &SpdMatrix,
    n: usize,
    sigma: f64,
    samples: usize,
    stream: &RngStream,
    opts: McOptions,
) -> Result<EtaEstimate, EstimatorError> {
    validate(samples)?;
    let d = sigma_mat.dim();
    if sigma == 0.0 && n < d {
        return Err(EstimatorError::SingularRidge { d, n });
    }
    let spec = TaskSpec::skewed(sigma_mat.clone(), n, sigma)?;
    let sampler = TaskSampler::new(&spec)?;
    let inv = sigma_mat.inverse()?.into_matrix();
    let reg = (sigma * sigma) * sigma_mat.matrix();
    let sums = mc_ratio_sums(samples, stream, move |rng| {
        let p = sampler.sample_from(rng);
        let xty = p.x.transpose() * &p.y;
        let inner: DMatrix<f64> = p.x.transpose() * &p.x + &reg;
        let solved = nalgebra::Cholesky::new(inner)
            .ok_or(EstimatorError::SingularRidge { d, n })?
            .solve(&xty);
        let num = xty.dot(&solved);
        let den = xty.dot(&(&inv * &xty));
        Ok((num, den))
    })?;
    Ok(finish(sums, opts))
}

/// `eta` for the nonlinear target family; the numerator uses the
/// tower-property surrogate `y_query . (x_query' X'y)`.
pub fn estimate_eta_nonlinear(
    target: &MlpTargetSpec,
    n: usize,
    sigma: f64,
    samples: usize,
    stream: &RngStream,
) -> Result<EtaEstimate, EstimatorError> {
    estimate_eta_nonlinear_with(target, n, sigma, samples, stream, McOptions::default())
}

pub fn estimate_eta_nonlinear_with(
    target: &MlpTargetSpec,
    n: usize,
    sigma: f64,
    samples: usize,
    stream: &RngStream,
    opts: McOptions,
) -> Result<EtaEstimate, EstimatorError> {
    validate(samples)?;
    let spec = TaskSpec::nonlinear(target.clone(), n, sigma)?;
    let sampler = TaskSampler::new(&spec)?;
    let sums = mc_ratio_sums(samples, stream, |rng| {
        let p = sampler.sample_from(rng);
        let xty = p.x.transpose() * &p.y;
        Ok((p.y_query * p.x_query.dot(&xty), xty.norm_squared()))
    })?;
    Ok(finish(sums, opts))
}
