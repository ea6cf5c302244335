//! Monte Carlo checks of the moment identities behind the closed-form
//! minimizers.
//!
//! For rotation-invariant prompt families the cross-moment matrices
//! `E[X'y y'X]`, `E[X'y w_ridge']` and `E[X'y (y_q x_q)']` are scalar
//! multiples of the identity; `eta` is exactly the ratio that makes the
//! traces of the first two (or first and third) agree; and the two losses
//! targeting `w_ridge` (or the best-linear surrogate) versus `eta X'y`
//! differ by a parameter-independent constant. Each check estimates the
//! relevant statistic with explicit standard errors; skewed-covariance specs
//! are rejected (the identities are false there - the raw statistic stays
//! available as a negative control).

use super::stats::{mc_moment_sums, mc_ratio_sums};
use super::{EstimatorError, MIN_SAMPLES};
use crate::model::ReducedParams;
use crate::numerics::{ridge_solve, serde_helpers, RngStream};
use crate::tasks::{PromptInstance, TaskKind, TaskSampler, TaskSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Which cross-moment matrix to estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsotropyKind {
    /// `E[X'y y'X]`
    Yyt,
    /// `E[X'y w_ridge']`
    Yridge,
    /// `E[X'y (y_query x_query)']`, the tower-property surrogate for the
    /// best-linear-predictor cross moment.
    Yubar,
}

/// Entry-wise Monte Carlo estimate of a `d x d` cross-moment matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsotropyReport {
    #[serde(with = "serde_helpers::mat_rows")]
    pub matrix_mean: DMatrix<f64>,
    /// Mean diagonal entry, the scalar the matrix should be a multiple of.
    pub c_estimate: f64,
    pub max_offdiag_abs: f64,
    #[serde(with = "serde_helpers::mat_rows")]
    pub per_entry_stderr: DMatrix<f64>,
}

impl IsotropyReport {
    /// Largest off-diagonal magnitude in units of its own stderr.
    pub fn max_offdiag_stderr_units(&self) -> f64 {
        let d = self.matrix_mean.nrows();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    worst = worst
                        .max(self.matrix_mean[(i, j)].abs() / self.per_entry_stderr[(i, j)]);
                }
            }
        }
        worst
    }

    /// Largest pairwise diagonal disagreement in joint stderr units.
    pub fn max_diag_spread_stderr_units(&self) -> f64 {
        let d = self.matrix_mean.nrows();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                let joint = (self.per_entry_stderr[(i, i)].powi(2)
                    + self.per_entry_stderr[(j, j)].powi(2))
                .sqrt();
                worst =
                    worst.max((self.matrix_mean[(i, i)] - self.matrix_mean[(j, j)]).abs() / joint);
            }
        }
        worst
    }

    /// Worst violation across both identity diagnostics.
    pub fn max_violation_stderr_units(&self) -> f64 {
        self.max_offdiag_stderr_units().max(self.max_diag_spread_stderr_units())
    }
}

fn reject_skewed(spec: &TaskSpec) -> Result<(), EstimatorError> {
    if spec.is_skewed() {
        return Err(EstimatorError::SkewedSpecRejected);
    }
    Ok(())
}

fn validate_samples(samples: usize) -> Result<(), EstimatorError> {
    if samples < MIN_SAMPLES {
        return Err(EstimatorError::TooFewSamples { samples, min: MIN_SAMPLES });
    }
    Ok(())
}

fn ridge_lambda(spec: &TaskSpec) -> Result<f64, EstimatorError> {
    if spec.sigma == 0.0 && spec.n < spec.d {
        return Err(EstimatorError::SingularRidge { d: spec.d, n: spec.n });
    }
    Ok(spec.sigma * spec.sigma)
}

/// The raw cross-moment statistic on any spec, skewed included. Running it on
/// skewed data is the documented negative control for the isotropy lemma.
pub fn isotropy_statistic(
    spec: &TaskSpec,
    kind: IsotropyKind,
    samples: usize,
    stream: &RngStream,
) -> Result<IsotropyReport, EstimatorError> {
    validate_samples(samples)?;
    let d = spec.d;
    if kind == IsotropyKind::Yridge {
        ridge_lambda(spec)?;
    }
    let lambda = spec.sigma * spec.sigma;
    let sampler = TaskSampler::new(spec)?;
    let sums = mc_moment_sums(samples, stream, d * d, move |rng, out| {
        let p = sampler.sample_from(rng);
        let xty = p.x.transpose() * &p.y;
        let right: DVector<f64> = match kind {
            IsotropyKind::Yyt => xty.clone(),
            IsotropyKind::Yridge => ridge_solve(&p.x, &p.y, lambda)?,
            IsotropyKind::Yubar => p.y_query * &p.x_query,
        };
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = xty[i] * right[j];
            }
        }
        Ok(())
    })?;

    let matrix_mean = DMatrix::from_fn(d, d, |i, j| sums.mean(i * d + j));
    let per_entry_stderr = DMatrix::from_fn(d, d, |i, j| sums.stderr(i * d + j));
    let c_estimate = matrix_mean.diagonal().sum() / d as f64;
    let max_offdiag_abs = if d == 1 {
        0.0
    } else {
        (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j)
            .map(|(i, j)| matrix_mean[(i, j)].abs())
            .fold(0.0, f64::max)
    };
    Ok(IsotropyReport { matrix_mean, c_estimate, max_offdiag_abs, per_entry_stderr })
}

/// Cross-moment isotropy check; rejects skewed specs.
pub fn check_isotropy(
    spec: &TaskSpec,
    kind: IsotropyKind,
    samples: usize,
    stream: &RngStream,
) -> Result<IsotropyReport, EstimatorError> {
    reject_skewed(spec)?;
    isotropy_statistic(spec, kind, samples, stream)
}

/// Numerator statistic paired with `|X'y|^2` for the trace identity and the
/// internal eta estimate: the ridge cross term for linear specs, the
/// tower-property surrogate for nonlinear ones.
fn trace_pair(
    spec: &TaskSpec,
    p: &PromptInstance,
    lambda: f64,
) -> Result<(f64, f64), EstimatorError> {
    let xty = p.x.transpose() * &p.y;
    let num = match &spec.kind {
        TaskKind::Nonlinear { .. } => p.y_query * p.x_query.dot(&xty),
        _ => ridge_solve(&p.x, &p.y, lambda)?.dot(&xty),
    };
    Ok((num, xty.norm_squared()))
}

/// Residual of `E[eta y'X X'y - num] = 0` in stderr units. With `eta = None`
/// the rate is first estimated on an independent child stream, making the
/// check a joint-consistency test; passing a perturbed `eta` quantifies the
/// sensitivity.
pub fn check_trace_identity(
    spec: &TaskSpec,
    eta: Option<f64>,
    samples: usize,
    stream: &RngStream,
) -> Result<f64, EstimatorError> {
    reject_skewed(spec)?;
    validate_samples(samples)?;
    let lambda = ridge_lambda(spec)?;
    let eta = match eta {
        Some(v) => v,
        None => {
            let sampler = TaskSampler::new(spec)?;
            let pilot = stream.split(u64::MAX);
            mc_ratio_sums(samples, &pilot, |rng| {
                trace_pair(spec, &sampler.sample_from(rng), lambda)
            })?
            .ratio()
        }
    };
    let sampler = TaskSampler::new(spec)?;
    let sums = mc_moment_sums(samples, stream, 1, move |rng, out| {
        let (num, den) = trace_pair(spec, &sampler.sample_from(rng), lambda)?;
        out[0] = eta * den - num;
        Ok(())
    })?;
    Ok(sums.mean(0).abs() / sums.stderr(0))
}

/// Loss-difference constancy report: per-probe `J1 - J2`, their spread
/// across probes, and the scale `mean |J1|`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstancyReport {
    pub probe_count: usize,
    pub differences: Vec<f64>,
    pub spread: f64,
    pub mean_scale: f64,
}

impl ConstancyReport {
    /// `spread / mean_scale`, the gated quantity.
    pub fn relative_spread(&self) -> f64 {
        self.spread / self.mean_scale
    }
}

/// Probe entry scale: variance 0.4 / (n sqrt(d)) keeps `A G w` entries O(1),
/// where the spread diagnostic is most sensitive.
pub fn constancy_probe_scale(d: usize, n: usize) -> f64 {
    (0.4 / (n as f64 * (d as f64).sqrt())).sqrt()
}

/// Draw `probes` random reduced-parameter probes at the standard scale.
pub fn draw_constancy_probes(
    d: usize,
    n: usize,
    probes: usize,
    stream: &RngStream,
) -> Vec<ReducedParams> {
    let scale = constancy_probe_scale(d, n);
    (0..probes as u64)
        .map(|k| {
            let mut rng = stream.split(k).rng();
            let w = scale
                * DVector::from_fn(d + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let m = scale
                * DMatrix::from_fn(d + 1, d + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            ReducedParams { w, m }
        })
        .collect()
}

/// `J1(A, w) = E|A G w - target|^2` vs `J2(A, w) = E|A G w - eta X'y|^2` on a
/// shared prompt sample, for each supplied probe. The target is the ridge
/// solution for linear specs and the `y_query x_query` surrogate for
/// nonlinear ones; the surrogate shifts `J1` by a probe-independent constant
/// only, which the spread diagnostic ignores.
pub fn loss_constancy_with_probes(
    spec: &TaskSpec,
    probes: &[ReducedParams],
    samples: usize,
    stream: &RngStream,
    eta: Option<f64>,
) -> Result<ConstancyReport, EstimatorError> {
    reject_skewed(spec)?;
    validate_samples(samples)?;
    assert!(!probes.is_empty(), "need at least one probe");
    let lambda = ridge_lambda(spec)?;
    let eta = match eta {
        Some(v) => v,
        None => {
            let sampler = TaskSampler::new(spec)?;
            let pilot = stream.split(u64::MAX);
            mc_ratio_sums(samples, &pilot, |rng| {
                trace_pair(spec, &sampler.sample_from(rng), lambda)
            })?
            .ratio()
        }
    };

    let d = spec.d;
    let dim = d + 1;
    let sampler = TaskSampler::new(spec)?;
    let nonlinear = matches!(spec.kind, TaskKind::Nonlinear { .. });
    // stats layout: [J1_0, J2_0, J1_1, J2_1, ...]
    let sums = mc_moment_sums(samples, stream, 2 * probes.len(), move |rng, out| {
        let p = sampler.sample_from(rng);
        let g = crate::model::gram(&p).0;
        let xty = p.x.transpose() * &p.y;
        let target: DVector<f64> = if nonlinear {
            p.y_query * &p.x_query
        } else {
            ridge_solve(&p.x, &p.y, lambda)?
        };
        for (k, probe) in probes.iter().enumerate() {
            let gw = &g * &probe.w;
            // r = (M[:, 0..d])' G w
            let mut j1 = 0.0;
            let mut j2 = 0.0;
            for i in 0..d {
                let mut r_i = 0.0;
                for j in 0..dim {
                    r_i += probe.m[(j, i)] * gw[j];
                }
                let e1 = r_i - target[i];
                let e2 = r_i - eta * xty[i];
                j1 += e1 * e1;
                j2 += e2 * e2;
            }
            out[2 * k] = j1;
            out[2 * k + 1] = j2;
        }
        Ok(())
    })?;

    let differences: Vec<f64> =
        (0..probes.len()).map(|k| sums.mean(2 * k) - sums.mean(2 * k + 1)).collect();
    let mean_diff = differences.iter().sum::<f64>() / differences.len() as f64;
    let spread = if differences.len() < 2 {
        0.0
    } else {
        (differences.iter().map(|v| (v - mean_diff) * (v - mean_diff)).sum::<f64>()
            / (differences.len() - 1) as f64)
            .sqrt()
    };
    let mean_scale = (0..probes.len()).map(|k| sums.mean(2 * k).abs()).sum::<f64>()
        / probes.len() as f64;
    Ok(ConstancyReport { probe_count: probes.len(), differences, spread, mean_scale })
}

/// Loss-difference constancy with randomly drawn probes.
pub fn check_loss_constancy(
    spec: &TaskSpec,
    probes: usize,
    samples: usize,
    stream: &RngStream,
    eta: Option<f64>,
) -> Result<ConstancyReport, EstimatorError> {
    if probes < 8 {
        return Err(EstimatorError::UnsupportedSpec(format!(
            "need at least 8 probes, got {probes}"
        )));
    }
    let drawn = draw_constancy_probes(spec.d, spec.n, probes, &stream.split(u64::MAX - 1));
    loss_constancy_with_probes(spec, &drawn, samples, stream, eta)
}

/// A scalar moment with its standard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub value: f64,
    pub stderr: f64,
}

impl MomentEstimate {
    /// |value| in stderr units.
    pub fn zero_deviation(&self) -> f64 {
        self.value.abs() / self.stderr
    }
}

/// Odd/even label-moment diagnostics: odd moments of `y` vanish by sign
/// symmetry; even moments times the predictor surrogate vanish too.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub mean_y1: MomentEstimate,
    pub mean_y1_cubed: MomentEstimate,
    pub mean_y1_y2: MomentEstimate,
    pub mean_y1_sq: MomentEstimate,
    /// `E[y_1^2 . y_query x_query]`, one entry per input coordinate.
    pub mean_y1sq_ubar: Vec<MomentEstimate>,
}

/// Estimate the sign-symmetry moments for an isotropic or nonlinear spec.
pub fn check_odd_even_moments(
    spec: &TaskSpec,
    samples: usize,
    stream: &RngStream,
) -> Result<MomentReport, EstimatorError> {
    reject_skewed(spec)?;
    validate_samples(samples)?;
    if spec.n < 2 {
        return Err(EstimatorError::UnsupportedSpec(
            "the pair moment E[y1 y2] needs n >= 2".into(),
        ));
    }
    let d = spec.d;
    let sampler = TaskSampler::new(spec)?;
    let sums = mc_moment_sums(samples, stream, 4 + d, move |rng: &mut ChaCha12Rng, out| {
        let p = sampler.sample_from(rng);
        let y1 = p.y[0];
        out[0] = y1;
        out[1] = y1 * y1 * y1;
        out[2] = y1 * p.y[1];
        out[3] = y1 * y1;
        for i in 0..d {
            out[4 + i] = y1 * y1 * p.y_query * p.x_query[i];
        }
        Ok(())
    })?;
    let at = |i: usize| MomentEstimate { value: sums.mean(i), stderr: sums.stderr(i) };
    Ok(MomentReport {
        mean_y1: at(0),
        mean_y1_cubed: at(1),
        mean_y1_y2: at(2),
        mean_y1_sq: at(3),
        mean_y1sq_ubar: (0..d).map(|i| at(4 + i)).collect(),
    })
}
