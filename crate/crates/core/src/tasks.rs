//! Prompt distributions.
//!
//! A prompt is `n` support pairs plus one query pair, packed later into
//! tokens `[x_i; y_i]` and `[x_query; 0]`. Three families are provided:
//!
//! * isotropic linear — `x ~ N(0, I)`, `w ~ N(0, I)` fresh per prompt,
//!   `y = w'x + eps`, `eps ~ N(0, sigma^2)`;
//! * skewed linear — `x = S^{1/2} u` with `u ~ N(0, I)` so `x ~ N(0, S)`,
//!   and `w = S^{-1/2} w'` with `w' ~ N(0, I)` so `w ~ N(0, S^{-1})`;
//! * nonlinear — a fresh bias-free random MLP `f` per prompt,
//!   `y = f(x) + eps`, with i.i.d. `N(0, 1)` weights in every layer.
//!
//! MLP targets have no biases and odd or positive-homogeneous activations so
//! the induced function distribution is symmetric under rotations of the
//! input and under global negation: negating the last layer negates `f` and
//! is equally likely. Hidden layers are left unscaled by width; the output
//! scale grows with width, which none of the symmetry properties depend on.
//!
//! The query label `y_query` is noisy by default (it is the regression
//! target); a noiseless variant exists for evaluation only and changes the
//! loss by an additive constant.

use crate::numerics::{
    gaussian_matrix_from, gaussian_vector_from, NumericsError, RngStream,
    SpdMatrix,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("prompt batch serialization: {0}")]
    Serialization(String),
}

/// Activation for MLP targets. Only activations that preserve the negation
/// symmetry of bias-free networks are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }
}

/// Architecture of the random MLP target family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpTargetSpec {
    /// Layer widths, input width first, output width (always 1) last.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpTargetSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self, TaskError> {
        if layer_widths.len() < 2 {
            return Err(TaskError::InvalidSpec(
                "MLP target needs at least input and output widths".into(),
            ));
        }
        if *layer_widths.last().unwrap() != 1 {
            return Err(TaskError::InvalidSpec("MLP target output width must be 1".into()));
        }
        if layer_widths.contains(&0) {
            return Err(TaskError::InvalidSpec("MLP layer widths must be >= 1".into()));
        }
        Ok(Self { layer_widths, activation })
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }
}

/// Which of the three prompt distributions to draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskKind {
    IsotropicLinear,
    SkewedLinear { sigma_mat: SpdMatrix },
    Nonlinear { target: MlpTargetSpec },
}

/// Full description of a prompt distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Input dimension.
    pub d: usize,
    /// Support examples per prompt.
    pub n: usize,
    /// Noise standard deviation.
    pub sigma: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, d: usize, n: usize, sigma: f64) -> Result<Self, TaskError> {
        if d < 1 {
            return Err(TaskError::InvalidSpec("d must be >= 1".into()));
        }
        if n < 1 {
            return Err(TaskError::InvalidSpec("n must be >= 1".into()));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(TaskError::InvalidSpec(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        match &kind {
            TaskKind::SkewedLinear { sigma_mat } if sigma_mat.dim() != d => {
                return Err(TaskError::InvalidSpec(format!(
                    "covariance dimension {} does not match d = {d}",
                    sigma_mat.dim()
                )));
            }
            TaskKind::Nonlinear { target } if target.input_width() != d => {
                return Err(TaskError::InvalidSpec(format!(
                    "MLP input width {} does not match d = {d}",
                    target.input_width()
                )));
            }
            _ => {}
        }
        Ok(Self { kind, d, n, sigma })
    }

    pub fn isotropic(d: usize, n: usize, sigma: f64) -> Result<Self, TaskError> {
        Self::new(TaskKind::IsotropicLinear, d, n, sigma)
    }

    pub fn skewed(sigma_mat: SpdMatrix, n: usize, sigma: f64) -> Result<Self, TaskError> {
        let d = sigma_mat.dim();
        Self::new(TaskKind::SkewedLinear { sigma_mat }, d, n, sigma)
    }

    pub fn nonlinear(target: MlpTargetSpec, n: usize, sigma: f64) -> Result<Self, TaskError> {
        let d = target.input_width();
        Self::new(TaskKind::Nonlinear { target }, d, n, sigma)
    }

    pub fn is_skewed(&self) -> bool {
        matches!(self.kind, TaskKind::SkewedLinear { .. })
    }
}

/// A sampled target function: one weight matrix per layer, no biases.
#[derive(Debug, Clone)]
pub struct TargetFunction {
    /// `weights[l]` maps width `l` to width `l + 1`, entries i.i.d. N(0, 1).
    pub weights: Vec<DMatrix<f64>>,
    pub activation: Activation,
}

impl TargetFunction {
    fn sample(spec: &MlpTargetSpec, rng: &mut ChaCha12Rng) -> Self {
        let weights = spec
            .layer_widths
            .windows(2)
            .map(|w| gaussian_matrix_from(rng, w[1], w[0]))
            .collect();
        Self { weights, activation: spec.activation }
    }
}

/// Forward pass of a bias-free MLP: activation between layers, linear output.
/// A single-layer target (`weights = [W1]`) is exactly `W1 x`.
pub fn evaluate_target(f: &TargetFunction, x: &DVector<f64>) -> f64 {
    assert_eq!(
        f.weights[0].ncols(),
        x.len(),
        "input length does not match target input width"
    );
    let last = f.weights.len() - 1;
    let mut h = x.clone();
    for (l, w) in f.weights.iter().enumerate() {
        h = w * h;
        if l < last {
            h.apply(|v| *v = f.activation.apply(*v));
        }
    }
    debug_assert_eq!(h.len(), 1);
    h[0]
}

/// One sampled prompt: support matrix, labels, query pair, and (for linear
/// tasks) the latent weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    /// Support inputs as rows, `n x d`.
    #[serde(with = "crate::numerics::serde_helpers::mat_rows")]
    pub x: DMatrix<f64>,
    /// Support labels including noise.
    #[serde(with = "crate::numerics::serde_helpers::dvec")]
    pub y: DVector<f64>,
    #[serde(with = "crate::numerics::serde_helpers::dvec")]
    pub x_query: DVector<f64>,
    pub y_query: f64,
    /// Latent regression weights; `None` for nonlinear targets.
    #[serde(with = "crate::numerics::serde_helpers::dvec_opt")]
    pub ground_truth: Option<DVector<f64>>,
}

impl PromptInstance {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

/// A batch of independent prompts from one spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBatch {
    pub spec: TaskSpec,
    pub instances: Vec<PromptInstance>,
}

const BATCH_MAGIC: &str = "lsa-prompt-batch";
const BATCH_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BatchEnvelope {
    magic: String,
    version: u32,
    spec: TaskSpec,
    instances: Vec<PromptInstance>,
}

impl PromptBatch {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Versioned JSON with a leading magic string.
    pub fn to_json(&self) -> String {
        let env = BatchEnvelope {
            magic: BATCH_MAGIC.to_string(),
            version: BATCH_VERSION,
            spec: self.spec.clone(),
            instances: self.instances.clone(),
        };
        serde_json::to_string(&env).expect("prompt batch serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TaskError> {
        let env: BatchEnvelope =
            serde_json::from_str(text).map_err(|e| TaskError::Serialization(e.to_string()))?;
        if env.magic != BATCH_MAGIC {
            return Err(TaskError::Serialization(format!(
                "bad magic string {:?}, expected {BATCH_MAGIC:?}",
                env.magic
            )));
        }
        if env.version != BATCH_VERSION {
            return Err(TaskError::Serialization(format!(
                "unsupported format version {} (this build reads {BATCH_VERSION})",
                env.version
            )));
        }
        Ok(Self { spec: env.spec, instances: env.instances })
    }
}

/// Prepared sampler: caches the covariance square roots so hot loops do not
/// re-run eigendecompositions per prompt.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    spec: TaskSpec,
    /// `(S^{1/2}, S^{-1/2})` for the skewed family.
    roots: Option<(DMatrix<f64>, DMatrix<f64>)>,
    noiseless_query: bool,
}

impl TaskSampler {
    pub fn new(spec: &TaskSpec) -> Result<Self, TaskError> {
        let roots = match &spec.kind {
            TaskKind::SkewedLinear { sigma_mat } => {
                let sqrt = sigma_mat.sqrt()?.into_matrix();
                let inv_sqrt = sigma_mat.inverse_sqrt()?.into_matrix();
                Some((sqrt, inv_sqrt))
            }
            _ => None,
        };
        Ok(Self { spec: spec.clone(), roots, noiseless_query: false })
    }

    /// Evaluation-only variant: the query label omits its noise term.
    pub fn with_noiseless_query(mut self) -> Self {
        self.noiseless_query = true;
        self
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// Draw one prompt from the stream. The draw order is fixed: support
    /// inputs (row-major), query input, target parameters, then noise.
    pub fn sample(&self, stream: &RngStream) -> PromptInstance {
        let mut rng = stream.rng();
        self.sample_from(&mut rng)
    }

    pub(crate) fn sample_from(&self, rng: &mut ChaCha12Rng) -> PromptInstance {
        let (d, n, sigma) = (self.spec.d, self.spec.n, self.spec.sigma);
        let mut x = gaussian_matrix_from(rng, n, d);
        let mut x_query = gaussian_vector_from(rng, d);
        if let Some((sqrt, _)) = &self.roots {
            // x_i = S^{1/2} u_i row-wise; S^{1/2} is symmetric
            x *= sqrt;
            x_query = sqrt * x_query;
        }

        let mut y = DVector::zeros(n);
        let y_query_clean;
        let ground_truth;
        match &self.spec.kind {
            TaskKind::Nonlinear { target } => {
                let f = TargetFunction::sample(target, rng);
                for i in 0..n {
                    y[i] = evaluate_target(&f, &x.row(i).transpose());
                }
                y_query_clean = evaluate_target(&f, &x_query);
                ground_truth = None;
            }
            _ => {
                let mut w = gaussian_vector_from(rng, d);
                if let Some((_, inv_sqrt)) = &self.roots {
                    w = inv_sqrt * w;
                }
                y = &x * &w;
                y_query_clean = w.dot(&x_query);
                ground_truth = Some(w);
            }
        }

        for i in 0..n {
            y[i] += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        // query noise is always drawn so the stream layout does not depend on
        // the evaluation flag
        let query_noise = sigma * rng.sample::<f64, _>(StandardNormal);
        let y_query =
            if self.noiseless_query { y_query_clean } else { y_query_clean + query_noise };

        PromptInstance { x, y, x_query, y_query, ground_truth }
    }
}

/// Draw a single prompt. Prefer [`TaskSampler`] when sampling many.
pub fn sample_prompt(spec: &TaskSpec, stream: &RngStream) -> Result<PromptInstance, TaskError> {
    Ok(TaskSampler::new(spec)?.sample(stream))
}

/// Draw `count` independent prompts; instance `k` uses `stream.split(k)`, so
/// the result is identical however the generation is parallelized.
pub fn sample_batch(
    spec: &TaskSpec,
    count: usize,
    stream: &RngStream,
) -> Result<PromptBatch, TaskError> {
    assert!(count >= 1, "batch count must be >= 1");
    let sampler = TaskSampler::new(spec)?;
    Ok(sample_batch_with(&sampler, count, stream))
}

pub(crate) fn sample_batch_with(
    sampler: &TaskSampler,
    count: usize,
    stream: &RngStream,
) -> PromptBatch {
    let instances: Vec<PromptInstance> = (0..count as u64)
        .into_par_iter()
        .map(|k| sampler.sample(&stream.split(k)))
        .collect();
    PromptBatch { spec: sampler.spec.clone(), instances }
}
