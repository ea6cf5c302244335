//! One-layer linear self-attention with a linear read-out head.
//!
//! Tokens are `v_i = [x_i; y_i]` for the `n` support pairs and
//! `v_query = [x_query; 0]` for the query; the query is excluded from the
//! attention sum, so the prediction reads the data only through the support
//! Gram matrix `G = sum_i v_i v_i'`:
//!
//! ```text
//! y_hat = h' W_V G W_K' W_Q v_query
//! ```
//!
//! With `w = W_V' h` and `M = W_K' W_Q` the prediction is `w' G M v_query`,
//! so the `(d+1)`-vector/matrix pair `(w, M)` carries everything the model
//! can express. The classic construction
//!
//! ```text
//! W_K = W_Q = [I 0; 0 0],  W_V = [0 0; 0 eta],  h = [0; 1]
//! ```
//!
//! outputs `eta * sum_i y_i x_i' x_query`, i.e. the prediction of one
//! gradient-descent step (step size `eta`) from zero on the least-squares
//! objective over the support pairs. Conjugating by `diag(S^{1/2}, 1)` gives
//! the analogous preconditioned construction with gradient multiplied by
//! `S^{-1}`.

use crate::numerics::{NumericsError, SpdMatrix};
use crate::tasks::PromptInstance;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter dimensions disagree: {context}")]
    DimensionMismatch { context: String },
    #[error("parameters contain non-finite entries")]
    NonFinite,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("parameter serialization: {0}")]
    Serialization(String),
}

/// Full attention parameters; all matrices are `(d+1) x (d+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LsaParams {
    pub w_k: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl LsaParams {
    pub fn new(
        w_k: DMatrix<f64>,
        w_q: DMatrix<f64>,
        w_v: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let dim = h.len();
        for (name, m) in [("w_k", &w_k), ("w_q", &w_q), ("w_v", &w_v)] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(ModelError::DimensionMismatch {
                    context: format!("{name} is {}x{}, head has length {dim}", m.nrows(), m.ncols()),
                });
            }
        }
        if dim < 2 {
            return Err(ModelError::DimensionMismatch {
                context: "token width d+1 must be at least 2".into(),
            });
        }
        let params = Self { w_k, w_q, w_v, h };
        if params.iter_entries().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(params)
    }

    /// Token width `d + 1`.
    pub fn dim(&self) -> usize {
        self.h.len()
    }

    /// Input dimension `d`.
    pub fn input_dim(&self) -> usize {
        self.dim() - 1
    }

    fn iter_entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.w_k
            .iter()
            .chain(self.w_q.iter())
            .chain(self.w_v.iter())
            .chain(self.h.iter())
            .copied()
    }
}

/// Reduced parameters `(w, M) = (W_V' h, W_K' W_Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedParams {
    pub w: DVector<f64>,
    pub m: DMatrix<f64>,
}

impl ReducedParams {
    pub fn new(w: DVector<f64>, m: DMatrix<f64>) -> Result<Self, ModelError> {
        if m.nrows() != w.len() || m.ncols() != w.len() {
            return Err(ModelError::DimensionMismatch {
                context: format!("M is {}x{}, w has length {}", m.nrows(), m.ncols(), w.len()),
            });
        }
        if w.len() < 2 {
            return Err(ModelError::DimensionMismatch {
                context: "token width d+1 must be at least 2".into(),
            });
        }
        if w.iter().chain(m.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self { w, m })
    }

    pub fn zeros(d: usize) -> Self {
        Self { w: DVector::zeros(d + 1), m: DMatrix::zeros(d + 1, d + 1) }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dim() - 1
    }
}

/// Support-token Gram matrix `G = sum_i [x_i; y_i][x_i; y_i]'`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(pub DMatrix<f64>);

/// Build the Gram matrix of a prompt's support tokens (query excluded).
pub fn gram(prompt: &PromptInstance) -> GramMatrix {
    let d = prompt.d();
    let mut g = DMatrix::zeros(d + 1, d + 1);
    gram_into(prompt, &mut g);
    GramMatrix(g)
}

/// Accumulate the Gram matrix into a preallocated `(d+1) x (d+1)` buffer.
pub(crate) fn gram_into(prompt: &PromptInstance, g: &mut DMatrix<f64>) {
    let (n, d) = (prompt.n(), prompt.d());
    debug_assert_eq!(g.nrows(), d + 1);
    g.fill(0.0);
    for i in 0..n {
        for a in 0..d {
            let xa = prompt.x[(i, a)];
            for b in a..d {
                g[(a, b)] += xa * prompt.x[(i, b)];
            }
            g[(a, d)] += xa * prompt.y[i];
        }
        g[(d, d)] += prompt.y[i] * prompt.y[i];
    }
    // mirror the strict upper triangle
    for a in 0..=d {
        for b in (a + 1)..=d {
            g[(b, a)] = g[(a, b)];
        }
    }
}

fn query_token(prompt: &PromptInstance) -> DVector<f64> {
    let d = prompt.d();
    let mut v = DVector::zeros(d + 1);
    v.rows_mut(0, d).copy_from(&prompt.x_query);
    v
}

/// Prediction of the full parameterization on a prompt.
pub fn forward_full(params: &LsaParams, prompt: &PromptInstance) -> f64 {
    assert_eq!(
        params.input_dim(),
        prompt.d(),
        "parameter dimension does not match prompt dimension"
    );
    let g = gram(prompt).0;
    let v_query = query_token(prompt);
    let right = &params.w_k.transpose() * (&params.w_q * &v_query);
    let left = params.w_v.transpose() * &params.h;
    left.dot(&(g * right))
}

/// Change of variables `w = W_V' h`, `M = W_K' W_Q`.
pub fn reduce(params: &LsaParams) -> ReducedParams {
    ReducedParams {
        w: params.w_v.transpose() * &params.h,
        m: params.w_k.transpose() * &params.w_q,
    }
}

/// Prediction of the reduced parameterization: `w' G M v_query`.
pub fn forward_reduced(reduced: &ReducedParams, prompt: &PromptInstance) -> f64 {
    assert_eq!(
        reduced.input_dim(),
        prompt.d(),
        "parameter dimension does not match prompt dimension"
    );
    let g = gram(prompt).0;
    let v_query = query_token(prompt);
    reduced.w.dot(&(g * (&reduced.m * v_query)))
}

/// The canonical global-minimizer construction for isotropic prompts:
/// predicts `eta * sum_i y_i x_i' x_query`.
pub fn construct_gd_minimizer(d: usize, eta: f64) -> LsaParams {
    assert!(d >= 1, "input dimension must be >= 1");
    assert!(eta.is_finite(), "eta must be finite");
    let dim = d + 1;
    let mut proj = DMatrix::zeros(dim, dim);
    for i in 0..d {
        proj[(i, i)] = 1.0;
    }
    let mut w_v = DMatrix::zeros(dim, dim);
    w_v[(d, d)] = eta;
    let mut h = DVector::zeros(dim);
    h[d] = 1.0;
    LsaParams { w_k: proj.clone(), w_q: proj, w_v, h }
}

/// Preconditioned variant: conjugating the canonical construction by
/// `H = diag(S^{1/2}, 1)` yields `W_K = W_Q = diag(S^{-1/2}, 0)` and predicts
/// `eta * sum_i y_i (S^{-1} x_i)' x_query`.
pub fn construct_preconditioned_minimizer(
    sigma_mat: &SpdMatrix,
    eta: f64,
) -> Result<LsaParams, ModelError> {
    assert!(eta.is_finite(), "eta must be finite");
    let d = sigma_mat.dim();
    let dim = d + 1;
    let inv_sqrt = sigma_mat.inverse_sqrt()?.into_matrix();
    let mut proj = DMatrix::zeros(dim, dim);
    proj.view_mut((0, 0), (d, d)).copy_from(&inv_sqrt);
    let mut w_v = DMatrix::zeros(dim, dim);
    w_v[(d, d)] = eta;
    let mut h = DVector::zeros(dim);
    h[d] = 1.0;
    Ok(LsaParams { w_k: proj.clone(), w_q: proj, w_v, h })
}

/// Reference predictor: one gradient step from zero on the least-squares
/// objective, `eta * y' X P x_query` with preconditioner `P` (identity if
/// omitted).
pub fn one_step_gd_predict(
    prompt: &PromptInstance,
    eta: f64,
    preconditioner: Option<&SpdMatrix>,
) -> f64 {
    let xty = prompt.x.transpose() * &prompt.y;
    match preconditioner {
        Some(p) => {
            assert_eq!(p.dim(), prompt.d(), "preconditioner dimension mismatch");
            eta * (p.matrix() * &prompt.x_query).dot(&xty)
        }
        None => eta * prompt.x_query.dot(&xty),
    }
}

/// Block decomposition of the effective linear predictor.
///
/// Writing `A = M[:, 0..d]'` (the transpose of M's first `d` columns), the
/// prediction is `(A G w)' x_query` and expands into four terms:
///
/// ```text
/// x_q' [ A_x (X'X) w_x + w_y A_x X'y + (w_x' X'y) a_y + w_y (y'y) a_y ]
/// ```
///
/// with `w = [w_x; w_y]`, `A_x = M[0..d, 0..d]'`, `a_y = M[d, 0..d]'`. At a
/// global minimizer `w_x = 0`, `a_y = 0`, and `gd_matrix = w_y A_x` equals
/// `eta` times the preconditioner.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveDecomposition {
    pub w_x: DVector<f64>,
    pub w_y: f64,
    pub a_x: DMatrix<f64>,
    pub a_y: DVector<f64>,
    pub gd_matrix: DMatrix<f64>,
}

/// Split reduced parameters into the blocks that act on the data statistics.
pub fn decompose(reduced: &ReducedParams) -> EffectiveDecomposition {
    let d = reduced.input_dim();
    let w_x = reduced.w.rows(0, d).into_owned();
    let w_y = reduced.w[d];
    let a_x = reduced.m.view((0, 0), (d, d)).transpose().into_owned();
    let a_y = DVector::from_fn(d, |j, _| reduced.m[(d, j)]);
    let gd_matrix = w_y * &a_x;
    EffectiveDecomposition { w_x, w_y, a_x, a_y, gd_matrix }
}

impl EffectiveDecomposition {
    /// Rebuild `(w, M[:, 0..d])`; the discarded last column of `M` never
    /// enters the prediction because the query token ends in zero.
    pub fn reassemble(&self) -> ReducedParams {
        let d = self.w_x.len();
        let mut w = DVector::zeros(d + 1);
        w.rows_mut(0, d).copy_from(&self.w_x);
        w[d] = self.w_y;
        let mut m = DMatrix::zeros(d + 1, d + 1);
        m.view_mut((0, 0), (d, d)).copy_from(&self.a_x.transpose());
        m.view_mut((d, 0), (1, d)).copy_from(&self.a_y.transpose());
        ReducedParams { w, m }
    }

    /// Evaluate the four-term block expansion directly from the prompt data.
    pub fn predict(&self, prompt: &PromptInstance) -> f64 {
        let xtx = prompt.x.transpose() * &prompt.x;
        let xty = prompt.x.transpose() * &prompt.y;
        let yty = prompt.y.dot(&prompt.y);
        let u = &self.a_x * (&xtx * &self.w_x)
            + self.w_y * (&self.a_x * &xty)
            + (self.w_x.dot(&xty)) * &self.a_y
            + (self.w_y * yty) * &self.a_y;
        u.dot(&prompt.x_query)
    }
}

/// Uniform prediction interface over the two parameterizations.
pub trait Predictor {
    fn predict(&self, prompt: &PromptInstance) -> f64;
}

impl Predictor for LsaParams {
    fn predict(&self, prompt: &PromptInstance) -> f64 {
        forward_full(self, prompt)
    }
}

impl Predictor for ReducedParams {
    fn predict(&self, prompt: &PromptInstance) -> f64 {
        forward_reduced(self, prompt)
    }
}

// --- bit-exact JSON -------------------------------------------------------

const PARAMS_VERSION: u32 = 1;

fn hex_of(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn hex_to_f64(s: &str) -> Result<f64, ModelError> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| ModelError::Serialization(format!("bad hex float {s:?}: {e}")))
}

fn mat_to_hex(m: &DMatrix<f64>) -> Vec<String> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| hex_of(m[(i, j)]))
        .collect()
}

fn mat_from_hex(dim: usize, data: &[String]) -> Result<DMatrix<f64>, ModelError> {
    if data.len() != dim * dim {
        return Err(ModelError::Serialization(format!(
            "expected {} entries, got {}",
            dim * dim,
            data.len()
        )));
    }
    let flat = data.iter().map(|s| hex_to_f64(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(DMatrix::from_row_slice(dim, dim, &flat))
}

fn vec_from_hex(dim: usize, data: &[String]) -> Result<DVector<f64>, ModelError> {
    if data.len() != dim {
        return Err(ModelError::Serialization(format!(
            "expected {dim} entries, got {}",
            data.len()
        )));
    }
    let flat = data.iter().map(|s| hex_to_f64(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(DVector::from_vec(flat))
}

#[derive(Serialize, Deserialize)]
struct LsaParamsDto {
    format_version: u32,
    d: usize,
    /// Row-major IEEE-754 bit patterns in hex; round-trips are bit exact.
    w_k: Vec<String>,
    w_q: Vec<String>,
    w_v: Vec<String>,
    h: Vec<String>,
}

impl Serialize for LsaParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        LsaParamsDto {
            format_version: PARAMS_VERSION,
            d: self.input_dim(),
            w_k: mat_to_hex(&self.w_k),
            w_q: mat_to_hex(&self.w_q),
            w_v: mat_to_hex(&self.w_v),
            h: self.h.iter().map(|v| hex_of(*v)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LsaParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let dto = LsaParamsDto::deserialize(d)?;
        if dto.format_version != PARAMS_VERSION {
            return Err(D::Error::custom(format!(
                "unsupported format version {}",
                dto.format_version
            )));
        }
        let dim = dto.d + 1;
        Ok(Self {
            w_k: mat_from_hex(dim, &dto.w_k).map_err(D::Error::custom)?,
            w_q: mat_from_hex(dim, &dto.w_q).map_err(D::Error::custom)?,
            w_v: mat_from_hex(dim, &dto.w_v).map_err(D::Error::custom)?,
            h: vec_from_hex(dim, &dto.h).map_err(D::Error::custom)?,
        })
    }
}

impl LsaParams {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Serialization(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct ReducedParamsDto {
    format_version: u32,
    d: usize,
    w: Vec<String>,
    m: Vec<String>,
}

impl Serialize for ReducedParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ReducedParamsDto {
            format_version: PARAMS_VERSION,
            d: self.input_dim(),
            w: self.w.iter().map(|v| hex_of(*v)).collect(),
            m: mat_to_hex(&self.m),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ReducedParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let dto = ReducedParamsDto::deserialize(d)?;
        if dto.format_version != PARAMS_VERSION {
            return Err(D::Error::custom(format!(
                "unsupported format version {}",
                dto.format_version
            )));
        }
        let dim = dto.d + 1;
        Ok(Self {
            w: vec_from_hex(dim, &dto.w).map_err(D::Error::custom)?,
            m: mat_from_hex(dim, &dto.m).map_err(D::Error::custom)?,
        })
    }
}

impl ReducedParams {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Serialization(e.to_string()))
    }
}
