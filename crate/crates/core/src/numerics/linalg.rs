//! Gaussian sampling and SPD matrix operations.
//!
//! `SpdMatrix` carries the strictly-positive-definite invariant: symmetric to
//! within 1e-12 relative Frobenius error and minimum eigenvalue > 0, both
//! checked at construction. The covariance matrices used here must be
//! invertible (their inverses parameterize weight distributions and
//! preconditioners), so positive *semi*-definite inputs are rejected.
//!
//! Square roots are symmetric (eigendecomposition) roots, not Cholesky
//! factors: downstream algebra relies on `sqrt(S)` being symmetric.

use super::{NumericsError, RngStream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

const SYMMETRY_TOL: f64 = 1e-12;
const CONDITION_LIMIT: f64 = 1e12;

/// Fill a matrix with i.i.d. standard normal draws, row-major order.
pub fn sample_gaussian_matrix(rows: usize, cols: usize, stream: &RngStream) -> DMatrix<f64> {
    assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
    let mut rng = stream.rng();
    gaussian_matrix_from(&mut rng, rows, cols)
}

/// Standard normal vector of length `len`.
pub fn sample_gaussian_vector(len: usize, stream: &RngStream) -> DVector<f64> {
    assert!(len >= 1, "vector length must be >= 1");
    let mut rng = stream.rng();
    gaussian_vector_from(&mut rng, len)
}

/// Row-major Gaussian fill from an already-materialized generator.
pub(crate) fn gaussian_matrix_from(
    rng: &mut ChaCha12Rng,
    rows: usize,
    cols: usize,
) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

pub(crate) fn gaussian_vector_from(rng: &mut ChaCha12Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Symmetric positive-definite matrix with validated invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    min_eig: f64,
    max_eig: f64,
}

#[derive(Serialize, Deserialize)]
struct SpdDto {
    dim: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl Serialize for SpdMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let dim = self.dim();
        let data = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .map(|(i, j)| self.matrix[(i, j)])
            .collect();
        SpdDto { dim, data }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpdMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let dto = SpdDto::deserialize(d)?;
        if dto.data.len() != dto.dim * dto.dim {
            return Err(D::Error::custom("SPD matrix entry count does not match dim^2"));
        }
        SpdMatrix::new(DMatrix::from_row_slice(dto.dim, dto.dim, &dto.data))
            .map_err(D::Error::custom)
    }
}

impl SpdMatrix {
    /// Validate symmetry (1e-12 relative) and strict positive-definiteness.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, NumericsError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(NumericsError::DimensionMismatch {
                context: format!("SPD matrix must be square, got {}x{}", matrix.nrows(), matrix.ncols()),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite);
        }
        let norm = matrix.norm();
        let asym = (&matrix - matrix.transpose()).norm() / norm.max(f64::MIN_POSITIVE);
        if asym > SYMMETRY_TOL {
            return Err(NumericsError::NotSymmetric { asymmetry: asym });
        }
        // exact symmetry from here on
        let sym = symmetrize(&matrix);
        let eigs = nalgebra::SymmetricEigen::new(sym.clone()).eigenvalues;
        let min_eig = eigs.min();
        let max_eig = eigs.max();
        if min_eig <= 0.0 {
            return Err(NumericsError::NotPositiveDefinite { min_eig });
        }
        Ok(Self { matrix: sym, min_eig, max_eig })
    }

    pub fn identity(dim: usize) -> Self {
        Self { matrix: DMatrix::identity(dim, dim), min_eig: 1.0, max_eig: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eig
    }

    pub fn condition_estimate(&self) -> f64 {
        self.max_eig / self.min_eig
    }

    /// Symmetric square root `S` with `S S = self`.
    pub fn sqrt(&self) -> Result<SpdMatrix, NumericsError> {
        self.map_eigenvalues(f64::sqrt)
    }

    /// Inverse via eigendecomposition; rejects condition estimates beyond 1e12.
    pub fn inverse(&self) -> Result<SpdMatrix, NumericsError> {
        let condition = self.condition_estimate();
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(NumericsError::NumericallySingular { condition });
        }
        self.map_eigenvalues(f64::recip)
    }

    /// Inverse symmetric square root, `S^{-1/2}`.
    pub fn inverse_sqrt(&self) -> Result<SpdMatrix, NumericsError> {
        let condition = self.condition_estimate();
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(NumericsError::NumericallySingular { condition });
        }
        self.map_eigenvalues(|l| l.sqrt().recip())
    }

    fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> Result<SpdMatrix, NumericsError> {
        let eig = nalgebra::SymmetricEigen::new(self.matrix.clone());
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite);
        }
        let mapped = DVector::from_fn(eig.eigenvalues.len(), |i, _| f(eig.eigenvalues[i]));
        let q = &eig.eigenvectors;
        let rebuilt = q * DMatrix::from_diagonal(&mapped) * q.transpose();
        let (lo, hi) = (mapped.min(), mapped.max());
        Ok(SpdMatrix { matrix: symmetrize(&rebuilt), min_eig: lo, max_eig: hi })
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Symmetric square root of an SPD matrix.
pub fn spd_sqrt(m: &SpdMatrix) -> Result<SpdMatrix, NumericsError> {
    m.sqrt()
}

/// Inverse of an SPD matrix.
pub fn spd_inverse(m: &SpdMatrix) -> Result<SpdMatrix, NumericsError> {
    m.inverse()
}

/// Random SPD matrix `Q diag(lambda) Q'` with `Q` drawn Haar-like from the QR
/// of a Gaussian matrix (sign-fixed diagonal of R) and eigenvalues log-uniform
/// in `[eig_min, eig_max]`.
pub fn sample_spd(
    dim: usize,
    eig_min: f64,
    eig_max: f64,
    stream: &RngStream,
) -> Result<SpdMatrix, NumericsError> {
    if !(eig_min > 0.0 && eig_min <= eig_max && eig_max.is_finite()) {
        return Err(NumericsError::InvalidEigenvalueRange { eig_min, eig_max });
    }
    assert!(dim >= 1, "dimension must be >= 1");
    let mut rng = stream.rng();
    let gauss = gaussian_matrix_from(&mut rng, dim, dim);
    let (mut q, r) = gauss.qr().unpack();
    // fix signs so the factorization (and thus Q's distribution) is unique
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let lambdas = DVector::from_fn(dim, |_, _| {
        if eig_min == eig_max {
            eig_min
        } else {
            let u: f64 = rng.random_range(eig_min.ln()..eig_max.ln());
            u.exp()
        }
    });
    let m = &q * DMatrix::from_diagonal(&lambdas) * q.transpose();
    SpdMatrix::new(symmetrize(&m))
}

/// Ridge regression `argmin_w |Xw - y|^2 + lambda |w|^2`, solved through the
/// SPD normal equations `(X'X + lambda I) w = X'y` by Cholesky factorization.
///
/// `lambda = 0` is allowed only when `X'X` is numerically nonsingular.
pub fn ridge_solve(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>, NumericsError> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(NumericsError::NegativeLambda { lambda });
    }
    if x.nrows() != y.len() {
        return Err(NumericsError::DimensionMismatch {
            context: format!("X has {} rows but y has {} entries", x.nrows(), y.len()),
        });
    }
    let d = x.ncols();
    let mut normal = x.transpose() * x;
    for i in 0..d {
        normal[(i, i)] += lambda;
    }
    let rhs = x.transpose() * y;
    match nalgebra::Cholesky::new(normal) {
        Some(chol) => Ok(chol.solve(&rhs)),
        None => Err(NumericsError::SingularNormalEquations),
    }
}
