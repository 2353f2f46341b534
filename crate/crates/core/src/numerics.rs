//! Dense linear-algebra kernels shared by the rest of the crate.
//!
//! Every inverse that shows up in the estimator and predictor formulas is
//! realized here as a factorization followed by triangular solves.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_check, Error, Result};

/// Dense symmetric matrix. Construction always symmetrizes the storage, so
/// `m[(i, j)] == m[(j, i)]` holds bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m` after replacing it with `(m + mᵀ) / 2`.
    ///
    /// Panics if `m` is not square or is empty.
    pub fn from_dense(m: DMatrix<f64>) -> Self {
        assert!(m.is_square() && m.nrows() > 0, "SymMatrix must be square and non-empty");
        let n = m.nrows();
        let mut out = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        SymMatrix(out)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn scaled(&self, s: f64) -> Self {
        SymMatrix(&self.0 * s)
    }

    /// Sum of two symmetric matrices of the same dimension.
    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        dim_check(self.dim() == other.dim(), || {
            format!("adding {}x{} to {}x{}", other.dim(), other.dim(), self.dim(), self.dim())
        })?;
        Ok(SymMatrix(&self.0 + &other.0))
    }

    /// Eigenvalues in ascending order (symmetric QR, independent of Cholesky).
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// `true` when the smallest eigenvalue is at least `-rel_tol * max(|trace|, tiny)`.
    pub fn is_psd(&self, rel_tol: f64) -> bool {
        let scale = self.trace().abs().max(f64::MIN_POSITIVE);
        self.min_eigenvalue() >= -rel_tol * scale
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = m + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    lower: DMatrix<f64>,
    jitter: f64,
}

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;

/// Factors `m + jitter·I`.
///
/// With `jitter == 0` and a failed factorization, a diagonal shift of
/// `1e-12·tr(m)/n` is tried and grown by 10× up to `1e-6·tr(m)/n`. The shift
/// that finally succeeded is available from [`CholFactor::jitter`].
pub fn chol_factor(m: &SymMatrix, jitter: f64) -> Result<CholFactor> {
    if !(jitter >= 0.0) {
        return Err(Error::InvalidArgument(format!("jitter must be non-negative, got {jitter}")));
    }
    if let Some(f) = try_factor(m.matrix(), jitter) {
        return Ok(f);
    }
    let n = m.dim() as f64;
    let base = m.trace() / n;
    if jitter > 0.0 || !(base > 0.0) {
        return Err(Error::NotPositiveDefinite { jitter });
    }
    let mut shift = JITTER_START * base;
    while shift <= JITTER_MAX * base * (1.0 + 1e-9) {
        if let Some(f) = try_factor(m.matrix(), shift) {
            return Ok(f);
        }
        shift *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: JITTER_MAX * base })
}

fn try_factor(m: &DMatrix<f64>, jitter: f64) -> Option<CholFactor> {
    let mut shifted = m.clone();
    if jitter > 0.0 {
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
    }
    let chol = Cholesky::new(shifted)?;
    let lower = chol.unpack();
    if lower.diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
        Some(CholFactor { lower, jitter })
    } else {
        None
    }
}

impl CholFactor {
    /// Builds a factor directly from a lower-triangular matrix with positive diagonal.
    pub fn from_lower(lower: DMatrix<f64>) -> Result<Self> {
        if !lower.is_square() || lower.diagonal().iter().any(|d| !(*d > 0.0)) {
            return Err(Error::NotPositiveDefinite { jitter: 0.0 });
        }
        Ok(CholFactor { lower: lower.lower_triangle(), jitter: 0.0 })
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Diagonal shift that was added before factoring.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        SymMatrix::from_dense(&self.lower * self.lower.transpose())
    }

    /// Solves `(L Lᵀ) X = rhs` with two triangular substitutions.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        dim_check(rhs.nrows() == self.dim(), || {
            format!("rhs has {} rows, factor has dimension {}", rhs.nrows(), self.dim())
        })?;
        let mut x = rhs.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        dim_check(rhs.len() == self.dim(), || {
            format!("rhs has length {}, factor has dimension {}", rhs.len(), self.dim())
        })?;
        let mut x = rhs.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    /// `L⁻¹ rhs` (forward substitution only).
    pub fn solve_lower(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        dim_check(rhs.nrows() == self.dim(), || {
            format!("rhs has {} rows, factor has dimension {}", rhs.nrows(), self.dim())
        })?;
        let mut x = rhs.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    /// `(L Lᵀ)⁻¹` as a symmetric matrix, via solves against the identity.
    pub fn inverse(&self) -> SymMatrix {
        let n = self.dim();
        SymMatrix::from_dense(self.solve(&DMatrix::identity(n, n)).expect("square identity"))
    }

    /// `log det(L Lᵀ) = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

pub fn chol_solve(f: &CholFactor, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    f.solve(rhs)
}

pub fn logdet(f: &CholFactor) -> f64 {
    f.logdet()
}

/// Reproducible random stream addressed by `(seed, stream)`.
///
/// Backed by ChaCha20, whose stream parameter gives independent sequences for
/// the same seed, so Monte Carlo runs can be generated in any order.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngState { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn standard_normal_vec(&mut self, n: usize) -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| self.standard_normal()))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        use rand::Rng;
        self.rng.random_range(lo..hi)
    }
}

/// Draws `mean + L z` with `z ~ N(0, I)`.
pub fn sample_gaussian(rng: &mut RngState, mean: &DVector<f64>, cov_factor: &CholFactor) -> Result<DVector<f64>> {
    dim_check(mean.len() == cov_factor.dim(), || {
        format!("mean has length {}, covariance factor has dimension {}", mean.len(), cov_factor.dim())
    })?;
    let z = rng.standard_normal_vec(mean.len());
    Ok(mean + cov_factor.lower() * z)
}

/// Solves `A x = b` in place for unit lower-triangular `A` (diagonal assumed 1,
/// upper triangle ignored). Works column by column on matrix right-hand sides.
pub fn unit_lower_solve_mut(a: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = a.nrows();
    debug_assert_eq!(b.nrows(), n);
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut acc = b[(i, c)];
            for k in 0..i {
                acc -= a[(i, k)] * b[(k, c)];
            }
            b[(i, c)] = acc;
        }
    }
}

pub fn unit_lower_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut acc = x[i];
        for k in 0..i {
            acc -= a[(i, k)] * x[k];
        }
        x[i] = acc;
    }
    x
}

/// Relative Frobenius distance `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
