//! ARX regression and the three estimators used by the controllers: plain
//! least squares, kernel-regularized posterior and its sensitivity-shaped
//! second stage.

mod kernel;
mod posterior;

pub use kernel::{eb_objective, eb_tune, kernel_matrix, EbResult, KernelConfig, KernelFamily, C_BOUNDS, LAMBDA_BOUNDS};
pub use posterior::{kernel_posterior, shaped_estimate};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::numerics::{chol_factor, SymMatrix};
use crate::plant::Trajectory;

/// Orders and signal dimensions of `y(t) = Σ φ_y^i y(t−i) + Σ φ_u^j u(t−j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArxStructure {
    pub na: usize,
    pub nb: usize,
    /// Whether `φ_u^0` is estimated; when false it is fixed to zero and
    /// omitted from the parameter vector.
    pub include_feedthrough: bool,
    pub n_y: usize,
    pub n_u: usize,
}

/// Which coefficient sequence a parameter coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffBlock {
    Output,
    Input,
}

/// Location of one parameter coordinate inside its coefficient matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    pub block: CoeffBlock,
    pub lag: usize,
    pub row: usize,
    pub col: usize,
}

impl ArxStructure {
    pub fn new(na: usize, nb: usize, include_feedthrough: bool, n_y: usize, n_u: usize) -> Result<Self> {
        if na == 0 || n_y == 0 || n_u == 0 {
            return Err(Error::InvalidArgument("na, n_y and n_u must be at least 1".into()));
        }
        Ok(ArxStructure { na, nb, include_feedthrough, n_y, n_u })
    }

    pub fn siso(na: usize, nb: usize, include_feedthrough: bool) -> Self {
        ArxStructure { na, nb, include_feedthrough, n_y: 1, n_u: 1 }
    }

    /// First estimated input lag (0 with feedthrough, 1 otherwise).
    pub fn first_input_lag(&self) -> usize {
        usize::from(!self.include_feedthrough)
    }

    pub fn n_input_lags(&self) -> usize {
        (self.nb + 1).saturating_sub(self.first_input_lag())
    }

    pub fn n_output_params(&self) -> usize {
        self.n_y * self.n_y * self.na
    }

    pub fn n_input_params(&self) -> usize {
        self.n_y * self.n_u * self.n_input_lags()
    }

    pub fn n_theta(&self) -> usize {
        self.n_output_params() + self.n_input_params()
    }

    pub fn max_lag(&self) -> usize {
        self.na.max(self.nb)
    }

    /// Offset of `vec(φ_y^i)` in θ, `1 ≤ i ≤ na`.
    pub fn output_offset(&self, i: usize) -> usize {
        debug_assert!((1..=self.na).contains(&i));
        (i - 1) * self.n_y * self.n_y
    }

    /// Offset of `vec(φ_u^j)` in θ for an estimated lag `j`.
    pub fn input_offset(&self, j: usize) -> usize {
        debug_assert!(j >= self.first_input_lag() && j <= self.nb);
        self.n_output_params() + (j - self.first_input_lag()) * self.n_y * self.n_u
    }

    /// Inverse of the layout: which coefficient entry coordinate `p` is.
    pub fn coordinate(&self, p: usize) -> Coordinate {
        assert!(p < self.n_theta());
        let ny = self.n_y;
        if p < self.n_output_params() {
            let per = ny * ny;
            let k = p % per;
            Coordinate { block: CoeffBlock::Output, lag: p / per + 1, row: k % ny, col: k / ny }
        } else {
            let q = p - self.n_output_params();
            let per = ny * self.n_u;
            let k = q % per;
            Coordinate { block: CoeffBlock::Input, lag: q / per + self.first_input_lag(), row: k % ny, col: k / ny }
        }
    }

    /// Kernel lag index of a coordinate: `i` for `φ_y^i`, `j + 1` for `φ_u^j`.
    pub fn kernel_lag(&self, p: usize) -> usize {
        let c = self.coordinate(p);
        match c.block {
            CoeffBlock::Output => c.lag,
            CoeffBlock::Input => c.lag + 1,
        }
    }
}

/// ARX coefficients `col(vec φ_y^1, …, vec φ_y^na, vec φ_u^{j0}, …, vec φ_u^nb)`,
/// each matrix vectorized column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorTheta {
    pub structure: ArxStructure,
    pub values: DVector<f64>,
}

impl PredictorTheta {
    pub fn new(structure: ArxStructure, values: DVector<f64>) -> Result<Self> {
        dim_check(values.len() == structure.n_theta(), || {
            format!("θ has length {}, structure needs {}", values.len(), structure.n_theta())
        })?;
        Ok(PredictorTheta { structure, values })
    }

    pub fn zeros(structure: ArxStructure) -> Self {
        PredictorTheta { structure, values: DVector::zeros(structure.n_theta()) }
    }

    /// Packs coefficient matrices. `phi_u` is indexed by lag starting at 0; when
    /// feedthrough is excluded `phi_u[0]` is ignored.
    pub fn from_coefficients(structure: ArxStructure, phi_y: &[DMatrix<f64>], phi_u: &[DMatrix<f64>]) -> Result<Self> {
        dim_check(phi_y.len() == structure.na, || format!("{} output coefficients for na = {}", phi_y.len(), structure.na))?;
        dim_check(phi_u.len() == structure.nb + 1, || format!("{} input coefficients for nb = {}", phi_u.len(), structure.nb))?;
        let mut theta = Self::zeros(structure);
        for (i, m) in phi_y.iter().enumerate() {
            dim_check(m.nrows() == structure.n_y && m.ncols() == structure.n_y, || "φ_y has wrong shape".into())?;
            let off = structure.output_offset(i + 1);
            theta.values.rows_mut(off, m.len()).copy_from_slice(m.as_slice());
        }
        for j in structure.first_input_lag()..=structure.nb {
            let m = &phi_u[j];
            dim_check(m.nrows() == structure.n_y && m.ncols() == structure.n_u, || "φ_u has wrong shape".into())?;
            let off = structure.input_offset(j);
            theta.values.rows_mut(off, m.len()).copy_from_slice(m.as_slice());
        }
        Ok(theta)
    }

    pub fn phi_y(&self, i: usize) -> DMatrix<f64> {
        let s = &self.structure;
        if i == 0 || i > s.na {
            return DMatrix::zeros(s.n_y, s.n_y);
        }
        let off = s.output_offset(i);
        DMatrix::from_column_slice(s.n_y, s.n_y, &self.values.as_slice()[off..off + s.n_y * s.n_y])
    }

    pub fn phi_u(&self, j: usize) -> DMatrix<f64> {
        let s = &self.structure;
        if j < s.first_input_lag() || j > s.nb {
            return DMatrix::zeros(s.n_y, s.n_u);
        }
        let off = s.input_offset(j);
        DMatrix::from_column_slice(s.n_y, s.n_u, &self.values.as_slice()[off..off + s.n_y * s.n_u])
    }
}

/// `y = H θ + e` together with its sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    pub structure: ArxStructure,
    pub h: DMatrix<f64>,
    pub yvec: DVector<f64>,
}

impl RegressionProblem {
    pub fn new(structure: ArxStructure, h: DMatrix<f64>, yvec: DVector<f64>) -> Result<Self> {
        dim_check(h.ncols() == structure.n_theta(), || format!("H has {} columns, expected {}", h.ncols(), structure.n_theta()))?;
        dim_check(h.nrows() == yvec.len(), || format!("H has {} rows, y has {}", h.nrows(), yvec.len()))?;
        Ok(RegressionProblem { structure, h, yvec })
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    pub fn gram(&self) -> SymMatrix {
        SymMatrix::from_dense(self.h.transpose() * &self.h)
    }

    pub fn hty(&self) -> DVector<f64> {
        self.h.transpose() * &self.yvec
    }

    pub fn residual(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.yvec - &self.h * theta
    }
}

/// Stacks one group of `n_y` rows per usable time step `t = max(na, nb) … N−1`.
/// Row for output channel `r` at time `t` carries `y(t−i)` and `u(t−j)` at the
/// θ coordinates that multiply them in channel `r`.
pub fn build_regression(traj: &Trajectory, structure: &ArxStructure) -> Result<RegressionProblem> {
    dim_check(traj.n_y() == structure.n_y && traj.n_u() == structure.n_u, || {
        format!("trajectory is {}-in/{}-out, structure is {}-in/{}-out", traj.n_u(), traj.n_y(), structure.n_u, structure.n_y)
    })?;
    let m = structure.max_lag();
    let n = traj.len();
    if n <= m {
        return Err(Error::InsufficientData { needed: m, got: n });
    }
    let ny = structure.n_y;
    let steps = n - m;
    let mut h = DMatrix::zeros(steps * ny, structure.n_theta());
    let mut yvec = DVector::zeros(steps * ny);
    for (k, t) in (m..n).enumerate() {
        for r in 0..ny {
            let row = k * ny + r;
            yvec[row] = traj.y[(t, r)];
            for i in 1..=structure.na {
                let off = structure.output_offset(i);
                for c in 0..ny {
                    h[(row, off + c * ny + r)] = traj.y[(t - i, c)];
                }
            }
            for j in structure.first_input_lag()..=structure.nb {
                let off = structure.input_offset(j);
                for c in 0..structure.n_u {
                    h[(row, off + c * ny + r)] = traj.u[(t - j, c)];
                }
            }
        }
    }
    RegressionProblem::new(*structure, h, yvec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "SS")]
    Ss,
    #[serde(rename = "SS+W")]
    SsW,
}

/// Gaussian posterior `θ | D ~ N(θ̄, Σ_θ)` from one of the estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub theta_bar: PredictorTheta,
    pub sigma_theta: SymMatrix,
    pub sigma2: f64,
    pub kernel: Option<KernelConfig>,
    pub method: Method,
    /// Set when least squares fell back to a `1e-8·I` ridge.
    pub ridge_fallback: bool,
}

impl PosteriorEstimate {
    pub fn trace_sigma_theta(&self) -> f64 {
        self.sigma_theta.trace()
    }

    pub fn to_json(&self, prob: Option<&RegressionProblem>) -> PosteriorJson {
        let n = self.sigma_theta.dim();
        let residual_rms = prob.map(|p| {
            let r = p.residual(&self.theta_bar.values);
            (r.norm_squared() / p.rows().max(1) as f64).sqrt()
        });
        PosteriorJson {
            method: self.method,
            structure: self.theta_bar.structure,
            theta: self.theta_bar.values.iter().copied().collect(),
            sigma2: self.sigma2,
            trace_sigma_theta: self.trace_sigma_theta(),
            kernel: self.kernel,
            sigma_theta: (0..n).map(|i| (0..n).map(|j| self.sigma_theta.matrix()[(i, j)]).collect()).collect(),
            ridge_fallback: self.ridge_fallback,
            residual_rms,
        }
    }
}

/// Serialized form of [`PosteriorEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorJson {
    pub method: Method,
    pub structure: ArxStructure,
    pub theta: Vec<f64>,
    pub sigma2: f64,
    pub trace_sigma_theta: f64,
    pub kernel: Option<KernelConfig>,
    pub sigma_theta: Vec<Vec<f64>>,
    pub ridge_fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual_rms: Option<f64>,
}

impl PosteriorJson {
    pub fn into_estimate(self) -> Result<PosteriorEstimate> {
        let n = self.structure.n_theta();
        dim_check(self.sigma_theta.len() == n && self.sigma_theta.iter().all(|r| r.len() == n), || {
            format!("sigma_theta must be {n}x{n}")
        })?;
        let flat: Vec<f64> = self.sigma_theta.into_iter().flatten().collect();
        Ok(PosteriorEstimate {
            theta_bar: PredictorTheta::new(self.structure, DVector::from_vec(self.theta))?,
            sigma_theta: SymMatrix::from_dense(DMatrix::from_row_slice(n, n, &flat)),
            sigma2: self.sigma2,
            kernel: self.kernel,
            method: self.method,
            ridge_fallback: self.ridge_fallback,
        })
    }
}

pub const SIGMA2_FLOOR: f64 = 1e-12;
pub const RIDGE_FALLBACK: f64 = 1e-8;
/// Smallest accepted squared Cholesky pivot of `HᵀH`, relative to its largest diagonal entry.
const RANK_TOL: f64 = 1e-10;

/// Least squares `θ̄ = (HᵀH)⁻¹Hᵀy`, `σ̂² = ‖y − Hθ̄‖² / (rows − n_θ)`,
/// `Σ_θ = σ̂² (HᵀH)⁻¹`.
pub fn ols_estimate(prob: &RegressionProblem) -> Result<PosteriorEstimate> {
    ols_with_ridge(prob, 0.0)
}

/// Like [`ols_estimate`] but retries with a `1e-8·I` ridge on rank deficiency
/// and flags the result.
pub fn ols_estimate_or_ridge(prob: &RegressionProblem) -> Result<PosteriorEstimate> {
    match ols_with_ridge(prob, 0.0) {
        Err(Error::RankDeficient) => ols_with_ridge(prob, RIDGE_FALLBACK),
        other => other,
    }
}

fn ols_with_ridge(prob: &RegressionProblem, ridge: f64) -> Result<PosteriorEstimate> {
    let gram = prob.gram();
    let n = gram.dim();
    let max_diag = gram.matrix().diagonal().max();
    let shifted = if ridge > 0.0 { SymMatrix::from_dense(gram.matrix() + DMatrix::identity(n, n) * ridge) } else { gram };
    let factor = match chol_factor(&shifted, 0.0) {
        Ok(f) if f.jitter() == 0.0 => f,
        Ok(_) | Err(Error::NotPositiveDefinite { .. }) => return Err(Error::RankDeficient),
        Err(e) => return Err(e),
    };
    if ridge == 0.0 {
        let min_pivot = factor.lower().diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
        if !(max_diag > 0.0) || min_pivot < RANK_TOL * max_diag {
            return Err(Error::RankDeficient);
        }
    }
    let theta = factor.solve_vec(&prob.hty())?;
    let dof = prob.rows().saturating_sub(n).max(1);
    let sigma2 = (prob.residual(&theta).norm_squared() / dof as f64).max(SIGMA2_FLOOR);
    Ok(PosteriorEstimate {
        theta_bar: PredictorTheta::new(prob.structure, theta)?,
        sigma_theta: factor.inverse().scaled(sigma2),
        sigma2,
        kernel: None,
        method: Method::Ols,
        ridge_fallback: ridge > 0.0,
    })
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::numerics::RngState;

    #[test]
    fn hand_assembled_regression() {
        let traj = Trajectory::new(
            DMatrix::from_column_slice(3, 1, &[4.0, 5.0, 6.0]),
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            None,
            0,
        )
        .unwrap();
        let prob = build_regression(&traj, &ArxStructure::siso(1, 0, true)).unwrap();
        assert_eq!(prob.h, DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 2.0, 6.0]));
        assert_eq!(prob.yvec.as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn too_short_trajectory() {
        let traj = Trajectory::new(DMatrix::zeros(2, 1), DMatrix::zeros(2, 1), None, 0).unwrap();
        let err = build_regression(&traj, &ArxStructure::siso(2, 1, true)).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { .. }));
    }

    #[test]
    fn layout_round_trip_mimo() {
        let s = ArxStructure::new(2, 2, false, 2, 3).unwrap();
        assert_eq!(s.n_theta(), 4 * 2 + 6 * 2);
        for p in 0..s.n_theta() {
            let c = s.coordinate(p);
            let off = match c.block {
                CoeffBlock::Output => s.output_offset(c.lag),
                CoeffBlock::Input => s.input_offset(c.lag),
            };
            assert_eq!(off + c.col * s.n_y + c.row, p);
        }
        let mut rng = RngState::new(1, 0);
        let th = stable_theta(s, &mut rng);
        let phi_y: Vec<_> = (1..=2).map(|i| th.phi_y(i)).collect();
        let phi_u: Vec<_> = (0..=2).map(|j| th.phi_u(j)).collect();
        assert_eq!(PredictorTheta::from_coefficients(s, &phi_y, &phi_u).unwrap(), th);
        assert_eq!(th.phi_u(0).amax(), 0.0);
    }

    #[test]
    fn noise_free_recovery_siso_and_mimo() {
        for (s, seed) in [(ArxStructure::siso(3, 2, true), 4u64), (ArxStructure::new(2, 2, true, 2, 2).unwrap(), 5)] {
            let mut rng = RngState::new(seed, 0);
            let theta = stable_theta(s, &mut rng);
            let u = DMatrix::from_fn(2000, s.n_u, |_, _| rng.standard_normal());
            let traj = simulate_arx(&theta, &u, 0.0, &mut rng);
            let prob = build_regression(&traj, &s).unwrap();
            assert!(prob.residual(&theta.values).amax() < 1e-10);
            let est = ols_estimate(&prob).unwrap();
            assert!((&est.theta_bar.values - &theta.values).amax() < 1e-8);
            assert!(est.trace_sigma_theta() < 1e-12, "trace {} sigma2 {}", est.trace_sigma_theta(), est.sigma2);
            assert!(!est.ridge_fallback);
        }
    }

    #[test]
    fn identity_regressor_floors_sigma2() {
        let s = ArxStructure::siso(1, 1, true);
        let v = DVector::from_column_slice(&[0.5, -1.0, 2.0]);
        let prob = RegressionProblem::new(s, DMatrix::identity(3, 3), v.clone()).unwrap();
        let est = ols_estimate(&prob).unwrap();
        assert!((&est.theta_bar.values - &v).amax() < 1e-15);
        assert_eq!(est.sigma2, SIGMA2_FLOOR);
    }

    #[test]
    fn rank_deficiency_and_ridge_fallback() {
        let s = ArxStructure::siso(1, 1, true);
        let mut h = DMatrix::from_fn(10, 3, |i, j| ((i + 1) * (j + 2)) as f64 % 7.0);
        let c0 = h.column(0).clone_owned();
        h.set_column(2, &(c0 * 2.0));
        let prob = RegressionProblem::new(s, h, DVector::from_fn(10, |i, _| i as f64)).unwrap();
        assert_eq!(ols_estimate(&prob).unwrap_err(), Error::RankDeficient);
        let est = ols_estimate_or_ridge(&prob).unwrap();
        assert!(est.ridge_fallback);
        assert!(est.sigma_theta.is_psd(1e-10));
    }

    #[test]
    fn posterior_json_round_trip() {
        let s = ArxStructure::siso(2, 1, true);
        let mut rng = RngState::new(8, 0);
        let theta = stable_theta(s, &mut rng);
        let u = DMatrix::from_fn(100, 1, |_, _| rng.standard_normal());
        let traj = simulate_arx(&theta, &u, 0.1, &mut rng);
        let prob = build_regression(&traj, &s).unwrap();
        let est = ols_estimate(&prob).unwrap();
        let js = est.to_json(Some(&prob));
        let text = serde_json::to_string(&js).unwrap();
        for key in ["\"method\":\"OLS\"", "\"theta\"", "\"sigma2\"", "\"trace_sigma_theta\"", "\"kernel\":null", "\"sigma_theta\""] {
            assert!(text.contains(key), "missing {key}");
        }
        let back: PosteriorJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_estimate().unwrap(), est);
    }
}
