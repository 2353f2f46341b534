//! First-order sensitivity of the lifted predictor with respect to the
//! identified ARX coefficients, and the uncertainty cost built from it.
//!
//! Differentiating `A(θ) ŷ = Ψ_u u_p + Ψ_y y_p + Φ_u u_f` in coordinate `θ_i`
//! gives `A ∂ŷ/∂θ_i = E_i^{Ψu} u_p + E_i^{Ψy} y_p + E_i^{Φu} u_f + E_i^{Φy} ŷ`,
//! where each `E_i` is a 0/1 placement matrix. Because `ŷ` is affine in
//! `u_f`, so is every Jacobian column: `J_i = J⁰_i + J¹_i u_f`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::ident::{ArxStructure, CoeffBlock, PredictorTheta};
use crate::lifted::{Horizons, LiftedPredictor};
use crate::numerics::SymMatrix;

/// Scalar `(row, col)` positions at which one coordinate appears in each of
/// the four lifted matrices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoordinatePlacement {
    pub psi_u: Vec<(usize, usize)>,
    pub psi_y: Vec<(usize, usize)>,
    pub phi_u: Vec<(usize, usize)>,
    pub phi_y: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementIndex {
    pub structure: ArxStructure,
    pub horizons: Horizons,
    pub coords: Vec<CoordinatePlacement>,
}

pub fn placements(structure: &ArxStructure, h: &Horizons) -> Result<PlacementIndex> {
    h.check(structure)?;
    let (ny, nu, lp, lf) = (structure.n_y, structure.n_u, h.lp, h.lf);
    let mut coords = Vec::with_capacity(structure.n_theta());
    for p in 0..structure.n_theta() {
        let c = structure.coordinate(p);
        let mut cp = CoordinatePlacement::default();
        for k in 0..lf {
            let row = k * ny + c.row;
            // Ψ block (k, ℓ) holds lag Lp − ℓ + k
            if let Some(l) = (lp + k).checked_sub(c.lag).filter(|l| *l < lp) {
                match c.block {
                    CoeffBlock::Output => cp.psi_y.push((row, l * ny + c.col)),
                    CoeffBlock::Input => cp.psi_u.push((row, l * nu + c.col)),
                }
            }
            // Φ block (k, ℓ) holds lag k − ℓ
            if let Some(l) = k.checked_sub(c.lag) {
                match c.block {
                    CoeffBlock::Output => cp.phi_y.push((row, l * ny + c.col)),
                    CoeffBlock::Input => cp.phi_u.push((row, l * nu + c.col)),
                }
            }
        }
        coords.push(cp);
    }
    Ok(PlacementIndex { structure: *structure, horizons: *h, coords })
}

/// `out += E v` for a placement list.
fn gather_add(out: &mut DVector<f64>, pos: &[(usize, usize)], v: &DVector<f64>) {
    for &(r, c) in pos {
        out[r] += v[c];
    }
}

/// `out += E M` row-wise for a placement list.
fn gather_add_rows(out: &mut DMatrix<f64>, pos: &[(usize, usize)], m: &DMatrix<f64>) {
    for &(r, c) in pos {
        for j in 0..m.ncols() {
            out[(r, j)] += m[(c, j)];
        }
    }
}

impl PlacementIndex {
    /// Dense reconstruction `Σ θ_i E_i` of the four lifted matrices.
    pub fn reconstruct(&self, theta: &DVector<f64>) -> [DMatrix<f64>; 4] {
        let (ny, nu, lp, lf) = (self.structure.n_y, self.structure.n_u, self.horizons.lp, self.horizons.lf);
        let mut out = [
            DMatrix::zeros(ny * lf, nu * lp),
            DMatrix::zeros(ny * lf, ny * lp),
            DMatrix::zeros(ny * lf, nu * lf),
            DMatrix::zeros(ny * lf, ny * lf),
        ];
        for (cp, &v) in self.coords.iter().zip(theta.iter()) {
            for (m, pos) in out.iter_mut().zip([&cp.psi_u, &cp.psi_y, &cp.phi_u, &cp.phi_y]) {
                for &(r, c) in pos {
                    m[(r, c)] += v;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPoint {
    pub u_p: DVector<f64>,
    pub y_p: DVector<f64>,
    pub u_f: DVector<f64>,
}

/// Everything about the predictor at `θ̄` that does not depend on the task:
/// the lifted matrices, placements, `G = A⁻¹Φ_u` and the `J¹_i` family.
#[derive(Debug, Clone)]
pub struct SensitivityModel {
    pub theta_bar: PredictorTheta,
    pub predictor: LiftedPredictor,
    pub placements: PlacementIndex,
    pub g: DMatrix<f64>,
    pub j1: Vec<DMatrix<f64>>,
}

/// Jacobian pieces at one task: `J(u_f)` column `i` is `J⁰_i + J¹_i u_f`.
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    pub j0: DMatrix<f64>,
    pub j1: Vec<DMatrix<f64>>,
    pub theta_bar: PredictorTheta,
    pub u_p: DVector<f64>,
    pub y_p: DVector<f64>,
}

impl SensitivityBundle {
    pub fn n_theta(&self) -> usize {
        self.j0.ncols()
    }

    pub fn jacobian_at(&self, u_f: &DVector<f64>) -> Result<DMatrix<f64>> {
        let want = self.j1.first().map_or(0, |m| m.ncols());
        dim_check(u_f.len() == want, || format!("u_f has length {}, expected {want}", u_f.len()))?;
        let mut j = self.j0.clone();
        for (i, j1) in self.j1.iter().enumerate() {
            let col = j1 * u_f;
            let mut target = j.column_mut(i);
            target += col;
        }
        Ok(j)
    }
}

impl SensitivityModel {
    pub fn new(theta_bar: &PredictorTheta, h: &Horizons) -> Result<Self> {
        let predictor = LiftedPredictor::from_theta(theta_bar, h)?;
        let placements = placements(&theta_bar.structure, h)?;
        let g = predictor.forced_response();
        let j1 = placements
            .coords
            .iter()
            .map(|cp| {
                let mut m = DMatrix::zeros(g.nrows(), g.ncols());
                for &(r, c) in &cp.phi_u {
                    m[(r, c)] += 1.0;
                }
                gather_add_rows(&mut m, &cp.phi_y, &g);
                predictor.solve_a_mat(&m)
            })
            .collect();
        Ok(SensitivityModel { theta_bar: theta_bar.clone(), predictor, placements, g, j1 })
    }

    fn n_rows(&self) -> usize {
        self.predictor.n_y * self.predictor.horizons.lf
    }

    /// `J⁰` for the past window `(u_p, y_p)`.
    pub fn j0(&self, u_p: &DVector<f64>, y_p: &DVector<f64>) -> Result<DMatrix<f64>> {
        let y0 = self.predictor.free_response(u_p, y_p)?;
        let mut j0 = DMatrix::zeros(self.n_rows(), self.j1.len());
        for (i, cp) in self.placements.coords.iter().enumerate() {
            let mut v = DVector::zeros(self.n_rows());
            gather_add(&mut v, &cp.psi_u, u_p);
            gather_add(&mut v, &cp.psi_y, y_p);
            gather_add(&mut v, &cp.phi_y, &y0);
            j0.set_column(i, &self.predictor.solve_a(&v));
        }
        Ok(j0)
    }

    pub fn bundle(&self, u_p: &DVector<f64>, y_p: &DVector<f64>) -> Result<SensitivityBundle> {
        Ok(SensitivityBundle {
            j0: self.j0(u_p, y_p)?,
            j1: self.j1.clone(),
            theta_bar: self.theta_bar.clone(),
            u_p: u_p.clone(),
            y_p: y_p.clone(),
        })
    }

    /// Jacobian evaluated directly from its defining formula at `task`.
    pub fn direct_jacobian(&self, task: &TaskPoint) -> Result<DMatrix<f64>> {
        let yhat = self.predictor.predict(&task.u_p, &task.y_p, &task.u_f)?;
        let mut j = DMatrix::zeros(self.n_rows(), self.j1.len());
        for (i, cp) in self.placements.coords.iter().enumerate() {
            let mut v = DVector::zeros(self.n_rows());
            gather_add(&mut v, &cp.psi_u, &task.u_p);
            gather_add(&mut v, &cp.psi_y, &task.y_p);
            gather_add(&mut v, &cp.phi_u, &task.u_f);
            gather_add(&mut v, &cp.phi_y, &yhat);
            j.set_column(i, &self.predictor.solve_a(&v));
        }
        Ok(j)
    }
}

/// Jacobian of `ŷ_f` with respect to the identified coordinates at `task`,
/// together with its affine decomposition in `u_f`.
pub fn jacobian(theta_bar: &PredictorTheta, h: &Horizons, task: &TaskPoint) -> Result<(DMatrix<f64>, SensitivityBundle)> {
    let model = SensitivityModel::new(theta_bar, h)?;
    let j = model.direct_jacobian(task)?;
    Ok((j, model.bundle(&task.u_p, &task.y_p)?))
}

fn check_sigma(j: &DMatrix<f64>, sigma: &SymMatrix) -> Result<()> {
    dim_check(j.ncols() == sigma.dim(), || format!("J has {} columns, Σ_θ is {1}x{1}", j.ncols(), sigma.dim()))
}

/// `J Σ_θ Jᵀ`.
pub fn output_covariance(j: &DMatrix<f64>, sigma_theta: &SymMatrix) -> Result<SymMatrix> {
    check_sigma(j, sigma_theta)?;
    Ok(SymMatrix::from_dense(j * sigma_theta.matrix() * j.transpose()))
}

/// `tr(Jᵀ Q J Σ_θ)` at `u_f`.
pub fn fce_term(bundle: &SensitivityBundle, sigma_theta: &SymMatrix, q_lift: &SymMatrix, u_f: &DVector<f64>) -> Result<f64> {
    let j = bundle.jacobian_at(u_f)?;
    check_sigma(&j, sigma_theta)?;
    dim_check(q_lift.dim() == j.nrows(), || "Q_lift does not match the output dimension".into())?;
    let qj = q_lift.matrix() * &j;
    Ok((j.transpose() * qj).component_mul(sigma_theta.matrix()).sum())
}

/// Quadratic part `Σ_ij (Σ_θ)_ij J¹_iᵀ Q J¹_j`. Depends on `θ̄` only, not on the task.
pub fn fce_hessian(j1: &[DMatrix<f64>], sigma_theta: &SymMatrix, q_lift: &SymMatrix) -> Result<SymMatrix> {
    dim_check(j1.len() == sigma_theta.dim() && !j1.is_empty(), || "J¹ family does not match Σ_θ".into())?;
    let (rows, cols) = j1[0].shape();
    dim_check(q_lift.dim() == rows, || "Q_lift does not match the output dimension".into())?;
    let s = sigma_theta.matrix();
    let mut hq = DMatrix::zeros(cols, cols);
    for (i, ji) in j1.iter().enumerate() {
        let mut t = DMatrix::zeros(rows, cols);
        for (jdx, jj) in j1.iter().enumerate() {
            let w = s[(i, jdx)];
            if w != 0.0 {
                t += jj * w;
            }
        }
        hq += ji.transpose() * (q_lift.matrix() * t);
    }
    Ok(SymMatrix::from_dense(hq))
}

/// Linear part `Σ_ij (Σ_θ)_ij J¹_iᵀ Q J⁰_j`.
pub fn fce_linear(j1: &[DMatrix<f64>], j0: &DMatrix<f64>, sigma_theta: &SymMatrix, q_lift: &SymMatrix) -> Result<DVector<f64>> {
    dim_check(j1.len() == sigma_theta.dim() && j0.ncols() == sigma_theta.dim(), || "J⁰/J¹ do not match Σ_θ".into())?;
    let qj0s = q_lift.matrix() * j0 * sigma_theta.matrix();
    let cols = j1.first().map_or(0, |m| m.ncols());
    let mut h = DVector::zeros(cols);
    for (i, ji) in j1.iter().enumerate() {
        h += ji.transpose() * qj0s.column(i);
    }
    Ok(h)
}

/// `L_Ω(u_f) = u_fᵀ Hq u_f + 2 hlinᵀ u_f + c0`.
pub fn fce_quadratic(bundle: &SensitivityBundle, sigma_theta: &SymMatrix, q_lift: &SymMatrix) -> Result<(SymMatrix, DVector<f64>, f64)> {
    check_sigma(&bundle.j0, sigma_theta)?;
    dim_check(q_lift.dim() == bundle.j0.nrows(), || "Q_lift does not match the output dimension".into())?;
    let hq = fce_hessian(&bundle.j1, sigma_theta, q_lift)?;
    let hlin = fce_linear(&bundle.j1, &bundle.j0, sigma_theta, q_lift)?;
    let j0 = &bundle.j0;
    let c0 = (j0.transpose() * q_lift.matrix() * j0).component_mul(sigma_theta.matrix()).sum();
    Ok((hq, hlin, c0))
}

/// Block-diagonal lifted weight `diag(Q, …, Q)` over `lf` steps.
pub fn lift_weight(q: &DMatrix<f64>, lf: usize) -> SymMatrix {
    let n = q.nrows();
    let mut m = DMatrix::zeros(n * lf, n * lf);
    for k in 0..lf {
        m.view_mut((k * n, k * n), (n, n)).copy_from(q);
    }
    SymMatrix::from_dense(m)
}

/// `W̄ = (1/N) Σ_j J(ξ_j)ᵀ Q J(ξ_j)`.
pub fn task_sensitivity(theta_bar: &PredictorTheta, h: &Horizons, tasks: &[TaskPoint], q_lift: &SymMatrix) -> Result<SymMatrix> {
    if tasks.is_empty() {
        return Err(Error::EmptyTaskSet);
    }
    let model = SensitivityModel::new(theta_bar, h)?;
    dim_check(q_lift.dim() == model.n_rows(), || "Q_lift does not match the output dimension".into())?;
    let terms: Vec<DMatrix<f64>> = tasks
        .par_iter()
        .map(|t| model.direct_jacobian(t).map(|j| j.transpose() * q_lift.matrix() * j))
        .collect::<Result<_>>()?;
    let n = model.j1.len();
    let mut sum = DMatrix::zeros(n, n);
    for t in &terms {
        sum += t;
    }
    Ok(SymMatrix::from_dense(sum / tasks.len() as f64))
}

/// Rescales `W̄` so that its trace equals its dimension.
pub fn normalize_w(w_bar: &SymMatrix) -> Result<SymMatrix> {
    let tr = w_bar.trace();
    if !(tr > 0.0) {
        return Err(Error::ZeroTrace);
    }
    Ok(w_bar.scaled(w_bar.dim() as f64 / tr))
}

/// Serialized `W̄`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WbarJson {
    pub matrix: Vec<Vec<f64>>,
    pub n_tasks: usize,
    pub normalized: bool,
    pub trace: f64,
}

impl WbarJson {
    pub fn new(w: &SymMatrix, n_tasks: usize, normalized: bool) -> Self {
        let n = w.dim();
        WbarJson {
            matrix: (0..n).map(|i| (0..n).map(|j| w.matrix()[(i, j)]).collect()).collect(),
            n_tasks,
            normalized,
            trace: w.trace(),
        }
    }

    pub fn to_sym(&self) -> Result<SymMatrix> {
        let n = self.matrix.len();
        dim_check(n > 0 && self.matrix.iter().all(|r| r.len() == n), || "W̄ must be a non-empty square array".into())?;
        let flat: Vec<f64> = self.matrix.iter().flatten().copied().collect();
        Ok(SymMatrix::from_dense(DMatrix::from_row_slice(n, n, &flat)))
    }
}
