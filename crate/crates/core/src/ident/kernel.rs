use argmin::core::{CostFunction, Error as ArgminError, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ols_estimate_or_ridge, ArxStructure, CoeffBlock, RegressionProblem, SIGMA2_FLOOR};
use crate::error::{Error, Result};
use crate::numerics::{chol_factor, CholFactor, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    /// Tuned/correlated: `c λ^{max(i,j)}`.
    #[serde(rename = "TC")]
    Tc,
    /// Stable spline: `c (λ^{i+j+max(i,j)}/2 − λ^{3 max(i,j)}/6)`.
    #[serde(rename = "SS")]
    Ss,
}

impl KernelFamily {
    pub fn entry(self, lambda: f64, i: usize, j: usize) -> f64 {
        let m = i.max(j) as i32;
        match self {
            KernelFamily::Tc => lambda.powi(m),
            KernelFamily::Ss => lambda.powi(i as i32 + j as i32 + m) / 2.0 - lambda.powi(3 * m) / 6.0,
        }
    }
}

pub const C_BOUNDS: (f64, f64) = (1e-8, 1e4);
pub const LAMBDA_BOUNDS: (f64, f64) = (0.5, 0.999);

/// Block-diagonal prior: `(c_y, λ_y)` on the output coefficients, `(c_u, λ_u)`
/// on the input coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub c_y: f64,
    pub lambda_y: f64,
    pub c_u: f64,
    pub lambda_u: f64,
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |c: f64, l: f64| c > 0.0 && l > 0.0 && l < 1.0;
        if ok(self.c_y, self.lambda_y) && ok(self.c_u, self.lambda_u) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("kernel hyperparameters out of range: {self:?}")))
        }
    }

    pub fn within_bounds(&self) -> bool {
        let c = |v: f64| v >= C_BOUNDS.0 && v <= C_BOUNDS.1;
        let l = |v: f64| v >= LAMBDA_BOUNDS.0 && v <= LAMBDA_BOUNDS.1;
        c(self.c_y) && c(self.c_u) && l(self.lambda_y) && l(self.lambda_u)
    }
}

/// Prior covariance `K(η)` over θ. Coefficients of the same lag share the
/// lag kernel value (Kronecker with identity across matrix entries).
pub fn kernel_matrix(cfg: &KernelConfig, structure: &ArxStructure) -> Result<SymMatrix> {
    cfg.validate()?;
    let n = structure.n_theta();
    let mut k = DMatrix::zeros(n, n);
    for p in 0..n {
        let cp = structure.coordinate(p);
        for q in 0..n {
            let cq = structure.coordinate(q);
            if cp.block != cq.block || cp.row != cq.row || cp.col != cq.col {
                continue;
            }
            let (c, l) = match cp.block {
                CoeffBlock::Output => (cfg.c_y, cfg.lambda_y),
                CoeffBlock::Input => (cfg.c_u, cfg.lambda_u),
            };
            k[(p, q)] = c * cfg.family.entry(l, structure.kernel_lag(p), structure.kernel_lag(q));
        }
    }
    Ok(SymMatrix::from_dense(k))
}

/// Sufficient statistics of the marginal likelihood.
struct EbStats {
    rows: usize,
    gram: DMatrix<f64>,
    hty: DVector<f64>,
    yty: f64,
}

impl EbStats {
    fn new(prob: &RegressionProblem) -> Self {
        EbStats { rows: prob.rows(), gram: prob.gram().into_matrix(), hty: prob.hty(), yty: prob.yvec.norm_squared() }
    }

    /// `log det Σ_y + yᵀ Σ_y⁻¹ y` with `Σ_y = H L Lᵀ Hᵀ + σ² I`, evaluated in
    /// parameter space through `B = I + LᵀHᵀHL/σ²`.
    fn objective_from_ltgl(&self, ltgl: &DMatrix<f64>, z: &DVector<f64>, sigma2: f64) -> Option<f64> {
        let n = ltgl.nrows();
        let b = SymMatrix::from_dense(DMatrix::identity(n, n) + ltgl / sigma2);
        let f = chol_factor(&b, 0.0).ok()?;
        let w = f.solve_vec(z).ok()?;
        let quad = (self.yty - z.dot(&w) / sigma2) / sigma2;
        let v = self.rows as f64 * sigma2.ln() + f.logdet() + quad;
        v.is_finite().then_some(v)
    }

    fn objective(&self, lower: &DMatrix<f64>, sigma2: f64) -> Option<f64> {
        let ltgl = lower.transpose() * &self.gram * lower;
        let z = lower.transpose() * &self.hty;
        self.objective_from_ltgl(&ltgl, &z, sigma2)
    }
}

/// Lower factor of the unit-scale (`c = 1`) prior block for lag kernel indices `lags`.
fn unit_block_factor(family: KernelFamily, lambda: f64, lags: &[usize]) -> Option<DMatrix<f64>> {
    let m = lags.len();
    if m == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let k = SymMatrix::from_dense(DMatrix::from_fn(m, m, |a, b| family.entry(lambda, lags[a], lags[b])));
    chol_factor(&k, 0.0).ok().map(|f| f.lower().clone())
}

/// Lag-level factor expanded to θ coordinates through the Kronecker structure.
struct BlockFactors {
    y_idx: Vec<usize>,
    u_idx: Vec<usize>,
}

impl BlockFactors {
    fn new(structure: &ArxStructure) -> Self {
        let (mut y_idx, mut u_idx) = (Vec::new(), Vec::new());
        for p in 0..structure.n_theta() {
            match structure.coordinate(p).block {
                CoeffBlock::Output => y_idx.push(p),
                CoeffBlock::Input => u_idx.push(p),
            }
        }
        BlockFactors { y_idx, u_idx }
    }

    fn lags(structure: &ArxStructure, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&p| structure.kernel_lag(p)).collect()
    }
}

/// Full lower factor of `K(η)` built blockwise; `None` if a block cannot be factored.
fn kernel_factor(cfg: &KernelConfig, structure: &ArxStructure) -> Option<DMatrix<f64>> {
    let k = kernel_matrix(cfg, structure).ok()?;
    chol_factor(&k, 0.0).ok().map(|f| f.lower().clone())
}

/// Negative log marginal likelihood (up to the `N log 2π` constant) at `(cfg, σ²)`.
pub fn eb_objective(prob: &RegressionProblem, cfg: &KernelConfig, sigma2: f64) -> Result<f64> {
    let stats = EbStats::new(prob);
    let lower = kernel_factor(cfg, &prob.structure).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    stats.objective(&lower, sigma2).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EbResult {
    pub config: KernelConfig,
    pub sigma2: f64,
    pub objective: f64,
}

const GRID_POINTS: usize = 5;
const NM_MAX_ITERS: u64 = 500;

fn log_grid(lo: f64, hi: f64) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..GRID_POINTS).map(|k| (a + (b - a) * k as f64 / (GRID_POINTS - 1) as f64).exp()).collect()
}

/// Empirical Bayes: minimizes the marginal-likelihood objective over
/// `(c_y, λ_y, c_u, λ_u, σ²)` by a coarse log grid followed by Nelder–Mead in
/// log coordinates. The σ² search range is two decades either side of the
/// least-squares residual variance.
pub fn eb_tune(prob: &RegressionProblem, family: KernelFamily) -> Result<EbResult> {
    let structure = prob.structure;
    if prob.rows() <= structure.n_theta() {
        return Err(Error::InsufficientData { needed: structure.n_theta(), got: prob.rows() });
    }
    let stats = EbStats::new(prob);
    let blocks = BlockFactors::new(&structure);
    let y_lags = BlockFactors::lags(&structure, &blocks.y_idx);
    let u_lags = BlockFactors::lags(&structure, &blocks.u_idx);
    let has_u = !blocks.u_idx.is_empty();

    let s0 = ols_estimate_or_ridge(prob)?.sigma2.max(SIGMA2_FLOOR);
    let sigma2_bounds = (s0 * 1e-2, s0 * 1e2);

    let c_grid = log_grid(C_BOUNDS.0, C_BOUNDS.1);
    let l_grid = log_grid(LAMBDA_BOUNDS.0, LAMBDA_BOUNDS.1);
    let s_grid = log_grid(sigma2_bounds.0, sigma2_bounds.1);

    // permute θ so the output block precedes the input block (already true for our layout)
    let gram = &stats.gram;
    let ny_p = blocks.y_idx.len();
    let gyy = gram.view((0, 0), (ny_p, ny_p)).clone_owned();
    let gyu = gram.view((0, ny_p), (ny_p, gram.ncols() - ny_p)).clone_owned();
    let guu = gram.view((ny_p, ny_p), (gram.ncols() - ny_p, gram.ncols() - ny_p)).clone_owned();
    let hy = stats.hty.rows(0, ny_p).clone_owned();
    let hu = stats.hty.rows(ny_p, stats.hty.len() - ny_p).clone_owned();

    let ly: Vec<Option<DMatrix<f64>>> = l_grid.iter().map(|&l| unit_block_factor(family, l, &y_lags)).collect();
    let lu: Vec<Option<DMatrix<f64>>> = l_grid.iter().map(|&l| unit_block_factor(family, l, &u_lags)).collect();

    let mut best: Option<(f64, [f64; 5])> = None;
    let u_grid_len = if has_u { GRID_POINTS } else { 1 };
    for (iy, fy) in ly.iter().enumerate() {
        let Some(fy) = fy else { continue };
        let ayy = fy.transpose() * &gyy * fy;
        let zy = fy.transpose() * &hy;
        for iu in 0..u_grid_len {
            let (auu, ayu, zu) = if has_u {
                let Some(fu) = &lu[iu] else { continue };
                (fu.transpose() * &guu * fu, fy.transpose() * &gyu * fu, fu.transpose() * &hu)
            } else {
                (DMatrix::zeros(0, 0), DMatrix::zeros(ny_p, 0), DVector::zeros(0))
            };
            for &cy in &c_grid {
                for cu in c_grid.iter().take(u_grid_len).copied().map(|c| if has_u { c } else { 1.0 }) {
                    let n = ny_p + auu.nrows();
                    let mut ltgl = DMatrix::zeros(n, n);
                    ltgl.view_mut((0, 0), (ny_p, ny_p)).copy_from(&(&ayy * cy));
                    if has_u {
                        let cross = &ayu * (cy * cu).sqrt();
                        ltgl.view_mut((0, ny_p), (ny_p, n - ny_p)).copy_from(&cross);
                        ltgl.view_mut((ny_p, 0), (n - ny_p, ny_p)).copy_from(&cross.transpose());
                        ltgl.view_mut((ny_p, ny_p), (n - ny_p, n - ny_p)).copy_from(&(&auu * cu));
                    }
                    let mut z = DVector::zeros(n);
                    z.rows_mut(0, ny_p).copy_from(&(&zy * cy.sqrt()));
                    if has_u {
                        z.rows_mut(ny_p, n - ny_p).copy_from(&(&zu * cu.sqrt()));
                    }
                    for &s2 in &s_grid {
                        if let Some(v) = stats.objective_from_ltgl(&ltgl, &z, s2) {
                            if best.map_or(true, |(b, _)| v < b) {
                                let lu_val = if has_u { l_grid[iu] } else { l_grid[0] };
                                best = Some((v, [cy, l_grid[iy], cu, lu_val, s2]));
                            }
                        }
                    }
                }
            }
        }
    }
    let (grid_val, grid_pt) = best.ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;

    let cost = EbCost {
        stats: &stats,
        structure,
        family,
        has_u,
        fixed_u: (grid_pt[2], grid_pt[3]),
        bounds: Bounds { sigma2: sigma2_bounds },
    };
    let start = cost.encode(&grid_pt);
    let steps: Vec<f64> = cost.step_sizes();
    let mut simplex = vec![start.clone()];
    for (k, s) in steps.iter().enumerate() {
        let mut v = start.clone();
        v[k] += s;
        // step toward the interior if we started on an upper bound
        if cost.penalty(&v) > 0.0 {
            v[k] -= 2.0 * s;
        }
        simplex.push(v);
    }
    let refined = NelderMead::new(simplex)
        .with_sd_tolerance(1e-10)
        .ok()
        .and_then(|solver| Executor::new(cost.clone(), solver).configure(|s| s.max_iters(NM_MAX_ITERS)).run().ok())
        .and_then(|res| {
            let st = res.state();
            st.get_best_param().cloned().map(|p| (st.get_best_cost(), p))
        });

    let (value, point) = match refined {
        Some((v, p)) if v < grid_val && cost.penalty(&p) == 0.0 => (v, cost.decode(&p)),
        _ => (grid_val, grid_pt),
    };
    Ok(EbResult {
        config: KernelConfig { family, c_y: point[0], lambda_y: point[1], c_u: point[2], lambda_u: point[3] },
        sigma2: point[4],
        objective: value,
    })
}

#[derive(Clone, Copy)]
struct Bounds {
    sigma2: (f64, f64),
}

#[derive(Clone)]
struct EbCost<'a> {
    stats: &'a EbStats,
    structure: ArxStructure,
    family: KernelFamily,
    has_u: bool,
    fixed_u: (f64, f64),
    bounds: Bounds,
}

impl EbCost<'_> {
    fn ranges(&self) -> Vec<(f64, f64)> {
        let mut r = vec![C_BOUNDS, LAMBDA_BOUNDS];
        if self.has_u {
            r.push(C_BOUNDS);
            r.push(LAMBDA_BOUNDS);
        }
        r.push(self.bounds.sigma2);
        r
    }

    fn encode(&self, pt: &[f64; 5]) -> Vec<f64> {
        let mut v = vec![pt[0].ln(), pt[1].ln()];
        if self.has_u {
            v.push(pt[2].ln());
            v.push(pt[3].ln());
        }
        v.push(pt[4].ln());
        v
    }

    fn decode(&self, v: &[f64]) -> [f64; 5] {
        let ranges = self.ranges();
        let x: Vec<f64> = v.iter().zip(&ranges).map(|(p, (lo, hi))| p.exp().clamp(*lo, *hi)).collect();
        if self.has_u {
            [x[0], x[1], x[2], x[3], x[4]]
        } else {
            [x[0], x[1], self.fixed_u.0, self.fixed_u.1, x[2]]
        }
    }

    fn step_sizes(&self) -> Vec<f64> {
        let mut s = vec![1.0, 0.05];
        if self.has_u {
            s.push(1.0);
            s.push(0.05);
        }
        s.push(0.5);
        s
    }

    /// Squared log-distance outside the box.
    fn penalty(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(self.ranges())
            .map(|(p, (lo, hi))| {
                let (a, b) = (lo.ln(), hi.ln());
                if *p < a {
                    (a - p).powi(2)
                } else if *p > b {
                    (p - b).powi(2)
                } else {
                    0.0
                }
            })
            .sum()
    }
}

impl CostFunction for EbCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, ArgminError> {
        let pt = self.decode(p);
        let cfg = KernelConfig { family: self.family, c_y: pt[0], lambda_y: pt[1], c_u: pt[2], lambda_u: pt[3] };
        let base = kernel_factor(&cfg, &self.structure)
            .and_then(|l| self.stats.objective(&l, pt[4]))
            .unwrap_or(1e300);
        Ok(base + 1e6 * self.penalty(p))
    }
}

/// Factor of the prior; exposed for the posterior routines.
pub(super) fn prior_factor(k: &SymMatrix) -> Result<CholFactor> {
    chol_factor(k, 0.0)
}
