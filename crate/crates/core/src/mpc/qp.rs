//! Convex QP `min ½ zᵀPz + qᵀz  s.t.  G z ≤ h` by ADMM operator splitting.
//!
//! The splitting follows the usual scheme with an auxiliary `w = G z`
//! projected onto `w ≤ h`: one linear system with the fixed matrix
//! `P + σI + ρGᵀG` per iteration, over-relaxation `α`, and a dual update.
//! The matrix is factored once per workspace, so a controller whose `P` and
//! `G` stay fixed across steps pays for the factorization only once.
//!
//! The iteration runs on a Ruiz-equilibrated copy of the problem; residuals
//! and termination are measured on the original scaling.
//!
//! Every few iterations the active set guessed from the iterate is used to
//! solve the equality-constrained KKT system directly. When that point
//! satisfies the KKT conditions to high accuracy it is accepted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Result};
use crate::numerics::{chol_factor, CholFactor, SymMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: SymMatrix,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    /// Leading coordinates that are box-constrained, with their bounds.
    /// The reported solution is clamped onto this box.
    pub box_lo: DVector<f64>,
    pub box_hi: DVector<f64>,
    /// Range of slack coordinates, if any.
    pub slack_range: Option<(usize, usize)>,
}

impl QpProblem {
    pub fn new(p: SymMatrix, q: DVector<f64>, g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        let n = p.dim();
        dim_check(q.len() == n, || format!("q has length {}, P is {n}x{n}", q.len()))?;
        dim_check(g.ncols() == n && g.nrows() == h.len(), || "G and h do not match".into())?;
        Ok(QpProblem { p, q, g, h, box_lo: DVector::zeros(0), box_hi: DVector::zeros(0), slack_range: None })
    }

    pub fn with_box(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        dim_check(lo.len() == hi.len() && lo.len() <= self.p.dim(), || "box bounds do not match".into())?;
        self.box_lo = lo;
        self.box_hi = hi;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.p.dim()
    }

    pub fn n_constraints(&self) -> usize {
        self.h.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(self.p.matrix() * z)) + self.q.dot(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub duals: DVector<f64>,
    pub kkt_residual: f64,
    pub primal_violation: f64,
    pub slack_usage: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub polish_every: usize,
    /// Iterations between penalty updates (0 disables adaptation).
    pub adapt_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            max_iter: 20_000,
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            eps_infeasible: 1e-6,
            polish_every: 25,
            adapt_every: 100,
        }
    }
}

/// KKT measures of `(z, λ)`: stationarity, primal violation, complementarity
/// and dual sign, combined as their maximum.
pub fn kkt_residual(qp: &QpProblem, z: &DVector<f64>, lambda: &DVector<f64>) -> (f64, f64) {
    let stat = (qp.p.matrix() * z + &qp.q + qp.g.transpose() * lambda).amax();
    let slack = &qp.g * z - &qp.h;
    let viol = slack.iter().fold(0.0f64, |m, v| m.max(*v));
    let comp = lambda.dot(&slack).abs();
    let dual_neg = lambda.iter().fold(0.0f64, |m, v| m.max(-v));
    (stat.max(viol).max(comp).max(dual_neg), viol)
}

/// Magnitude of the terms entering [`kkt_residual`], used to make acceptance
/// thresholds relative.
fn kkt_scale(qp: &QpProblem, z: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    let pz = (qp.p.matrix() * z).amax();
    let gtl = (qp.g.transpose() * lambda).amax();
    1.0 + pz.max(gtl).max(qp.q.amax()).max(qp.h.amax())
}

/// Solver state that can be reused across problems sharing `P` and `G`.
#[derive(Debug, Clone)]
pub struct QpWorkspace {
    p: SymMatrix,
    g: DMatrix<f64>,
    scaling: Scaling,
    factor: CholFactor,
    pub settings: QpSettings,
}

/// `P̄ = c D P D`, `Ḡ = E G D`; iterates map back as `z = D z̄`,
/// `λ = E λ̄ / c`, `w = E⁻¹ w̄`.
#[derive(Debug, Clone)]
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    p: DMatrix<f64>,
    g: DMatrix<f64>,
}

const RUIZ_ITERS: usize = 25;
const SCALE_CLAMP: (f64, f64) = (1e-4, 1e4);

fn ruiz(p: &DMatrix<f64>, g: &DMatrix<f64>) -> Scaling {
    let (n, m) = (p.nrows(), g.nrows());
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut ps = p.clone();
    let mut gs = g.clone();
    let inv_sqrt = |v: f64| if v > 0.0 { (1.0 / v.sqrt()).clamp(SCALE_CLAMP.0, SCALE_CLAMP.1) } else { 1.0 };
    for _ in 0..RUIZ_ITERS {
        let dx = DVector::from_fn(n, |j, _| inv_sqrt(ps.column(j).amax().max(gs.column(j).amax())));
        let dw = DVector::from_fn(m, |i, _| inv_sqrt(gs.row(i).amax()));
        for j in 0..n {
            for i in 0..n {
                ps[(i, j)] *= dx[i] * dx[j];
            }
            for i in 0..m {
                gs[(i, j)] *= dw[i] * dx[j];
            }
        }
        d.component_mul_assign(&dx);
        e.component_mul_assign(&dw);
    }
    let mean_col = (0..n).map(|j| ps.column(j).amax()).sum::<f64>() / n.max(1) as f64;
    let c = if mean_col > 0.0 { (1.0 / mean_col).clamp(SCALE_CLAMP.0, SCALE_CLAMP.1) } else { 1.0 };
    ps *= c;
    Scaling { d, e, c, p: ps, g: gs }
}

impl Scaling {
    fn factor(&self, sigma: f64, rho: f64) -> Result<CholFactor> {
        let n = self.p.nrows();
        let m = &self.p + DMatrix::identity(n, n) * sigma + self.g.transpose() * &self.g * rho;
        chol_factor(&SymMatrix::from_dense(m), 0.0)
    }
}

impl QpWorkspace {
    pub fn new(p: &SymMatrix, g: &DMatrix<f64>, settings: QpSettings) -> Result<Self> {
        dim_check(g.ncols() == p.dim(), || "G and P do not match".into())?;
        let scaling = ruiz(p.matrix(), g);
        let factor = scaling.factor(settings.sigma, settings.rho)?;
        Ok(QpWorkspace { p: p.clone(), g: g.clone(), scaling, factor, settings })
    }

    pub fn matches(&self, qp: &QpProblem) -> bool {
        self.p == qp.p && self.g == qp.g
    }

    /// Solves `qp`, which must share `P` and `G` with this workspace.
    pub fn solve(&self, qp: &QpProblem, warm: Option<(&DVector<f64>, &DVector<f64>)>) -> Result<QpSolution> {
        dim_check(self.matches(qp), || "QP does not match the cached factorization".into())?;
        let s = self.settings;
        let sc = &self.scaling;
        let (n, m) = (qp.dim(), qp.n_constraints());
        let qs = qp.q.component_mul(&sc.d) * sc.c;
        let hs = qp.h.component_mul(&sc.e);
        let (mut xs, mut ys) = match warm {
            Some((x0, y0)) if x0.len() == n && y0.len() == m => (x0.component_div(&sc.d), y0.map(|v| v.max(0.0)).component_div(&sc.e) * sc.c),
            _ => (DVector::zeros(n), DVector::zeros(m)),
        };
        let mut ws = (&sc.g * &xs).zip_map(&hs, |a, b| a.min(b));
        let gst = sc.g.transpose();
        let gt = qp.g.transpose();
        let mut best_polish: Option<QpSolution> = None;
        let mut rho = s.rho;
        let mut refactored: Option<CholFactor> = None;

        for k in 1..=s.max_iter {
            let factor = refactored.as_ref().unwrap_or(&self.factor);
            let rhs = &xs * s.sigma - &qs + &gst * (&ws * rho - &ys);
            let xt = factor.solve_vec(&rhs)?;
            let wt = &sc.g * &xt;
            let x_new = &xt * s.alpha + &xs * (1.0 - s.alpha);
            let w_relax = &wt * s.alpha + &ws * (1.0 - s.alpha);
            let w_new = (&w_relax + &ys / rho).zip_map(&hs, |a, b| a.min(b));
            let y_new = &ys + (&w_relax - &w_new) * rho;
            let dys = &y_new - &ys;
            xs = x_new;
            ws = w_new;
            ys = y_new;

            // unscaled iterates for every test below
            let x = xs.component_mul(&sc.d);
            let y = ys.component_mul(&sc.e) / sc.c;
            let w = ws.component_div(&sc.e);
            let gx = &qp.g * &x;
            let r_prim = (&gx - &w).amax();
            let px = qp.p.matrix() * &x;
            let gty = &gt * &y;
            let r_dual = (&px + &qp.q + &gty).amax();
            let eps_p = s.eps_abs + s.eps_rel * gx.amax().max(w.amax());
            let eps_d = s.eps_abs + s.eps_rel * px.amax().max(gty.amax()).max(qp.q.amax());

            // primal infeasibility certificate: Gᵀδy ≈ 0 with hᵀδy < 0, δy ≥ 0
            if k % s.polish_every == 0 {
                let dy = dys.component_mul(&sc.e) / sc.c;
                let dy_norm = dy.amax();
                if dy_norm > 0.0 {
                    let gtdy = (&gt * &dy).amax();
                    let htdy = qp.h.dot(&dy);
                    let dy_min = dy.min();
                    if dy_min >= -s.eps_infeasible * dy_norm && gtdy <= s.eps_infeasible * dy_norm && htdy < -s.eps_infeasible * dy_norm {
                        return Ok(self.finish(qp, x, y, k, QpStatus::Infeasible));
                    }
                }
            }

            if s.adapt_every > 0 && k % s.adapt_every == 0 {
                // balance the normalized primal and dual residuals of the scaled problem
                let gxs = &sc.g * &xs;
                let pxs = &sc.p * &xs;
                let gtys = &gst * &ys;
                let np = (&gxs - &ws).amax() / gxs.amax().max(ws.amax()).max(1e-30);
                let nd = (&pxs + &qs + &gtys).amax() / pxs.amax().max(gtys.amax()).max(qs.amax()).max(1e-30);
                let proposal = (rho * (np / nd.max(1e-30)).sqrt()).clamp(1e-6, 1e6);
                if proposal.is_finite() && (proposal > 5.0 * rho || proposal < rho / 5.0) {
                    rho = proposal;
                    refactored = Some(sc.factor(s.sigma, rho)?);
                }
            }

            if k % s.polish_every == 0 || (r_prim <= eps_p && r_dual <= eps_d) {
                if let Some(sol) = self.polish(qp, &x, &w, &y, k) {
                    return Ok(sol);
                }
                if r_prim <= eps_p && r_dual <= eps_d {
                    let sol = self.finish(qp, x, y, k, QpStatus::Optimal);
                    let tol = 1e-8f64.max(1e-14 * kkt_scale(qp, &sol.z, &sol.duals));
                    if sol.kkt_residual < tol && sol.primal_violation < tol {
                        return Ok(sol);
                    }
                    best_polish = Some(sol);
                }
            }
        }
        let mut sol = match best_polish {
            Some(sol) => sol,
            None => self.finish(qp, xs.component_mul(&sc.d), ys.component_mul(&sc.e) / sc.c, s.max_iter, QpStatus::MaxIter),
        };
        sol.status = QpStatus::MaxIter;
        sol.iterations = s.max_iter;
        Ok(sol)
    }

    fn finish(&self, qp: &QpProblem, mut x: DVector<f64>, y: DVector<f64>, iterations: usize, status: QpStatus) -> QpSolution {
        for i in 0..qp.box_lo.len() {
            x[i] = x[i].clamp(qp.box_lo[i], qp.box_hi[i]);
        }
        let (kkt, viol) = kkt_residual(qp, &x, &y);
        let slack_usage = qp.slack_range.map_or(0.0, |(a, b)| x.rows(a, b - a).iter().fold(0.0f64, |m, v| m.max(*v)));
        QpSolution { z: x, duals: y, kkt_residual: kkt, primal_violation: viol, slack_usage, iterations, status }
    }

    /// Equality-constrained solve on a guessed active set, refined by
    /// adding violated constraints and dropping negative multipliers.
    fn polish(&self, qp: &QpProblem, x: &DVector<f64>, w: &DVector<f64>, y: &DVector<f64>, iterations: usize) -> Option<QpSolution> {
        let m = qp.n_constraints();
        let mut active: Vec<bool> = (0..m).map(|i| qp.h[i] - w[i] < y[i]).collect();
        let scale = 1.0 + qp.q.amax() + qp.h.amax() + x.amax();
        for _ in 0..4 * (m + 1) {
            let (z, lam) = self.kkt_solve(qp, &active)?;
            let gz = &qp.g * &z;
            let worst_viol = (0..m).filter(|&i| !active[i]).map(|i| (i, gz[i] - qp.h[i])).max_by(|a, b| a.1.total_cmp(&b.1));
            let worst_neg = (0..m).filter(|&i| active[i]).map(|i| (i, lam[i])).min_by(|a, b| a.1.total_cmp(&b.1));
            let tol = 1e-12 * scale;
            match (worst_viol, worst_neg) {
                (Some((i, v)), _) if v > tol => active[i] = true,
                (_, Some((i, l))) if l < -tol => active[i] = false,
                _ => {
                    let sol = self.finish(qp, z, lam, iterations, QpStatus::Optimal);
                    let tol = 1e-9f64.max(1e-14 * kkt_scale(qp, &sol.z, &sol.duals));
                    return (sol.kkt_residual < tol && sol.primal_violation < tol).then_some(sol);
                }
            }
        }
        None
    }

    fn kkt_solve(&self, qp: &QpProblem, active: &[bool]) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = qp.dim();
        let idx: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
        let na = idx.len();
        let delta = 1e-11;
        let mut k = DMatrix::zeros(n + na, n + na);
        k.view_mut((0, 0), (n, n)).copy_from(qp.p.matrix());
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..n {
                k[(n + r, c)] = qp.g[(i, c)];
                k[(c, n + r)] = qp.g[(i, c)];
            }
        }
        let mut kreg = k.clone();
        for i in 0..n {
            kreg[(i, i)] += delta;
        }
        for i in n..n + na {
            kreg[(i, i)] -= delta;
        }
        let mut rhs = DVector::zeros(n + na);
        rhs.rows_mut(0, n).copy_from(&(-&qp.q));
        for (r, &i) in idx.iter().enumerate() {
            rhs[n + r] = qp.h[i];
        }
        let lu = kreg.lu();
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..5 {
            let res = &rhs - &k * &sol;
            if res.amax() < 1e-14 * (1.0 + rhs.amax()) {
                break;
            }
            sol += lu.solve(&res)?;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let z = sol.rows(0, n).clone_owned();
        let mut lam = DVector::zeros(active.len());
        for (r, &i) in idx.iter().enumerate() {
            lam[i] = sol[n + r];
        }
        Some((z, lam))
    }
}

/// One-shot solve; factors `P + σI + ρGᵀG` for this problem only.
pub fn solve_qp(qp: &QpProblem, warm: Option<(&DVector<f64>, &DVector<f64>)>) -> Result<QpSolution> {
    QpWorkspace::new(&qp.p, &qp.g, QpSettings::default())?.solve(qp, warm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn box_rows(n: usize, lo: f64, hi: f64) -> (DMatrix<f64>, DVector<f64>) {
        let mut g = DMatrix::zeros(2 * n, n);
        let mut h = DVector::zeros(2 * n);
        for i in 0..n {
            g[(i, i)] = 1.0;
            h[i] = hi;
            g[(n + i, i)] = -1.0;
            h[n + i] = -lo;
        }
        (g, h)
    }

    fn random_box_qp(rng: &mut RngState, n: usize) -> QpProblem {
        let a = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
        let p = SymMatrix::from_dense(&a * a.transpose() + DMatrix::identity(n, n) * 0.1);
        let q = rng.standard_normal_vec(n) * 3.0;
        let (g, h) = box_rows(n, -1.0, 1.0);
        QpProblem::new(p, q, g, h).unwrap().with_box(DVector::from_element(n, -1.0), DVector::from_element(n, 1.0)).unwrap()
    }

    fn projected_gradient(qp: &QpProblem) -> DVector<f64> {
        let step = 1.0 / qp.p.eigenvalues().last().unwrap();
        let mut z = DVector::zeros(qp.dim());
        for _ in 0..200_000 {
            let grad = qp.p.matrix() * &z + &qp.q;
            let next = (&z - grad * step).zip_map(&qp.box_hi, |v, hi| v.min(hi)).zip_map(&qp.box_lo, |v, lo| v.max(lo));
            let done = (&next - &z).amax() < 1e-14;
            z = next;
            if done {
                break;
            }
        }
        z
    }

    #[test]
    fn clipped_projection() {
        let (g, h) = box_rows(1, 0.0, 1.0);
        let qp = QpProblem::new(SymMatrix::identity(1).scaled(2.0), DVector::from_element(1, -4.0), g, h).unwrap();
        let sol = solve_qp(&qp, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-9);
        assert!(sol.duals[0] > 0.0);
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        let mut rng = RngState::new(1, 0);
        for _ in 0..20 {
            let qp = random_box_qp(&mut rng, 2);
            let sol = solve_qp(&qp, None).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            assert!((&sol.z - projected_gradient(&qp)).amax() < 1e-6);
        }
    }

    #[test]
    fn random_qps_satisfy_kkt() {
        let mut rng = RngState::new(2, 0);
        for _ in 0..50 {
            let n = 2 + (rng.uniform(0.0, 14.0) as usize);
            let mut qp = random_box_qp(&mut rng, n);
            // extra general rows
            let extra = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
            let eh = DVector::from_fn(n, |_, _| rng.uniform(0.1, 1.0));
            let mut g = DMatrix::zeros(3 * n, n);
            g.rows_mut(0, 2 * n).copy_from(&qp.g);
            g.rows_mut(2 * n, n).copy_from(&extra);
            let h = DVector::from_iterator(3 * n, qp.h.iter().chain(eh.iter()).copied());
            qp = QpProblem::new(qp.p.clone(), qp.q.clone(), g, h).unwrap().with_box(qp.box_lo.clone(), qp.box_hi.clone()).unwrap();
            let sol = solve_qp(&qp, None).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            assert!(sol.kkt_residual < 1e-7, "kkt {}", sol.kkt_residual);
            assert!(sol.primal_violation < 1e-8);
        }
    }

    #[test]
    fn unconstrained_is_linear_solve() {
        let mut rng = RngState::new(3, 0);
        let n = 6;
        let a = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
        let p = SymMatrix::from_dense(&a * a.transpose() + DMatrix::identity(n, n));
        let q = rng.standard_normal_vec(n);
        let (g, h) = box_rows(n, -1e6, 1e6);
        let qp = QpProblem::new(p.clone(), q.clone(), g, h).unwrap();
        let sol = solve_qp(&qp, None).unwrap();
        let direct = p.matrix().clone().lu().solve(&(-q)).unwrap();
        assert!((&sol.z - direct).amax() < 1e-9);
    }

    #[test]
    fn detects_infeasibility() {
        // z ≤ −1 and −z ≤ −1 (z ≥ 1)
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_column_slice(&[-1.0, -1.0]);
        let qp = QpProblem::new(SymMatrix::identity(1), DVector::zeros(1), g, h).unwrap();
        let sol = solve_qp(&qp, None).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn warm_start_keeps_solution() {
        let mut rng = RngState::new(4, 0);
        for _ in 0..10 {
            let qp = random_box_qp(&mut rng, 8);
            let cold = solve_qp(&qp, None).unwrap();
            let guess = &cold.z + rng.standard_normal_vec(8) * 0.1;
            let warm = solve_qp(&qp, Some((&guess, &cold.duals))).unwrap();
            assert!((&cold.z - &warm.z).amax() < 1e-7);
        }
    }
}
