//! Receding-horizon tracking controller on top of a lifted ARX predictor.

pub mod qp;

pub use qp::{kkt_residual, solve_qp, QpProblem, QpSettings, QpSolution, QpStatus, QpWorkspace};

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::ident::PredictorTheta;
use crate::lifted::{Horizons, LiftedPredictor};
use crate::numerics::{RngState, SymMatrix};
use crate::plant::{fmt_num, step, LtiSystem, RegimeSpec, Trajectory};
use crate::sensitivity::{fce_hessian, fce_linear, lift_weight, SensitivityModel, TaskPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OutputConstraintMode {
    Hard,
    /// Output bounds relaxed by slacks with L1 penalty `penalty`.
    Soft { penalty: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizons: Horizons,
    pub q_weight: f64,
    pub r_weight: f64,
    pub u_bounds: [f64; 2],
    pub y_bounds: [f64; 2],
    pub output_constraint: OutputConstraintMode,
    pub fce_enabled: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizons: Horizons { lp: 10, lf: 15 },
            q_weight: 1.0,
            r_weight: 0.01,
            u_bounds: [-2.0, 2.0],
            y_bounds: [-2.0, 2.0],
            output_constraint: OutputConstraintMode::Soft { penalty: 1e4 },
            fce_enabled: false,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.horizons.lp == 0 || self.horizons.lf == 0 {
            return bad("horizons must be at least 1".into());
        }
        if !(self.q_weight >= 0.0) || !(self.r_weight > 0.0) {
            return bad(format!("need Q ≥ 0 and R > 0, got Q = {}, R = {}", self.q_weight, self.r_weight));
        }
        for (name, [lo, hi]) in [("u_bounds", self.u_bounds), ("y_bounds", self.y_bounds)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("{name} must be finite with lo < hi, got [{lo}, {hi}]"));
            }
        }
        if let OutputConstraintMode::Soft { penalty } = self.output_constraint {
            if !(penalty > 0.0) {
                return bad(format!("soft-constraint penalty must be positive, got {penalty}"));
            }
        }
        Ok(())
    }
}

/// Parts of the QP that depend only on the predictor and the configuration.
///
/// Decision vector `z = [u_f; s]` (slacks only in soft mode). The objective is
/// the tracking cost itself, `‖r_f − ŷ_f‖²_Q + ‖u_f‖²_R (+ L_Ω)`, written as
/// `½ zᵀPz + qᵀz` up to a constant, so `P = 2(GᵀQG + R + Hq)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpTemplate {
    pub p: SymMatrix,
    pub g: DMatrix<f64>,
    n_u_dec: usize,
    n_out: usize,
    soft_penalty: Option<f64>,
    g_pred: DMatrix<f64>,
    q_lift: SymMatrix,
    cfg: MpcConfig,
}

impl QpTemplate {
    pub fn new(g_pred: &DMatrix<f64>, cfg: &MpcConfig, hq: Option<&SymMatrix>) -> Result<Self> {
        cfg.validate()?;
        let (n_out, n_u_dec) = g_pred.shape();
        let n_y = n_out / cfg.horizons.lf;
        let n_u = n_u_dec / cfg.horizons.lf;
        let q_lift = lift_weight(&(DMatrix::identity(n_y, n_y) * cfg.q_weight), cfg.horizons.lf);
        let r_lift = DMatrix::identity(n_u_dec, n_u_dec) * cfg.r_weight;
        let mut pu = g_pred.transpose() * q_lift.matrix() * g_pred + r_lift;
        if let Some(hq) = hq {
            dim_check(hq.dim() == n_u_dec, || "Hq does not match the input dimension".into())?;
            pu += hq.matrix();
        }
        pu *= 2.0;
        let soft_penalty = match cfg.output_constraint {
            OutputConstraintMode::Hard => None,
            OutputConstraintMode::Soft { penalty } => Some(penalty),
        };
        let n_s = if soft_penalty.is_some() { n_out } else { 0 };
        let n = n_u_dec + n_s;
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (n_u_dec, n_u_dec)).copy_from(&pu);

        let rows = 2 * n_u_dec + 2 * n_out + n_s;
        let mut g = DMatrix::zeros(rows, n);
        for i in 0..n_u_dec {
            g[(i, i)] = 1.0;
            g[(n_u_dec + i, i)] = -1.0;
        }
        let r0 = 2 * n_u_dec;
        g.view_mut((r0, 0), (n_out, n_u_dec)).copy_from(g_pred);
        g.view_mut((r0 + n_out, 0), (n_out, n_u_dec)).copy_from(&(-g_pred));
        if n_s > 0 {
            for i in 0..n_out {
                g[(r0 + i, n_u_dec + i)] = -1.0;
                g[(r0 + n_out + i, n_u_dec + i)] = -1.0;
                g[(r0 + 2 * n_out + i, n_u_dec + i)] = -1.0;
            }
        }
        let _ = n_u;
        Ok(QpTemplate { p: SymMatrix::from_dense(p), g, n_u_dec, n_out, soft_penalty, g_pred: g_pred.clone(), q_lift, cfg: *cfg })
    }

    /// Fills in the task-dependent vectors for free response `h_pred`,
    /// reference `r_f` and optional FCE linear term.
    pub fn instance(&self, h_pred: &DVector<f64>, r_f: &DVector<f64>, hlin: Option<&DVector<f64>>) -> Result<QpProblem> {
        dim_check(h_pred.len() == self.n_out && r_f.len() == self.n_out, || {
            format!("free response / reference must have length {}", self.n_out)
        })?;
        let n = self.p.dim();
        let mut q = DVector::zeros(n);
        let mut qu = -(self.g_pred.transpose() * (self.q_lift.matrix() * (r_f - h_pred)));
        if let Some(hl) = hlin {
            dim_check(hl.len() == self.n_u_dec, || "hlin does not match the input dimension".into())?;
            qu += hl;
        }
        q.rows_mut(0, self.n_u_dec).copy_from(&(qu * 2.0));
        if let Some(rho) = self.soft_penalty {
            q.rows_mut(self.n_u_dec, self.n_out).fill(rho);
        }
        let [ulo, uhi] = self.cfg.u_bounds;
        let [ylo, yhi] = self.cfg.y_bounds;
        let mut h = DVector::zeros(self.g.nrows());
        let nu = self.n_u_dec;
        h.rows_mut(0, nu).fill(uhi);
        h.rows_mut(nu, nu).fill(-ulo);
        for i in 0..self.n_out {
            h[2 * nu + i] = yhi - h_pred[i];
            h[2 * nu + self.n_out + i] = h_pred[i] - ylo;
        }
        let mut qp = QpProblem::new(self.p.clone(), q, self.g.clone(), h)?
            .with_box(DVector::from_element(nu, ulo), DVector::from_element(nu, uhi))?;
        if self.soft_penalty.is_some() {
            qp.slack_range = Some((nu, nu + self.n_out));
        }
        Ok(qp)
    }

    pub fn n_inputs(&self) -> usize {
        self.n_u_dec
    }
}

/// Tracking QP for one task.
pub fn build_qp(
    lp: &LiftedPredictor,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
    r_f: &DVector<f64>,
    cfg: &MpcConfig,
    fce: Option<(&SymMatrix, &DVector<f64>)>,
) -> Result<QpProblem> {
    dim_check(lp.horizons == cfg.horizons, || "predictor and configuration use different horizons".into())?;
    let g_pred = lp.forced_response();
    let h_pred = lp.free_response(u_p, y_p)?;
    let template = QpTemplate::new(&g_pred, cfg, fce.map(|f| f.0))?;
    template.instance(&h_pred, r_f, fce.map(|f| f.1))
}

/// FCE data fixed for the lifetime of a controller.
#[derive(Debug, Clone)]
struct FceState {
    model: SensitivityModel,
    sigma_theta: SymMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub qp_iters: usize,
    pub kkt_residual: f64,
    pub slack_usage: f64,
    pub status: QpStatus,
    /// Planned input sequence `u_f` returned by the QP.
    pub u_plan: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    cfg: MpcConfig,
    predictor: LiftedPredictor,
    template: QpTemplate,
    workspace: QpWorkspace,
    fce: Option<FceState>,
    u_hist: VecDeque<DVector<f64>>,
    y_hist: VecDeque<DVector<f64>>,
    warm: Option<(DVector<f64>, DVector<f64>)>,
}

impl Controller {
    /// Controller for predictor coefficients `theta`. When `cfg.fce_enabled`
    /// the uncertainty term with covariance `sigma_theta` is added to the cost.
    pub fn new(theta: &PredictorTheta, cfg: &MpcConfig, sigma_theta: Option<&SymMatrix>) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.horizons;
        let predictor = LiftedPredictor::from_theta(theta, &h)?;
        let g_pred = predictor.forced_response();
        let (fce, hq) = if cfg.fce_enabled {
            let sigma = sigma_theta.ok_or_else(|| Error::InvalidArgument("FCE controller needs Σ_θ".into()))?;
            dim_check(sigma.dim() == theta.values.len(), || "Σ_θ does not match θ".into())?;
            let model = SensitivityModel::new(theta, &h)?;
            let q_lift = lift_weight(&(DMatrix::identity(predictor.n_y, predictor.n_y) * cfg.q_weight), h.lf);
            let hq = fce_hessian(&model.j1, sigma, &q_lift)?;
            (Some(FceState { model, sigma_theta: sigma.clone() }), Some(hq))
        } else {
            (None, None)
        };
        let template = QpTemplate::new(&g_pred, cfg, hq.as_ref())?;
        let workspace = QpWorkspace::new(&template.p, &template.g, QpSettings::default())?;
        let (ny, nu) = (predictor.n_y, predictor.n_u);
        Ok(Controller {
            cfg: *cfg,
            predictor,
            template,
            workspace,
            fce,
            u_hist: (0..h.lp).map(|_| DVector::zeros(nu)).collect(),
            y_hist: (0..h.lp).map(|_| DVector::zeros(ny)).collect(),
            warm: None,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn predictor(&self) -> &LiftedPredictor {
        &self.predictor
    }

    pub fn template(&self) -> &QpTemplate {
        &self.template
    }

    /// Stacked `(u_p, y_p)`, oldest first.
    pub fn past_window(&self) -> (DVector<f64>, DVector<f64>) {
        let stack = |h: &VecDeque<DVector<f64>>| {
            let d = h[0].len();
            let mut v = DVector::zeros(d * h.len());
            for (k, x) in h.iter().enumerate() {
                v.rows_mut(k * d, d).copy_from(x);
            }
            v
        };
        (stack(&self.u_hist), stack(&self.y_hist))
    }

    /// Current QP for reference preview `r_preview = r(t..t+Lf−1)`.
    pub fn current_qp(&self, r_preview: &DVector<f64>) -> Result<QpProblem> {
        let (u_p, y_p) = self.past_window();
        let h_pred = self.predictor.free_response(&u_p, &y_p)?;
        let hlin = match &self.fce {
            Some(f) => {
                let j0 = f.model.j0(&u_p, &y_p)?;
                Some(fce_linear(&f.model.j1, &j0, &f.sigma_theta, &self.template.q_lift)?)
            }
            None => None,
        };
        self.template.instance(&h_pred, r_preview, hlin.as_ref())
    }

    /// Solves the QP at the current window and returns the first input block.
    /// The window is not advanced until [`Controller::observe`] is called.
    pub fn control_step(&mut self, r_preview: &DVector<f64>) -> Result<(DVector<f64>, StepDiagnostics)> {
        let qp = self.current_qp(r_preview)?;
        let warm = self.warm.as_ref().map(|(z, y)| (z, y));
        let sol = self.workspace.solve(&qp, warm)?;
        if sol.status == QpStatus::Infeasible {
            self.warm = None;
            return Err(Error::Infeasible);
        }
        let nu = self.predictor.n_u;
        let n_dec = self.template.n_inputs();
        let u_plan = sol.z.rows(0, n_dec).clone_owned();
        let u = u_plan.rows(0, nu).clone_owned();
        self.warm = Some((shift_plan(&sol.z, nu, n_dec, self.predictor.n_y), sol.duals.clone()));
        Ok((u, StepDiagnostics { qp_iters: sol.iterations, kkt_residual: sol.kkt_residual, slack_usage: sol.slack_usage, status: sol.status, u_plan }))
    }

    /// Appends the applied input and the measured output to the window.
    pub fn observe(&mut self, u: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        dim_check(u.len() == self.predictor.n_u && y.len() == self.predictor.n_y, || "observation has wrong dimension".into())?;
        self.u_hist.pop_front();
        self.u_hist.push_back(u.clone());
        self.y_hist.pop_front();
        self.y_hist.push_back(y.clone());
        Ok(())
    }
}

/// Shifts the input plan (and slacks) one step ahead, repeating the last block.
fn shift_plan(z: &DVector<f64>, nu: usize, n_dec: usize, ny: usize) -> DVector<f64> {
    let mut out = z.clone();
    let shift = |out: &mut DVector<f64>, start: usize, len: usize, block: usize| {
        if len > block {
            let tail = z.rows(start + block, len - block).clone_owned();
            out.rows_mut(start, len - block).copy_from(&tail);
        }
    };
    shift(&mut out, 0, n_dec, nu);
    if z.len() > n_dec {
        shift(&mut out, n_dec, z.len() - n_dec, ny);
    }
    out
}

/// Closed-loop record with per-step solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub traj: Trajectory,
    pub qp_iters: Vec<usize>,
    pub kkt_residual: Vec<f64>,
    pub slack_usage: Vec<f64>,
    pub statuses: Vec<QpStatus>,
    pub cost_j: f64,
    pub valid: bool,
    pub tasks: Vec<TaskPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(rename = "cost_J")]
    pub cost_j: f64,
    pub valid: bool,
    pub n_steps: usize,
}

impl ClosedLoopRun {
    pub fn n_steps(&self) -> usize {
        self.traj.len()
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary { cost_j: self.cost_j, valid: self.valid, n_steps: self.n_steps() }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = self.traj.header();
        header.extend(["qp_iters", "kkt_residual", "slack_usage"].map(String::from));
        wr.write_record(&header)?;
        for k in 0..self.traj.len() {
            let mut row = self.traj.row_fields(k);
            row.push(self.qp_iters[k].to_string());
            row.push(fmt_num(self.kkt_residual[k]));
            row.push(fmt_num(self.slack_usage[k]));
            wr.write_record(&row)?;
        }
        wr.flush()
    }
}

/// Reference preview `r(t..t+Lf−1)` replicated across output channels.
pub fn reference_preview(reference: &RegimeSpec, t: usize, lf: usize, n_y: usize) -> DVector<f64> {
    DVector::from_fn(lf * n_y, |i, _| reference.value(t + i / n_y))
}

/// Runs `controller` against `sys` from zero state for `n_test` steps.
///
/// At step `t` the controller sees inputs and outputs up to `t−1`, applies
/// `u(t)`, and the plant then reports `y(t)`. The cost is
/// `J = Σ_t Q‖r(t) − y(t)‖² + R‖u(t)‖²`.
pub fn run_closed_loop(sys: &LtiSystem, controller: &mut Controller, reference: &RegimeSpec, n_test: usize, rng: &mut RngState) -> Result<ClosedLoopRun> {
    if n_test == 0 {
        return Err(Error::InvalidArgument("N_test must be at least 1".into()));
    }
    let cfg = *controller.config();
    let (ny, nu) = (sys.n_y(), sys.n_u());
    dim_check(ny == controller.predictor.n_y && nu == controller.predictor.n_u, || "controller and plant dimensions differ".into())?;
    let mut x = DVector::zeros(sys.n_x());
    let mut u_rec = DMatrix::zeros(n_test, nu);
    let mut y_rec = DMatrix::zeros(n_test, ny);
    let mut r_rec = DMatrix::zeros(n_test, ny);
    let (mut iters, mut kkt, mut slack, mut statuses, mut tasks) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut cost = 0.0;
    for t in 0..n_test {
        let preview = reference_preview(reference, t, cfg.horizons.lf, ny);
        let (u_p, y_p) = controller.past_window();
        let (u, diag) = match controller.control_step(&preview) {
            Ok(v) => v,
            Err(Error::Infeasible) => return Err(Error::RunInvalid { step: t, reason: "output constraints infeasible".into() }),
            Err(e) => return Err(e),
        };
        let (x_next, y) = step(sys, &x, &u, rng)?;
        controller.observe(&u, &y)?;
        let r_t = preview.rows(0, ny).clone_owned();
        cost += cfg.q_weight * (&r_t - &y).norm_squared() + cfg.r_weight * u.norm_squared();
        u_rec.set_row(t, &u.transpose());
        y_rec.set_row(t, &y.transpose());
        r_rec.set_row(t, &r_t.transpose());
        iters.push(diag.qp_iters);
        kkt.push(diag.kkt_residual);
        slack.push(diag.slack_usage);
        statuses.push(diag.status);
        tasks.push(TaskPoint { u_p, y_p, u_f: diag.u_plan });
        x = x_next;
    }
    Ok(ClosedLoopRun {
        traj: Trajectory::new(u_rec, y_rec, Some(r_rec), 0)?,
        qp_iters: iters,
        kkt_residual: kkt,
        slack_usage: slack,
        statuses,
        cost_j: cost,
        valid: true,
        tasks,
    })
}
