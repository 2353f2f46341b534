//! Monte Carlo benchmark: training regimes, controller variants, scoring and
//! aggregation.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::{
    build_regression, eb_tune, kernel_matrix, kernel_posterior, ols_estimate_or_ridge, shaped_estimate, ArxStructure, KernelFamily,
    PosteriorEstimate, PredictorTheta, RegressionProblem,
};
use crate::mpc::{run_closed_loop, ClosedLoopRun, Controller, MpcConfig};
use crate::numerics::{RngState, SymMatrix};
use crate::plant::{collect_training_data, fmt_num, predictor_markov_parameters, steady_state_kf, KalmanGain, LtiSystem, RegimeSpec, Trajectory};
use crate::sensitivity::{lift_weight, normalize_w, task_sensitivity};

/// Random sub-streams of one run seed. Every variant of a run uses the same
/// training data and the same evaluation noise.
const STREAM_TRAIN: u64 = 0;
const STREAM_EVAL: u64 = 1;
const STREAM_TASK: u64 = 2;

/// Floor applied to both noise variances when the oracle gain is computed for
/// a noise-free plant.
const ORACLE_NOISE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "FCE")]
    Fce,
    #[serde(rename = "SS")]
    Ss,
    #[serde(rename = "SSW")]
    Ssw,
    #[serde(rename = "OracleKF")]
    OracleKf,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Ols, Variant::Fce, Variant::Ss, Variant::Ssw, Variant::OracleKf];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ols => "OLS",
            Variant::Fce => "FCE",
            Variant::Ss => "SS",
            Variant::Ssw => "SSW",
            Variant::OracleKf => "OracleKF",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Square-wave training reference.
    Informative,
    /// Sinusoidal training reference.
    Weak,
}

impl Regime {
    pub fn spec(self) -> RegimeSpec {
        match self {
            Regime::Informative => RegimeSpec::informative(),
            Regime::Weak => RegimeSpec::weak(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// True plant including its noise variances.
    pub system: LtiSystem,
    pub regime: Regime,
    /// Reference tracked in every closed-loop evaluation.
    pub test_reference: RegimeSpec,
    pub variants: Vec<Variant>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_mc: usize,
    pub arx: ArxStructure,
    pub kernel_family: KernelFamily,
    pub mpc: MpcConfig,
    pub mu: f64,
    pub normalize_w: bool,
    pub base_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: LtiSystem::benchmark(0.01, 0.01),
            regime: Regime::Weak,
            test_reference: RegimeSpec::weak(),
            variants: Variant::ALL.to_vec(),
            n_train: 150,
            n_test: 150,
            n_mc: 500,
            arx: ArxStructure::siso(10, 10, false),
            kernel_family: KernelFamily::Ss,
            mpc: MpcConfig::default(),
            mu: 1.0,
            normalize_w: false,
            base_seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.n_mc == 0 {
            return bad("n_mc must be at least 1");
        }
        if self.variants.is_empty() {
            return bad("at least one variant is required");
        }
        if self.n_test == 0 || self.n_train == 0 {
            return bad("n_train and n_test must be at least 1");
        }
        if !(self.mu >= 0.0) {
            return bad("mu must be non-negative");
        }
        if self.arx.n_y != self.system.n_y() || self.arx.n_u != self.system.n_u() {
            return bad("ARX signal dimensions differ from the plant");
        }
        self.mpc.validate()?;
        self.mpc.horizons.check(&self.arx)
    }

    pub fn run_seed(&self, run_id: usize) -> u64 {
        self.base_seed.wrapping_add(run_id as u64)
    }
}

/// Outcome of one variant on one Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub run_id: usize,
    pub seed: u64,
    #[serde(rename = "cost_J")]
    pub cost_j: Option<f64>,
    /// `None` for the oracle, which has no parameter uncertainty.
    pub trace_sigma_theta: Option<f64>,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    /// Closed-loop outputs, one row per step. Not serialized.
    #[serde(skip)]
    pub y: Option<DMatrix<f64>>,
    #[serde(skip)]
    pub u: Option<DMatrix<f64>>,
}

/// Estimate and controller settings a variant is built from.
struct Fitted {
    theta: PredictorTheta,
    sigma_theta: Option<SymMatrix>,
    trace: Option<f64>,
}

/// Training data of the run with seed `seed`.
pub fn training_data(cfg: &ExperimentConfig, seed: u64) -> Result<Trajectory> {
    let mut rng = RngState::new(seed, STREAM_TRAIN);
    collect_training_data(&cfg.system, &cfg.regime.spec(), cfg.n_train, &mut rng)
}

fn training_problem(cfg: &ExperimentConfig, seed: u64) -> Result<RegressionProblem> {
    build_regression(&training_data(cfg, seed)?, &cfg.arx)
}

/// Kernel posterior with EB-tuned hyperparameters, plus the kernel matrix.
pub fn ss_estimate(cfg: &ExperimentConfig, prob: &RegressionProblem) -> Result<(PosteriorEstimate, SymMatrix)> {
    let eb = eb_tune(prob, cfg.kernel_family)?;
    let k = kernel_matrix(&eb.config, &cfg.arx)?;
    let mut post = kernel_posterior(prob, &k, eb.sigma2)?;
    post.kernel = Some(eb.config);
    Ok((post, k))
}

/// Gain of the oracle predictor. A plant without noise has no innovations, so
/// any stabilizing gain gives an exact predictor; a floored-noise filter keeps
/// the truncated Markov parameters accurate.
pub fn oracle_gain(sys: &LtiSystem) -> Result<KalmanGain> {
    if sys.sigma_w2 > 0.0 && sys.sigma_v2 > 0.0 {
        steady_state_kf(sys)
    } else {
        steady_state_kf(&sys.with_noise(sys.sigma_w2.max(ORACLE_NOISE_FLOOR), sys.sigma_v2.max(ORACLE_NOISE_FLOOR)))
    }
}

/// Exact predictor Markov parameters truncated at the past horizon.
pub fn oracle_theta(sys: &LtiSystem, lp: usize) -> Result<PredictorTheta> {
    let gain = oracle_gain(sys)?;
    let (phi_y, phi_u) = predictor_markov_parameters(sys, &gain, lp, lp);
    let feedthrough = sys.d.iter().any(|v| *v != 0.0);
    let s = ArxStructure::new(lp, lp, feedthrough, sys.n_y(), sys.n_u())?;
    PredictorTheta::from_coefficients(s, &phi_y, &phi_u)
}

fn evaluate(cfg: &ExperimentConfig, fitted: &Fitted, fce: bool, seed: u64, stream: u64) -> Result<ClosedLoopRun> {
    let mpc = MpcConfig { fce_enabled: fce, ..cfg.mpc };
    let mut ctrl = Controller::new(&fitted.theta, &mpc, fitted.sigma_theta.as_ref())?;
    let mut rng = RngState::new(seed, stream);
    run_closed_loop(&cfg.system, &mut ctrl, &cfg.test_reference, cfg.n_test, &mut rng)
}

/// Averaged sensitivity `W̄` over the task points of one nominal closed-loop
/// run of `theta_bar`, normalized when the config asks for it. The run uses
/// its own noise stream, so a later evaluation sees a fresh realization.
/// Also returns the number of task points.
pub fn task_wbar(cfg: &ExperimentConfig, theta_bar: &PredictorTheta, seed: u64) -> Result<(SymMatrix, usize)> {
    let first = Fitted { theta: theta_bar.clone(), sigma_theta: None, trace: None };
    let task_run = evaluate(cfg, &first, false, seed, STREAM_TASK)?;
    let q = DMatrix::identity(cfg.arx.n_y, cfg.arx.n_y) * cfg.mpc.q_weight;
    let q_lift = lift_weight(&q, cfg.mpc.horizons.lf);
    let w_bar = task_sensitivity(theta_bar, &cfg.mpc.horizons, &task_run.tasks, &q_lift)?;
    let w_bar = if cfg.normalize_w { normalize_w(&w_bar)? } else { w_bar };
    Ok((w_bar, task_run.tasks.len()))
}

/// Full pipeline of one variant, returning the evaluation run and the trace
/// of the posterior covariance the controller was built from.
pub fn run_variant_detailed(cfg: &ExperimentConfig, variant: Variant, run_id: usize) -> Result<(ClosedLoopRun, Option<f64>)> {
    let mut trace = None;
    let run = run_pipeline(cfg, variant, cfg.run_seed(run_id), &mut trace)?;
    Ok((run, trace))
}

fn run_pipeline(cfg: &ExperimentConfig, variant: Variant, seed: u64, trace: &mut Option<f64>) -> Result<ClosedLoopRun> {
    let fitted = match variant {
        Variant::OracleKf => Fitted { theta: oracle_theta(&cfg.system, cfg.mpc.horizons.lp)?, sigma_theta: None, trace: None },
        Variant::Ols | Variant::Fce => {
            let post = ols_estimate_or_ridge(&training_problem(cfg, seed)?)?;
            Fitted { trace: Some(post.trace_sigma_theta()), theta: post.theta_bar, sigma_theta: Some(post.sigma_theta) }
        }
        Variant::Ss => {
            let (post, _) = ss_estimate(cfg, &training_problem(cfg, seed)?)?;
            Fitted { trace: Some(post.trace_sigma_theta()), theta: post.theta_bar, sigma_theta: Some(post.sigma_theta) }
        }
        Variant::Ssw => {
            let prob = training_problem(cfg, seed)?;
            let (post, k) = ss_estimate(cfg, &prob)?;
            let (w_bar, _) = task_wbar(cfg, &post.theta_bar, seed)?;
            let shaped = shaped_estimate(&prob, &k, post.sigma2, &post.theta_bar, &w_bar, cfg.mu)?;
            Fitted { trace: Some(shaped.trace_sigma_theta()), theta: shaped.theta_bar, sigma_theta: Some(shaped.sigma_theta) }
        }
    };
    *trace = fitted.trace;
    evaluate(cfg, &fitted, variant == Variant::Fce, seed, STREAM_EVAL)
}

/// Runs one variant for one seed. Failures are recorded, not propagated.
pub fn run_variant(cfg: &ExperimentConfig, variant: Variant, run_id: usize) -> RunRecord {
    let seed = cfg.run_seed(run_id);
    let mut trace = None;
    match run_pipeline(cfg, variant, seed, &mut trace) {
        Ok(run) => RunRecord {
            variant,
            run_id,
            seed,
            cost_j: Some(run.cost_j),
            trace_sigma_theta: trace,
            valid: run.valid && run.cost_j.is_finite(),
            error: None,
            y: Some(run.traj.y),
            u: Some(run.traj.u),
        },
        Err(e) => RunRecord { variant, run_id, seed, cost_j: None, trace_sigma_theta: trace, valid: false, error: Some(e.to_string()), y: None, u: None },
    }
}

/// Descriptive statistics of one variant over its valid runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAggregate {
    pub variant: Variant,
    pub n_runs: usize,
    pub valid_runs: usize,
    #[serde(rename = "mean_J")]
    pub mean_j: Option<f64>,
    #[serde(rename = "std_J")]
    pub std_j: Option<f64>,
    #[serde(rename = "median_J")]
    pub median_j: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
    pub mean_trace: Option<f64>,
    pub std_trace: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<VariantAggregate>,
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation; zero for a single value.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() == 1 {
        return Some(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(xs: &[f64], p: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Aggregates per variant, in the order given.
pub fn aggregate(runs: &[RunRecord], variants: &[Variant]) -> Vec<VariantAggregate> {
    variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.variant == variant).collect();
            let valid: Vec<&RunRecord> = mine.iter().copied().filter(|r| r.valid).collect();
            let costs: Vec<f64> = valid.iter().filter_map(|r| r.cost_j).collect();
            let traces: Vec<f64> = valid.iter().filter_map(|r| r.trace_sigma_theta).collect();
            VariantAggregate {
                variant,
                n_runs: mine.len(),
                valid_runs: valid.len(),
                mean_j: mean(&costs),
                std_j: sample_std(&costs),
                median_j: quantile(&costs, 0.5),
                q25: quantile(&costs, 0.25),
                q75: quantile(&costs, 0.75),
                mean_trace: mean(&traces),
                std_trace: sample_std(&traces),
            }
        })
        .collect()
}

/// Runs every (run, variant) pair on `jobs` worker threads. Records are sorted
/// by run id and then by the configured variant order, so the result does not
/// depend on scheduling. `on_record` sees each run's records as they finish.
pub fn run_monte_carlo_with(cfg: &ExperimentConfig, jobs: usize, on_record: Option<&(dyn Fn(&[RunRecord]) + Sync)>) -> Result<McResult> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let mut per_run: Vec<Vec<RunRecord>> = pool.install(|| {
        (0..cfg.n_mc)
            .into_par_iter()
            .map(|run_id| {
                let recs: Vec<RunRecord> = cfg.variants.iter().map(|&v| run_variant(cfg, v, run_id)).collect();
                if let Some(cb) = on_record {
                    cb(&recs);
                }
                recs
            })
            .collect()
    });
    per_run.sort_by_key(|r| r[0].run_id);
    let runs: Vec<RunRecord> = per_run.into_iter().flatten().collect();
    let aggregates = aggregate(&runs, &cfg.variants);
    Ok(McResult { runs, aggregates })
}

pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<McResult> {
    run_monte_carlo_with(cfg, rayon::current_num_threads(), None)
}

/// Pointwise across-run statistics of one signal channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub variant: Variant,
    /// `y_1`, `u_1`, ...
    pub signal: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub aggregates: Vec<VariantAggregate>,
    pub trajectories: Vec<TrajectoryStats>,
}

fn channel_stats(variant: Variant, name: String, mats: &[&DMatrix<f64>], col: usize) -> TrajectoryStats {
    let n = mats.iter().map(|m| m.nrows()).min().unwrap_or(0);
    let (mut mean_v, mut std_v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for t in 0..n {
        let xs: Vec<f64> = mats.iter().map(|m| m[(t, col)]).collect();
        mean_v.push(mean(&xs).unwrap_or(f64::NAN));
        std_v.push(sample_std(&xs).unwrap_or(f64::NAN));
    }
    TrajectoryStats { variant, signal: name, mean: mean_v, std: std_v }
}

/// Aggregates and pointwise trajectory mean/std over valid runs.
pub fn summarize(res: &McResult) -> Result<Report> {
    if res.runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to summarize".into()));
    }
    let mut variants: Vec<Variant> = Vec::new();
    for r in &res.runs {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    let mut trajectories = Vec::new();
    for &v in &variants {
        let valid: Vec<&RunRecord> = res.runs.iter().filter(|r| r.variant == v && r.valid).collect();
        let ys: Vec<&DMatrix<f64>> = valid.iter().filter_map(|r| r.y.as_ref()).collect();
        let us: Vec<&DMatrix<f64>> = valid.iter().filter_map(|r| r.u.as_ref()).collect();
        if ys.is_empty() || us.is_empty() {
            continue;
        }
        for c in 0..ys[0].ncols() {
            trajectories.push(channel_stats(v, format!("y_{}", c + 1), &ys, c));
        }
        for c in 0..us[0].ncols() {
            trajectories.push(channel_stats(v, format!("u_{}", c + 1), &us, c));
        }
    }
    Ok(Report { aggregates: aggregate(&res.runs, &variants), trajectories })
}

fn opt_num(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

/// `variant,mean_J,std_J,median_J,q25,q75,mean_trace,std_trace,valid_runs`.
pub fn write_summary_csv<W: Write>(aggs: &[VariantAggregate], w: W) -> std::io::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["variant", "mean_J", "std_J", "median_J", "q25", "q75", "mean_trace", "std_trace", "valid_runs"])?;
    for a in aggs {
        wr.write_record([
            a.variant.name().to_string(),
            opt_num(a.mean_j),
            opt_num(a.std_j),
            opt_num(a.median_j),
            opt_num(a.q25),
            opt_num(a.q75),
            opt_num(a.mean_trace),
            opt_num(a.std_trace),
            a.valid_runs.to_string(),
        ])?;
    }
    wr.flush()
}

/// Long format `variant,signal,t,mean,std`.
pub fn write_trajectory_csv<W: Write>(stats: &[TrajectoryStats], w: W) -> std::io::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["variant", "signal", "t", "mean", "std"])?;
    for s in stats {
        for (t, (m, sd)) in s.mean.iter().zip(&s.std).enumerate() {
            wr.write_record([s.variant.name().to_string(), s.signal.clone(), t.to_string(), fmt_num(*m), fmt_num(*sd)])?;
        }
    }
    wr.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variants: Vec<Variant>, n_mc: usize) -> ExperimentConfig {
        ExperimentConfig { variants, n_mc, n_test: 60, ..ExperimentConfig::default() }
    }

    fn record(cost: f64) -> RunRecord {
        RunRecord { variant: Variant::Ols, run_id: 0, seed: 0, cost_j: Some(cost), trace_sigma_theta: Some(cost), valid: true, error: None, y: None, u: None }
    }

    #[test]
    fn two_run_statistics() {
        let runs = vec![record(1.0), RunRecord { run_id: 1, ..record(3.0) }];
        let a = &aggregate(&runs, &[Variant::Ols])[0];
        assert_eq!(a.mean_j, Some(2.0));
        assert_eq!(a.std_j, Some(2f64.sqrt()));
        assert_eq!(a.median_j, Some(2.0));
        assert_eq!(a.q25, Some(1.5));
        assert_eq!(a.valid_runs, 2);
    }

    #[test]
    fn invalid_runs_are_excluded() {
        let bad = RunRecord { run_id: 1, valid: false, cost_j: None, ..record(0.0) };
        let a = &aggregate(&[record(4.0), bad], &[Variant::Ols])[0];
        assert_eq!((a.n_runs, a.valid_runs), (2, 1));
        assert_eq!(a.mean_j, Some(4.0));
        assert_eq!(a.std_j, Some(0.0));
    }

    #[test]
    fn quantile_matches_sorted_interpolation() {
        let xs = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(quantile(&xs, 0.5), Some(3.0));
        assert_eq!(quantile(&xs, 0.25), Some(2.0));
        assert_eq!(quantile(&xs, 0.9), Some(4.6));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn single_run_aggregates_equal_the_record() {
        let cfg = small(vec![Variant::Ols], 1);
        let res = run_monte_carlo_with(&cfg, 1, None).unwrap();
        assert_eq!(res.runs.len(), 1);
        let a = &res.aggregates[0];
        assert_eq!(a.mean_j, res.runs[0].cost_j);
        assert_eq!(a.median_j, res.runs[0].cost_j);
        assert_eq!(a.std_j, Some(0.0));
        let report = summarize(&res).unwrap();
        assert!(report.trajectories.iter().all(|t| t.mean.len() == cfg.n_test && t.std.iter().all(|s| *s == 0.0)));
    }

    #[test]
    fn zero_mu_shaping_matches_ss() {
        let cfg = ExperimentConfig { mu: 0.0, ..small(vec![Variant::Ss, Variant::Ssw], 1) };
        let ss = run_variant(&cfg, Variant::Ss, 0);
        let ssw = run_variant(&cfg, Variant::Ssw, 0);
        assert!(ss.valid && ssw.valid);
        assert_eq!(ss.cost_j, ssw.cost_j);
        assert_eq!(ss.trace_sigma_theta, ssw.trace_sigma_theta);
    }

    #[test]
    fn noise_free_oracle_beats_data_driven_variants() {
        let cfg = ExperimentConfig { system: LtiSystem::benchmark(0.0, 0.0), ..small(Variant::ALL.to_vec(), 1) };
        let recs: Vec<RunRecord> = Variant::ALL.iter().map(|&v| run_variant(&cfg, v, 0)).collect();
        let oracle = recs.iter().find(|r| r.variant == Variant::OracleKf).unwrap().cost_j.unwrap();
        for r in &recs {
            if r.variant != Variant::OracleKf && r.valid {
                assert!(oracle < r.cost_j.unwrap(), "{}: {:?} vs oracle {oracle}", r.variant, r.cost_j);
            }
        }
    }

    #[test]
    fn deterministic_and_seed_isolated() {
        let cfg = small(vec![Variant::Ols, Variant::Ss], 3);
        let a = run_monte_carlo_with(&cfg, 1, None).unwrap();
        let b = run_monte_carlo_with(&cfg, 3, None).unwrap();
        assert_eq!(a, b);
        let only_ss = run_monte_carlo_with(&ExperimentConfig { variants: vec![Variant::Ss], ..cfg.clone() }, 2, None).unwrap();
        let ss_runs: Vec<&RunRecord> = a.runs.iter().filter(|r| r.variant == Variant::Ss).collect();
        assert_eq!(ss_runs.len(), only_ss.runs.len());
        for (x, y) in ss_runs.iter().zip(&only_ss.runs) {
            assert_eq!(*x, y);
        }
    }

    #[test]
    fn summary_csv_has_one_row_per_variant() {
        let cfg = small(vec![Variant::Ols], 2);
        let res = run_monte_carlo_with(&cfg, 2, None).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&res.aggregates, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "variant,mean_J,std_J,median_J,q25,q75,mean_trace,std_trace,valid_runs");
        assert!(lines[1].starts_with("OLS,"));
    }

    #[test]
    fn aggregates_recompute_from_json_records() {
        let cfg = small(vec![Variant::Ols, Variant::Fce], 2);
        let res = run_monte_carlo_with(&cfg, 2, None).unwrap();
        let json = serde_json::to_string(&res).unwrap();
        let back: McResult = serde_json::from_str(&json).unwrap();
        assert_eq!(aggregate(&back.runs, &cfg.variants), res.aggregates);
    }

    #[test]
    fn rejects_empty_configs() {
        assert!(small(vec![], 1).validate().is_err());
        assert!(small(vec![Variant::Ols], 0).validate().is_err());
    }
}
