//! `arx-ddpc` command line: one subcommand per pipeline stage, each writing
//! its outputs plus a `manifest.json` into `--out-dir`.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::{
    aggregate, run_monte_carlo_with, run_variant_detailed, ss_estimate, summarize, task_wbar, training_data, write_summary_csv,
    write_trajectory_csv, ExperimentConfig, McResult, RunRecord, Variant,
};
use crate::config::{ConfigError, ConfigFile};
use crate::error::Error;
use crate::ident::{build_regression, ols_estimate_or_ridge, shaped_estimate, PosteriorJson};
use crate::plant::Trajectory;
use crate::sensitivity::WbarJson;

#[derive(Debug, Parser)]
#[command(name = "arx-ddpc", version, about = "ARX predictive control laboratory")]
pub struct Cli {
    /// TOML configuration; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Overrides `experiment.base_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for Monte Carlo runs.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ols,
    Fce,
    Ss,
    Ssw,
    Oracle,
}

impl MethodArg {
    fn variant(self) -> Variant {
        match self {
            MethodArg::Ols => Variant::Ols,
            MethodArg::Fce => Variant::Fce,
            MethodArg::Ss => Variant::Ss,
            MethodArg::Ssw => Variant::Ssw,
            MethodArg::Oracle => Variant::OracleKf,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the training loop and write `train.csv`.
    Simulate,
    /// Identify predictor coefficients from a trajectory CSV.
    Identify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "ols")]
        method: MethodArg,
        /// Sensitivity matrix JSON, required by `--method ssw`.
        #[arg(long)]
        wbar: Option<PathBuf>,
    },
    /// Collect closed-loop task points and write the averaged sensitivity `wbar.json`.
    Sensitivity {
        /// Training CSV; the configured training loop is simulated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Posterior JSON whose mean is used; a kernel estimate is computed when omitted.
        #[arg(long)]
        posterior: Option<PathBuf>,
    },
    /// Run one variant on the test task and write its trajectory.
    ClosedLoop {
        #[arg(long, value_enum, default_value = "ss")]
        method: MethodArg,
        #[arg(long, default_value_t = 0)]
        run_id: usize,
    },
    /// Monte Carlo benchmark over all configured variants.
    MonteCarlo,
    /// Recompute the summary table from a Monte Carlo result JSON.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Errors caused by the shape or length of user data rather than numerics.
fn data_or_numerical(e: Error) -> CliError {
    match e {
        Error::InsufficientData { .. } | Error::DimensionMismatch(_) => CliError::Data(e.to_string()),
        other => CliError::Numerical(other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Provenance of one output set. Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config_sha256: String,
    pub base_seed: u64,
    /// Seconds since the epoch; `SOURCE_DATE_EPOCH` when set.
    pub created_unix: u64,
    pub outputs: Vec<OutputEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn timestamp() -> u64 {
    match std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()) {
        Some(t) => t,
        None => SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

struct Outputs {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Outputs { dir: dir.to_path_buf(), entries: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes).map_err(io_err(&path))?;
        self.entries.push(OutputEntry { path: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn finish(mut self, command: &str, ctx: &Context) -> Result<(), CliError> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: ctx.config_hash.clone(),
            base_seed: ctx.cfg.base_seed,
            created_unix: timestamp(),
            outputs: std::mem::take(&mut self.entries),
        };
        self.write_json("manifest.json", &manifest)
    }
}

struct Context {
    cfg: ExperimentConfig,
    config_hash: String,
}

fn load_context(cli: &Cli) -> Result<Context, CliError> {
    let (file, bytes) = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => (ConfigFile::default(), Vec::new()),
    };
    let mut cfg = file.to_experiment()?;
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
    }
    Ok(Context { cfg, config_hash: sha256_hex(&bytes) })
}

fn read_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    let f = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Trajectory::read_csv(f).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(buf)
}

fn cmd_simulate(ctx: &Context, out: &Path) -> Result<(), CliError> {
    let traj = training_data(&ctx.cfg, ctx.cfg.base_seed)?;
    let mut outs = Outputs::new(out)?;
    outs.write("train.csv", traj.to_csv_string().as_bytes())?;
    outs.finish("simulate", ctx)
}

fn cmd_identify(ctx: &Context, out: &Path, data: &Path, method: MethodArg, wbar: Option<&Path>) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    if method == MethodArg::Oracle {
        return Err(CliError::Usage("the oracle predictor is not identified from data".into()));
    }
    if method == MethodArg::Ssw && wbar.is_none() {
        return Err(CliError::Usage("--method ssw needs --wbar <file> (see the `sensitivity` subcommand)".into()));
    }
    let traj = read_trajectory(data)?;
    let prob = build_regression(&traj, &cfg.arx).map_err(data_or_numerical)?;
    let post = match method {
        MethodArg::Ols | MethodArg::Fce => ols_estimate_or_ridge(&prob)?,
        MethodArg::Ss => ss_estimate(cfg, &prob)?.0,
        MethodArg::Ssw => {
            let w = read_json::<WbarJson>(wbar.expect("checked above"))?.to_sym().map_err(|e| CliError::Data(e.to_string()))?;
            if w.dim() != cfg.arx.n_theta() {
                return Err(CliError::Data(format!("W̄ is {0}x{0}, the ARX structure has {1} parameters", w.dim(), cfg.arx.n_theta())));
            }
            let (ss, k) = ss_estimate(cfg, &prob)?;
            let mut shaped = shaped_estimate(&prob, &k, ss.sigma2, &ss.theta_bar, &w, cfg.mu)?;
            shaped.kernel = ss.kernel;
            shaped
        }
        MethodArg::Oracle => unreachable!(),
    };
    let mut outs = Outputs::new(out)?;
    outs.write_json("posterior.json", &post.to_json(Some(&prob)))?;
    outs.finish("identify", ctx)
}

fn cmd_sensitivity(ctx: &Context, out: &Path, data: Option<&Path>, posterior: Option<&Path>) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let theta = match posterior {
        Some(p) => read_json::<PosteriorJson>(p)?.into_estimate().map_err(|e| CliError::Data(e.to_string()))?.theta_bar,
        None => {
            let traj = match data {
                Some(d) => read_trajectory(d)?,
                None => training_data(cfg, cfg.base_seed)?,
            };
            let prob = build_regression(&traj, &cfg.arx).map_err(data_or_numerical)?;
            ss_estimate(cfg, &prob)?.0.theta_bar
        }
    };
    if theta.structure != cfg.arx {
        return Err(CliError::Data("posterior structure differs from the configured ARX structure".into()));
    }
    let (w, n_tasks) = task_wbar(cfg, &theta, cfg.base_seed)?;
    let mut outs = Outputs::new(out)?;
    outs.write_json("wbar.json", &WbarJson::new(&w, n_tasks, cfg.normalize_w))?;
    outs.finish("sensitivity", ctx)
}

#[derive(Debug, Serialize)]
struct ClosedLoopSummary {
    method: Variant,
    run_id: usize,
    seed: u64,
    #[serde(rename = "cost_J")]
    cost_j: Option<f64>,
    valid: bool,
    trace_sigma_theta: Option<f64>,
    n_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn cmd_closed_loop(ctx: &Context, out: &Path, method: MethodArg, run_id: usize) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let variant = method.variant();
    let seed = cfg.run_seed(run_id);
    let mut outs = Outputs::new(out)?;
    match run_variant_detailed(cfg, variant, run_id) {
        Ok((run, trace)) => {
            outs.write("closed_loop.csv", &csv_bytes(|b| run.write_csv(b))?)?;
            let summary = ClosedLoopSummary { method: variant, run_id, seed, cost_j: Some(run.cost_j), valid: run.valid, trace_sigma_theta: trace, n_steps: run.n_steps(), error: None };
            outs.write_json("closed_loop.json", &summary)?;
            outs.finish("closed-loop", ctx)
        }
        Err(e) => {
            let summary = ClosedLoopSummary { method: variant, run_id, seed, cost_j: None, valid: false, trace_sigma_theta: None, n_steps: 0, error: Some(e.to_string()) };
            outs.write_json("closed_loop.json", &summary)?;
            outs.finish("closed-loop", ctx)?;
            Err(CliError::Numerical(e))
        }
    }
}

const MC_JSON: &str = "mc_results.json";
const MC_PARTIAL: &str = "mc_results.partial.jsonl";

fn cmd_monte_carlo(ctx: &Context, out: &Path, jobs: usize) -> Result<(), CliError> {
    let mut outs = Outputs::new(out)?;
    let partial_path = out.join(MC_PARTIAL);
    let partial = OpenOptions::new().create(true).write(true).truncate(true).open(&partial_path).map_err(io_err(&partial_path))?;
    let partial = Mutex::new(BufWriter::new(partial));
    // completed runs are appended as they finish so an interrupted job keeps them
    let sink = |recs: &[RunRecord]| {
        let mut w = partial.lock().unwrap_or_else(|p| p.into_inner());
        for r in recs {
            if let Ok(line) = serde_json::to_string(r) {
                let _ = writeln!(w, "{line}");
            }
        }
        let _ = w.flush();
    };
    let res = run_monte_carlo_with(&ctx.cfg, jobs, Some(&sink))?;
    drop(partial);
    let report = summarize(&res)?;
    outs.write_json(MC_JSON, &res)?;
    outs.write("mc_summary.csv", &csv_bytes(|b| write_summary_csv(&res.aggregates, b))?)?;
    outs.write("mc_trajectories.csv", &csv_bytes(|b| write_trajectory_csv(&report.trajectories, b))?)?;
    outs.finish("monte-carlo", ctx)?;
    fs::remove_file(&partial_path).map_err(io_err(&partial_path))
}

fn print_table(res: &McResult, w: &mut impl Write) -> std::io::Result<()> {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    writeln!(w, "{:<9} {:>6} {:>12} {:>12} {:>12} {:>12}", "variant", "valid", "median_J", "mean_J", "std_J", "mean_trace")?;
    for a in &res.aggregates {
        writeln!(w, "{:<9} {:>6} {:>12} {:>12} {:>12} {:>12}", a.variant.name(), a.valid_runs, f(a.median_j), f(a.mean_j), f(a.std_j), f(a.mean_trace))?;
    }
    Ok(())
}

fn cmd_report(ctx: &Context, out: &Path, input: &Path) -> Result<(), CliError> {
    let mut res: McResult = read_json(input)?;
    let mut variants: Vec<Variant> = Vec::new();
    for r in &res.runs {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    res.aggregates = aggregate(&res.runs, &variants);
    print_table(&res, &mut std::io::stdout().lock()).map_err(|e| CliError::Io(e.to_string()))?;
    let mut outs = Outputs::new(out)?;
    outs.write("report_summary.csv", &csv_bytes(|b| write_summary_csv(&res.aggregates, b))?)?;
    outs.finish("report", ctx)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let ctx = load_context(cli)?;
    let out = cli.out_dir.as_path();
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match &cli.command {
        Command::Simulate => cmd_simulate(&ctx, out),
        Command::Identify { data, method, wbar } => cmd_identify(&ctx, out, data, *method, wbar.as_deref()),
        Command::Sensitivity { data, posterior } => cmd_sensitivity(&ctx, out, data.as_deref(), posterior.as_deref()),
        Command::ClosedLoop { method, run_id } => cmd_closed_loop(&ctx, out, *method, *run_id),
        Command::MonteCarlo => cmd_monte_carlo(&ctx, out, jobs),
        Command::Report { input } => cmd_report(&ctx, out, input),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
