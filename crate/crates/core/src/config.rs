//! TOML experiment configuration.
//!
//! Every section and key is optional and falls back to the benchmark
//! defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{ExperimentConfig, Regime, Variant};
use crate::ident::{ArxStructure, KernelFamily};
use crate::lifted::Horizons;
use crate::mpc::{MpcConfig, OutputConstraintMode};
use crate::plant::{LtiSystem, RegimeSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("config field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    /// Row-major matrices.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
}

impl Default for SystemSection {
    fn default() -> Self {
        let sys = LtiSystem::benchmark(0.0, 0.0);
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        SystemSection { a: rows(&sys.a), b: rows(&sys.b), c: rows(&sys.c), d: rows(&sys.d) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub sigma_w2: f64,
    pub sigma_v2: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { sigma_w2: 0.01, sigma_v2: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonsSection {
    pub lp: usize,
    pub lf: usize,
}

impl Default for HorizonsSection {
    fn default() -> Self {
        HorizonsSection { lp: 10, lf: 15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArxSection {
    pub na: usize,
    pub nb: usize,
    pub include_feedthrough: bool,
}

impl Default for ArxSection {
    fn default() -> Self {
        ArxSection { na: 10, nb: 10, include_feedthrough: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub family: KernelFamily,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection { family: KernelFamily::Ss }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub q_weight: f64,
    pub r_weight: f64,
    pub u_bounds: [f64; 2],
    pub y_bounds: [f64; 2],
    pub output_constraint: ConstraintKind,
    pub soft_penalty: f64,
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            q_weight: 1.0,
            r_weight: 0.01,
            u_bounds: [-2.0, 2.0],
            y_bounds: [-2.0, 2.0],
            output_constraint: ConstraintKind::Soft,
            soft_penalty: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub regime: Regime,
    pub variants: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_mc: usize,
    pub mu: f64,
    pub normalize_w: bool,
    pub base_seed: u64,
    /// Amplitude and period of the sinusoid tracked during evaluation.
    pub test_amplitude: f64,
    pub test_period: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            regime: Regime::Weak,
            variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            n_train: 150,
            n_test: 150,
            n_mc: 500,
            mu: 1.0,
            normalize_w: false,
            base_seed: 1,
            test_amplitude: 1.0,
            test_period: 75.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub system: SystemSection,
    pub noise: NoiseSection,
    pub horizons: HorizonsSection,
    pub arx: ArxSection,
    pub kernel: KernelSection,
    pub mpc: MpcSection,
    pub experiment: ExperimentSection,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let upto = &text[..offset.min(text.len())];
    let line = upto.matches('\n').count() + 1;
    let column = upto.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(invalid(field, "must be a non-empty rectangular array of rows"));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ConfigError::Parse { line, column, message: e.message().trim().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| ConfigError::Parse { line: 0, column: 0, message: "file is not UTF-8".into() })?;
        Ok((Self::parse(&text)?, bytes))
    }

    pub fn to_experiment(&self) -> Result<ExperimentConfig, ConfigError> {
        let n = &self.noise;
        let sys = LtiSystem::new(
            matrix("system.a", &self.system.a)?,
            matrix("system.b", &self.system.b)?,
            matrix("system.c", &self.system.c)?,
            matrix("system.d", &self.system.d)?,
            n.sigma_w2,
            n.sigma_v2,
        )
        .map_err(|e| invalid("system", e.to_string()))?;
        let horizons = Horizons::new(self.horizons.lp, self.horizons.lf).map_err(|e| invalid("horizons", e.to_string()))?;
        let arx = ArxStructure::new(self.arx.na, self.arx.nb, self.arx.include_feedthrough, sys.n_y(), sys.n_u())
            .map_err(|e| invalid("arx", e.to_string()))?;
        horizons.check(&arx).map_err(|e| invalid("arx.na", e.to_string()))?;
        let m = &self.mpc;
        let output_constraint = match m.output_constraint {
            ConstraintKind::Hard => OutputConstraintMode::Hard,
            ConstraintKind::Soft => OutputConstraintMode::Soft { penalty: m.soft_penalty },
        };
        let mpc = MpcConfig { horizons, q_weight: m.q_weight, r_weight: m.r_weight, u_bounds: m.u_bounds, y_bounds: m.y_bounds, output_constraint, fce_enabled: false };
        mpc.validate().map_err(|e| invalid("mpc", e.to_string()))?;
        let e = &self.experiment;
        let mut variants = Vec::new();
        for name in &e.variants {
            let v = Variant::parse(name).ok_or_else(|| invalid("experiment.variants", format!("unknown variant `{name}` (expected OLS, FCE, SS, SSW or OracleKF)")))?;
            if !variants.contains(&v) {
                variants.push(v);
            }
        }
        if !(e.test_period > 0.0) {
            return Err(invalid("experiment.test_period", "must be positive"));
        }
        let cfg = ExperimentConfig {
            system: sys,
            regime: e.regime,
            test_reference: RegimeSpec::Sinusoid { amplitude: e.test_amplitude, period: e.test_period },
            variants,
            n_train: e.n_train,
            n_test: e.n_test,
            n_mc: e.n_mc,
            arx,
            kernel_family: self.kernel.family,
            mpc,
            mu: e.mu,
            normalize_w: e.normalize_w,
            base_seed: e.base_seed,
        };
        cfg.validate().map_err(|err| {
            let field = if e.n_mc == 0 {
                "experiment.n_mc"
            } else if cfg.variants.is_empty() {
                "experiment.variants"
            } else if !(e.mu >= 0.0) {
                "experiment.mu"
            } else {
                "experiment"
            };
            invalid(field, err.to_string())
        })?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ConfigFile::parse("").unwrap().to_experiment().unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let text = "[noise]\nsigma_w2 = 0.0\nsigma_v2 = 0.5\n\n[experiment]\nregime = \"informative\"\nvariants = [\"ols\", \"SS\"]\nn_mc = 3\n";
        let cfg = ConfigFile::parse(text).unwrap().to_experiment().unwrap();
        assert_eq!(cfg.system.sigma_v2, 0.5);
        assert_eq!(cfg.regime, Regime::Informative);
        assert_eq!(cfg.variants, vec![Variant::Ols, Variant::Ss]);
        assert_eq!(cfg.n_mc, 3);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ConfigFile::parse("[mpc]\nq_weight = 1.0\nr_wieght = 0.1\n").unwrap_err();
        match err {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("r_wieght"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ConfigFile::parse("[experiment]\nn_mc = 0\n").unwrap().to_experiment().unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { field, .. } if field == "experiment.n_mc"), "{err}");
        let err = ConfigFile::parse("[experiment]\nvariants = [\"XYZ\"]\n").unwrap().to_experiment().unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { field, .. } if field == "experiment.variants"));
        let err = ConfigFile::parse("[arx]\nna = 12\n").unwrap().to_experiment().unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { field, .. } if field == "arx.na"));
    }

    #[test]
    fn missing_file_names_path() {
        let err = ConfigFile::load(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.toml"));
    }
}
