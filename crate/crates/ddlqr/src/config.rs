//! Experiment configuration: TOML parsing with validation, grid expansion,
//! and manifest emission for reproducibility.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqr::{log_tau_grid, LqrWeights, LtiSystem};
use crate::robust::RobustConfig;

/// Which closed loops a `simulate` invocation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoSelector {
    Model,
    Dd,
    Baseline,
    All,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemSection {
    /// Row-major n x n.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightsSection {
    /// Row-major n x n; defaults to identity when omitted.
    pub q: Option<Vec<f64>>,
    #[serde(default = "default_r")]
    pub r: f64,
}

fn default_r() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TauGridSection {
    pub min: f64,
    pub max: f64,
    pub points: usize,
    /// "log" (default) or "linear".
    #[serde(default = "default_spacing")]
    pub spacing: String,
}

fn default_spacing() -> String {
    "log".into()
}

impl Default for TauGridSection {
    fn default() -> Self {
        TauGridSection {
            min: 1e-2,
            max: 1e2,
            points: 25,
            spacing: default_spacing(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverSection {
    #[serde(default = "default_relaxation")]
    pub relaxation_degree: u32,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_sparsity")]
    pub sparsity: bool,
}

fn default_relaxation() -> u32 {
    1
}
fn default_delta() -> f64 {
    1e-6
}
fn default_tol() -> f64 {
    1e-8
}
fn default_sparsity() -> bool {
    true
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            relaxation_degree: default_relaxation(),
            delta: default_delta(),
            tol: default_tol(),
            sparsity: default_sparsity(),
        }
    }
}

/// Full experiment description as parsed from a TOML file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub weights: Option<WeightsSection>,
    pub eps: f64,
    pub n_train: usize,
    pub steps: usize,
    pub x1: Vec<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_algo")]
    pub algo: AlgoSelector,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub tau_grid: TauGridSection,
    #[serde(default)]
    pub solver: SolverSection,
}

fn default_seed() -> u64 {
    1
}
fn default_algo() -> AlgoSelector {
    AlgoSelector::All
}
fn default_out_dir() -> String {
    "out".into()
}

impl ExperimentConfig {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 || self.system.a.len() != n * n {
            return Err(Error::Config(format!(
                "system.a has {} entries; expected a square row-major matrix matching \
                 system.b (length {})",
                self.system.a.len(),
                n
            )));
        }
        if let Some(w) = &self.weights {
            if let Some(q) = &w.q {
                if q.len() != n * n {
                    return Err(Error::Config(format!(
                        "weights.q has {} entries, expected {}",
                        q.len(),
                        n * n
                    )));
                }
            }
            if w.r <= 0.0 {
                return Err(Error::Config("weights.r must be > 0".into()));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be > 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.n_train < 1 {
            return Err(Error::Config("n_train must be >= 1".into()));
        }
        if self.x1.len() != n {
            return Err(Error::Config(format!(
                "x1 has {} entries, expected {}",
                self.x1.len(),
                n
            )));
        }
        if !(self.tau_grid.min > 0.0 && self.tau_grid.min < self.tau_grid.max) {
            return Err(Error::Config("tau_grid requires 0 < min < max".into()));
        }
        if self.tau_grid.points < 2 {
            return Err(Error::Config("tau_grid.points must be >= 2".into()));
        }
        match self.tau_grid.spacing.as_str() {
            "log" | "linear" => {}
            other => {
                return Err(Error::Config(format!(
                    "tau_grid.spacing must be 'log' or 'linear', got '{other}'"
                )))
            }
        }
        if self.solver.delta <= 0.0 || self.solver.tol <= 0.0 {
            return Err(Error::Config("solver.delta and solver.tol must be > 0".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.system.b.len()
    }

    pub fn lti_system(&self) -> Result<LtiSystem> {
        let n = self.n();
        LtiSystem::new(
            DMatrix::from_row_slice(n, n, &self.system.a),
            DVector::from_column_slice(&self.system.b),
        )
    }

    pub fn lqr_weights(&self) -> Result<LqrWeights> {
        let n = self.n();
        match &self.weights {
            None => Ok(LqrWeights::identity(n)),
            Some(w) => {
                let q = match &w.q {
                    Some(q) => DMatrix::from_row_slice(n, n, q),
                    None => DMatrix::identity(n, n),
                };
                LqrWeights::new(q, w.r)
            }
        }
    }

    pub fn x1(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x1)
    }

    pub fn expand_tau_grid(&self) -> Vec<f64> {
        let g = &self.tau_grid;
        match g.spacing.as_str() {
            "linear" => (0..g.points)
                .map(|i| g.min + (g.max - g.min) * i as f64 / (g.points - 1) as f64)
                .collect(),
            _ => log_tau_grid(g.min, g.max, g.points),
        }
    }

    /// Robust-synthesis settings; `DDLQR_SOLVER_TOL` overrides the configured
    /// solver tolerance when set.
    pub fn robust_config(&self) -> RobustConfig {
        RobustConfig {
            tau_grid: self.expand_tau_grid(),
            relaxation_degree: self.solver.relaxation_degree,
            delta: self.solver.delta,
            tol: solver_tol_override().unwrap_or(self.solver.tol),
            sparsity: self.solver.sparsity,
        }
    }
}

/// `DDLQR_SOLVER_TOL`, when set to a positive number.
pub fn solver_tol_override() -> Option<f64> {
    std::env::var("DDLQR_SOLVER_TOL")
        .ok()
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|t| *t > 0.0)
}

/// Reproducibility record written next to the result files.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest<'a> {
    pub config: &'a ExperimentConfig,
    pub effective_seed: u64,
    pub effective_tol: f64,
    pub expanded_tau_grid: Vec<f64>,
    /// How training data was generated: states and inputs uniform in
    /// [-1, 1], disturbances uniform on the eps infinity-norm ball.
    pub excitation_policy: &'static str,
    pub noise_model: &'static str,
    pub package_version: &'static str,
}

pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let manifest = Manifest {
        config: cfg,
        effective_seed: seed,
        effective_tol: solver_tol_override().unwrap_or(cfg.solver.tol),
        expanded_tau_grid: cfg.expand_tau_grid(),
        excitation_policy:
            "training states and inputs uniform in [-1, 1]; per-sample disturbance uniform on \
             the eps infinity-norm ball; ChaCha8 stream from the seed",
        noise_model: "closed-loop disturbances uniform on the eps infinity-norm ball",
        package_version: env!("CARGO_PKG_VERSION"),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
        eps = 0.1
        n_train = 5
        steps = 10
        x1 = [0.5, 0.5]
        seed = 7

        [system]
        a = [0.0, -0.99, 0.99, 0.0]
        b = [0.0, 1.0]
    "#;

    #[test]
    fn parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.n(), 2);
        assert_eq!(cfg.algo, AlgoSelector::All);
        assert_eq!(cfg.tau_grid.points, 25);
        assert_eq!(cfg.solver.relaxation_degree, 1);
        assert!(cfg.solver.sparsity);
        let grid = cfg.expand_tau_grid();
        assert_eq!(grid.len(), 25);
        assert!((grid[0] - 1e-2).abs() < 1e-12);
        assert!((grid[24] - 1e2).abs() < 1e-10);
        let sys = cfg.lti_system().unwrap();
        assert_eq!(sys.a[(0, 1)], -0.99);
        let w = cfg.lqr_weights().unwrap();
        assert_eq!(w.q, DMatrix::identity(2, 2));
    }

    #[test]
    fn rejects_bad_fields() {
        let mut cfg: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        cfg.steps = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        cfg.eps = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        cfg.tau_grid.min = 5.0;
        cfg.tau_grid.max = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        cfg.x1 = vec![1.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let cfg: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &cfg, 7).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
        assert!(text.contains("effective_seed = 7"));
        assert!(text.contains("excitation_policy"));
    }
}
