use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use urnlab::fclt::{TimeGrid, DEFAULT_TIMES};
use urnlab::montecarlo::{CovarianceGate, EnsembleConfig, Thresholds};
use urnlab::spectral::{ReplacementMatrix, SpectralError, Spectrum, DEFAULT_CRIT_TOL, DEFAULT_ROW_TOL};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuppliedPair {
    pub lambda: f64,
    pub xi: Vec<f64>,
}

/// Everything a run needs. Only `matrix` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub initial_color: usize,
    #[serde(default)]
    pub eigenpairs: Option<Vec<SuppliedPair>>,
    #[serde(default = "default_n0")]
    pub n0: u64,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<f64>,
    #[serde(default = "default_replications")]
    pub replications: u64,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default)]
    pub probes: Vec<u64>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub covariance_gate: CovarianceGate,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_row_tol")]
    pub row_tol: f64,
    #[serde(default = "default_crit_tol")]
    pub crit_tol: f64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_n0() -> u64 {
    2000
}
fn default_t_grid() -> Vec<f64> {
    DEFAULT_TIMES.to_vec()
}
fn default_replications() -> u64 {
    10_000
}
fn default_seed() -> u64 {
    20_240_601
}
fn default_horizon() -> usize {
    6
}
fn default_steps() -> u64 {
    10_000
}
fn default_row_tol() -> f64 {
    DEFAULT_ROW_TOL
}
fn default_crit_tol() -> f64 {
    DEFAULT_CRIT_TOL
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        serde_json::from_str(text).map_err(|e| Failure::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Normalized JSON with every default filled in.
    pub fn to_json(&self) -> String {
        urnlab::montecarlo::to_sorted_json(self)
    }

    /// Validated replacement matrix; invariant violations are config errors.
    pub fn replacement_matrix(&self) -> Result<ReplacementMatrix, Failure> {
        ReplacementMatrix::with_tolerance(&self.matrix, self.row_tol).map_err(|e| match e {
            SpectralError::Reducible { .. } => Failure::spectral(e.to_string()),
            _ => Failure::config(e.to_string()),
        })
    }

    pub fn spectrum(&self, r: &ReplacementMatrix) -> Result<Spectrum, Failure> {
        let supplied: Option<Vec<(f64, Vec<f64>)>> = self
            .eigenpairs
            .as_ref()
            .map(|v| v.iter().map(|p| (p.lambda, p.xi.clone())).collect());
        Spectrum::compute(r, supplied.as_deref(), self.crit_tol).map_err(|e| Failure::spectral(e.to_string()))
    }

    pub fn grid(&self) -> Result<TimeGrid, Failure> {
        TimeGrid::new(self.n0, self.t_grid.clone()).map_err(|e| Failure::config(e.to_string()))
    }

    pub fn ensemble(&self, workers: Option<usize>) -> Result<EnsembleConfig, Failure> {
        let mut cfg = EnsembleConfig::new(self.replications, self.master_seed, self.grid()?);
        cfg.initial_color = self.initial_color;
        cfg.probes = self.probes.clone();
        cfg.workers = workers;
        Ok(cfg)
    }
}
