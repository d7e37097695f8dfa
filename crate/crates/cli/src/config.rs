use std::path::Path;

use flamefront::diagnostics::DiagnoseOptions;
use flamefront::nn::{ModelConfig, PfnoConfig};
use flamefront::spectral::{reference_grid, IntegratorConfig, DEFAULT_MESH};
use flamefront::train::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Corpus recipe of `gen-dataset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetRecipe {
    /// `(rho, beta)` pairs.
    pub grid: Vec<(f64, f64)>,
    pub n_sequences: usize,
    /// Validation sequences per configuration; a tenth of `n_sequences`
    /// when absent.
    pub valid_sequences: Option<usize>,
    pub n_steps: usize,
    /// Output intervals of the one long training sequence per
    /// configuration; 0 for none.
    pub long_steps: usize,
    pub init_range: [f64; 2],
    pub mesh_size: usize,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self {
            grid: reference_grid(),
            n_sequences: 250,
            valid_sequences: None,
            n_steps: 500,
            long_steps: 125_000,
            init_range: [0.0, 0.03],
            mesh_size: DEFAULT_MESH,
        }
    }
}

/// Everything a run needs; written as `run_config.json` next to its
/// outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for initial conditions and weight initialization.
    pub seed: u64,
    pub integrator: IntegratorConfig,
    pub dataset: DatasetRecipe,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub diagnostics: DiagnoseOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            integrator: IntegratorConfig::default(),
            dataset: DatasetRecipe::default(),
            model: ModelConfig::Pfno(PfnoConfig::default()),
            training: TrainingConfig::default(),
            diagnostics: DiagnoseOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join("run_config.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// Parses `rho,beta` pairs separated by `;`, or `reference` for the
/// fifteen-point grid.
pub fn parse_grid(text: &str) -> Result<Vec<(f64, f64)>, String> {
    if text.trim() == "reference" {
        return Ok(reference_grid());
    }
    text.split(';').filter(|p| !p.trim().is_empty()).map(parse_pair).collect()
}

pub fn parse_pair(text: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = text.trim().trim_start_matches('(').trim_end_matches(')').split(',').collect();
    match parts.as_slice() {
        [r, b] => {
            let rho = r.trim().parse::<f64>().map_err(|e| format!("rho in {text:?}: {e}"))?;
            let beta = b.trim().parse::<f64>().map_err(|e| format!("beta in {text:?}: {e}"))?;
            Ok((rho, beta))
        }
        _ => Err(format!("expected rho,beta, got {text:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"sede": 1}"#,
            r#"{"training": {"epoch": 3}}"#,
            r#"{"dataset": {"sequences": 3}}"#,
            r#"{"model": {"kind": "pfno", "width": 3}}"#,
            r#"{"diagnostics": {"stats": 3}}"#,
            r#"{"integrator": {"tol": 3}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 4, "training": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.training.batch_size, 1000);
        assert_eq!(c.dataset.grid.len(), 15);
    }

    #[test]
    fn grid_syntax() {
        assert_eq!(parse_grid("0,10;1,10").unwrap(), vec![(0.0, 10.0), (1.0, 10.0)]);
        assert_eq!(parse_pair("(0.25, 40)").unwrap(), (0.25, 40.0));
        assert_eq!(parse_grid("reference").unwrap().len(), 15);
        assert!(parse_pair("1").is_err());
        assert!(parse_grid("0,x").is_err());
    }
}
