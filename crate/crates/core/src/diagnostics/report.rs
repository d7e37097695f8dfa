//! Assembles the per-configuration diagnostic tables of a trained model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    accumulated_error, analytic_dispersion, autocorrelation, front_length, measured_dispersion, operator_jacobian,
    AutocorrOptions, ConfigReport, DiagnosticsError, ModelStep, SolverStep, StepMap, Table, ERROR_FLAG, JACOBIAN_EPS,
};
use crate::dataset::{random_initial, sequence_seed, Split};
use crate::nn::{GammaInput, Model};
use crate::spectral::{closure_from_rho_beta, simulate, IntegratorConfig, SolverParams};
use crate::train::rollout;

/// Keeps diagnostic initial conditions apart from corpus seeds.
const SEED_SALT: u64 = 0xd1a6_0057_1c5e_ed00;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseOptions {
    /// Rollout length of the error and front-length tables.
    pub steps: usize,
    /// Reference steps discarded before the comparison starts.
    pub warmup: usize,
    /// Independent rollouts averaged by the autocorrelation.
    pub n_sequences: usize,
    /// Snapshot window `(stat_start, stat_end]` of the autocorrelation.
    pub stat_start: usize,
    pub stat_end: usize,
    pub remove_mean: bool,
    pub eps: f64,
    /// Largest input mode of the dispersion and Jacobian tables; defaults
    /// to `ceil(1.5 beta)`.
    pub kappa_max: Option<usize>,
    pub init_range: [f64; 2],
    pub mesh_size: usize,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            warmup: 0,
            n_sequences: 7,
            stat_start: 1000,
            stat_end: 4000,
            remove_mean: true,
            eps: JACOBIAN_EPS,
            kappa_max: None,
            init_range: [0.0, 0.03],
            mesh_size: crate::spectral::DEFAULT_MESH,
        }
    }
}

impl DiagnoseOptions {
    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if self.n_sequences == 0 {
            return Err(DiagnosticsError::Invalid("n_sequences must be positive".into()));
        }
        if self.stat_start >= self.stat_end {
            return Err(DiagnosticsError::Invalid(format!(
                "empty statistics window ({}, {}]",
                self.stat_start, self.stat_end
            )));
        }
        if !(self.eps > 0.0) {
            return Err(DiagnosticsError::Invalid("eps must be positive".into()));
        }
        Ok(())
    }

    pub fn kappas(&self, beta: f64) -> Vec<usize> {
        let top = self.kappa_max.unwrap_or((1.5 * beta).ceil() as usize).min(self.mesh_size / 2 - 1);
        (1..=top).collect()
    }

    fn autocorr(&self) -> AutocorrOptions {
        AutocorrOptions { start: self.stat_start, end: self.stat_end, remove_mean: self.remove_mean }
    }
}

fn initial(opts: &DiagnoseOptions, seed: u64, config: usize, sequence: usize) -> Result<Vec<f64>, DiagnosticsError> {
    let s = sequence_seed(seed ^ SEED_SALT, Split::Valid, config, sequence, 0);
    random_initial(s, opts.mesh_size, opts.init_range)
        .map(|f| f.values)
        .map_err(|e| DiagnosticsError::Invalid(e.to_string()))
}

fn reference_run(
    params: &SolverParams,
    integrator: &IntegratorConfig,
    init: &[f64],
    n_steps: usize,
) -> Result<Vec<Vec<f64>>, DiagnosticsError> {
    let s = crate::spectral::FrontState::new(init.to_vec())?;
    Ok(simulate(&s, params, integrator, n_steps)?.states.into_iter().map(|f| f.values).collect())
}

fn model_run(model: &Model, init: &[f64], gamma: GammaInput, n_steps: usize) -> Result<Vec<Vec<f64>>, DiagnosticsError> {
    let r = rollout(model, init, gamma, n_steps).map_err(|e| DiagnosticsError::Invalid(e.to_string()))?;
    if let Some(i) = r.failure {
        log::warn!("model rollout became non-finite at step {i}");
    }
    Ok(r.states)
}

/// Error, front length, autocorrelation, dispersion and Jacobian tables of
/// `model` at `(rho, beta)`. `config` indexes the configuration for seeding.
pub fn diagnose_config(
    model: &Model,
    rho: f64,
    beta: f64,
    config: usize,
    integrator: &IntegratorConfig,
    opts: &DiagnoseOptions,
    seed: u64,
) -> Result<ConfigReport, DiagnosticsError> {
    opts.validate()?;
    model.config.check_mesh(opts.mesh_size)?;
    let params = closure_from_rho_beta(rho, beta)?;
    let gamma = GammaInput::new(rho, beta);
    let dt = integrator.dt_out;
    let mut tables = Vec::new();

    // short-horizon comparison from one shared initial front
    let start = initial(opts, seed, config, 0)?;
    let reference = reference_run(&params, integrator, &start, opts.warmup + opts.steps)?.split_off(opts.warmup);
    let predicted = model_run(model, &reference[0], gamma, opts.steps)?;
    let k = predicted.len();
    let errors = accumulated_error(&predicted, &reference[..k])?;
    let mut error = Table::new(&["step", "time", "relative_l2", "flagged"]);
    let mut length = Table::new(&["step", "time", "model", "reference"]);
    for (i, e) in errors.iter().enumerate() {
        let t = i as f64 * dt;
        error.push(vec![i as f64, t, *e, if *e > ERROR_FLAG { 1.0 } else { 0.0 }]);
        length.push(vec![i as f64, t, front_length(&predicted[i]), front_length(&reference[i])]);
    }
    tables.push(("error".to_string(), error));
    tables.push(("length".to_string(), length));

    // long-run statistics of independent model and reference rollouts
    let n_long = opts.stat_end;
    let runs: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..opts.n_sequences)
        .into_par_iter()
        .map(|s| {
            let init = initial(opts, seed, config, 1 + s)?;
            Ok((model_run(model, &init, gamma, n_long)?, reference_run(&params, integrator, &init, n_long)?))
        })
        .collect::<Result<_, DiagnosticsError>>()?;
    let (model_seqs, ref_seqs): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let r_model = autocorrelation(&model_seqs, &opts.autocorr())?;
    let r_ref = autocorrelation(&ref_seqs, &opts.autocorr())?;
    let n = opts.mesh_size;
    let mut corr = Table::new(&["r", "model", "reference"]);
    for j in 0..n {
        corr.push(vec![std::f64::consts::TAU * j as f64 / n as f64, r_model[j], r_ref[j]]);
    }
    tables.push(("autocorrelation".to_string(), corr));

    // linear response about the flat front
    let kappas = opts.kappas(beta);
    let model_map = ModelStep { model, gamma };
    let solver_map = SolverStep { params, integrator: *integrator };
    let measured = measured_dispersion(&model_map, n, &kappas, dt, opts.eps)?;
    let solver = measured_dispersion(&solver_map, n, &kappas, dt, opts.eps)?;
    let analytic = analytic_dispersion(&params, &kappas);
    let mut disp = Table::new(&["kappa", "analytic", "model", "solver"]);
    for (i, &kappa) in kappas.iter().enumerate() {
        disp.push(vec![kappa as f64, analytic[i], measured[i], solver[i]]);
    }
    tables.push(("dispersion".to_string(), disp));

    let kbar_max = kappas.last().copied().unwrap_or(0);
    let jac = operator_jacobian(&model_map as &dyn StepMap, n, &kappas, kbar_max, opts.eps)?;
    let names: Vec<String> = std::iter::once("kappa".to_string()).chain((0..=kbar_max).map(|k| format!("kbar_{k}"))).collect();
    let mut jt = Table::new(&names.iter().map(String::as_str).collect::<Vec<_>>());
    for (kappa, row) in jac.kappas.iter().zip(&jac.values) {
        jt.push(std::iter::once(*kappa as f64).chain(row.iter().copied()).collect());
    }
    tables.push(("jacobian".to_string(), jt));

    Ok(ConfigReport { rho, beta, tables })
}

/// Analytic and solver-measured dispersion, plus the model's when given.
pub fn dispersion_table(
    rho: f64,
    beta: f64,
    model: Option<&Model>,
    integrator: &IntegratorConfig,
    opts: &DiagnoseOptions,
) -> Result<Table, DiagnosticsError> {
    let params = closure_from_rho_beta(rho, beta)?;
    let kappas = opts.kappas(beta);
    let n = opts.mesh_size;
    let analytic = analytic_dispersion(&params, &kappas);
    let solver = measured_dispersion(&SolverStep { params, integrator: *integrator }, n, &kappas, integrator.dt_out, opts.eps)?;
    let learned = match model {
        Some(m) => {
            m.config.check_mesh(n)?;
            let map = ModelStep { model: m, gamma: GammaInput::new(rho, beta) };
            Some(measured_dispersion(&map, n, &kappas, integrator.dt_out, opts.eps)?)
        }
        None => None,
    };
    let mut cols = vec!["kappa", "analytic", "solver"];
    if learned.is_some() {
        cols.push("model");
    }
    let mut t = Table::new(&cols);
    for (i, &kappa) in kappas.iter().enumerate() {
        let mut row = vec![kappa as f64, analytic[i], solver[i]];
        row.extend(learned.as_ref().map(|l| l[i]));
        t.push(row);
    }
    Ok(t)
}
