//! Evaluation quantities for reference and predicted front sequences.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use realfft::num_complex::Complex64;
use thiserror::Error;

use crate::autodiff::{Graph, Tensor};
use crate::fourier::{irfft, rfft};
use crate::nn::{GammaInput, Model, NnError};
use crate::spectral::{step_to, FrontState, IntegratorConfig, SolverParams, SpectralError};

/// Relative errors above this value are flagged.
pub const ERROR_FLAG: f64 = 0.1;
/// Default Jacobian perturbation size.
pub const JACOBIAN_EPS: f64 = 1e-6;
/// Largest relative change allowed between the `eps` and `eps / 2` estimates.
pub const RICHARDSON_TOL: f64 = 0.01;

mod report;
pub use report::{diagnose_config, dispersion_table, DiagnoseOptions};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("statistics window ({start}, {end}] not covered: shortest sequence has {available} states")]
    Window { start: usize, end: usize, available: usize },
    #[error("no snapshot with spatial variation in the window")]
    Degenerate,
    #[error("perturbation {eps:e} too large: estimates at eps and eps/2 differ by {rel:.3e} of the row maximum at kappa={kappa}")]
    EpsilonTooLarge { eps: f64, kappa: usize, rel: f64 },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn spectral_derivative(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let hat: Vec<Complex64> = rfft(values)
        .into_iter()
        .enumerate()
        .map(|(k, c)| if k == n / 2 { Complex64::new(0.0, 0.0) } else { Complex64::new(0.0, k as f64) * c })
        .collect();
    irfft(&hat, n)
}

/// `(1/2pi) * integral of sqrt(1 + phi_x^2)` over the period.
pub fn front_length(values: &[f64]) -> f64 {
    let n = values.len();
    let dx = TAU / n as f64;
    spectral_derivative(values).iter().map(|d| (1.0 + d * d).sqrt()).sum::<f64>() * dx / TAU
}

/// Relative L2 error per time index.
pub fn accumulated_error(predicted: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Vec<f64>, DiagnosticsError> {
    if predicted.len() != reference.len() {
        return Err(DiagnosticsError::Length(format!(
            "{} predicted against {} reference states",
            predicted.len(),
            reference.len()
        )));
    }
    predicted
        .iter()
        .zip(reference)
        .enumerate()
        .map(|(i, (p, r))| {
            if p.len() != r.len() {
                return Err(DiagnosticsError::Length(format!("state {i} has {} points, reference {}", p.len(), r.len())));
            }
            let num: f64 = p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = r.iter().map(|b| b * b).sum();
            Ok((num / den).sqrt())
        })
        .collect()
}

/// Number of leading indices whose error stays at or below [`ERROR_FLAG`].
pub fn steps_below_flag(errors: &[f64]) -> usize {
    errors.iter().take_while(|&&e| e <= ERROR_FLAG).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AutocorrOptions {
    /// Snapshot indices in `(start, end]` contribute.
    pub start: usize,
    pub end: usize,
    /// Remove each snapshot's spatial mean first.
    pub remove_mean: bool,
}

impl Default for AutocorrOptions {
    fn default() -> Self {
        Self { start: 1000, end: 4000, remove_mean: true }
    }
}

/// Circular autocorrelation at offsets `r_j = 2 pi j / N`, averaged over
/// snapshots and sequences.
pub fn autocorrelation(sequences: &[Vec<Vec<f64>>], opts: &AutocorrOptions) -> Result<Vec<f64>, DiagnosticsError> {
    if opts.start >= opts.end {
        return Err(DiagnosticsError::Invalid(format!("empty window ({}, {}]", opts.start, opts.end)));
    }
    let available = sequences.iter().map(Vec::len).min().unwrap_or(0);
    if available <= opts.end {
        return Err(DiagnosticsError::Window { start: opts.start, end: opts.end, available });
    }
    let n = sequences[0][0].len();
    let mut acc = vec![0.0; n];
    let mut count = 0usize;
    for seq in sequences {
        for snap in &seq[opts.start + 1..=opts.end] {
            if snap.len() != n {
                return Err(DiagnosticsError::Length(format!("snapshot of {} points, expected {n}", snap.len())));
            }
            if let Some(r) = snapshot_autocorrelation(snap, opts.remove_mean) {
                acc.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(DiagnosticsError::Degenerate);
    }
    Ok(acc.into_iter().map(|a| a / count as f64).collect())
}

/// Per-snapshot ratio; symmetrized so that evenness holds exactly.
fn snapshot_autocorrelation(values: &[f64], remove_mean: bool) -> Option<Vec<f64>> {
    let n = values.len();
    let mean = if remove_mean { values.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let centred: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let power: Vec<Complex64> = rfft(&centred).iter().map(|c| Complex64::new(c.norm_sqr(), 0.0)).collect();
    let c = irfft(&power, n);
    if c[0] <= 0.0 || !c[0].is_finite() {
        return None;
    }
    Some((0..n).map(|j| if j == 0 { 1.0 } else { 0.5 * (c[j] + c[n - j]) / c[0] }).collect())
}

/// A map advancing a front by one output interval.
pub trait StepMap {
    fn step(&self, values: &[f64]) -> Result<Vec<f64>, DiagnosticsError>;
}

/// One output interval of the reference integrator.
#[derive(Debug, Clone, Copy)]
pub struct SolverStep {
    pub params: SolverParams,
    pub integrator: IntegratorConfig,
}

impl StepMap for SolverStep {
    fn step(&self, values: &[f64]) -> Result<Vec<f64>, DiagnosticsError> {
        let s = FrontState::new(values.to_vec())?;
        Ok(step_to(&s, &self.params, &self.integrator, self.integrator.dt_out)?.values)
    }
}

/// One application of a learned model at fixed parameters.
#[derive(Debug, Clone, Copy)]
pub struct ModelStep<'a> {
    pub model: &'a Model,
    pub gamma: GammaInput,
}

impl StepMap for ModelStep<'_> {
    fn step(&self, values: &[f64]) -> Result<Vec<f64>, DiagnosticsError> {
        Ok(self.model.forward(values, self.gamma)?)
    }
}

/// Wraps a closure as a [`StepMap`].
pub struct FnStep<F>(pub F);

impl<F: Fn(&[f64]) -> Vec<f64>> StepMap for FnStep<F> {
    fn step(&self, values: &[f64]) -> Result<Vec<f64>, DiagnosticsError> {
        Ok((self.0)(values))
    }
}

/// `J(kappa, kbar) = |d/d eps F_kbar{G(2 eps cos(kappa x))}|` at `eps = 0`,
/// with `F_k = (1/N) sum_j f_j exp(-i k x_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub kappas: Vec<usize>,
    /// Output modes `0..=kbar_max`.
    pub kbar_max: usize,
    /// Row per input mode, column per output mode.
    pub values: Vec<Vec<f64>>,
}

impl JacobianMatrix {
    pub fn diagonal(&self) -> Vec<f64> {
        self.kappas.iter().zip(&self.values).map(|(&k, row)| row.get(k).copied().unwrap_or(0.0)).collect()
    }

    /// Largest off-diagonal entry divided by its row's diagonal entry.
    pub fn max_off_diagonal_ratio(&self) -> f64 {
        self.kappas
            .iter()
            .zip(&self.values)
            .map(|(&k, row)| {
                let diag = row.get(k).copied().unwrap_or(0.0);
                let off = row.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| *v).fold(0.0, f64::max);
                off / diag
            })
            .fold(0.0, f64::max)
    }
}

fn cos_mode(n: usize, kappa: usize, amplitude: f64) -> Vec<f64> {
    (0..n).map(|j| amplitude * (kappa as f64 * FrontState::coordinate(n, j)).cos()).collect()
}

/// Normalized modal coefficients `F_k = (1/N) sum_j f_j exp(-i k x_j)` on
/// the mesh `x_j = -pi + 2 pi j / N`.
fn modal(values: &[f64], kbar_max: usize) -> Vec<Complex64> {
    let n = values.len();
    rfft(values)
        .into_iter()
        .take(kbar_max + 1)
        .enumerate()
        .map(|(k, c)| {
            // the mesh starts at -pi: exp(-i k x_j) = (-1)^k exp(-2 pi i k j / N)
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            c * (sign / n as f64)
        })
        .collect()
}

fn modal_derivative(map: &dyn StepMap, n: usize, kappa: usize, kbar_max: usize, eps: f64) -> Result<Vec<Complex64>, DiagnosticsError> {
    let up = map.step(&cos_mode(n, kappa, 2.0 * eps))?;
    let down = map.step(&cos_mode(n, kappa, -2.0 * eps))?;
    let (fu, fd) = (modal(&up, kbar_max), modal(&down, kbar_max));
    Ok(fu.iter().zip(&fd).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

/// Jacobian by central differences, cross-checked at `eps / 2`.
pub fn operator_jacobian(
    map: &dyn StepMap,
    n: usize,
    kappas: &[usize],
    kbar_max: usize,
    eps: f64,
) -> Result<JacobianMatrix, DiagnosticsError> {
    if kbar_max > n / 2 || kappas.iter().any(|&k| k == 0 || k >= n / 2) || !(eps > 0.0) {
        return Err(DiagnosticsError::Invalid(format!(
            "modes must lie in [1, {}) and output modes up to {}; eps must be positive",
            n / 2,
            n / 2
        )));
    }
    let mut values = Vec::with_capacity(kappas.len());
    for &kappa in kappas {
        let d = modal_derivative(map, n, kappa, kbar_max, eps)?;
        let dh = modal_derivative(map, n, kappa, kbar_max, eps / 2.0)?;
        let scale = d.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if scale > 0.0 {
            let rel = d.iter().zip(&dh).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale;
            if rel > RICHARDSON_TOL {
                return Err(DiagnosticsError::EpsilonTooLarge { eps, kappa, rel });
            }
        }
        values.push(d.iter().map(|c| c.norm()).collect());
    }
    Ok(JacobianMatrix { kappas: kappas.to_vec(), kbar_max, values })
}

/// The same Jacobian from reverse-mode derivatives of a model at zero
/// input: two vector-Jacobian products per output mode.
pub fn model_jacobian_reverse(
    model: &Model,
    gamma: GammaInput,
    n: usize,
    kappas: &[usize],
    kbar_max: usize,
) -> Result<JacobianMatrix, DiagnosticsError> {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[1, n]));
    let w = model.bind(&mut g);
    let y = model.forward_graph(&mut g, &w, x, gamma)?;
    // rows of d(Re F_kbar)/dv and d(Im F_kbar)/dv
    let mut rows = Vec::with_capacity(kbar_max + 1);
    for kbar in 0..=kbar_max {
        let mut pair = [Vec::new(), Vec::new()];
        for (part, trig) in pair.iter_mut().zip([f64::cos as fn(f64) -> f64, |a: f64| -a.sin()]) {
            let seed: Vec<f64> = (0..n).map(|j| trig(kbar as f64 * FrontState::coordinate(n, j)) / n as f64).collect();
            let grads = g.backward_with(y, Tensor::real(&[1, n], seed).map_err(NnError::from)?).map_err(NnError::from)?;
            *part = grads.get(x).map(|t| t.re().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        }
        rows.push(pair);
    }
    let values = kappas
        .iter()
        .map(|&kappa| {
            let dir = cos_mode(n, kappa, 2.0);
            rows.iter()
                .map(|[re, im]| {
                    let a: f64 = re.iter().zip(&dir).map(|(p, q)| p * q).sum();
                    let b: f64 = im.iter().zip(&dir).map(|(p, q)| p * q).sum();
                    a.hypot(b)
                })
                .collect()
        })
        .collect();
    Ok(JacobianMatrix { kappas: kappas.to_vec(), kbar_max, values })
}

/// `omega'(kappa) = ln J(kappa, kappa) / dt` for each requested mode.
pub fn measured_dispersion(
    map: &dyn StepMap,
    n: usize,
    kappas: &[usize],
    dt: f64,
    eps: f64,
) -> Result<Vec<f64>, DiagnosticsError> {
    let kbar_max = kappas.iter().copied().max().unwrap_or(0);
    let j = operator_jacobian(map, n, kappas, kbar_max, eps)?;
    Ok(j.diagonal().iter().map(|d| d.ln() / dt).collect())
}

pub fn analytic_dispersion(params: &SolverParams, kappas: &[usize]) -> Vec<f64> {
    kappas.iter().map(|&k| params.omega(k as f64)).collect()
}

/// Fraction of modes whose measured growth has the analytic sign; a neutral
/// analytic mode agrees when the measured rate is within `neutral_band`.
pub fn sign_agreement(measured: &[f64], analytic: &[f64], neutral_band: f64) -> f64 {
    let agree = measured
        .iter()
        .zip(analytic)
        .filter(|(m, a)| if **a == 0.0 { m.abs() <= neutral_band } else { m.signum() == a.signum() })
        .count();
    agree as f64 / analytic.len().max(1) as f64
}

/// Named columns of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write!(s, "{v}").expect("writing to a string");
            }
            s.push('\n');
        }
        s
    }
}

/// Diagnostic tables for one parameter configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigReport {
    pub rho: f64,
    pub beta: f64,
    pub tables: Vec<(String, Table)>,
}

/// All tables of a diagnostics run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosticsReport {
    pub configs: Vec<ConfigReport>,
}

pub fn csv_name(diag: &str, rho: f64, beta: f64) -> String {
    format!("{diag}_{rho}_{beta}.csv")
}

impl DiagnosticsReport {
    /// Writes `{diag}_{rho}_{beta}.csv` files; returns their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, DiagnosticsError> {
        std::fs::create_dir_all(dir).map_err(|source| DiagnosticsError::Io { path: dir.to_path_buf(), source })?;
        let mut out = Vec::new();
        for c in &self.configs {
            for (name, table) in &c.tables {
                if table.rows.iter().flatten().any(|v| !v.is_finite()) {
                    log::warn!("{} contains non-finite entries", csv_name(name, c.rho, c.beta));
                }
                let path = dir.join(csv_name(name, c.rho, c.beta));
                std::fs::write(&path, table.to_csv()).map_err(|source| DiagnosticsError::Io { path: path.clone(), source })?;
                out.push(path);
            }
        }
        Ok(out)
    }
}
