use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{SolverParams, SpectralError, BLOWUP_THRESHOLD};
use crate::fourier::{irfft, n_modes, rfft};

/// Mesh size of the reference dataset.
pub const DEFAULT_MESH: usize = 256;

/// Front displacement sampled at `x_j = -pi + 2 pi j / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontState {
    pub values: Vec<f64>,
}

impl FrontState {
    pub fn new(values: Vec<f64>) -> Result<Self, SpectralError> {
        if values.len() < 4 || values.len() % 2 != 0 {
            return Err(SpectralError::InvalidState(format!(
                "mesh size must be even and at least 4, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SpectralError::InvalidState(format!("non-finite sample at index {i}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    /// Samples `f` on the mesh.
    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: (0..n).map(|j| f(Self::coordinate(n, j))).collect(),
        }
    }

    pub fn coordinate(n: usize, j: usize) -> f64 {
        -std::f64::consts::PI + 2.0 * std::f64::consts::PI * j as f64 / n as f64
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn spacing(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.n() as f64
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.n() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Circular shift by `s` grid points: `out[j] = in[j - s]`.
    pub fn shifted(&self, s: isize) -> Self {
        let n = self.n() as isize;
        let values = (0..n)
            .map(|j| self.values[(j - s).rem_euclid(n) as usize])
            .collect();
        Self { values }
    }

    /// Spectral first derivative.
    pub fn derivative(&self) -> Vec<f64> {
        let n = self.n();
        let mut hat = rfft(&self.values);
        differentiate_in_place(&mut hat, n);
        irfft(&hat, n)
    }
}

/// Multiplies mode `k` by `i k`; the Nyquist mode has no odd derivative.
fn differentiate_in_place(hat: &mut [Complex64], n: usize) {
    for (k, c) in hat.iter_mut().enumerate() {
        *c = if k == n / 2 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(0.0, k as f64) * *c
        };
    }
}

/// Non-local operator `F^-1(|k| F(phi))`.
pub fn gamma_op(state: &FrontState) -> FrontState {
    let n = state.n();
    let mut hat = rfft(&state.values);
    for (k, c) in hat.iter_mut().enumerate() {
        *c *= k as f64;
    }
    FrontState { values: irfft(&hat, n) }
}

/// Linear symbol and de-aliased quadratic term of the equation for one
/// parameter set and mesh size.
#[derive(Debug, Clone)]
pub struct SpectralOperator {
    n: usize,
    padded: usize,
    params: SolverParams,
    linear: Vec<f64>,
    quad_coef: f64,
}

impl SpectralOperator {
    pub fn new(params: SolverParams, n: usize) -> Result<Self, SpectralError> {
        if n < 4 || n % 2 != 0 {
            return Err(SpectralError::InvalidState(format!(
                "mesh size must be even and at least 4, got {n}"
            )));
        }
        let mut padded = 3 * n / 2;
        padded += padded % 2;
        let linear = (0..n_modes(n)).map(|k| params.omega(k as f64)).collect();
        Ok(Self {
            n,
            padded,
            params,
            linear,
            quad_coef: -params.tau / (2.0 * params.beta * params.beta),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> &SolverParams {
        &self.params
    }

    /// Growth rate per retained mode; the exact linear propagator is
    /// `exp(linear[k] t)`.
    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    /// `-tau / (2 beta^2) (phi_x)^2` in modal form, evaluated on a 3/2
    /// zero-padded grid so the product is alias free.
    pub fn nonlinear_hat(&self, hat: &[Complex64]) -> Vec<Complex64> {
        let (n, m) = (self.n, self.padded);
        let mut dx = hat.to_vec();
        differentiate_in_place(&mut dx, n);
        // irfft on the padded grid carries 1/m; rescale to the 1/n convention
        let grow = m as f64 / n as f64;
        let sq: Vec<f64> = irfft(&dx, m)
            .into_iter()
            .map(|v| {
                let v = v * grow;
                v * v
            })
            .collect();
        let prod = rfft(&sq);
        let shrink = self.quad_coef * n as f64 / m as f64;
        let mut out: Vec<Complex64> = prod[..n_modes(n)].iter().map(|c| c * shrink).collect();
        out[n / 2] = Complex64::new(0.0, 0.0);
        out
    }

    /// Full modal tendency.
    pub fn rhs_hat(&self, hat: &[Complex64]) -> Vec<Complex64> {
        let mut out = self.nonlinear_hat(hat);
        for ((o, h), l) in out.iter_mut().zip(hat).zip(&self.linear) {
            *o += h * *l;
        }
        out
    }

    pub fn rhs(&self, state: &FrontState) -> Result<FrontState, SpectralError> {
        if state.n() != self.n {
            return Err(SpectralError::InvalidState(format!(
                "state has {} samples, operator expects {}",
                state.n(),
                self.n
            )));
        }
        let values = irfft(&self.rhs_hat(&rfft(&state.values)), self.n);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite { time: 0.0 });
        }
        Ok(FrontState { values })
    }
}

pub(crate) fn check_finite(values: &[f64], time: f64) -> Result<(), SpectralError> {
    let mut max_abs = 0.0f64;
    for v in values {
        if !v.is_finite() {
            return Err(SpectralError::NonFinite { time });
        }
        max_abs = max_abs.max(v.abs());
    }
    if max_abs > BLOWUP_THRESHOLD {
        return Err(SpectralError::BlowUp { time, max_abs });
    }
    Ok(())
}

/// Time derivative `phi_t` of the rescaled equation.
pub fn rhs(state: &FrontState, params: &SolverParams) -> Result<FrontState, SpectralError> {
    SpectralOperator::new(*params, state.n())?.rhs(state)
}
