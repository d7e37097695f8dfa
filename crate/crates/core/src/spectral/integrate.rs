//! Adaptive Dormand–Prince 5(4) time stepping in integrating-factor
//! (Lawson) form.
//!
//! The linear part of the equation is diagonal in Fourier space with symbol
//! `omega(k)`, so each step propagates it exactly through `exp(omega h)` and
//! the embedded pair only sees the quadratic term. Stage exponents are
//! differences `c_i - c_j >= 0`, which keeps every factor bounded even when
//! `omega(k) h` is very negative at the top of the spectrum.

use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::ops::check_finite;
use super::{FrontState, SolverParams, SpectralError, SpectralOperator};
use crate::fourier::{irfft, rfft};

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Output interval.
    pub dt_out: f64,
    /// Cap on attempted internal steps per output interval.
    pub max_internal_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            rel_tol: 1e-7,
            dt_out: 0.15,
            max_internal_steps: 100_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), SpectralError> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(SpectralError::InvalidParameter(
                "integrator tolerances must be positive".into(),
            ));
        }
        if !(self.dt_out > 0.0) || !self.dt_out.is_finite() {
            return Err(SpectralError::InvalidParameter("dt_out must be positive".into()));
        }
        if self.max_internal_steps == 0 {
            return Err(SpectralError::InvalidParameter(
                "max_internal_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Time-ordered states at a fixed output interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSequence {
    pub params: SolverParams,
    pub t0: f64,
    pub dt_out: f64,
    pub states: Vec<FrontState>,
    /// Seed of the initial condition, when it was drawn at random.
    pub seed: Option<u64>,
}

impl SolutionSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, index: usize) -> f64 {
        self.t0 + index as f64 * self.dt_out
    }
}

/// Stage propagators for one step size, reused while `h` repeats.
struct Propagators {
    h: f64,
    /// `exp(omega c_i h)` for each stage.
    stage: Vec<Vec<f64>>,
    /// `exp(omega (c_i - c_j) h)` indexed `[i][j]` for `j < i`.
    pair: Vec<Vec<Vec<f64>>>,
}

impl Propagators {
    fn new(linear: &[f64], h: f64) -> Self {
        let expo = |d: f64| linear.iter().map(|l| (l * d * h).exp()).collect::<Vec<_>>();
        let stage = C.iter().map(|&c| expo(c)).collect();
        let pair = (0..7)
            .map(|i| (0..i).map(|j| expo(C[i] - C[j])).collect())
            .collect();
        Self { h, stage, pair }
    }
}

/// Carries one state forward through time.
pub struct Stepper {
    op: SpectralOperator,
    config: IntegratorConfig,
    t: f64,
    hat: Vec<Complex64>,
    values: Vec<f64>,
    h: f64,
    fsal: Option<Vec<Complex64>>,
    props: Option<Propagators>,
}

impl Stepper {
    pub fn new(
        initial: &FrontState,
        params: &SolverParams,
        config: &IntegratorConfig,
    ) -> Result<Self, SpectralError> {
        config.validate()?;
        let initial = FrontState::new(initial.values.clone())?;
        let op = SpectralOperator::new(*params, initial.n())?;
        Ok(Self {
            op,
            config: *config,
            t: 0.0,
            hat: rfft(&initial.values),
            values: initial.values,
            h: config.dt_out.min(1e-2),
            fsal: None,
            props: None,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> FrontState {
        FrontState { values: self.values.clone() }
    }

    /// Advances to exactly `t_target`.
    pub fn step_to(&mut self, t_target: f64) -> Result<(), SpectralError> {
        if !(t_target > self.t) {
            return Err(SpectralError::InvalidParameter(format!(
                "target time {t_target} is not after the current time {}",
                self.t
            )));
        }
        let n = self.op.n();
        let slack = 1e-12 * t_target.abs().max(1.0);
        let mut attempts = 0usize;
        while self.t < t_target {
            attempts += 1;
            if attempts > self.config.max_internal_steps {
                return Err(SpectralError::StepLimit {
                    limit: self.config.max_internal_steps,
                    time: self.t,
                    target: t_target,
                });
            }
            let remaining = t_target - self.t;
            let landing = self.h >= remaining - slack;
            let h = if landing { remaining } else { self.h };

            let (new_hat, err_hat, n_last) = self.attempt(h);
            let new_values = irfft(&new_hat, n);
            let err_values = irfft(&err_hat, n);
            let err = self.error_norm(&err_values, &new_values);
            if !err.is_finite() {
                return Err(SpectralError::NonFinite { time: self.t + h });
            }
            let fac = if err == 0.0 {
                FAC_MAX
            } else {
                (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
            };
            if err <= 1.0 {
                self.t = if landing { t_target } else { self.t + h };
                check_finite(&new_values, self.t)?;
                self.hat = new_hat;
                self.values = new_values;
                self.fsal = Some(n_last);
                let proposal = h * fac;
                self.h = if landing { proposal.max(self.h) } else { proposal };
            } else {
                self.h = h * fac.min(1.0);
            }
        }
        Ok(())
    }

    fn error_norm(&self, err: &[f64], new: &[f64]) -> f64 {
        let (atol, rtol) = (self.config.abs_tol, self.config.rel_tol);
        let sum: f64 = err
            .iter()
            .zip(new)
            .zip(&self.values)
            .map(|((e, a), b)| {
                let sc = atol + rtol * a.abs().max(b.abs());
                (e / sc).powi(2)
            })
            .sum();
        (sum / err.len() as f64).sqrt()
    }

    /// One trial step of size `h`: returns the new modal state, the modal
    /// error estimate and the quadratic term at the new state.
    fn attempt(&mut self, h: f64) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
        if self.props.as_ref().map_or(true, |p| p.h != h) {
            self.props = Some(Propagators::new(self.op.linear(), h));
        }
        let props = self.props.as_ref().expect("propagators just built");
        let m = self.hat.len();
        let mut stages: Vec<Vec<Complex64>> = Vec::with_capacity(7);
        stages.push(match &self.fsal {
            Some(f) => f.clone(),
            None => self.op.nonlinear_hat(&self.hat),
        });
        let mut u = vec![Complex64::new(0.0, 0.0); m];
        for i in 1..7 {
            for k in 0..m {
                let mut acc = self.hat[k] * props.stage[i][k];
                for (j, nj) in stages.iter().enumerate() {
                    let a = A[i][j];
                    if a != 0.0 {
                        acc += nj[k] * (h * a * props.pair[i][j][k]);
                    }
                }
                u[k] = acc;
            }
            stages.push(self.op.nonlinear_hat(&u));
        }
        // stage 7 input equals the fifth-order solution
        let mut err = vec![Complex64::new(0.0, 0.0); m];
        for (k, e) in err.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, nj) in stages.iter().enumerate() {
                let w = if j == 6 { 1.0 } else { props.pair[6][j][k] };
                acc += nj[k] * (E[j] * w);
            }
            *e = acc * h;
        }
        let last = stages.pop().expect("seven stages");
        (u, err, last)
    }
}

/// Advances `state` by `duration` from time zero.
pub fn step_to(
    state: &FrontState,
    params: &SolverParams,
    config: &IntegratorConfig,
    t_target: f64,
) -> Result<FrontState, SpectralError> {
    let mut stepper = Stepper::new(state, params, config)?;
    stepper.step_to(t_target)?;
    Ok(stepper.state())
}

/// Integrates `n_steps` output intervals of `config.dt_out`.
pub fn simulate(
    initial: &FrontState,
    params: &SolverParams,
    config: &IntegratorConfig,
    n_steps: usize,
) -> Result<SolutionSequence, SpectralError> {
    let mut stepper = Stepper::new(initial, params, config)?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(stepper.state());
    for index in 1..=n_steps {
        stepper
            .step_to(index as f64 * config.dt_out)
            .map_err(|e| SpectralError::AtStep { index, source: Box::new(e) })?;
        states.push(stepper.state());
    }
    Ok(SolutionSequence {
        params: *params,
        t0: 0.0,
        dt_out: config.dt_out,
        states,
        seed: None,
    })
}
