//! Pseudo-spectral solver for the rescaled Sivashinsky equation on the
//! periodic interval `(-pi, pi]`.

mod integrate;
mod ops;
mod params;

pub use integrate::{simulate, step_to, IntegratorConfig, SolutionSequence, Stepper};
pub use ops::{gamma_op, rhs, FrontState, SpectralOperator, DEFAULT_MESH};
pub use params::{
    closure_from_rho_beta, dispersion_omega, physical_to_scaled, reference_grid, PhysicalParams,
    ScaledCoefficients, SolverParams, MU_TOLERANCE, PEAK_GROWTH,
};

use thiserror::Error;

/// Amplitude beyond which a run is treated as blown up.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("closure bisection failed to bracket mu in [0, 1] for rho={rho}, beta={beta}")]
    ClosureFailed { rho: f64, beta: f64 },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("non-finite state at t={time}")]
    NonFinite { time: f64 },
    #[error("blow-up at t={time}: max |phi| = {max_abs:e} exceeds {BLOWUP_THRESHOLD:e}")]
    BlowUp { time: f64, max_abs: f64 },
    #[error("exceeded {limit} internal steps before reaching t={target} (stopped at t={time})")]
    StepLimit { limit: usize, time: f64, target: f64 },
    #[error("output step {index}: {source}")]
    AtStep {
        index: usize,
        #[source]
        source: Box<SpectralError>,
    },
}
