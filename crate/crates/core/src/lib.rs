//! Parametric flame-front dynamics: a pseudo-spectral Sivashinsky solver,
//! a small reverse-mode tensor engine, parametric neural operators (pFNO,
//! pFNO*, pCNN) trained on recurrent rollouts, and the diagnostics used to
//! compare learned and reference dynamics.

pub mod autodiff;
pub mod dataset;
pub mod diagnostics;
pub mod fourier;
pub mod nn;
pub mod spectral;
pub mod train;
