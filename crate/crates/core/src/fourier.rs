//! Real-to-complex FFT helpers shared by the solver, the tensor engine and
//! the diagnostics.
//!
//! Conventions: `rfft` is unnormalized, `F_k = sum_j x_j exp(-2 pi i k j / n)`,
//! and returns the `n/2 + 1` non-negative modes. `irfft` carries the `1/n`
//! factor, reads only the real part of the DC and Nyquist coefficients and
//! treats missing high modes as zero.

use std::cell::RefCell;

use realfft::num_complex::Complex64;
use realfft::RealFftPlanner;

struct Workspace {
    planner: RealFftPlanner<f64>,
    real: Vec<f64>,
    modes: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

thread_local! {
    static WORKSPACE: RefCell<Workspace> = RefCell::new(Workspace {
        planner: RealFftPlanner::new(),
        real: Vec::new(),
        modes: Vec::new(),
        scratch: Vec::new(),
    });
}

/// Number of non-negative modes of a real signal of length `n`.
pub fn n_modes(n: usize) -> usize {
    n / 2 + 1
}

/// Forward real FFT of an even-length signal.
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n_modes(x.len())];
    rfft_into(x, &mut out);
    out
}

/// [`rfft`] writing the `n/2 + 1` modes into `out`.
pub fn rfft_into(x: &[f64], out: &mut [Complex64]) {
    let n = x.len();
    assert!(n % 2 == 0 && out.len() == n_modes(n), "rfft expects an even length and n/2 + 1 outputs");
    WORKSPACE.with(|w| {
        let w = &mut *w.borrow_mut();
        let plan = w.planner.plan_fft_forward(n);
        w.real.clear();
        w.real.extend_from_slice(x);
        w.scratch.resize(plan.get_scratch_len(), Complex64::new(0.0, 0.0));
        plan.process_with_scratch(&mut w.real, out, &mut w.scratch).expect("buffer lengths checked");
    });
}

/// Inverse of [`rfft`] onto `n` real samples.
pub fn irfft(modes: &[Complex64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    irfft_into(modes, &mut out);
    out
}

/// [`irfft`] writing into `out`, whose length sets `n`.
pub fn irfft_into(modes: &[Complex64], out: &mut [f64]) {
    let n = out.len();
    assert!(n % 2 == 0, "irfft expects an even length");
    let half = n / 2;
    let m = modes.len().min(half + 1);
    WORKSPACE.with(|w| {
        let w = &mut *w.borrow_mut();
        let plan = w.planner.plan_fft_inverse(n);
        w.modes.clear();
        w.modes.extend_from_slice(&modes[..m]);
        w.modes.resize(half + 1, Complex64::new(0.0, 0.0));
        w.modes[0].im = 0.0;
        w.modes[half].im = 0.0;
        w.scratch.resize(plan.get_scratch_len(), Complex64::new(0.0, 0.0));
        plan.process_with_scratch(&mut w.modes, out, &mut w.scratch).expect("buffer lengths checked");
    });
    let scale = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= scale);
}
