//! Coefficient closure for the rescaled Sivashinsky equation.
//!
//! The pair `(rho, beta)` fixes the remaining coefficients: `nu = mu - rho`
//! makes `beta` the largest neutral wavenumber, the peak of the scaled
//! growth curve `f(s) = -mu s^4 + nu s^2 + rho s` on `s in (0, 1)` is pinned
//! to `1/4`, and `tau = rho beta / 10 + (1 - rho)`.

use serde::{Deserialize, Serialize};

use super::SpectralError;

/// Bisection stops once the bracket on `mu` is narrower than this.
pub const MU_TOLERANCE: f64 = 1e-10;
/// Grid resolution of the coarse scan preceding golden-section refinement.
const SCAN_POINTS: usize = 4096;
/// Endpoint residuals below this are treated as exact roots.
const ENDPOINT_SLACK: f64 = 1e-13;
/// Target value of the growth-curve maximum.
pub const PEAK_GROWTH: f64 = 0.25;

/// Closed coefficient set of the rescaled equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub rho: f64,
    pub beta: f64,
    pub mu: f64,
    pub nu: f64,
    pub tau: f64,
}

/// Coefficients of the unscaled equation plus the three transformation
/// constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Burned-to-fresh density ratio.
    pub omega: f64,
    /// Lewis-number ratio, either sign.
    pub le_star: f64,
}

/// Output of [`physical_to_scaled`]. Unlike [`SolverParams`] nothing ties
/// these five numbers together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledCoefficients {
    pub beta: f64,
    pub nu: f64,
    pub rho: f64,
    pub mu: f64,
    pub tau: f64,
}

fn growth_curve(mu: f64, rho: f64, s: f64) -> f64 {
    let s2 = s * s;
    -mu * s2 * s2 + (mu - rho) * s2 + rho * s
}

/// Maximum of `f` over `(0, 1)`: a uniform scan followed by golden-section
/// refinement around the best sample.
fn curve_peak(mu: f64, rho: f64) -> f64 {
    let h = 1.0 / SCAN_POINTS as f64;
    let mut best = 1usize;
    let mut best_val = f64::NEG_INFINITY;
    for i in 1..SCAN_POINTS {
        let v = growth_curve(mu, rho, i as f64 * h);
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    let f = |s: f64| growth_curve(mu, rho, s);
    let (mut lo, mut hi) = ((best - 1) as f64 * h, (best + 1) as f64 * h);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if hi - lo < 1e-14 {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
    }
    best_val.max(f1).max(f2).max(f(0.5 * (lo + hi)))
}

impl SolverParams {
    /// Closes `(mu, nu, tau)` for the given blend ratio and cutoff.
    ///
    /// `g(mu) = max_s f(s) - 1/4` is non-decreasing in `mu` because
    /// `df/dmu = s^2 (1 - s^2) >= 0`, so plain bisection on `[0, 1]` finds
    /// the root.
    pub fn from_rho_beta(rho: f64, beta: f64) -> Result<Self, SpectralError> {
        if !(0.0..=1.0).contains(&rho) || !rho.is_finite() {
            return Err(SpectralError::InvalidParameter(format!(
                "rho must lie in [0, 1], got {rho}"
            )));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(SpectralError::InvalidParameter(format!(
                "beta must be positive, got {beta}"
            )));
        }
        let g = |mu: f64| curve_peak(mu, rho) - PEAK_GROWTH;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let (g_lo, g_hi) = (g(lo), g(hi));
        let mu = if g_lo.abs() <= ENDPOINT_SLACK {
            lo
        } else if g_hi.abs() <= ENDPOINT_SLACK {
            hi
        } else if g_lo > 0.0 || g_hi < 0.0 {
            return Err(SpectralError::ClosureFailed { rho, beta });
        } else {
            while hi - lo > MU_TOLERANCE {
                let mid = 0.5 * (lo + hi);
                if g(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        Ok(Self {
            rho,
            beta,
            mu,
            nu: mu - rho,
            tau: rho * beta / 10.0 + (1.0 - rho),
        })
    }

    /// Linear growth rate of mode `kappa` about the flat front.
    pub fn omega(&self, kappa: f64) -> f64 {
        let s = kappa / self.beta;
        let s2 = s * s;
        self.tau * (-self.mu * s2 * s2 + self.nu * s2 + self.rho * s)
    }

    /// Largest value of the scaled growth curve on `(0, 1)`.
    pub fn peak_growth(&self) -> f64 {
        curve_peak(self.mu, self.rho)
    }
}

/// Closure entry point; see [`SolverParams::from_rho_beta`].
pub fn closure_from_rho_beta(rho: f64, beta: f64) -> Result<SolverParams, SpectralError> {
    SolverParams::from_rho_beta(rho, beta)
}

/// `omega(kappa)` for the closed parameter set.
pub fn dispersion_omega(params: &SolverParams, kappa: f64) -> Result<f64, SpectralError> {
    if kappa < 0.0 || !kappa.is_finite() {
        return Err(SpectralError::InvalidParameter(format!(
            "wavenumber must be non-negative, got {kappa}"
        )));
    }
    Ok(params.omega(kappa))
}

/// Direct substitution into the variable transformation, without any
/// closure constraint.
pub fn physical_to_scaled(p: &PhysicalParams) -> Result<ScaledCoefficients, SpectralError> {
    for (name, v) in [("a", p.a), ("b", p.b), ("c", p.c)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(SpectralError::InvalidParameter(format!(
                "transformation constant {name} must be positive, got {v}"
            )));
        }
    }
    let PhysicalParams { a, b, c, omega, le_star } = *p;
    Ok(ScaledCoefficients {
        beta: b / c,
        nu: le_star / (c * c),
        rho: (1.0 - omega) * b * c,
        mu: 4.0 * (1.0 + le_star).powi(2) / (b * b * c.powi(4)),
        tau: 1.0 / (a * a * b * b),
    })
}

/// The 15 `(rho, beta)` pairs of the reference dataset.
pub fn reference_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::with_capacity(15);
    for beta in [10.0, 25.0, 40.0] {
        for rho in [0.0, 0.25, 0.5, 0.75, 1.0] {
            grid.push((rho, beta));
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: plain grid search over `(mu, s)` around a
    /// centre, no bisection and no refinement.
    fn grid_mu(rho: f64, centre: f64, half_width: f64, mu_step: f64, s_step: f64) -> f64 {
        let ns = (1.0 / s_step) as usize;
        let peak = |mu: f64| {
            (1..ns)
                .map(|i| growth_curve(mu, rho, i as f64 * s_step))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let nm = (2.0 * half_width / mu_step).round() as usize;
        let mut best = (f64::INFINITY, centre);
        for i in 0..=nm {
            let mu = centre - half_width + i as f64 * mu_step;
            let r = (peak(mu) - 0.25).abs();
            if r < best.0 {
                best = (r, mu);
            }
        }
        best.1
    }

    #[test]
    fn pure_limits() {
        let ks = closure_from_rho_beta(0.0, 10.0).unwrap();
        assert!((ks.mu - 1.0).abs() < 1e-8 && (ks.nu - 1.0).abs() < 1e-8);
        assert!((ks.tau - 1.0).abs() < 1e-15);
        let ms = closure_from_rho_beta(1.0, 10.0).unwrap();
        assert!(ms.mu.abs() < 1e-8 && (ms.nu + 1.0).abs() < 1e-8);
        assert!((ms.tau - 1.0).abs() < 1e-15);
        let ms40 = closure_from_rho_beta(1.0, 40.0).unwrap();
        assert!((ms40.tau - 4.0).abs() < 1e-15 && ms40.mu.abs() < 1e-8);
    }

    #[test]
    fn pure_limits_against_grid_search() {
        // KS limit: max of -s^4 + s^2 is 1/4; MS limit: max of -s^2 + s is 1/4.
        let grid_max = |mu: f64, rho: f64| {
            (1..100_000)
                .map(|i| growth_curve(mu, rho, i as f64 * 1e-5))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        assert!((grid_max(1.0, 0.0) - 0.25).abs() < 1e-9);
        assert!((grid_max(0.0, 1.0) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn half_blend_matches_brute_force() {
        let p = closure_from_rho_beta(0.5, 25.0).unwrap();
        assert!((p.mu - HALF_BLEND_MU).abs() < 2e-6, "mu={}", p.mu);
        let local = grid_mu(0.5, HALF_BLEND_MU, 1e-4, 1e-6, 1e-5);
        assert!((p.mu - local).abs() < 3e-6, "mu={} grid={}", p.mu, local);
    }

    /// mu at rho = 1/2, frozen from a full double grid search over
    /// `(mu, s)` at 1e-6 resolution run outside this crate.
    const HALF_BLEND_MU: f64 = 0.557_325;

    #[test]
    fn dispersion_examples() {
        let p = closure_from_rho_beta(0.0, 10.0).unwrap();
        assert_eq!(dispersion_omega(&p, 0.0).unwrap(), 0.0);
        assert!(dispersion_omega(&p, 10.0).unwrap().abs() < 1e-15);
        let peak = dispersion_omega(&p, 10.0 / 2f64.sqrt()).unwrap();
        assert!((peak - 0.25).abs() < 1e-9);
        assert!(dispersion_omega(&p, -1.0).is_err());
    }

    #[test]
    fn physical_substitution() {
        let s = physical_to_scaled(&PhysicalParams { a: 1.0, b: 1.0, c: 1.0, omega: 1.0, le_star: 0.0 })
            .unwrap();
        assert_eq!((s.beta, s.nu, s.rho, s.mu, s.tau), (1.0, 0.0, 0.0, 4.0, 1.0));
        let s = physical_to_scaled(&PhysicalParams { a: 1.0, b: 1.0, c: 1.0, omega: 0.0, le_star: -1.0 })
            .unwrap();
        assert_eq!((s.beta, s.nu, s.rho, s.mu, s.tau), (1.0, -1.0, 1.0, 0.0, 1.0));
        let s = physical_to_scaled(&PhysicalParams { a: 2.0, b: 2.0, c: 1.0, omega: 0.5, le_star: 1.0 })
            .unwrap();
        assert_eq!((s.beta, s.nu, s.rho, s.mu, s.tau), (2.0, 1.0, 1.0, 4.0, 1.0 / 16.0));
        assert!(physical_to_scaled(&PhysicalParams { a: 0.0, b: 1.0, c: 1.0, omega: 0.5, le_star: 0.0 })
            .is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(closure_from_rho_beta(-0.1, 10.0).is_err());
        assert!(closure_from_rho_beta(1.1, 10.0).is_err());
        assert!(closure_from_rho_beta(0.5, 0.0).is_err());
        assert!(closure_from_rho_beta(f64::NAN, 10.0).is_err());
    }

    #[test]
    fn grid_has_fifteen_configs() {
        assert_eq!(reference_grid().len(), 15);
    }
}
