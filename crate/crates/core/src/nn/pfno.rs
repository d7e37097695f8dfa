//! Parametric Fourier neural operator and its concatenation-only variant.

use serde::{Deserialize, Serialize};

use super::{init_side_mlp, side_mlp, Bound, GammaInput, Init, NnError};
use crate::autodiff::{Graph, Tensor, Var};
use crate::fourier::n_modes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PfnoVariant {
    /// `R + R* D*(gamma)` per mode.
    Full,
    /// `R` only; parameters enter through the concatenated channels.
    Star,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfnoConfig {
    pub levels: usize,
    pub channels: usize,
    pub kappa_max: usize,
    pub n_ratios: usize,
    pub variant: PfnoVariant,
    pub share_layers: bool,
    pub ratio_hidden: usize,
    pub projection_hidden: usize,
    pub recenter: bool,
    /// Adds the input to the network output.
    pub residual: bool,
}

impl Default for PfnoConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            channels: 30,
            kappa_max: 128,
            n_ratios: 5,
            variant: PfnoVariant::Full,
            share_layers: true,
            ratio_hidden: 32,
            projection_hidden: 128,
            recenter: true,
            residual: false,
        }
    }
}

/// Band index of wavenumber `kappa`: band `i < n_ratios - 1` covers
/// `(kappa_max / 2^(i+1), kappa_max / 2^i]`, the last band covers
/// `[0, kappa_max / 2^(n_ratios-1)]`.
pub fn band_of(kappa: usize, kappa_max: usize, n_ratios: usize) -> usize {
    (0..n_ratios.saturating_sub(1)).find(|&i| kappa > kappa_max >> (i + 1)).unwrap_or(n_ratios - 1)
}

fn check_bands(kappa_max: usize, n_ratios: usize) -> Result<(), NnError> {
    if n_ratios == 0 || n_ratios > 63 || kappa_max == 0 || kappa_max % (1usize << (n_ratios - 1)) != 0 {
        return Err(NnError::Config(format!(
            "{n_ratios} ratio bands need kappa_max divisible by 2^(bands - 1), got {kappa_max}"
        )));
    }
    Ok(())
}

/// Spreads `n_ratios` values over modes `0..=kappa_max`.
pub fn dstar_redistribute(d: &[f64], kappa_max: usize) -> Result<Vec<f64>, NnError> {
    check_bands(kappa_max, d.len())?;
    Ok((0..=kappa_max).map(|k| d[band_of(k, kappa_max, d.len())]).collect())
}

impl PfnoConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.levels == 0 || self.channels == 0 || self.projection_hidden == 0 {
            return Err(NnError::Config("levels, channels and projection width must be positive".into()));
        }
        if self.variant == PfnoVariant::Full && self.ratio_hidden == 0 {
            return Err(NnError::Config("ratio network width must be positive".into()));
        }
        check_bands(self.kappa_max, self.n_ratios)
    }

    pub fn check_mesh(&self, n: usize) -> Result<(), NnError> {
        if n % 2 != 0 || self.kappa_max > n / 2 {
            return Err(NnError::Config(format!("kappa_max {} exceeds half of mesh size {n}", self.kappa_max)));
        }
        Ok(())
    }

    fn n_layer_sets(&self) -> usize {
        if self.share_layers { 1 } else { self.levels }
    }

    pub(crate) fn init_weights(&self, init: &mut Init) {
        let (d, k) = (self.channels, self.kappa_max + 1);
        init.dense("p.w".into(), &[d, 3], 3);
        init.zeros("p.b".into(), &[d]);
        let scale = 1.0 / (d * d) as f64;
        for s in 0..self.n_layer_sets() {
            init.dense(format!("layer{s}.w"), &[d, d], d);
            init.zeros(format!("layer{s}.b"), &[d]);
            init.spectral(format!("layer{s}.r"), &[k, d, d], scale);
            if self.variant == PfnoVariant::Full {
                init.spectral(format!("layer{s}.rstar"), &[k, d, d], scale);
            }
        }
        if self.variant == PfnoVariant::Full {
            for l in 0..self.levels {
                init_side_mlp(init, &format!("ratio{l}"), self.ratio_hidden, self.n_ratios);
            }
        }
        init.dense("q.w1".into(), &[self.projection_hidden, d], d);
        init.zeros("q.b1".into(), &[self.projection_hidden]);
        init.dense("q.w2".into(), &[1, self.projection_hidden], self.projection_hidden);
        init.zeros("q.b2".into(), &[1]);
    }

    pub(crate) fn forward(&self, g: &mut Graph, w: &Bound, v: Var, gamma: GammaInput) -> Result<Var, NnError> {
        let n = g.value(v).shape()[1];
        let [a, b] = gamma.normalized();
        let mut channels = vec![a; n];
        channels.extend(std::iter::repeat(b).take(n));
        let gch = g.constant(Tensor::real(&[2, n], channels)?);
        let x = g.concat(&[v, gch])?;
        let mut z = g.linear(w.get("p.w")?, x, Some(w.get("p.b")?))?;
        let band_idx: Vec<usize> = (0..=self.kappa_max).map(|k| band_of(k, self.kappa_max, self.n_ratios)).collect();
        debug_assert!(self.kappa_max < n_modes(n));
        for l in 0..self.levels {
            let s = if self.share_layers { 0 } else { l };
            let f = g.rfft(z)?;
            let r = w.get(&format!("layer{s}.r"))?;
            let mixed = match self.variant {
                PfnoVariant::Full => {
                    let d = side_mlp(g, w, &format!("ratio{l}"), gamma)?;
                    let dstar = g.index_select(d, &band_idx)?;
                    let rs = w.get(&format!("layer{s}.rstar"))?;
                    g.complex_mode_mix(f, r, Some(rs), Some(dstar))?
                }
                PfnoVariant::Star => g.complex_mode_mix(f, r, None, None)?,
            };
            let spectral = g.irfft(mixed, n)?;
            let local = g.linear(w.get(&format!("layer{s}.w"))?, z, Some(w.get(&format!("layer{s}.b"))?))?;
            let sum = g.add(local, spectral)?;
            z = g.relu(sum)?;
        }
        let h = g.linear(w.get("q.w1")?, z, Some(w.get("q.b1")?))?;
        let h = g.relu(h)?;
        Ok(g.linear(w.get("q.w2")?, h, Some(w.get("q.b2")?))?)
    }
}
