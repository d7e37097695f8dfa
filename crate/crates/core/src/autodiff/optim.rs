//! Named parameter storage, Adam and gradient clipping.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::{Tensor, TensorError};

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter; insertion order is kept.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = Arc::new(value),
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(Arc::new(value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of real scalars, complex entries counting twice.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.n_components()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|t| t.all_finite())
    }

    /// Zero gradients shaped like every parameter.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.values.iter().map(|t| Tensor::zeros_like(t)).collect()
    }

    pub(crate) fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[i])
    }
}

/// Global L2 norm over every component of every gradient.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients so the global norm does not exceed `max_norm`.
/// Returns the norm before and after clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
        (norm, global_norm(grads))
    } else {
        (norm, norm)
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moment buffers, one flat vector per parameter over its components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.n_components()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One Adam update with decoupled weight decay, applied componentwise to
/// real and imaginary parts.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TensorError::Shape { op: "adam", detail: "parameter, gradient and state counts differ".into() });
    }
    for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.n_components() != g.n_components() || state.m[i].len() != p.n_components() {
            return Err(TensorError::Shape { op: "adam", detail: format!("gradient for {name} does not match") });
        }
        if !g.all_finite() {
            return Err(TensorError::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.tensor_mut(i);
        for (((pj, gj), mj), vj) in p.components_mut().zip(g.components()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            *pj *= decay;
            *pj -= lr * (*mj / bc1) / ((*vj / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Step decay: `lr0 * factor^floor(epoch / every)`.
pub fn step_lr(lr0: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    lr0 * factor.powi((epoch / every.max(1)) as i32)
}
