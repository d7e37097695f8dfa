//! Parametric neural operators mapping a front and its parameters to the
//! front one output interval later.

mod checkpoint;
mod pcnn;
mod pfno;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, Tensor, TensorError, Var};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC};
pub use pcnn::PcnnConfig;
pub use pfno::{band_of, dstar_redistribute, PfnoConfig, PfnoVariant};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Model parameters `(rho, beta)`; networks see `(rho, beta / 40)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaInput {
    pub rho: f64,
    pub beta: f64,
}

impl GammaInput {
    pub const BETA_SCALE: f64 = 40.0;

    pub fn new(rho: f64, beta: f64) -> Self {
        Self { rho, beta }
    }

    pub fn normalized(&self) -> [f64; 2] {
        [self.rho, self.beta / Self::BETA_SCALE]
    }

    /// Column tensor `[2, 1]` of the normalized pair.
    pub(crate) fn column(&self) -> Tensor {
        Tensor::real(&[2, 1], self.normalized().to_vec()).expect("two entries")
    }
}

/// Architecture selection with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Pfno(PfnoConfig),
    Pcnn(PcnnConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        match self {
            Self::Pfno(c) => c.validate(),
            Self::Pcnn(c) => c.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Pfno(c) if c.variant == PfnoVariant::Star => "pfno-star",
            Self::Pfno(_) => "pfno",
            Self::Pcnn(_) => "pcnn",
        }
    }

    fn recenter(&self) -> bool {
        match self {
            Self::Pfno(c) => c.recenter,
            Self::Pcnn(c) => c.recenter,
        }
    }

    fn residual(&self) -> bool {
        match self {
            Self::Pfno(c) => c.residual,
            Self::Pcnn(c) => c.residual,
        }
    }

    /// Rejects mesh sizes the architecture cannot process.
    pub fn check_mesh(&self, n: usize) -> Result<(), NnError> {
        match self {
            Self::Pfno(c) => c.check_mesh(n),
            Self::Pcnn(c) => c.check_mesh(n),
        }
    }
}

/// Parameters bound as leaves of one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    names: std::collections::HashMap<String, Var>,
}

impl Bound {
    pub(crate) fn get(&self, name: &str) -> Result<Var, NnError> {
        self.names.get(name).copied().ok_or_else(|| NnError::Config(format!("missing weight {name}")))
    }
}

/// An architecture together with its weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh weights: complex spectral weights with modulus below
    /// `1 / d_z^2` and uniform phase, fan-in uniform dense and convolution
    /// weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), params: ParamStore::new() };
        match &config {
            ModelConfig::Pfno(c) => c.init_weights(&mut init),
            ModelConfig::Pcnn(c) => c.init_weights(&mut init),
        }
        Ok(Self { config, params: init.params })
    }

    /// Number of trainable real scalars.
    pub fn n_scalars(&self) -> usize {
        self.params.n_scalars()
    }

    /// Inserts every weight as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut names = std::collections::HashMap::new();
        for (name, t) in self.params.iter() {
            let v = g.param(Arc::clone(t));
            vars.push(v);
            names.insert(name.to_string(), v);
        }
        Bound { vars, names }
    }

    /// Applies the model to `v` of shape `[1, n]` on an existing graph.
    pub fn forward_graph(&self, g: &mut Graph, w: &Bound, v: Var, gamma: GammaInput) -> Result<Var, NnError> {
        let n = match g.value(v).shape() {
            [1, n] => *n,
            s => return Err(NnError::Config(format!("model input must be [1, n], got {s:?}"))),
        };
        self.config.check_mesh(n)?;
        let (input, mean) = if self.config.recenter() {
            let m = g.mean(v)?;
            let neg = g.scale(m, -1.0)?;
            (g.add_scalar(v, neg)?, Some(m))
        } else {
            (v, None)
        };
        let out = match &self.config {
            ModelConfig::Pfno(c) => c.forward(g, w, input, gamma)?,
            ModelConfig::Pcnn(c) => c.forward(g, w, input, gamma)?,
        };
        Ok(match mean {
            _ if self.config.residual() => g.add(out, v)?,
            Some(m) => g.add_scalar(out, m)?,
            None => out,
        })
    }

    /// One application to plain values, without gradient tracking.
    pub fn forward(&self, v: &[f64], gamma: GammaInput) -> Result<Vec<f64>, NnError> {
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(self.params.len());
        let mut names = std::collections::HashMap::new();
        for (name, t) in self.params.iter() {
            let var = g.constant(Arc::clone(t));
            vars.push(var);
            names.insert(name.to_string(), var);
        }
        let w = Bound { vars, names };
        let x = g.constant(Tensor::real(&[1, v.len()], v.to_vec())?);
        let y = self.forward_graph(&mut g, &w, x, gamma)?;
        Ok(g.value(y).re().to_vec())
    }
}

/// Seeded weight factory shared by the architectures.
pub(crate) struct Init {
    rng: ChaCha8Rng,
    params: ParamStore,
}

impl Init {
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub(crate) fn dense(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.insert(name, Tensor::real(shape, data).expect("shape matches"));
    }

    pub(crate) fn zeros(&mut self, name: String, shape: &[usize]) {
        self.params.insert(name, Tensor::zeros(shape));
    }

    /// Complex entries with modulus uniform in `[0, scale)` and uniform phase.
    pub(crate) fn spectral(&mut self, name: String, shape: &[usize], scale: f64) {
        let n: usize = shape.iter().product();
        let (mut re, mut im) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let r = scale * self.rng.gen::<f64>();
            let phase = std::f64::consts::TAU * self.rng.gen::<f64>();
            re.push(r * phase.cos());
            im.push(r * phase.sin());
        }
        self.params.insert(name, Tensor::complex(shape, re, im).expect("shape matches"));
    }
}

/// Two-layer perceptron `gamma -> hidden (relu) -> out`, returning `[out, 1]`.
pub(crate) fn side_mlp(g: &mut Graph, w: &Bound, prefix: &str, gamma: GammaInput) -> Result<Var, NnError> {
    let x = g.constant(gamma.column());
    let h = g.linear(w.get(&format!("{prefix}.w1"))?, x, Some(w.get(&format!("{prefix}.b1"))?))?;
    let h = g.relu(h)?;
    Ok(g.linear(w.get(&format!("{prefix}.w2"))?, h, Some(w.get(&format!("{prefix}.b2"))?))?)
}

pub(crate) fn init_side_mlp(init: &mut Init, prefix: &str, hidden: usize, out: usize) {
    init.dense(format!("{prefix}.w1"), &[hidden, 2], 2);
    init.zeros(format!("{prefix}.b1"), &[hidden]);
    init.dense(format!("{prefix}.w2"), &[out, hidden], hidden);
    init.zeros(format!("{prefix}.b2"), &[out]);
}
