//! Recurrent 1-to-n training, validation and model rollouts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, clip_grad_norm, step_lr, AdamConfig, AdamState, Graph, Tensor, TensorError, Var};
use crate::dataset::{Corpus, DatasetError, TrainingWindow, WindowRef};
use crate::nn::{Bound, Checkpoint, GammaInput, Model, NnError, RngState};
use crate::spectral::{FrontState, SolutionSequence, SolverParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite state at rollout depth {depth}")]
    NonFinite { depth: usize },
    #[error("training diverged at epoch {epoch}: two consecutive non-finite losses{}", last_good.as_ref().map(|p| format!("; last good weights in {}", p.display())).unwrap_or_default())]
    Diverged { epoch: usize, last_good: Option<PathBuf> },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate reductions.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub clip_norm: f64,
    /// Recurrent predictions per window.
    pub n_steps: usize,
    /// Offset between consecutive window inputs within a sequence.
    pub stride: usize,
    pub valid_stride: usize,
    pub seed: u64,
    /// Epochs between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Subtract each window's input mean from its input and targets before
    /// the training loss. Validation always scores the stored fronts. The equation is invariant under constant shifts, and the
    /// drifting mean would otherwise dominate the relative error.
    pub anchor_mean: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 1000,
            lr: 0.0025,
            weight_decay: 1e-4,
            lr_step: 100,
            lr_gamma: 0.5,
            clip_norm: 50.0,
            n_steps: 20,
            stride: 1,
            valid_stride: 1,
            seed: 0,
            checkpoint_every: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            anchor_mean: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("lr_step", self.lr_step),
            ("n_steps", self.n_steps),
            ("stride", self.stride),
            ("valid_stride", self.valid_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::Config(format!("{name} must be positive")));
        }
        let reals = [("lr", self.lr), ("lr_gamma", self.lr_gamma), ("clip_norm", self.clip_norm), ("adam_eps", self.adam_eps)];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(TrainError::Config(format!("{name} must be positive")));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(TrainError::Config("weight_decay must be non-negative and Adam betas in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.lr, self.lr_gamma, self.lr_step, epoch)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }
}

/// One completed epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l2: f64,
    pub valid_l2: f64,
    pub lr: f64,
    /// Largest gradient norm after clipping.
    pub grad_norm_max: f64,
    pub seconds: f64,
    pub valid_l2_1step: f64,
    pub grad_norm_preclip_max: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str =
        "epoch,train_l2,valid_l2,lr,grad_norm_max,seconds,valid_l2_1step,grad_norm_preclip_max";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.train_l2, r.valid_l2, r.lr, r.grad_norm_max, r.seconds, r.valid_l2_1step, r.grad_norm_preclip_max
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
    }
}

/// Builds the recurrent n-step prediction of a window on `g` and returns
/// the stacked relative L2 error and the first-step error.
pub fn loss_1_to_n(g: &mut Graph, model: &Model, w: &Bound, window: &TrainingWindow) -> Result<(Var, f64), TrainError> {
    loss_1_to_n_with(g, window, |g, v| Ok(model.forward_graph(g, w, v, window.gamma)?))
}

/// [`loss_1_to_n`] for an arbitrary differentiable step.
pub fn loss_1_to_n_with(
    g: &mut Graph,
    window: &TrainingWindow,
    mut step: impl FnMut(&mut Graph, Var) -> Result<Var, TrainError>,
) -> Result<(Var, f64), TrainError> {
    if window.targets.is_empty() {
        return Err(TrainError::Config("window has no targets".into()));
    }
    let n = window.input.len();
    let mut v = g.constant(Tensor::real(&[1, n], window.input.clone())?);
    let mut preds = Vec::with_capacity(window.targets.len());
    for depth in 1..=window.targets.len() {
        v = step(g, v)?;
        if !g.value(v).all_finite() {
            return Err(TrainError::NonFinite { depth });
        }
        preds.push(v);
    }
    let flat: Vec<f64> = window.targets.iter().flatten().copied().collect();
    let target = g.constant(Tensor::real(&[window.targets.len(), n], flat)?);
    let stacked = g.concat(&preds)?;
    let loss = g.relative_l2(stacked, target)?;
    let first = relative_l2(g.value(preds[0]).re(), &window.targets[0]);
    Ok((loss, first))
}

fn relative_l2(p: &[f64], t: &[f64]) -> f64 {
    let num: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = t.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

/// Loss and weight gradients of one window.
pub fn window_gradient(model: &Model, window: &TrainingWindow) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut g = Graph::new();
    let w = model.bind(&mut g);
    let (loss, _) = loss_1_to_n(&mut g, model, &w, window)?;
    let value = g.value(loss).re()[0];
    let mut grads = g.backward(loss)?;
    let out = w
        .vars
        .iter()
        .zip(model.params.iter())
        .map(|(v, (_, p))| grads.take(*v).unwrap_or_else(|| Tensor::zeros_like(p)))
        .collect();
    Ok((value, out))
}

/// Stacked n-step and first-step errors of a window without gradients.
pub fn evaluate_window(model: &Model, window: &TrainingWindow) -> Result<(f64, f64), TrainError> {
    if window.targets.is_empty() {
        return Err(TrainError::Config("window has no targets".into()));
    }
    let mut preds = Vec::with_capacity(window.targets.len());
    let mut v = window.input.clone();
    for depth in 1..=window.targets.len() {
        v = model.forward(&v, window.gamma)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite { depth });
        }
        preds.push(v.clone());
    }
    let flat = |s: &[Vec<f64>]| s.iter().flatten().copied().collect::<Vec<f64>>();
    Ok((relative_l2(&flat(&preds), &flat(&window.targets)), relative_l2(&preds[0], &window.targets[0])))
}

fn fetch(corpus: &Corpus, r: &WindowRef, anchor_mean: bool) -> TrainingWindow {
    let w = corpus.window(r);
    if anchor_mean { w.anchored() } else { w }
}

/// Mean n-step and first-step validation errors on the stored fronts.
pub fn validate(model: &Model, corpus: &Corpus, refs: &[WindowRef]) -> Result<(f64, f64), TrainError> {
    let results: Vec<(f64, f64)> =
        refs.par_iter().map(|r| evaluate_window(model, &corpus.window(r))).collect::<Result<_, _>>()?;
    let k = results.len().max(1) as f64;
    Ok((results.iter().map(|r| r.0).sum::<f64>() / k, results.iter().map(|r| r.1).sum::<f64>() / k))
}

/// Where and how often to write checkpoints and logs.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Record zero wall time so that outputs are reproducible byte for byte.
    pub deterministic: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub best_valid: Option<(usize, f64)>,
}

/// Gradients are reduced in chunks of this many windows, in window order.
const REDUCE_CHUNK: usize = 16;

fn batch_gradient(
    model: &Model,
    corpus: &Corpus,
    batch: &[WindowRef],
    anchor_mean: bool,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut total = model.params.zero_grads();
    let mut loss = 0.0;
    for chunk in batch.chunks(REDUCE_CHUNK) {
        let parts: Vec<(f64, Vec<Tensor>)> =
            chunk.par_iter().map(|r| window_gradient(model, &fetch(corpus, r, anchor_mean))).collect::<Result<_, _>>()?;
        for (l, grads) in parts {
            loss += l;
            for (t, g) in total.iter_mut().zip(&grads) {
                t.axpy(1.0, g);
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    total.iter_mut().for_each(|t| t.scale_in_place(scale));
    Ok((loss * scale, total))
}

fn save(ck: &Checkpoint, dir: &Path, name: &str) -> Result<PathBuf, TrainError> {
    let path = dir.join(name);
    ck.save(&path).map_err(|e| match e {
        NnError::Io(source) => TrainError::Io { path: path.clone(), source },
        other => TrainError::Model(other),
    })?;
    Ok(path)
}

/// Runs the optimization from `start`, continuing its optimizer state and
/// epoch counter when present.
pub fn train(
    start: Checkpoint,
    corpus: &Corpus,
    valid: Option<&Corpus>,
    cfg: &TrainingConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    start.model.config.check_mesh(corpus.mesh_size())?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.clone(), source })?;
    }
    let mut model = start.model;
    let mut adam = start.adam.unwrap_or_else(|| AdamState::new(&model.params));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if let Some(state) = start.rng {
        rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_word_pos(state.word_pos);
    }
    let rng_seed = start.rng.map_or(cfg.seed, |s| s.seed);
    let train_refs = corpus.windows(cfg.n_steps, cfg.stride, None)?;
    let valid_refs = match valid {
        Some(v) => v.windows(cfg.n_steps, cfg.valid_stride, None)?,
        None => Vec::new(),
    };
    let adam_cfg = cfg.adam();
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64)> =
        start.meta.get("best_valid").and_then(|b| Some((b.get(0)?.as_u64()? as usize, b.get(1)?.as_f64()?)));
    let mut bad_streak = 0;
    let snapshot = |model: &Model, adam: &AdamState, epoch: usize, rng: &ChaCha8Rng, best: Option<(usize, f64)>| {
        let mut ck = Checkpoint::new(model.clone());
        ck.adam = Some(adam.clone());
        ck.epoch = epoch;
        ck.rng = Some(RngState { seed: rng_seed, word_pos: rng.get_word_pos() });
        ck.meta = serde_json::json!({ "best_valid": best.map(|(e, v)| serde_json::json!([e, v])) });
        ck
    };
    for epoch in start.epoch..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut order = train_refs.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        let (mut gmax, mut gmax_pre) = (0.0f64, 0.0f64);
        for batch in order.chunks(cfg.batch_size) {
            let step = batch_gradient(&model, corpus, batch, cfg.anchor_mean).and_then(|(loss, mut grads)| {
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite { depth: 0 });
                }
                let (pre, post) = clip_grad_norm(&mut grads, cfg.clip_norm);
                adam_step(&mut model.params, &grads, &mut adam, lr, &adam_cfg)?;
                Ok((loss, pre, post))
            });
            match step {
                Ok((loss, pre, post)) => {
                    bad_streak = 0;
                    loss_sum += loss;
                    loss_count += 1;
                    gmax = gmax.max(post);
                    gmax_pre = gmax_pre.max(pre);
                }
                Err(TrainError::NonFinite { .. }) | Err(TrainError::Tensor(TensorError::NonFiniteGradient(_))) => {
                    bad_streak += 1;
                    log::warn!("epoch {epoch}: non-finite loss or gradient, batch skipped");
                    if bad_streak >= 2 {
                        let last_good = match &opts.out_dir {
                            Some(dir) => Some(save(&snapshot(&model, &adam, epoch, &rng, best), dir, "last_good.ckpt")?),
                            None => None,
                        };
                        return Err(TrainError::Diverged { epoch, last_good });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let (valid_l2, valid_1) = match valid {
            Some(v) if !valid_refs.is_empty() => validate(&model, v, &valid_refs).unwrap_or((f64::NAN, f64::NAN)),
            _ => (f64::NAN, f64::NAN),
        };
        let record = EpochRecord {
            epoch,
            train_l2: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
            valid_l2,
            lr,
            grad_norm_max: gmax,
            seconds: if opts.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() },
            valid_l2_1step: valid_1,
            grad_norm_preclip_max: gmax_pre,
        };
        log::info!(
            "epoch {epoch}: train {:.5} valid {:.5} (1-step {:.5}) lr {lr:e} |g| {:.3}",
            record.train_l2,
            record.valid_l2,
            record.valid_l2_1step,
            record.grad_norm_preclip_max
        );
        log.rows.push(record);
        let improved = valid_l2.is_finite() && best.map_or(true, |(_, b)| valid_l2 < b);
        if improved {
            best = Some((epoch, valid_l2));
        }
        if let Some(dir) = &opts.out_dir {
            let ck = snapshot(&model, &adam, epoch + 1, &rng, best);
            if improved {
                save(&ck, dir, "best.ckpt")?;
            }
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save(&ck, dir, &format!("epoch{:05}.ckpt", epoch + 1))?;
            }
            log.write(&dir.join("train_log.csv"))?;
        }
    }
    let checkpoint = snapshot(&model, &adam, cfg.epochs.max(start.epoch), &rng, best);
    if let Some(dir) = &opts.out_dir {
        save(&checkpoint, dir, "final.ckpt")?;
        log.write(&dir.join("train_log.csv"))?;
    }
    Ok(TrainOutcome { checkpoint, log, best_valid: best })
}

/// States of a recurrent model rollout, truncated at the first failure.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    /// Index of the first non-finite state, when one occurred.
    pub failure: Option<usize>,
}

impl Rollout {
    pub fn into_sequence(self, params: SolverParams, dt_out: f64) -> Result<SolutionSequence, TrainError> {
        let states = self
            .states
            .into_iter()
            .map(FrontState::new)
            .collect::<Result<_, _>>()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(SolutionSequence { params, t0: 0.0, dt_out, states, seed: None })
    }
}

/// Applies the model `n_steps` times from `initial`.
pub fn rollout(model: &Model, initial: &[f64], gamma: GammaInput, n_steps: usize) -> Result<Rollout, TrainError> {
    model.config.check_mesh(initial.len())?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(initial.to_vec());
    for i in 1..=n_steps {
        let next = model.forward(&states[i - 1], gamma)?;
        if next.iter().any(|v| !v.is_finite()) {
            log::warn!("rollout stopped: non-finite state at step {i}");
            return Ok(Rollout { states, failure: Some(i) });
        }
        states.push(next);
    }
    Ok(Rollout { states, failure: None })
}

#[cfg(test)]
mod tests;
