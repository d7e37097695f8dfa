//! Corpus generation, storage and 1-to-n training windows.
//!
//! A corpus is a directory holding one JSON manifest and one raw
//! little-endian `f32` file per parameter configuration, each of shape
//! `[sequences, steps + 1, mesh]`. A configuration may also carry a single
//! long sequence in a file of its own.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::GammaInput;
use crate::spectral::{
    closure_from_rho_beta, simulate, FrontState, IntegratorConfig, SolutionSequence, SolverParams, SpectralError,
};

/// Fresh seeds tried after a failed sequence.
pub const MAX_RETRIES: u32 = 3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("sequence {sequence} of (rho={rho}, beta={beta}) failed after {attempts} attempts: {source}")]
    Generation {
        rho: f64,
        beta: f64,
        sequence: usize,
        attempts: u32,
        #[source]
        source: SpectralError,
    },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Valid => "valid",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Self::Train => 1,
            Self::Valid => 2,
        }
    }
}

/// One parameter configuration of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEntry {
    pub rho: f64,
    pub beta: f64,
    pub mu: f64,
    pub nu: f64,
    pub tau: f64,
    pub n_sequences: usize,
    pub n_steps: usize,
    pub file: String,
    /// Initial-condition seed actually used for each sequence.
    pub seeds: Vec<u64>,
    /// Output intervals of the long sequence; 0 when there is none.
    #[serde(default)]
    pub long_steps: usize,
    #[serde(default)]
    pub long_file: Option<String>,
    #[serde(default)]
    pub long_seed: Option<u64>,
}

impl ConfigEntry {
    pub fn gamma(&self) -> GammaInput {
        GammaInput::new(self.rho, self.beta)
    }

    pub fn params(&self) -> SolverParams {
        SolverParams { rho: self.rho, beta: self.beta, mu: self.mu, nu: self.nu, tau: self.tau }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub dt_out: f64,
    pub mesh_size: usize,
    pub precision: String,
    pub master_seed: u64,
    pub init_range: [f64; 2],
    pub integrator: IntegratorConfig,
    pub configs: Vec<ConfigEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";
const PRECISION: &str = "f32";

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        if m.precision != PRECISION {
            return Err(DatasetError::Manifest(format!("unsupported precision {}", m.precision)));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        let path = dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }

    /// Checks that every data file has the implied byte length.
    pub fn verify(&self, dir: &Path) -> Result<(), DatasetError> {
        for c in &self.configs {
            let path = dir.join(&c.file);
            let len = fs::metadata(&path).map_err(io_err(&path))?.len();
            let want = (c.n_sequences * (c.n_steps + 1) * self.mesh_size * 4) as u64;
            if len != want {
                return Err(DatasetError::Manifest(format!("{} holds {len} bytes, expected {want}", c.file)));
            }
            if c.seeds.len() != c.n_sequences {
                return Err(DatasetError::Manifest(format!("{} lists {} seeds", c.file, c.seeds.len())));
            }
            match (&c.long_file, c.long_seed) {
                (Some(file), Some(_)) if c.long_steps > 0 => {
                    let path = dir.join(file);
                    let len = fs::metadata(&path).map_err(io_err(&path))?.len();
                    let want = ((c.long_steps + 1) * self.mesh_size * 4) as u64;
                    if len != want {
                        return Err(DatasetError::Manifest(format!("{file} holds {len} bytes, expected {want}")));
                    }
                }
                (None, None) if c.long_steps == 0 => {}
                _ => return Err(DatasetError::Manifest(format!("{}: inconsistent long-sequence entry", c.file))),
            }
        }
        Ok(())
    }
}

/// Request for [`generate_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub grid: Vec<(f64, f64)>,
    pub n_sequences: usize,
    pub n_steps: usize,
    /// Output intervals of one extra long sequence per configuration; 0
    /// for none.
    pub long_steps: usize,
    pub init_range: [f64; 2],
    pub mesh_size: usize,
    pub integrator: IntegratorConfig,
    pub seed: u64,
    pub split: Split,
}

impl CorpusSpec {
    pub fn new(grid: Vec<(f64, f64)>, split: Split, seed: u64) -> Self {
        Self {
            grid,
            n_sequences: 250,
            n_steps: 500,
            long_steps: 0,
            init_range: [0.0, 0.03],
            mesh_size: crate::spectral::DEFAULT_MESH,
            integrator: IntegratorConfig::default(),
            seed,
            split,
        }
    }
}

/// Sequence count of a validation split relative to its training split.
pub fn validation_count(n_train: usize) -> usize {
    ((n_train as f64 * 0.1).round() as usize).max(1)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based seed for one generation attempt.
pub fn sequence_seed(master: u64, split: Split, config: usize, sequence: usize, attempt: u32) -> u64 {
    [split.tag(), config as u64, sequence as u64, attempt as u64].iter().fold(splitmix(master), |h, &x| splitmix(h ^ x))
}

/// Initial front with i.i.d. uniform samples in `init_range`.
pub fn random_initial(seed: u64, n: usize, init_range: [f64; 2]) -> Result<FrontState, DatasetError> {
    let [lo, hi] = init_range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(DatasetError::Invalid(format!("initial range [{lo}, {hi}] is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(FrontState::new((0..n).map(|_| rng.gen_range(lo..hi)).collect())?)
}

fn file_name(split: Split, rho: f64, beta: f64, suffix: &str) -> String {
    format!("{}_rho{rho}_beta{beta}{suffix}.f32", split.as_str())
}

fn write_states<'a>(path: &Path, runs: impl IntoIterator<Item = &'a SolutionSequence>) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for seq in runs {
        for s in &seq.states {
            for v in &s.values {
                w.write_all(&(*v as f32).to_le_bytes()).map_err(io_err(path))?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

fn read_states(path: &Path) -> Result<Vec<f32>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("four bytes"))).collect())
}

/// Integrates every sequence of a corpus and writes it under `dir`.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<DatasetManifest, DatasetError> {
    spec.integrator.validate()?;
    if spec.grid.is_empty() {
        return Err(DatasetError::Invalid("empty parameter grid".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut configs = Vec::with_capacity(spec.grid.len());
    for (ci, &(rho, beta)) in spec.grid.iter().enumerate() {
        let params = closure_from_rho_beta(rho, beta)?;
        let runs: Vec<(u64, SolutionSequence)> = (0..spec.n_sequences)
            .into_par_iter()
            .map(|si| generate_sequence(spec, &params, ci, si, spec.n_steps))
            .collect::<Result<_, _>>()?;
        let file = file_name(spec.split, rho, beta, "");
        write_states(&dir.join(&file), runs.iter().map(|(_, seq)| seq))?;
        let (long_file, long_seed) = if spec.long_steps > 0 {
            // the long run takes the sequence index after the short ones
            let (seed, seq) = generate_sequence(spec, &params, ci, spec.n_sequences, spec.long_steps)?;
            let name = file_name(spec.split, rho, beta, "_long");
            write_states(&dir.join(&name), [&seq])?;
            (Some(name), Some(seed))
        } else {
            (None, None)
        };
        configs.push(ConfigEntry {
            rho,
            beta,
            mu: params.mu,
            nu: params.nu,
            tau: params.tau,
            n_sequences: spec.n_sequences,
            n_steps: spec.n_steps,
            file,
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            long_steps: spec.long_steps,
            long_file,
            long_seed,
        });
    }
    let manifest = DatasetManifest {
        split: spec.split,
        dt_out: spec.integrator.dt_out,
        mesh_size: spec.mesh_size,
        precision: PRECISION.into(),
        master_seed: spec.seed,
        init_range: spec.init_range,
        integrator: spec.integrator,
        configs,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

fn generate_sequence(
    spec: &CorpusSpec,
    params: &SolverParams,
    config: usize,
    sequence: usize,
    n_steps: usize,
) -> Result<(u64, SolutionSequence), DatasetError> {
    let mut attempt = 0;
    loop {
        let seed = sequence_seed(spec.seed, spec.split, config, sequence, attempt);
        let init = random_initial(seed, spec.mesh_size, spec.init_range)?;
        match simulate(&init, params, &spec.integrator, n_steps) {
            Ok(mut seq) => {
                seq.seed = Some(seed);
                return Ok((seed, seq));
            }
            Err(e) if attempt < MAX_RETRIES => {
                log::warn!(
                    "sequence {sequence} at (rho={}, beta={}) seed {seed} failed ({e}); retrying with a fresh seed",
                    params.rho,
                    params.beta
                );
                attempt += 1;
            }
            Err(source) => {
                return Err(DatasetError::Generation {
                    rho: params.rho,
                    beta: params.beta,
                    sequence,
                    attempts: attempt + 1,
                    source,
                })
            }
        }
    }
}

/// A single long reference run from a seeded random initial front.
pub fn generate_long(
    params: &SolverParams,
    n_steps: usize,
    integrator: &IntegratorConfig,
    seed: u64,
    init_range: [f64; 2],
    mesh_size: usize,
) -> Result<SolutionSequence, DatasetError> {
    let init = random_initial(seed, mesh_size, init_range)?;
    let mut seq = simulate(&init, params, integrator, n_steps)?;
    seq.seed = Some(seed);
    Ok(seq)
}

/// The states of one configuration, held in storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigData {
    pub entry: ConfigEntry,
    pub mesh_size: usize,
    pub data: Vec<f32>,
    /// States of the long sequence, empty when there is none. It is
    /// addressed as sequence `entry.n_sequences`.
    pub long: Vec<f32>,
}

impl ConfigData {
    /// States per short sequence.
    pub fn n_states(&self) -> usize {
        self.entry.n_steps + 1
    }

    /// Number of sequences, counting the long one.
    pub fn n_sequences(&self) -> usize {
        self.entry.n_sequences + usize::from(self.entry.long_steps > 0)
    }

    pub fn sequence_steps(&self, sequence: usize) -> usize {
        if sequence == self.entry.n_sequences { self.entry.long_steps } else { self.entry.n_steps }
    }

    pub fn state(&self, sequence: usize, step: usize) -> &[f32] {
        let n = self.mesh_size;
        if sequence == self.entry.n_sequences {
            return &self.long[step * n..(step + 1) * n];
        }
        let start = (sequence * self.n_states() + step) * n;
        &self.data[start..start + n]
    }

    pub fn state_f64(&self, sequence: usize, step: usize) -> Vec<f64> {
        self.state(sequence, step).iter().map(|&v| v as f64).collect()
    }
}

/// A loaded corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub configs: Vec<ConfigData>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let manifest = DatasetManifest::read(dir)?;
        manifest.verify(dir)?;
        let configs = manifest
            .configs
            .iter()
            .map(|c| {
                let data = read_states(&dir.join(&c.file))?;
                let long = match &c.long_file {
                    Some(file) => read_states(&dir.join(file))?,
                    None => Vec::new(),
                };
                Ok(ConfigData { entry: c.clone(), mesh_size: manifest.mesh_size, data, long })
            })
            .collect::<Result<_, DatasetError>>()?;
        Ok(Self { manifest, configs })
    }

    pub fn mesh_size(&self) -> usize {
        self.manifest.mesh_size
    }

    /// Window positions; shuffled when `shuffle_seed` is given.
    pub fn windows(&self, n: usize, stride: usize, shuffle_seed: Option<u64>) -> Result<Vec<WindowRef>, DatasetError> {
        if n == 0 || stride == 0 {
            return Err(DatasetError::Invalid("window length and stride must be positive".into()));
        }
        let mut out = Vec::new();
        for (ci, c) in self.configs.iter().enumerate() {
            if n > c.entry.n_steps {
                return Err(DatasetError::Invalid(format!(
                    "{n} targets need sequences longer than {} states",
                    c.entry.n_steps + 1
                )));
            }
            for sequence in 0..c.n_sequences() {
                let steps = c.sequence_steps(sequence);
                if n > steps {
                    continue;
                }
                for start in (0..=steps - n).step_by(stride) {
                    out.push(WindowRef { config: ci, sequence, start, n });
                }
            }
        }
        if let Some(seed) = shuffle_seed {
            out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(out)
    }

    pub fn window(&self, w: &WindowRef) -> TrainingWindow {
        let c = &self.configs[w.config];
        TrainingWindow {
            input: c.state_f64(w.sequence, w.start),
            targets: (1..=w.n).map(|k| c.state_f64(w.sequence, w.start + k)).collect(),
            gamma: c.entry.gamma(),
        }
    }
}

/// Location of a window: its input is state `start` of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowRef {
    pub config: usize,
    pub sequence: usize,
    pub start: usize,
    pub n: usize,
}

/// An input front followed by its `n` successors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub input: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub gamma: GammaInput,
}

impl TrainingWindow {
    /// The same window shifted so that its input has zero mean.
    pub fn anchored(mut self) -> Self {
        let m = self.input.iter().sum::<f64>() / self.input.len().max(1) as f64;
        for v in self.input.iter_mut().chain(self.targets.iter_mut().flatten()) {
            *v -= m;
        }
        self
    }
}

/// Metadata of a single stored sequence; the states live next to it in a
/// raw little-endian `f64` file of shape `[n_states, mesh]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceHeader {
    pub params: SolverParams,
    pub t0: f64,
    pub dt_out: f64,
    pub n_states: usize,
    pub mesh_size: usize,
    pub seed: Option<u64>,
    /// Step at which a rollout stopped on a non-finite state.
    pub failure: Option<usize>,
    pub file: String,
}

/// Writes `{stem}.json` and `{stem}.f64` under `dir`.
pub fn write_sequence(seq: &SolutionSequence, failure: Option<usize>, dir: &Path, stem: &str) -> Result<SequenceHeader, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mesh_size = seq.states.first().map_or(0, |s| s.values.len());
    let header = SequenceHeader {
        params: seq.params,
        t0: seq.t0,
        dt_out: seq.dt_out,
        n_states: seq.states.len(),
        mesh_size,
        seed: seq.seed,
        failure,
        file: format!("{stem}.f64"),
    };
    let path = dir.join(&header.file);
    let mut w = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
    for s in &seq.states {
        for v in &s.values {
            w.write_all(&v.to_le_bytes()).map_err(io_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    let meta = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&header).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    fs::write(&meta, text + "\n").map_err(io_err(&meta))?;
    Ok(header)
}

/// Reads a sequence written by [`write_sequence`] from its `.json` path.
pub fn read_sequence(meta: &Path) -> Result<(SequenceHeader, SolutionSequence), DatasetError> {
    let text = fs::read_to_string(meta).map_err(io_err(meta))?;
    let header: SequenceHeader =
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(format!("{}: {e}", meta.display())))?;
    let path = meta.parent().unwrap_or(Path::new(".")).join(&header.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let expected = header.n_states * header.mesh_size * 8;
    if bytes.len() != expected {
        return Err(DatasetError::Manifest(format!(
            "{}: {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes"))).collect();
    let states = if header.mesh_size == 0 {
        Vec::new()
    } else {
        values.chunks_exact(header.mesh_size).map(|c| FrontState::new(c.to_vec())).collect::<Result<_, _>>()?
    };
    let seq = SolutionSequence { params: header.params, t0: header.t0, dt_out: header.dt_out, states, seed: header.seed };
    Ok((header, seq))
}
