//! `flamefront`: solver, corpus generation, training, rollout and
//! diagnostics from one executable.

mod config;
mod error;

use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use flamefront::dataset::{
    generate_corpus, generate_long, read_sequence, validation_count, write_sequence, Corpus, CorpusSpec, Split,
    MANIFEST_NAME,
};
use flamefront::diagnostics::{diagnose_config, dispersion_table, csv_name, ConfigReport, DiagnosticsReport};
use flamefront::nn::{Checkpoint, GammaInput, Model, ModelConfig, PcnnConfig, PfnoConfig, PfnoVariant};
use flamefront::spectral::{closure_from_rho_beta, IntegratorConfig};
use flamefront::train::{rollout, train, TrainOptions};

use config::{parse_grid, parse_pair, RunConfig};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "flamefront", version, about = "Parametric flame-front solver, neural operators and diagnostics")]
struct Cli {
    /// JSON run configuration; flags given on the command line override it.
    #[arg(long, global = true, value_name = "FILE")]
    run_config: Option<PathBuf>,
    /// Run directory receiving every output file.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Single-threaded execution with byte-reproducible outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Multiplies sequence counts, epochs and batch size.
    #[arg(long, global = true, default_value_t = 1.0)]
    scale: f64,
    /// Report only warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the closure coefficients for (rho, beta).
    Params(ParamsArgs),
    /// Integrate one sequence from a seeded random front.
    Solve(SolveArgs),
    /// Generate training and validation corpora.
    GenDataset(GenArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Roll a trained model out recurrently.
    Rollout(RolloutArgs),
    /// Error, front length, autocorrelation, dispersion and Jacobian tables.
    Diagnose(DiagnoseArgs),
    /// Analytic and measured dispersion curves.
    Dispersion(DispersionArgs),
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long, allow_hyphen_values = true)]
    rho: f64,
    #[arg(long)]
    beta: f64,
}

#[derive(Args, Debug)]
struct IntegratorArgs {
    /// Output interval.
    #[arg(long, default_value_t = 0.15)]
    dt_out: f64,
    #[arg(long, default_value_t = 1e-9)]
    abs_tol: f64,
    #[arg(long, default_value_t = 1e-7)]
    rel_tol: f64,
    /// Cap on internal steps per output interval.
    #[arg(long, default_value_t = 100_000)]
    max_internal_steps: usize,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    rho: f64,
    #[arg(long)]
    beta: f64,
    /// Output intervals to integrate.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Mesh size.
    #[arg(long, default_value_t = 256)]
    mesh: usize,
    #[command(flatten)]
    integrator: IntegratorArgs,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// `rho,beta` pairs separated by `;`, or `reference` for the 15-point grid.
    #[arg(long, default_value = "reference")]
    grid: String,
    /// Training sequences per configuration.
    #[arg(long, default_value_t = 250)]
    sequences: usize,
    /// Validation sequences per configuration [default: a tenth of the training count].
    #[arg(long)]
    valid_sequences: Option<usize>,
    /// Output intervals per sequence.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Output intervals of one extra long training sequence per configuration; 0 for none.
    #[arg(long, default_value_t = 125_000)]
    long_steps: usize,
    #[arg(long, default_value_t = 256)]
    mesh: usize,
    #[command(flatten)]
    integrator: IntegratorArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Pfno,
    PfnoStar,
    Pcnn,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus directory, or a `gen-dataset` run holding `train/` and `valid/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Pfno)]
    model: ModelKind,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Windows per optimizer step.
    #[arg(long, default_value_t = 1000)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0025)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Epochs between learning-rate reductions.
    #[arg(long, default_value_t = 100)]
    lr_step: usize,
    #[arg(long, default_value_t = 0.5)]
    lr_gamma: f64,
    /// Maximum global gradient norm.
    #[arg(long, default_value_t = 50.0)]
    clip_norm: f64,
    /// Recurrent predictions per training window.
    #[arg(long, default_value_t = 20)]
    n_steps: usize,
    /// Offset between training windows within a sequence.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Offset between validation windows within a sequence.
    #[arg(long, default_value_t = 1)]
    valid_stride: usize,
    /// Epochs between periodic checkpoints; 0 disables them.
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
    /// Score windows in absolute displacement instead of relative to the input mean.
    #[arg(long)]
    no_anchor_mean: bool,
    /// Fourier-layer channels (pFNO).
    #[arg(long, default_value_t = 30)]
    width: usize,
    /// Retained Fourier modes (pFNO).
    #[arg(long, default_value_t = 128)]
    modes: usize,
    /// Fourier layers (pFNO).
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Hidden width of the output projection (pFNO).
    #[arg(long, default_value_t = 128)]
    projection_hidden: usize,
    /// Add the input front to the network output.
    #[arg(long)]
    residual: bool,
    /// Continue from a checkpoint, including its optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    rho: f64,
    #[arg(long)]
    beta: f64,
    /// Recurrent applications.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Stored sequence (`.json`) providing the initial front [default: seeded random front].
    #[arg(long)]
    initial: Option<PathBuf>,
    /// State of `--initial` to start from.
    #[arg(long, default_value_t = 0)]
    initial_index: usize,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Parameter configuration `rho,beta`; repeatable [default: the 15-point grid].
    #[arg(long = "config", value_parser = parse_pair)]
    configs: Vec<(f64, f64)>,
    /// Rollout length of the error and front-length tables.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Reference steps skipped before the comparison.
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Rollouts averaged by the autocorrelation.
    #[arg(long, default_value_t = 7)]
    sequences: usize,
    /// Autocorrelation window start (exclusive), in output steps.
    #[arg(long, default_value_t = 1000)]
    stat_start: usize,
    /// Autocorrelation window end (inclusive), in output steps.
    #[arg(long, default_value_t = 4000)]
    stat_end: usize,
    /// Keep each snapshot's spatial mean in the autocorrelation.
    #[arg(long)]
    keep_mean: bool,
    /// Jacobian perturbation size.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Largest input mode [default: ceil(1.5 beta)].
    #[arg(long)]
    kappa_max: Option<usize>,
    #[command(flatten)]
    integrator: IntegratorArgs,
}

#[derive(Args, Debug)]
struct DispersionArgs {
    /// Parameter configuration `rho,beta`; repeatable [default: the 15-point grid].
    #[arg(long = "config", value_parser = parse_pair)]
    configs: Vec<(f64, f64)>,
    /// Also measure a trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Largest mode [default: ceil(1.5 beta)].
    #[arg(long)]
    kappa_max: Option<usize>,
    #[command(flatten)]
    integrator: IntegratorArgs,
}

/// Tells whether a flag was typed on the command line.
struct Given<'a> {
    top: &'a ArgMatches,
    sub: &'a ArgMatches,
}

impl Given<'_> {
    fn has(&self, id: &str) -> bool {
        [self.top, self.sub]
            .iter()
            .any(|m| m.try_contains_id(id).unwrap_or(false) && m.value_source(id) == Some(ValueSource::CommandLine))
    }

    fn set<T: Clone>(&self, id: &str, target: &mut T, value: &T) {
        if self.has(id) {
            *target = value.clone();
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn scaled(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

fn apply_integrator(g: &Given, a: &IntegratorArgs, cfg: &mut IntegratorConfig) {
    g.set("dt_out", &mut cfg.dt_out, &a.dt_out);
    g.set("abs_tol", &mut cfg.abs_tol, &a.abs_tol);
    g.set("rel_tol", &mut cfg.rel_tol, &a.rel_tol);
    g.set("max_internal_steps", &mut cfg.max_internal_steps, &a.max_internal_steps);
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn main() {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp(None).init();
    let code = match run(&cli, &matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: &Cli, matches: &ArgMatches) -> Result<(), CliError> {
    let sub = matches.subcommand().map(|(_, m)| m).expect("a subcommand is required");
    let given = Given { top: matches, sub };
    if !(cli.scale > 0.0 && cli.scale.is_finite()) {
        return Err(CliError::Config(format!("--scale must be positive, got {}", cli.scale)));
    }
    let threads = if cli.deterministic { 1 } else { cli.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    let mut cfg = match &cli.run_config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if given.has("seed") {
        cfg.seed = cli.seed;
        cfg.training.seed = cli.seed;
    }
    match &cli.command {
        Command::Params(a) => params(a),
        Command::Solve(a) => solve(cli, &given, a, cfg),
        Command::GenDataset(a) => gen_dataset(cli, &given, a, cfg),
        Command::Train(a) => train_cmd(cli, &given, a, cfg),
        Command::Rollout(a) => rollout_cmd(cli, a, cfg),
        Command::Diagnose(a) => diagnose(cli, &given, a, cfg),
        Command::Dispersion(a) => dispersion(cli, &given, a, cfg),
    }
}

fn params(a: &ParamsArgs) -> Result<(), CliError> {
    let p = closure_from_rho_beta(a.rho, a.beta)?;
    // adding zero folds a negative zero into zero
    println!("mu={} nu={} tau={}", p.mu + 0.0, p.nu + 0.0, p.tau + 0.0);
    Ok(())
}

fn solve(cli: &Cli, given: &Given, a: &SolveArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    apply_integrator(given, &a.integrator, &mut cfg.integrator);
    given.set("mesh", &mut cfg.dataset.mesh_size, &a.mesh);
    cfg.integrator.validate()?;
    cfg.write(&cli.out)?;
    let p = closure_from_rho_beta(a.rho, a.beta)?;
    log::info!("solving (rho={}, beta={}) for {} steps", a.rho, a.beta, a.steps);
    let seq = generate_long(&p, a.steps, &cfg.integrator, cfg.seed, cfg.dataset.init_range, cfg.dataset.mesh_size)?;
    write_sequence(&seq, None, &cli.out, "solution")?;
    Ok(())
}

fn gen_dataset(cli: &Cli, given: &Given, a: &GenArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    apply_integrator(given, &a.integrator, &mut cfg.integrator);
    if given.has("grid") {
        cfg.dataset.grid = parse_grid(&a.grid).map_err(|e| CliError::Config(format!("--grid: {e}")))?;
    }
    given.set("sequences", &mut cfg.dataset.n_sequences, &a.sequences);
    if given.has("valid_sequences") {
        cfg.dataset.valid_sequences = a.valid_sequences;
    }
    given.set("steps", &mut cfg.dataset.n_steps, &a.steps);
    given.set("long_steps", &mut cfg.dataset.long_steps, &a.long_steps);
    given.set("mesh", &mut cfg.dataset.mesh_size, &a.mesh);
    cfg.dataset.n_sequences = scaled(cfg.dataset.n_sequences, cli.scale);
    if cfg.dataset.long_steps > 0 {
        cfg.dataset.long_steps = scaled(cfg.dataset.long_steps, cli.scale);
    }
    let n_valid = cfg.dataset.valid_sequences.unwrap_or_else(|| validation_count(cfg.dataset.n_sequences));
    cfg.dataset.valid_sequences = Some(n_valid);
    cfg.write(&cli.out)?;
    for (split, count) in [(Split::Train, cfg.dataset.n_sequences), (Split::Valid, n_valid)] {
        let spec = CorpusSpec {
            n_sequences: count,
            n_steps: cfg.dataset.n_steps,
            long_steps: if split == Split::Train { cfg.dataset.long_steps } else { 0 },
            init_range: cfg.dataset.init_range,
            mesh_size: cfg.dataset.mesh_size,
            integrator: cfg.integrator,
            ..CorpusSpec::new(cfg.dataset.grid.clone(), split, cfg.seed)
        };
        let dir = cli.out.join(split.as_str());
        log::info!(
            "generating {} corpus: {} configurations x {count} sequences x {} steps",
            split.as_str(),
            spec.grid.len(),
            spec.n_steps
        );
        generate_corpus(&spec, &dir)?;
    }
    Ok(())
}

fn model_config(given: &Given, a: &TrainArgs, current: &ModelConfig) -> Result<ModelConfig, CliError> {
    let mut model = if given.has("model") {
        match a.model {
            ModelKind::Pfno => ModelConfig::Pfno(PfnoConfig::default()),
            ModelKind::PfnoStar => ModelConfig::Pfno(PfnoConfig { variant: PfnoVariant::Star, ..Default::default() }),
            ModelKind::Pcnn => ModelConfig::Pcnn(PcnnConfig::default()),
        }
    } else {
        current.clone()
    };
    match &mut model {
        ModelConfig::Pfno(c) => {
            given.set("width", &mut c.channels, &a.width);
            given.set("modes", &mut c.kappa_max, &a.modes);
            given.set("layers", &mut c.levels, &a.layers);
            given.set("projection_hidden", &mut c.projection_hidden, &a.projection_hidden);
            if a.residual {
                c.residual = true;
            }
        }
        ModelConfig::Pcnn(c) => {
            if let Some(flag) = ["width", "modes", "layers", "projection_hidden"].iter().find(|f| given.has(f)) {
                return Err(CliError::Config(format!("--{} applies to pFNO models only", flag.replace('_', "-"))));
            }
            if a.residual {
                c.residual = true;
            }
        }
    }
    model.validate()?;
    Ok(model)
}

fn corpus_dirs(data: &Path) -> (PathBuf, Option<PathBuf>) {
    let train = data.join(Split::Train.as_str());
    if train.join(MANIFEST_NAME).exists() {
        let valid = data.join(Split::Valid.as_str());
        let valid = valid.join(MANIFEST_NAME).exists().then_some(valid);
        (train, valid)
    } else {
        (data.to_path_buf(), None)
    }
}

fn train_cmd(cli: &Cli, given: &Given, a: &TrainArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    let t = &mut cfg.training;
    given.set("epochs", &mut t.epochs, &a.epochs);
    given.set("batch_size", &mut t.batch_size, &a.batch_size);
    given.set("lr", &mut t.lr, &a.lr);
    given.set("weight_decay", &mut t.weight_decay, &a.weight_decay);
    given.set("lr_step", &mut t.lr_step, &a.lr_step);
    given.set("lr_gamma", &mut t.lr_gamma, &a.lr_gamma);
    given.set("clip_norm", &mut t.clip_norm, &a.clip_norm);
    given.set("n_steps", &mut t.n_steps, &a.n_steps);
    given.set("stride", &mut t.stride, &a.stride);
    given.set("valid_stride", &mut t.valid_stride, &a.valid_stride);
    given.set("checkpoint_every", &mut t.checkpoint_every, &a.checkpoint_every);
    if a.no_anchor_mean {
        t.anchor_mean = false;
    }
    if cli.scale != 1.0 {
        t.epochs = scaled(t.epochs, cli.scale);
        t.batch_size = scaled(t.batch_size, cli.scale);
    }
    t.validate()?;
    let start = match &a.resume {
        Some(path) => {
            if given.has("model") || ["width", "modes", "layers", "projection_hidden"].iter().any(|f| given.has(f)) {
                return Err(CliError::Config("--resume takes the architecture from the checkpoint".into()));
            }
            let ck = load_checkpoint(path)?;
            cfg.model = ck.model.config.clone();
            ck
        }
        None => {
            cfg.model = model_config(given, a, &cfg.model)?;
            Checkpoint::new(Model::init(cfg.model.clone(), cfg.seed)?)
        }
    };
    let (train_dir, valid_dir) = corpus_dirs(&a.data);
    let corpus = Corpus::load(&train_dir)?;
    let valid = valid_dir.as_deref().map(Corpus::load).transpose()?;
    cfg.dataset.mesh_size = corpus.mesh_size();
    cfg.write(&cli.out)?;
    log::info!(
        "training {} ({} weights) for {} epochs on {}",
        cfg.model.name(),
        start.model.n_scalars(),
        cfg.training.epochs,
        train_dir.display()
    );
    let opts = TrainOptions { out_dir: Some(cli.out.clone()), deterministic: cli.deterministic };
    let outcome = train(start, &corpus, valid.as_ref(), &cfg.training, &opts)?;
    if let Some((epoch, l2)) = outcome.best_valid {
        log::info!("best validation L2 {l2:.5} after epoch {epoch}");
    }
    Ok(())
}

fn rollout_cmd(cli: &Cli, a: &RolloutArgs, cfg: RunConfig) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let params = closure_from_rho_beta(a.rho, a.beta)?;
    let initial = match &a.initial {
        Some(path) => {
            let (_, seq) = read_sequence(path)?;
            seq.states
                .get(a.initial_index)
                .map(|s| s.values.clone())
                .ok_or_else(|| CliError::Config(format!("--initial-index {} past the end of {}", a.initial_index, path.display())))?
        }
        None => flamefront::dataset::random_initial(cfg.seed, cfg.dataset.mesh_size, cfg.dataset.init_range)?.values,
    };
    cfg.write(&cli.out)?;
    let r = rollout(&ck.model, &initial, GammaInput::new(a.rho, a.beta), a.steps)?;
    let failure = r.failure;
    let mut seq = r.into_sequence(params, cfg.integrator.dt_out)?;
    seq.seed = a.initial.is_none().then_some(cfg.seed);
    write_sequence(&seq, failure, &cli.out, "rollout")?;
    if let Some(i) = failure {
        return Err(CliError::Numerical(format!("rollout became non-finite at step {i}; states up to it were written")));
    }
    Ok(())
}

fn configs_or_grid(configs: &[(f64, f64)]) -> Vec<(f64, f64)> {
    if configs.is_empty() {
        flamefront::spectral::reference_grid()
    } else {
        configs.to_vec()
    }
}

fn diagnose(cli: &Cli, given: &Given, a: &DiagnoseArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    apply_integrator(given, &a.integrator, &mut cfg.integrator);
    let d = &mut cfg.diagnostics;
    given.set("steps", &mut d.steps, &a.steps);
    given.set("warmup", &mut d.warmup, &a.warmup);
    given.set("sequences", &mut d.n_sequences, &a.sequences);
    given.set("stat_start", &mut d.stat_start, &a.stat_start);
    given.set("stat_end", &mut d.stat_end, &a.stat_end);
    given.set("eps", &mut d.eps, &a.eps);
    if a.keep_mean {
        d.remove_mean = false;
    }
    if given.has("kappa_max") {
        d.kappa_max = a.kappa_max;
    }
    d.validate()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    cfg.model = ck.model.config.clone();
    cfg.write(&cli.out)?;
    let mut report = DiagnosticsReport::default();
    for (i, (rho, beta)) in configs_or_grid(&a.configs).into_iter().enumerate() {
        log::info!("diagnosing (rho={rho}, beta={beta})");
        let r: ConfigReport = diagnose_config(&ck.model, rho, beta, i, &cfg.integrator, &cfg.diagnostics, cfg.seed)?;
        report.configs.push(r);
    }
    report.write(&cli.out)?;
    Ok(())
}

fn dispersion(cli: &Cli, given: &Given, a: &DispersionArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    apply_integrator(given, &a.integrator, &mut cfg.integrator);
    given.set("eps", &mut cfg.diagnostics.eps, &a.eps);
    if given.has("kappa_max") {
        cfg.diagnostics.kappa_max = a.kappa_max;
    }
    cfg.diagnostics.validate()?;
    let ck = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &ck {
        cfg.model = ck.model.config.clone();
    }
    cfg.write(&cli.out)?;
    for (rho, beta) in configs_or_grid(&a.configs) {
        let table = dispersion_table(rho, beta, ck.as_ref().map(|c| &c.model), &cfg.integrator, &cfg.diagnostics)?;
        let path = cli.out.join(csv_name("dispersion", rho, beta));
        std::fs::write(&path, table.to_csv()).map_err(io(&path))?;
    }
    Ok(())
}
