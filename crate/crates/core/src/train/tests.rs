use super::*;
use crate::dataset::{generate_corpus, CorpusSpec, Split};
use crate::nn::{ModelConfig, PfnoConfig};

fn window(input: Vec<f64>, targets: Vec<Vec<f64>>) -> TrainingWindow {
    TrainingWindow { input, targets, gamma: GammaInput::new(0.0, 10.0) }
}

fn tiny_model(seed: u64) -> Model {
    let cfg = PfnoConfig { levels: 2, channels: 4, kappa_max: 16, ratio_hidden: 4, projection_hidden: 6, ..Default::default() };
    Model::init(ModelConfig::Pfno(cfg), seed).unwrap()
}

fn tiny_corpus(dir: &Path, split: Split, sequences: usize) -> Corpus {
    let spec = CorpusSpec { n_sequences: sequences, n_steps: 8, mesh_size: 32, ..CorpusSpec::new(vec![(0.0, 10.0), (1.0, 10.0)], split, 5) };
    generate_corpus(&spec, dir).unwrap();
    Corpus::load(dir).unwrap()
}

fn tiny_config() -> TrainingConfig {
    TrainingConfig { epochs: 3, batch_size: 4, n_steps: 3, stride: 2, valid_stride: 3, checkpoint_every: 2, lr_step: 2, ..Default::default() }
}

#[test]
fn identity_step_losses() {
    let v = vec![1.0, -2.0, 0.5, 3.0];
    let mut g = Graph::new();
    let (l, first) = loss_1_to_n_with(&mut g, &window(v.clone(), vec![v.clone(); 3]), |_, x| Ok(x)).unwrap();
    assert_eq!((g.value(l).re()[0], first), (0.0, 0.0));

    let targets = vec![vec![1.0, -1.0, 0.0, 3.0], vec![2.0, -2.0, 1.5, 2.0]];
    let mut g = Graph::new();
    let (l, _) = loss_1_to_n_with(&mut g, &window(v.clone(), targets.clone()), |_, x| Ok(x)).unwrap();
    let num: f64 = targets.iter().flatten().zip(v.iter().cycle()).map(|(t, p)| (p - t) * (p - t)).sum();
    let den: f64 = targets.iter().flatten().map(|t| t * t).sum();
    assert!((g.value(l).re()[0] - (num / den).sqrt()).abs() < 1e-15);
}

#[test]
fn single_target_is_one_step_error() {
    let m = tiny_model(1);
    let input: Vec<f64> = (0..32).map(|j| (j as f64 * 0.4).sin()).collect();
    let target: Vec<f64> = (0..32).map(|j| (j as f64 * 0.4).cos()).collect();
    let w = window(input, vec![target]);
    let mut g = Graph::new();
    let b = m.bind(&mut g);
    let (l, first) = loss_1_to_n(&mut g, &m, &b, &w).unwrap();
    assert!((g.value(l).re()[0] - first).abs() < 1e-14);
    let (nstep, one) = evaluate_window(&m, &w).unwrap();
    assert_eq!(nstep, one);
    assert!((nstep - first).abs() < 1e-15);
}

#[test]
fn gradients_flow_through_the_rollout() {
    let m = tiny_model(2);
    let input: Vec<f64> = (0..32).map(|j| 0.3 * (j as f64 * 0.2).sin() + 0.1).collect();
    let targets: Vec<Vec<f64>> = (1..=3).map(|k| input.iter().map(|x| x * (1.0 + 0.1 * k as f64)).collect()).collect();
    let w = window(input, targets);
    let (_, grads) = window_gradient(&m, &w).unwrap();
    let (mut diff, mut norm) = (0.0, 0.0);
    for (i, name) in m.params.names().iter().enumerate() {
        let base = (**m.params.get(name).unwrap()).clone();
        let a: Vec<f64> = grads[i].components().copied().collect();
        for c in 0..base.n_components() {
            let eval = |d: f64| {
                let mut mm = m.clone();
                let mut t = base.clone();
                *t.components_mut().nth(c).unwrap() += d;
                mm.params.insert(name.clone(), t);
                evaluate_window(&mm, &w).unwrap().0
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            diff += (fd - a[c]).powi(2);
            norm += fd * fd;
        }
    }
    assert!(diff.sqrt() / norm.sqrt() < 1e-4);
}

#[test]
fn nan_rollout_reports_depth() {
    let mut m = tiny_model(3);
    let mut q = (**m.params.get("q.b2").unwrap()).clone();
    q.re_mut()[0] = f64::NAN;
    m.params.insert("q.b2", q);
    let w = window(vec![0.1; 32], vec![vec![0.1; 32]; 2]);
    let mut g = Graph::new();
    let b = m.bind(&mut g);
    assert!(matches!(loss_1_to_n(&mut g, &m, &b, &w), Err(TrainError::NonFinite { depth: 1 })));
    let r = rollout(&m, &[0.1; 32], GammaInput::new(0.0, 10.0), 5).unwrap();
    assert_eq!((r.states.len(), r.failure), (1, Some(1)));
}

#[test]
fn rollout_lengths() {
    let m = tiny_model(4);
    let init = vec![0.01; 32];
    let r = rollout(&m, &init, GammaInput::new(1.0, 10.0), 0).unwrap();
    assert_eq!(r.states, vec![init.clone()]);
    let r = rollout(&m, &init, GammaInput::new(1.0, 10.0), 7).unwrap();
    assert_eq!((r.states.len(), r.failure), (8, None));
    assert_eq!(r.states[1], m.forward(&init, GammaInput::new(1.0, 10.0)).unwrap());
}

#[test]
fn schedule_halves_every_step() {
    let c = TrainingConfig::default();
    for e in [0, 1, 99, 100, 199, 200, 999] {
        assert_eq!(c.lr_at(e), 0.0025 * 0.5f64.powi((e / 100) as i32));
    }
    assert!(TrainingConfig { n_steps: 0, ..Default::default() }.validate().is_err());
    assert!(TrainingConfig { lr: -1.0, ..Default::default() }.validate().is_err());
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path(), Split::Train, 2);
    let m = tiny_model(5);
    let cfg = TrainingConfig { epochs: 0, ..tiny_config() };
    let out = train(Checkpoint::new(m.clone()), &corpus, None, &cfg, &TrainOptions::default()).unwrap();
    assert!(out.log.rows.is_empty());
    for ((_, a), (_, b)) in out.checkpoint.model.params.iter().zip(m.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn training_is_reproducible_and_clipped() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(&dir.path().join("train"), Split::Train, 3);
    let valid = tiny_corpus(&dir.path().join("valid"), Split::Valid, 1);
    let cfg = TrainingConfig { clip_norm: 0.05, ..tiny_config() };
    let run = |sub: &str| {
        let opts = TrainOptions { out_dir: Some(dir.path().join(sub)), deterministic: true };
        train(Checkpoint::new(tiny_model(6)), &corpus, Some(&valid), &cfg, &opts).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.rows.len(), 3);
    for r in &a.log.rows {
        assert!(r.grad_norm_max <= cfg.clip_norm + 1e-6);
        assert!(r.valid_l2.is_finite() && r.train_l2.is_finite());
        assert_eq!(r.seconds, 0.0);
        assert_eq!(r.lr, cfg.lr_at(r.epoch));
    }
    for f in ["final.ckpt", "best.ckpt", "epoch00002.ckpt", "train_log.csv"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("a/train_log.csv")).unwrap();
    assert!(csv.starts_with(TrainLog::HEADER));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path(), Split::Train, 2);
    let full = train(Checkpoint::new(tiny_model(7)), &corpus, None, &tiny_config(), &TrainOptions::default()).unwrap();
    let first = train(
        Checkpoint::new(tiny_model(7)),
        &corpus,
        None,
        &TrainingConfig { epochs: 1, ..tiny_config() },
        &TrainOptions::default(),
    )
    .unwrap();
    let resumed = Checkpoint::from_bytes(&first.checkpoint.to_bytes().unwrap()).unwrap();
    let rest = train(resumed, &corpus, None, &tiny_config(), &TrainOptions::default()).unwrap();
    assert_eq!(rest.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
}
