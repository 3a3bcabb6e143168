mod common;

use common::*;
use psunet_core::diffusion::ScheduleConfig;
use psunet_core::nn::Grads;
use psunet_core::text::Vocabulary;
use psunet_core::train::*;
use psunet_core::{Backbone, BackboneConfig, Error, MultimodalState};

fn data(n: usize, seed: u64) -> TrainData<f64> {
    let s = joint_state(&BackboneConfig::mini(), n, seed);
    TrainData { images: s.image.unwrap(), texts: s.text.unwrap() }
}

fn cfg(batch: usize, accum: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        grad_accum_steps: accum,
        total_steps: 1000,
        lr: 1e-3,
        warmup_steps: 2,
        seed: 5,
        checkpoint_every: 3,
        ..TrainConfig::desk()
    }
}

fn trainer(c: TrainConfig) -> Trainer<f64> {
    let model = Backbone::<f64>::new(BackboneConfig::mini(), 1).unwrap();
    Trainer::new(model, ScheduleConfig::default(), c).unwrap()
}

fn flat(m: &Backbone<f64>) -> Vec<f64> {
    m.params().iter().flat_map(|(_, p)| p.value.iter().copied().collect::<Vec<_>>()).collect()
}

#[test]
fn batches_are_pure_functions_of_seed_and_step() {
    let d = data(10, 0);
    let a = draw_batch(&d, 6, 1000, 3, 7);
    let b = draw_batch(&d, 6, 1000, 3, 7);
    let c = draw_batch(&d, 6, 1000, 3, 8);
    assert_eq!(a.indices, b.indices);
    assert_eq!(a.t, b.t);
    assert!(bits_equal(&a.eps, &b.eps));
    assert!(a.t != c.t || a.indices != c.indices);
    assert!(a.t.iter().all(|&t| (1..=1000).contains(&t)));
}

#[test]
fn accumulation_matches_one_large_batch() {
    let d = data(16, 1);
    let mut big = trainer(cfg(8, 1));
    let mut acc = trainer(cfg(4, 2));
    for _ in 0..3 {
        let a = big.train_step(&d).unwrap();
        let b = acc.train_step(&d).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12, "{} vs {}", a.loss, b.loss);
    }
    for (x, y) in flat(&big.model).iter().zip(flat(&acc.model)) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn warmup_is_linear_then_constant() {
    let c = TrainConfig { lr: 2e-4, warmup_steps: 500, ..TrainConfig::desk() };
    assert_eq!(c.lr_at(1), 2e-4 / 500.0);
    assert!((c.lr_at(250) - 1e-4).abs() < 1e-18);
    assert_eq!(c.lr_at(500), 2e-4);
    assert_eq!(c.lr_at(10_000), 2e-4);
    let none = TrainConfig { warmup_steps: 0, ..c };
    assert_eq!(none.lr_at(1), 2e-4);
}

#[test]
fn weight_decay_is_decoupled() {
    let mut m = Backbone::<f64>::new(BackboneConfig::mini(), 2).unwrap();
    let before = flat(&m);
    let mut opt = AdamW::new(m.params(), (0.9, 0.999), 1e-8, 0.1);
    let zero = Grads::zeros_like(m.params());
    opt.update(m.params_mut(), &zero, 0.01).unwrap();
    for (a, b) in before.iter().zip(flat(&m)) {
        assert!((b - a * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }
    // First step with a constant gradient moves by lr·g/(|g| + eps).
    let mut g = Grads::zeros_like(m.params());
    for v in g.values.iter_mut() {
        v.fill(0.5);
    }
    let mut opt = AdamW::new(m.params(), (0.9, 0.999), 1e-8, 0.0);
    let before = flat(&m);
    opt.update(m.params_mut(), &g, 0.01).unwrap();
    for (a, b) in before.iter().zip(flat(&m)) {
        assert!((a - b - 0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-12);
    }
    assert_eq!(opt.t, 1);
}

#[test]
fn loss_falls_on_a_fixed_batch_for_every_seed() {
    let d = data(4, 3);
    for seed in 0..20u64 {
        let model = Backbone::<f64>::new(BackboneConfig::mini(), seed).unwrap();
        let c = TrainConfig { seed, batch_size: 8, ..cfg(8, 1) };
        let mut tr = Trainer::new(model, ScheduleConfig::default(), c).unwrap();
        let probe = draw_batch(&d, 32, 1000, 999, 0);
        let sched = tr.noise_schedule().clone();
        let l0 = batch_loss(&tr.model, &probe, &sched).unwrap();
        for _ in 0..50 {
            tr.train_step(&d).unwrap();
        }
        let l1 = batch_loss(&tr.model, &probe, &sched).unwrap();
        assert!(l1 < l0, "seed {seed}: {l0} -> {l1}");
    }
}

#[test]
fn resume_continues_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(6, 4);
    let mut straight = trainer(cfg(4, 1));
    for _ in 0..6 {
        straight.train_step(&d).unwrap();
    }
    let mut first = trainer(cfg(4, 1));
    for _ in 0..3 {
        first.train_step(&d).unwrap();
    }
    let path = dir.path().join("mid.ckpt");
    first.save(&path, None, None).unwrap();
    let (mut resumed, _) = Trainer::<f64>::resume(&path, None).unwrap();
    assert_eq!(resumed.step(), 3);
    for _ in 0..3 {
        resumed.train_step(&d).unwrap();
    }
    let (a, b) = (flat(&straight.model), flat(&resumed.model));
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(straight.opt, resumed.opt);
}

#[test]
fn fit_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(6, 5);
    let mut tr = trainer(cfg(2, 1));
    let arts = RunArtifacts { dir: dir.path().to_path_buf(), vocab: None, codec: None };
    let recs = tr.fit(&d, 7, Some(&arts), |_, _| Ok(true)).unwrap();
    assert_eq!(recs.len(), 7);
    let logged = read_metrics(&arts.metrics_path()).unwrap();
    assert_eq!(logged.len(), 7);
    assert_eq!(logged[6].step, 7);
    assert!((logged[0].loss - recs[0].loss).abs() < 1e-6 * recs[0].loss);
    for s in [3, 6, 7] {
        assert!(arts.checkpoint_path(s).exists(), "step {s}");
    }
    assert!(!arts.checkpoint_path(4).exists());
    assert!(arts.latest_path().exists());
    let text = std::fs::read_to_string(arts.metrics_path()).unwrap();
    assert!(text.starts_with(MetricsLog::HEADER));

    let stop = tr.fit(&d, 100, None, |r, _| Ok(r.step < 9)).unwrap();
    assert_eq!(stop.len(), 2);
    assert_eq!(tr.step(), 9);
}

#[test]
fn resume_rejects_a_vocabulary_of_the_wrong_size() {
    let dir = tempfile::tempdir().unwrap();
    let tr = trainer(cfg(2, 1));
    let path = dir.path().join("a.ckpt");
    tr.save(&path, None, None).unwrap();
    let (_, ck) = Trainer::<f64>::resume(&path, None).unwrap();
    let small = Vocabulary::build(&["a b c"]).unwrap();
    match Trainer::check_vocab(&ck, &small) {
        Err(Error::Shape(msg)) => assert!(msg.contains("23")),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_loss_stops_training() {
    let mut d = data(4, 6);
    d.images.fill(f64::NAN);
    let mut tr = trainer(cfg(2, 1));
    match tr.train_step(&d) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("step 1")),
        other => panic!("expected non-finite error, got {other:?}"),
    }
    assert_eq!(tr.step(), 0);
}

#[test]
fn training_batches_must_be_joint() {
    let d = data(4, 7);
    let mut b = draw_batch(&d, 2, 1000, 0, 0);
    b.x0 = MultimodalState::image_only(b.x0.image.clone().unwrap());
    b.eps = MultimodalState::image_only(b.eps.image.clone().unwrap());
    let m = Backbone::<f64>::new(BackboneConfig::mini(), 0).unwrap();
    assert!(loss_and_grads(&m, &b, &psunet_core::NoiseSchedule::standard()).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::desk().validate().is_ok());
    assert!(TrainConfig::full().validate().is_ok());
    assert_eq!(TrainConfig::full().logical_batch(), 256);
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::desk() }.validate().is_err());
    assert!(TrainConfig { lr: -1.0, ..TrainConfig::desk() }.validate().is_err());
    assert!(TrainConfig { adam_betas: (1.0, 0.9), ..TrainConfig::desk() }.validate().is_err());
    assert!(TrainConfig { weight_decay: f64::NAN, ..TrainConfig::desk() }.validate().is_err());
}
