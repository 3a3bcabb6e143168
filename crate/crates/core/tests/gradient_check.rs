//! Finite-difference validation of the hand-written backward pass.

use ndarray::{Array3, Array4};
use psunet_core::backbone::{build_ps_unet, Backbone, BackboneConfig};
use psunet_core::diffusion::{noise_mse, q_sample_state, NoiseSchedule};
use psunet_core::nn::Family;
use psunet_core::state::{gaussian, ActivationMode, MultimodalState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Problem {
    model: Backbone<f64>,
    x_t: MultimodalState<f64>,
    eps: MultimodalState<f64>,
    t: Vec<usize>,
}

fn problem(cfg: &BackboneConfig, seed: u64) -> Problem {
    let mut model = build_ps_unet::<f64>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    // Move every parameter off its structured init so no gradient vanishes.
    for (_, p) in model.params_mut().iter_mut() {
        p.value.mapv_inplace(|v| v + 0.2 * rng.sample::<f64, _>(StandardNormal));
    }
    let b = 2;
    let x0 = MultimodalState::joint(
        gaussian::<f64, _, _, _>(Array4::<f64>::zeros((b, cfg.image_channels, cfg.image_hw, cfg.image_hw)).raw_dim(), &mut rng),
        gaussian::<f64, _, _, _>(Array3::<f64>::zeros((b, cfg.text_len, cfg.embed_dim)).raw_dim(), &mut rng),
    );
    let eps = x0.gaussian_like(&mut rng);
    let sched = NoiseSchedule::standard();
    let t = vec![37, 640];
    let x_t = q_sample_state(&x0, &t, &eps, &sched).unwrap();
    Problem { model, x_t, eps, t }
}

fn loss(p: &Problem, model: &Backbone<f64>) -> f64 {
    let pred = model.forward(&p.x_t, &p.t, ActivationMode::Joint).unwrap();
    noise_mse(&pred, &p.eps).unwrap().value
}

#[test]
fn every_parameter_family_matches_central_differences() {
    let cfg = BackboneConfig::mini();
    let p = problem(&cfg, 7);
    let (pred, cache) = p.model.forward_train(&p.x_t, &p.t, ActivationMode::Joint).unwrap();
    let l = noise_mse(&pred, &p.eps).unwrap();
    let grads = p.model.backward(&cache, &l.grad).unwrap();

    let h = 1e-5;
    let mut seen = std::collections::BTreeSet::new();
    let mut worst = 0.0f64;
    let mut pick = ChaCha8Rng::seed_from_u64(99);
    let mut model = p.model.clone();
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    for id in ids {
        let (name, family, n) = {
            let prm = model.params().get(id);
            (prm.name.clone(), prm.family, prm.value.len())
        };
        seen.insert(family);
        let k = n.min(6);
        let (mut num_sq, mut diff_sq, mut ana_sq) = (0.0, 0.0, 0.0);
        for _ in 0..k {
            let flat = pick.random_range(0..n);
            let cols = model.params().get(id).value.ncols();
            let (r, c) = (flat / cols, flat % cols);
            let orig = model.params().get(id).value[[r, c]];
            model.params_mut().get_mut(id).value[[r, c]] = orig + h;
            let lp = loss(&p, &model);
            model.params_mut().get_mut(id).value[[r, c]] = orig - h;
            let lm = loss(&p, &model);
            model.params_mut().get_mut(id).value[[r, c]] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = grads.get(id)[[r, c]];
            num_sq += num * num;
            ana_sq += ana * ana;
            diff_sq += (num - ana) * (num - ana);
        }
        let denom = num_sq.sqrt().max(ana_sq.sqrt());
        let rel = if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom };
        assert!(denom > 0.0, "{name}: gradient vanished");
        assert!(rel < 1e-4, "{name} ({family:?}): relative error {rel:e}");
        worst = worst.max(rel);
    }
    for f in Family::ALL {
        assert!(seen.contains(&f), "family {f:?} not exercised");
    }
    println!("worst relative error {worst:e}");
}
