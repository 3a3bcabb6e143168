mod common;

use common::*;
use ndarray::Axis;
use proptest::prelude::*;
use psunet_core::diffusion::{BetaSchedule, Denoiser, NoiseSchedule};
use psunet_core::sampler::*;
use psunet_core::state::{ActivationMode, MultimodalState};
use psunet_core::BackboneConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn short() -> NoiseSchedule {
    NoiseSchedule::new(20, 1e-3, 0.2, BetaSchedule::Linear).unwrap()
}

fn random_mask(grid: usize, text_len: usize, seed: u64) -> MaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MaskSpec {
        image: Some((0..grid * grid).map(|_| rng.random_bool(0.5)).collect()),
        text: Some((0..text_len).map(|_| rng.random_bool(0.5)).collect()),
    }
}

#[test]
fn all_observed_mask_returns_the_observation() {
    let cfg = BackboneConfig::mini();
    let model = mini_model(1);
    let obs = joint_state(&cfg, 2, 3);
    let mask = MaskSpec::all(cfg.grid(), cfg.text_len, false);
    let counter = Counting::new(&model);
    let out = joint_infill(&counter, &obs, &mask, &short(), 20, &GuidanceConfig::masked(3.0), 0).unwrap();
    assert!(bits_equal(&out, &obs));
    assert_eq!(counter.calls.get(), 0);
}

#[test]
fn observed_positions_are_exact_at_the_end() {
    let cfg = BackboneConfig::mini();
    let model = mini_model(2);
    let obs = joint_state(&cfg, 2, 4);
    let s = short();
    for (k, steps) in [(0u64, 20usize), (1, 5), (2, 1)] {
        let mask = random_mask(cfg.grid(), cfg.text_len, 10 + k);
        let out = joint_infill(&model, &obs, &mask, &s, steps, &GuidanceConfig::masked(2.0), k).unwrap();
        let p = cfg.patch_size;
        let (oi, xi) = (obs.image.as_ref().unwrap(), out.image.as_ref().unwrap());
        for (idx, v) in oi.indexed_iter() {
            let masked = mask.image.as_ref().unwrap()[(idx.2 / p) * cfg.grid() + idx.3 / p];
            if !masked {
                assert_eq!(v.to_bits(), xi[idx].to_bits());
            } else {
                assert_ne!(*v, xi[idx]);
            }
        }
        let (ot, xt) = (obs.text.as_ref().unwrap(), out.text.as_ref().unwrap());
        for (idx, v) in ot.indexed_iter() {
            if !mask.text.as_ref().unwrap()[idx.1] {
                assert_eq!(v.to_bits(), xt[idx].to_bits());
            }
        }
        assert!(out.all_finite());
    }
}

#[test]
fn zero_scale_guidance_equals_the_conditional_forward() {
    let cfg = BackboneConfig::mini();
    let model = mini_model(3);
    let x = joint_state(&cfg, 2, 5);
    let mask = random_mask(cfg.grid(), cfg.text_len, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = masked_cfg_predict(&model, &x, &mask, 400, &GuidanceConfig::masked(0.0), &mut rng).unwrap();
    let c = model.predict(&x, &[400, 400]).unwrap();
    assert!(bits_equal(&g, &c));
}

#[test]
fn zero_scale_sampling_equals_unguided_sampling() {
    let cfg = BackboneConfig::mini();
    let model = mini_model(4);
    let obs = joint_state(&cfg, 1, 7);
    let mask = random_mask(cfg.grid(), cfg.text_len, 8);
    let s = short();
    for steps in [20, 4] {
        let a = joint_infill(&model, &obs, &mask, &s, steps, &GuidanceConfig::masked(0.0), 9).unwrap();
        let b = joint_infill(&model, &obs, &mask, &s, steps, &GuidanceConfig::none(), 9).unwrap();
        assert!(bits_equal(&a, &b));
    }
}

fn guided(model: &impl Denoiser<f64>, x: &MultimodalState<f64>, mask: &MaskSpec, w: f64, convention: CfgConvention) -> MultimodalState<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let g = GuidanceConfig { w, mode: GuidanceMode::MaskedCfg, convention };
    masked_cfg_predict(model, x, mask, 250, &g, &mut rng).unwrap()
}

#[test]
fn guidance_is_affine_in_scale() {
    let cfg = BackboneConfig::mini();
    let model = mini_model(5);
    let x = joint_state(&cfg, 2, 11);
    let mask = random_mask(cfg.grid(), cfg.text_len, 12);
    let f0 = guided(&model, &x, &mask, 0.0, CfgConvention::Conditional);
    let f1 = guided(&model, &x, &mask, 1.0, CfgConvention::Conditional);
    // f(w) = (1 + w)·c − w·u with c = f(0), u = 2c − f(1).
    let uncond = f0.zip_with(&f1, |c, g| 2.0 * c - g).unwrap();
    for w in [0.5, 3.0, 7.25] {
        let fw = guided(&model, &x, &mask, w, CfgConvention::Conditional);
        let want = f0.zip_with(&uncond, |c, u| (1.0 + w) * c - w * u).unwrap();
        assert!(max_abs_diff(&fw, &want) < 1e-10, "w={w}");
        let sub = guided(&model, &x, &mask, w, CfgConvention::Substituted);
        let want = f0.zip_with(&uncond, |c, u| (1.0 + w) * u - w * c).unwrap();
        assert!(max_abs_diff(&sub, &want) < 1e-10, "substituted w={w}");
    }
}

#[test]
fn guided_steps_cost_two_forwards_for_any_mask() {
    let cfg = BackboneConfig::mini();
    let model = mini_model(6);
    let obs = joint_state(&cfg, 1, 13);
    let s = short();
    let g2 = cfg.grid() * cfg.grid();
    let masks = [
        MaskSpec::all(cfg.grid(), cfg.text_len, true),
        MaskSpec { image: Some(vec![true; g2]), text: Some(vec![false; cfg.text_len]) },
        MaskSpec { image: Some(vec![false; g2]), text: Some(vec![true; cfg.text_len]) },
        random_mask(cfg.grid(), cfg.text_len, 14),
        random_mask(cfg.grid(), cfg.text_len, 15),
    ];
    for mask in &masks {
        for steps in [20, 6] {
            let c = Counting::new(&model);
            joint_infill(&c, &obs, mask, &s, steps, &GuidanceConfig::masked(3.0), 0).unwrap();
            assert_eq!(c.calls.get(), 2 * steps);
            let c = Counting::new(&model);
            joint_infill(&c, &obs, mask, &s, steps, &GuidanceConfig::none(), 0).unwrap();
            assert_eq!(c.calls.get(), steps);
        }
    }
    let c = Counting::new(&model);
    let g = Scenario::Unconditional.default_guidance(1.0);
    joint_infill(&c, &obs, &masks[0], &s, 5, &g, 0).unwrap();
    assert_eq!(c.calls.get(), 15);
}

#[test]
fn ancestral_chain_matches_a_reference_loop() {
    let s = short();
    let model = Affine(0.3, 0.1);
    let shape = StateShape { batch: 1, image: Some((1, 4, 4)), text: None };
    let seed = 42;
    let out = unconditional_sample(&model, shape, &s, 20, seed, UncondVariant::Plain).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
    for t in (1..=20).rev() {
        let beta = s.beta(t);
        let ab = s.alpha_bar(t);
        let ab_prev = if t > 1 { s.alpha_bar(t - 1) } else { 1.0 };
        let mut next: Vec<f64> = x
            .iter()
            .map(|&v| (v - beta / (1.0 - ab).sqrt() * (0.3 * v + 0.1)) / (1.0 - beta).sqrt())
            .collect();
        if t > 1 {
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            for n in next.iter_mut() {
                *n += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        x = next;
    }
    let got = out.image.unwrap();
    for (a, b) in got.iter().zip(&x) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn strided_chain_matches_a_reference_loop() {
    let s = short();
    let model = Affine(-0.2, 0.05);
    let shape = StateShape { batch: 1, image: Some((1, 2, 2)), text: None };
    let out = unconditional_sample(&model, shape, &s, 5, 3, UncondVariant::Plain).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
    let ts = [20usize, 16, 12, 8, 4, 0];
    for w in ts.windows(2) {
        let (t, tp) = (w[0], w[1]);
        let ab = s.alpha_bar(t);
        let abp = if tp == 0 { 1.0 } else { s.alpha_bar(tp) };
        x = x
            .iter()
            .map(|&v| {
                let e = -0.2 * v + 0.05;
                let x0 = (v - (1.0 - ab).sqrt() * e) / ab.sqrt();
                abp.sqrt() * x0 + (1.0 - abp).sqrt() * e
            })
            .collect();
    }
    for (a, b) in out.image.unwrap().iter().zip(&x) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn unmasked_positions_follow_the_forward_process() {
    let cfg = BackboneConfig::mini();
    let s = short();
    let a = joint_state(&cfg, 1, 20);
    let b = joint_state(&cfg, 1, 21);
    let mask = random_mask(cfg.grid(), cfg.text_len, 22);
    let zero = Affine(0.0, 0.0);
    for steps in [20usize, 7] {
        let mut ta = Vec::new();
        let mut tb = Vec::new();
        joint_infill_traced(&zero, &a, &mask, &s, steps, &GuidanceConfig::none(), 5, &mut |t, x| ta.push((t, x.clone()))).unwrap();
        joint_infill_traced(&zero, &b, &mask, &s, steps, &GuidanceConfig::none(), 5, &mut |t, x| tb.push((t, x.clone()))).unwrap();
        assert_eq!(ta.len(), tb.len());
        let p = cfg.patch_size;
        for ((t, xa), (_, xb)) in ta.iter().zip(&tb) {
            let k = if *t == 0 { 1.0 } else { s.alpha_bar(*t).sqrt() };
            let (ia, ib) = (xa.image.as_ref().unwrap(), xb.image.as_ref().unwrap());
            let (oa, ob) = (a.image.as_ref().unwrap(), b.image.as_ref().unwrap());
            for (idx, &v) in ia.indexed_iter() {
                let masked = mask.image.as_ref().unwrap()[(idx.2 / p) * cfg.grid() + idx.3 / p];
                if masked {
                    // Zero model: masked positions ignore the observation.
                    assert_eq!(v, ib[idx]);
                } else {
                    let want = k * (oa[idx] - ob[idx]);
                    assert!(((v - ib[idx]) - want).abs() < 1e-12, "t={t}");
                }
            }
        }
        // First traced state is at the first timestep of the schedule.
        assert_eq!(ta[0].0, 20);
        assert_eq!(ta.last().unwrap().0, 0);
    }
}

#[test]
fn sampling_is_reproducible_from_seed() {
    let cfg = BackboneConfig::mini();
    let model = mini_model(8);
    let obs = joint_state(&cfg, 2, 30);
    let mask = random_mask(cfg.grid(), cfg.text_len, 31);
    let g = GuidanceConfig::masked(3.0);
    let x = joint_infill(&model, &obs, &mask, &short(), 6, &g, 123).unwrap();
    let y = joint_infill(&model, &obs, &mask, &short(), 6, &g, 123).unwrap();
    let z = joint_infill(&model, &obs, &mask, &short(), 6, &g, 124).unwrap();
    assert!(bits_equal(&x, &y));
    assert!(!bits_equal(&x, &z));
}

#[test]
fn partial_activation_masks_sample_one_modality() {
    let cfg = BackboneConfig::mini();
    let model = mini_model(9);
    let img = joint_state(&cfg, 1, 40).image.unwrap();
    let obs = MultimodalState::image_only(img);
    let mask = MaskSpec { image: Some(vec![true; cfg.grid() * cfg.grid()]), text: None };
    assert_eq!(activation_mode_for(&mask), ActivationMode::ImageOnly);
    let out = joint_infill(&model, &obs, &mask, &short(), 4, &GuidanceConfig::none(), 0).unwrap();
    assert!(out.text.is_none() && out.image.is_some());
    let bad = MaskSpec::all(cfg.grid(), cfg.text_len, true);
    assert!(joint_infill(&model, &obs, &bad, &short(), 4, &GuidanceConfig::none(), 0).is_err());
}

#[test]
fn invalid_sampling_arguments() {
    let cfg = BackboneConfig::mini();
    let model = mini_model(10);
    let obs = joint_state(&cfg, 1, 41);
    let mask = MaskSpec::all(cfg.grid(), cfg.text_len, true);
    let s = short();
    assert!(joint_infill(&model, &obs, &mask, &s, 0, &GuidanceConfig::none(), 0).is_err());
    assert!(joint_infill(&model, &obs, &mask, &s, 21, &GuidanceConfig::none(), 0).is_err());
    assert!(joint_infill(&model, &obs, &mask, &s, 5, &GuidanceConfig::masked(-1.0), 0).is_err());
    assert!(joint_infill(&model, &obs, &mask, &s, 5, &GuidanceConfig::masked(f64::NAN), 0).is_err());
    let wrong = MaskSpec { image: Some(vec![true; 3]), text: Some(vec![true; cfg.text_len]) };
    assert!(joint_infill(&model, &obs, &wrong, &s, 5, &GuidanceConfig::none(), 0).is_err());
}

#[test]
fn scenario_presets() {
    let (grid, l) = (8, 12);
    let tm = MaskSpec::text_positions(l, &[2]).unwrap();
    let count = |m: &Option<Vec<bool>>| m.as_ref().unwrap().iter().filter(|&&b| b).count();
    let u = Scenario::Unconditional.mask(grid, l, None, None).unwrap();
    assert_eq!((count(&u.image), count(&u.text)), (64, 12));
    let t2i = Scenario::TextToImage.mask(grid, l, None, None).unwrap();
    assert_eq!((count(&t2i.image), count(&t2i.text)), (64, 0));
    let i2t = Scenario::ImageToText.mask(grid, l, None, None).unwrap();
    assert_eq!((count(&i2t.image), count(&i2t.text)), (0, 12));
    let ii = Scenario::ImageInfill.mask(grid, l, None, None).unwrap();
    assert_eq!((count(&ii.image), count(&ii.text)), (16, 0));
    let ti = Scenario::TextInfill.mask(grid, l, None, Some(tm.clone())).unwrap();
    assert_eq!((count(&ti.image), count(&ti.text)), (0, 1));
    let ji = Scenario::JointInfill.mask(grid, l, None, Some(tm)).unwrap();
    assert_eq!((count(&ji.image), count(&ji.text)), (16, 1));
    assert!(Scenario::TextInfill.mask(grid, l, None, None).is_err());
    assert!(Scenario::ImageInfill.mask(grid, l, Some(vec![true; 5]), None).is_err());
    for s in Scenario::ALL {
        assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
    }
    assert!("text2image".parse::<Scenario>().is_err());
    assert_eq!(Scenario::Unconditional.default_guidance(2.0).mode, GuidanceMode::UnidiffuserFree);
    assert_eq!(Scenario::TextToImage.default_guidance(2.0).mode, GuidanceMode::MaskedCfg);
}

#[test]
fn center_half_layout() {
    let m = MaskSpec::center_half(8);
    for y in 0..8 {
        for x in 0..8 {
            assert_eq!(m[y * 8 + x], (2..6).contains(&y) && (2..6).contains(&x));
        }
    }
}

#[test]
fn mask_file_parsing() {
    let text = "# 2x2 grid\n1 0\n0 1\n";
    assert_eq!(parse_image_mask(text, 2).unwrap(), vec![true, false, false, true]);
    assert_eq!(parse_image_mask("10\n01", 2).unwrap(), vec![true, false, false, true]);
    assert!(parse_image_mask("1 0\n", 2).is_err());
    assert!(parse_image_mask("1 2\n0 1", 2).is_err());
    assert_eq!(parse_text_mask("1, 3", 4).unwrap(), vec![false, true, false, true]);
    assert!(parse_text_mask("4", 4).is_err());
    assert!(parse_text_mask("x", 4).is_err());
}

#[test]
fn repeat_batch_copies_examples() {
    let cfg = BackboneConfig::mini();
    let one = joint_state(&cfg, 1, 50);
    let many = repeat_batch(&one, 3);
    assert_eq!(many.batch().unwrap(), 3);
    for i in 0..3 {
        assert_eq!(many.image.as_ref().unwrap().index_axis(Axis(0), i), one.image.as_ref().unwrap().index_axis(Axis(0), 0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn infill_preserves_observations_for_any_mask(seed in 0u64..1000, steps in 1usize..=20) {
        let cfg = BackboneConfig::mini();
        let model = Affine(0.5, -0.1);
        let obs = joint_state(&cfg, 1, seed);
        let mask = random_mask(cfg.grid(), cfg.text_len, seed + 1);
        let out = joint_infill(&model, &obs, &mask, &short(), steps, &GuidanceConfig::masked(1.5), seed).unwrap();
        let p = cfg.patch_size;
        let (oi, xi) = (obs.image.as_ref().unwrap(), out.image.as_ref().unwrap());
        for (idx, v) in oi.indexed_iter() {
            if !mask.image.as_ref().unwrap()[(idx.2 / p) * cfg.grid() + idx.3 / p] {
                prop_assert_eq!(v.to_bits(), xi[idx].to_bits());
            }
        }
        let (ot, xt) = (obs.text.as_ref().unwrap(), out.text.as_ref().unwrap());
        for (idx, v) in ot.indexed_iter() {
            if !mask.text.as_ref().unwrap()[idx.1] {
                prop_assert_eq!(v.to_bits(), xt[idx].to_bits());
            }
        }
    }
}

/// Exact noise predictor for data concentrated at `c`: linear in x_t at
/// every level.
struct PointMass<'a> {
    c: f64,
    sched: &'a NoiseSchedule,
}

impl Denoiser<f64> for PointMass<'_> {
    fn predict(&self, x: &MultimodalState<f64>, t: &[usize]) -> psunet_core::Result<MultimodalState<f64>> {
        let ab = self.sched.alpha_bar(t[0]);
        Ok(x.map(|v| (v - ab.sqrt() * self.c) / (1.0 - ab).sqrt()))
    }
}

#[test]
fn strided_ddim_matches_the_dense_chain_for_a_linear_model() {
    let s = NoiseSchedule::standard();
    let model = PointMass { c: 0.4, sched: &s };
    let shape = StateShape { batch: 1, image: Some((1, 2, 2)), text: None };
    // 1000 steps is the ancestral chain, so build the dense DDIM path by hand.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
    let ddim = |ts: &[usize], mut x: Vec<f64>| {
        for w in ts.windows(2) {
            let (ab, abp) = (s.alpha_bar(w[0]), if w[1] == 0 { 1.0 } else { s.alpha_bar(w[1]) });
            x = x
                .iter()
                .map(|&v| {
                    let e = (v - ab.sqrt() * 0.4) / (1.0 - ab).sqrt();
                    abp.sqrt() * (v - (1.0 - ab).sqrt() * e) / ab.sqrt() + (1.0 - abp).sqrt() * e
                })
                .collect();
        }
        x
    };
    let dense_ts: Vec<usize> = (0..=1000).rev().collect();
    let dense = ddim(&dense_ts, x);
    let strided = unconditional_sample(&model, shape, &s, 50, 17, UncondVariant::Plain).unwrap();
    for (a, b) in strided.image.unwrap().iter().zip(&dense) {
        assert!((a - b).abs() <= 1e-3 * b.abs(), "{a} vs {b}");
    }
}
