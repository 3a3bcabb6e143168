use ndarray::{arr1, Array1, Array3, Array4};
use proptest::prelude::*;
use psunet_core::diffusion::*;
use psunet_core::state::{gaussian, MultimodalState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn linear(steps: usize, b0: f64, b1: f64) -> NoiseSchedule {
    NoiseSchedule::new(steps, b0, b1, BetaSchedule::Linear).unwrap()
}

#[test]
fn single_step_half_beta() {
    let s = NoiseSchedule::new(1, 0.5, 0.5, BetaSchedule::Linear).unwrap();
    assert_eq!(s.alpha_bar(1), 0.5);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert_eq!(s.posterior_var(1), 0.0);
}

#[test]
fn ten_step_products_match_hand_computation() {
    let s = linear(10, 0.01, 0.1);
    let mut prod = 1.0;
    for t in 1..=10 {
        let beta = 0.01 * t as f64;
        prod *= 1.0 - beta;
        assert!((s.beta(t) - beta).abs() < 1e-15, "beta {t}");
        assert!((s.alpha_bar(t) - prod).abs() < 1e-14, "alpha_bar {t}");
    }
    // ᾱ_10 = 0.99·0.98·…·0.90
    assert!((s.alpha_bar(10) - 0.565340858599765).abs() < 1e-12);
}

#[test]
fn standard_schedule_endpoints() {
    let s = NoiseSchedule::standard();
    assert_eq!(s.steps(), 1000);
    assert!((s.beta(1) - 0.00085).abs() < 1e-15);
    assert!((s.beta(1000) - 0.012).abs() < 1e-15);
    // Not close to zero: a small linear schedule leaves signal at t = T.
    assert!(s.alpha_bar(1000) > 1e-3 && s.alpha_bar(1000) < 2e-3);
}

#[test]
fn rejects_bad_schedules_and_timesteps() {
    assert!(NoiseSchedule::new(0, 0.1, 0.2, BetaSchedule::Linear).is_err());
    assert!(NoiseSchedule::new(10, 0.2, 0.1, BetaSchedule::Linear).is_err());
    assert!(NoiseSchedule::new(10, 0.0, 0.1, BetaSchedule::Linear).is_err());
    assert!(NoiseSchedule::new(10, 0.1, 1.0, BetaSchedule::Linear).is_err());
    assert!(NoiseSchedule::new(10, f64::NAN, 0.1, BetaSchedule::Linear).is_err());
    let s = linear(10, 0.01, 0.1);
    assert!(s.check_t(0).is_err());
    assert!(s.check_t(11).is_err());
    let x = arr1(&[1.0f64]);
    assert!(q_sample(x.view(), 0, x.view(), &s).is_err());
    assert!(q_sample(x.view(), 11, x.view(), &s).is_err());
}

#[test]
fn posterior_variance_formula() {
    let s = linear(50, 1e-3, 0.05);
    for t in 2..=50 {
        let want = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
        assert!((s.posterior_var(t) - want).abs() < 1e-15);
        assert!(s.posterior_var(t) <= s.beta(t));
    }
}

#[test]
fn forward_moments_within_three_standard_errors() {
    let s = NoiseSchedule::standard();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (t, x0) in [(1usize, 0.7f64), (250, -1.2), (1000, 0.4)] {
        let eps: Array1<f64> = gaussian(n, &mut rng);
        let x0s = Array1::from_elem(n, x0);
        let xt = q_sample(x0s.view(), t, eps.view(), &s).unwrap();
        let ab = s.alpha_bar(t);
        let mean = xt.mean().unwrap();
        let var = xt.var(1.0);
        let se_mean = ((1.0 - ab) / n as f64).sqrt();
        let se_var = (1.0 - ab) * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * x0).abs() < 3.0 * se_mean, "t={t} mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 3.0 * se_var, "t={t} var {var}");
    }
}

#[test]
fn ddpm_two_step_scalar_oracle() {
    let s = linear(2, 0.1, 0.3);
    // ᾱ1 = 0.9, ᾱ2 = 0.63
    let (x, e, z) = (arr1(&[0.8f64]), arr1(&[-0.5f64]), arr1(&[1.5f64]));
    let out = ddpm_reverse_step(x.view(), e.view(), 2, &s, Some(z.view())).unwrap();
    let mean = (0.8 - 0.3 / (1.0f64 - 0.63).sqrt() * -0.5) / 0.7f64.sqrt();
    let var: f64 = 0.3 * (1.0 - 0.9) / (1.0 - 0.63);
    assert!((out[0] - (mean + var.sqrt() * 1.5)).abs() < 1e-14);
    // No noise on the last step.
    let last = ddpm_reverse_step(x.view(), e.view(), 1, &s, Some(z.view())).unwrap();
    let want = (0.8 - 0.1 / 0.1f64.sqrt() * -0.5) / 0.9f64.sqrt();
    assert!((last[0] - want).abs() < 1e-14);
}

#[test]
fn ddpm_with_true_noise_at_t1_recovers_x0() {
    let s = NoiseSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0: Array3<f64> = gaussian((3, 4, 4), &mut rng);
    let eps: Array3<f64> = gaussian((3, 4, 4), &mut rng);
    let x1 = q_sample(x0.view(), 1, eps.view(), &s).unwrap();
    let back = ddpm_reverse_step(x1.view(), eps.view(), 1, &s, None).unwrap();
    for (a, b) in back.iter().zip(x0.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ddim_step_edge_cases() {
    let s = linear(10, 0.01, 0.1);
    let x = arr1(&[0.3f64, -0.2]);
    let e = arr1(&[0.1f64, 0.4]);
    assert_eq!(ddim_reverse_step(x.view(), e.view(), 5, 5, &s).unwrap(), x);
    assert!(ddim_reverse_step(x.view(), e.view(), 5, 6, &s).is_err());
    let x0 = ddim_reverse_step(x.view(), e.view(), 5, 0, &s).unwrap();
    assert_eq!(x0, predict_x0(x.view(), e.view(), 5, &s).unwrap());
}

#[test]
fn strided_timesteps_oracle() {
    let s = NoiseSchedule::standard();
    let ts = s.strided_timesteps(50).unwrap();
    let want: Vec<usize> = (1..=50).rev().map(|k| 20 * k).collect();
    assert_eq!(ts, want);
    let dense = s.strided_timesteps(1000).unwrap();
    assert_eq!(dense, (1..=1000).rev().collect::<Vec<_>>());
    assert_eq!(s.strided_timesteps(1).unwrap(), vec![1000]);
    assert!(s.strided_timesteps(0).is_err());
    assert!(s.strided_timesteps(1001).is_err());
    let odd = s.strided_timesteps(7).unwrap();
    assert_eq!(odd.len(), 7);
    assert!(odd.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(odd[0], 1000);
}

struct Zero;

impl Denoiser<f64> for Zero {
    fn predict(&self, x: &MultimodalState<f64>, _t: &[usize]) -> psunet_core::Result<MultimodalState<f64>> {
        Ok(x.zeros_like())
    }
}

#[test]
fn zero_predictor_loss_is_two() {
    let s = NoiseSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = 64;
    let x0 = MultimodalState::joint(
        gaussian::<f64, _, _, _>(Array4::<f64>::zeros((b, 3, 8, 8)).raw_dim(), &mut rng),
        gaussian::<f64, _, _, _>(Array3::<f64>::zeros((b, 12, 16)).raw_dim(), &mut rng),
    );
    let eps = x0.gaussian_like(&mut rng);
    let t: Vec<usize> = (0..b).map(|i| 1 + (i * 997) % 1000).collect();
    let l = joint_noise_loss(&Zero, &x0, &t, &eps, &s).unwrap();
    // Each term is a mean of squares of ~12k standard normals.
    assert!((l - 2.0).abs() < 0.06, "loss {l}");
}

#[test]
fn noise_mse_gradient_and_mode_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = MultimodalState::joint(
        gaussian::<f64, _, _, _>((1, 3, 4, 4), &mut rng),
        gaussian::<f64, _, _, _>((1, 5, 6), &mut rng),
    );
    let t = p.gaussian_like(&mut rng);
    let l = noise_mse(&p, &t).unwrap();
    let gi = l.grad.image.as_ref().unwrap();
    let (pi, ti) = (p.image.as_ref().unwrap(), t.image.as_ref().unwrap());
    let n = pi.len() as f64;
    for ((g, a), b) in gi.iter().zip(pi.iter()).zip(ti.iter()) {
        assert!((g - 2.0 * (a - b) / n).abs() < 1e-15);
    }
    assert!((l.value - l.image_term - l.text_term).abs() < 1e-15);
    let img_only = MultimodalState::image_only(pi.clone());
    assert!(noise_mse(&img_only, &img_only).is_err());
}

proptest! {
    #[test]
    fn alpha_bar_strictly_decreasing(steps in 1usize..400, b0 in 1e-5f64..0.05, extra in 0.0f64..0.5) {
        let b1 = (b0 + extra).min(0.9);
        let s = linear(steps, b0, b1);
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
            prop_assert!(s.beta(t) >= b0 - 1e-15 && s.beta(t) <= b1 + 1e-15);
        }
    }

    #[test]
    fn ddim_with_true_noise_is_exact(t in 1usize..=1000, frac in 0.0f64..1.0, x in -3.0f64..3.0, e in -3.0f64..3.0) {
        let s = NoiseSchedule::standard();
        let t_prev = (t as f64 * frac) as usize;
        let (x0, eps) = (arr1(&[x]), arr1(&[e]));
        let xt = q_sample(x0.view(), t, eps.view(), &s).unwrap();
        let stepped = ddim_reverse_step(xt.view(), eps.view(), t, t_prev, &s).unwrap();
        let want = if t_prev == 0 { x0.clone() } else { q_sample(x0.view(), t_prev, eps.view(), &s).unwrap() };
        prop_assert!((stepped[0] - want[0]).abs() < 1e-9 * (1.0 + want[0].abs()) / s.alpha_bar(t).sqrt());
    }

    #[test]
    fn q_sample_is_affine(t in 1usize..=1000, a in -2.0f64..2.0, b in -2.0f64..2.0, e in -2.0f64..2.0) {
        let s = NoiseSchedule::standard();
        let f = |x: f64| q_sample(arr1(&[x]).view(), t, arr1(&[e]).view(), &s).unwrap()[0];
        let lhs = f(a + b) - f(a) - f(b) + f(0.0);
        prop_assert!(lhs.abs() < 1e-12);
    }
}
