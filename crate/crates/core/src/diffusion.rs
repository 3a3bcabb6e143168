//! Noise schedules, forward corruption, reverse-step algebra and the joint
//! noise-prediction loss.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`, and `ᾱ_0 = 1` so that a
//! step to `t_prev = 0` lands on clean data.

use ndarray::{Array, ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::state::MultimodalState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// β interpolated linearly between the two endpoints.
    #[default]
    Linear,
}

/// Precomputed β, α, ᾱ and posterior variances, stored in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: BetaSchedule,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: BetaSchedule) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::Config("beta endpoints must be finite".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = match kind {
            BetaSchedule::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0f64;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    /// 1000-step linear schedule from 0.00085 to 0.012.
    pub fn standard() -> Self {
        Self::new(1000, 0.00085, 0.012, BetaSchedule::Linear).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn kind(&self) -> BetaSchedule {
        self.kind
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Timestep {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t).
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Descending timesteps for a `steps`-step sampler, evenly strided over
    /// `1..=T`. `steps == T` gives the dense chain `T, T−1, …, 1`.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::Config(format!(
                "sampling steps must be in 1..={total}, got {steps}"
            )));
        }
        let mut ts: Vec<usize> = (1..=steps)
            .rev()
            .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

fn check_shapes(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Closed-form forward corruption: √ᾱ_t · x0 + √(1−ᾱ_t) · eps.
pub fn q_sample<F: Real, D: Dimension>(
    x0: ArrayView<F, D>,
    t: usize,
    eps: ArrayView<F, D>,
    sched: &NoiseSchedule,
) -> Result<Array<F, D>> {
    sched.check_t(t)?;
    check_shapes(x0.shape(), eps.shape(), "q_sample")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    Ok(Zip::from(&x0).and(&eps).map_collect(|&x, &e| a * x + b * e))
}

/// One ancestral step of the ε-parameterized reverse chain with fixed
/// posterior variance β̃_t. `z` is ignored at `t = 1`.
pub fn ddpm_reverse_step<F: Real, D: Dimension>(
    x_t: ArrayView<F, D>,
    eps_hat: ArrayView<F, D>,
    t: usize,
    sched: &NoiseSchedule,
    z: Option<ArrayView<F, D>>,
) -> Result<Array<F, D>> {
    sched.check_t(t)?;
    check_shapes(x_t.shape(), eps_hat.shape(), "ddpm step")?;
    let inv_sqrt_alpha = F::of(1.0 / sched.alpha(t).sqrt());
    let eps_coef = F::of(sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt());
    let mut out = Zip::from(&x_t)
        .and(&eps_hat)
        .map_collect(|&x, &e| inv_sqrt_alpha * (x - eps_coef * e));
    if t > 1 {
        if let Some(z) = z {
            check_shapes(x_t.shape(), z.shape(), "ddpm noise")?;
            let sigma = F::of(sched.posterior_var(t).sqrt());
            out.zip_mut_with(&z, |o, &n| *o += sigma * n);
        }
    }
    Ok(out)
}

/// Predicted clean sample (x_t − √(1−ᾱ_t)·eps_hat)/√ᾱ_t.
pub fn predict_x0<F: Real, D: Dimension>(
    x_t: ArrayView<F, D>,
    eps_hat: ArrayView<F, D>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<F, D>> {
    sched.check_t(t)?;
    check_shapes(x_t.shape(), eps_hat.shape(), "predict_x0")?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    Ok(Zip::from(&x_t).and(&eps_hat).map_collect(|&x, &e| (x - n * e) / s))
}

/// Deterministic DDIM update from `t` to `t_prev`. `t_prev == t` returns
/// `x_t` unchanged; `t_prev = 0` returns the predicted clean sample.
pub fn ddim_reverse_step<F: Real, D: Dimension>(
    x_t: ArrayView<F, D>,
    eps_hat: ArrayView<F, D>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Array<F, D>> {
    sched.check_t(t)?;
    if t_prev > t {
        return Err(Error::Config(format!(
            "ddim step needs t_prev <= t, got t={t} t_prev={t_prev}"
        )));
    }
    check_shapes(x_t.shape(), eps_hat.shape(), "ddim step")?;
    if t_prev == t {
        return Ok(x_t.to_owned());
    }
    let x0 = predict_x0(x_t, eps_hat.view(), t, sched)?;
    let abp = sched.alpha_bar(t_prev);
    let (s, n) = (F::of(abp.sqrt()), F::of((1.0 - abp).sqrt()));
    Ok(Zip::from(&x0).and(&eps_hat).map_collect(|&x, &e| s * x + n * e))
}

/// Value and gradient of the joint noise-prediction loss.
#[derive(Debug, Clone)]
pub struct NoiseLoss<F: Real> {
    pub value: F,
    pub image_term: F,
    pub text_term: F,
    /// dL/d(prediction), laid out like the prediction.
    pub grad: MultimodalState<F>,
}

/// Per-modality mean squared error, summed over the two modalities.
pub fn noise_mse<F: Real>(
    pred: &MultimodalState<F>,
    target: &MultimodalState<F>,
) -> Result<NoiseLoss<F>> {
    let (Some(pi), Some(pt)) = (&pred.image, &pred.text) else {
        return Err(Error::Mode("joint loss needs both modalities in the prediction".into()));
    };
    let (Some(ti), Some(tt)) = (&target.image, &target.text) else {
        return Err(Error::Mode("joint loss needs both modalities in the target".into()));
    };
    check_shapes(pi.shape(), ti.shape(), "image loss")?;
    check_shapes(pt.shape(), tt.shape(), "text loss")?;

    let n_img = F::of(pi.len() as f64);
    let n_txt = F::of(pt.len() as f64);
    let two = F::of(2.0);
    let mut gi = pi - ti;
    let mut gt = pt - tt;
    let li = gi.iter().map(|&d| d * d).sum::<F>() / n_img;
    let lt = gt.iter().map(|&d| d * d).sum::<F>() / n_txt;
    gi.mapv_inplace(|d| two * d / n_img);
    gt.mapv_inplace(|d| two * d / n_txt);
    let value = li + lt;
    if !value.is_finite() {
        return Err(Error::NonFinite("noise loss".into()));
    }
    Ok(NoiseLoss {
        value,
        image_term: li,
        text_term: lt,
        grad: MultimodalState::joint(gi, gt),
    })
}

/// Corrupts both modalities to their per-example timestep.
pub fn q_sample_state<F: Real>(
    x0: &MultimodalState<F>,
    t: &[usize],
    eps: &MultimodalState<F>,
    sched: &NoiseSchedule,
) -> Result<MultimodalState<F>> {
    if !x0.same_layout(eps) {
        return Err(Error::Shape("noise layout differs from data".into()));
    }
    let batch = x0.batch()?;
    if t.len() != batch {
        return Err(Error::Shape(format!("{} timesteps for batch {batch}", t.len())));
    }
    let mut out = x0.clone();
    for (b, &tb) in t.iter().enumerate() {
        sched.check_t(tb)?;
        let ab = sched.alpha_bar(tb);
        let (s, n) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        if let (Some(o), Some(e)) = (out.image.as_mut(), eps.image.as_ref()) {
            let mut ob = o.index_axis_mut(ndarray::Axis(0), b);
            ob.zip_mut_with(&e.index_axis(ndarray::Axis(0), b), |x, &z| *x = s * *x + n * z);
        }
        if let (Some(o), Some(e)) = (out.text.as_mut(), eps.text.as_ref()) {
            let mut ob = o.index_axis_mut(ndarray::Axis(0), b);
            ob.zip_mut_with(&e.index_axis(ndarray::Axis(0), b), |x, &z| *x = s * *x + n * z);
        }
    }
    Ok(out)
}

/// Anything that predicts the noise in a multimodal state.
pub trait Denoiser<F: Real> {
    fn predict(&self, x_t: &MultimodalState<F>, t: &[usize]) -> Result<MultimodalState<F>>;
}

/// The joint training objective evaluated for one batch: corrupt `x0` with
/// `eps` at `t`, predict, and score.
pub fn joint_noise_loss<F: Real, M: Denoiser<F> + ?Sized>(
    model: &M,
    x0: &MultimodalState<F>,
    t: &[usize],
    eps: &MultimodalState<F>,
    sched: &NoiseSchedule,
) -> Result<F> {
    if x0.image.is_none() || x0.text.is_none() {
        return Err(Error::Mode("joint loss needs both modalities".into()));
    }
    if !x0.all_finite() || !eps.all_finite() {
        return Err(Error::NonFinite("loss inputs".into()));
    }
    let x_t = q_sample_state(x0, t, eps, sched)?;
    let pred = model.predict(&x_t, t)?;
    Ok(noise_mse(&pred, eps)?.value)
}

/// Serializable schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaSchedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            kind: BetaSchedule::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}
