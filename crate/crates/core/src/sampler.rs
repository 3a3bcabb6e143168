//! Conditional and unconditional sampling by joint infilling with masked
//! classifier-free guidance.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_reverse_step, ddpm_reverse_step, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::state::{ActivationMode, MultimodalState};

/// Which positions are generated. `None` marks a modality absent from both
/// condition and generation; `true` entries are masked (to be generated).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// Row-major patch grid, `grid * grid` entries.
    pub image: Option<Vec<bool>>,
    /// One entry per text token position.
    pub text: Option<Vec<bool>>,
}

impl MaskSpec {
    pub fn all(grid: usize, text_len: usize, masked: bool) -> Self {
        Self {
            image: Some(vec![masked; grid * grid]),
            text: Some(vec![masked; text_len]),
        }
    }

    /// Masks the centred square of half the image's width and height.
    pub fn center_half(grid: usize) -> Vec<bool> {
        let lo = grid / 4;
        let hi = lo + grid / 2;
        let mut m = vec![false; grid * grid];
        for y in lo..hi {
            for x in lo..hi {
                m[y * grid + x] = true;
            }
        }
        m
    }

    pub fn text_positions(text_len: usize, positions: &[usize]) -> Result<Vec<bool>> {
        let mut m = vec![false; text_len];
        for &p in positions {
            if p >= text_len {
                return Err(Error::Config(format!(
                    "text mask index {p} out of range for text_len {text_len}"
                )));
            }
            m[p] = true;
        }
        Ok(m)
    }

    pub fn any_masked(&self) -> bool {
        let img = self.image.as_ref().is_some_and(|m| m.iter().any(|&b| b));
        let txt = self.text.as_ref().is_some_and(|m| m.iter().any(|&b| b));
        img || txt
    }

    pub fn any_observed(&self) -> bool {
        let img = self.image.as_ref().is_some_and(|m| m.iter().any(|&b| !b));
        let txt = self.text.as_ref().is_some_and(|m| m.iter().any(|&b| !b));
        img || txt
    }
}

/// Partial activation: a modality marked absent is skipped entirely.
pub fn activation_mode_for(mask: &MaskSpec) -> ActivationMode {
    match (mask.image.is_some(), mask.text.is_some()) {
        (true, false) => ActivationMode::ImageOnly,
        (false, true) => ActivationMode::TextOnly,
        _ => ActivationMode::Joint,
    }
}

/// Parses an image mask grid: one row per line of `0`/`1` characters
/// (whitespace ignored, `#` starts a comment line).
pub fn parse_image_mask(text: &str, grid: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(grid * grid);
    let mut rows = 0;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut n = 0;
        for ch in line.chars().filter(|c| !c.is_whitespace()) {
            match ch {
                '0' => out.push(false),
                '1' => out.push(true),
                other => {
                    return Err(Error::Config(format!("image mask: unexpected {other:?}")));
                }
            }
            n += 1;
        }
        if n != grid {
            return Err(Error::Config(format!(
                "image mask row {} has {n} cells, expected {grid}",
                rows + 1
            )));
        }
        rows += 1;
    }
    if rows != grid {
        return Err(Error::Config(format!("image mask has {rows} rows, expected {grid}")));
    }
    Ok(out)
}

/// Parses comma-separated masked token indices, e.g. `1,2,3`.
pub fn parse_text_mask(text: &str, text_len: usize) -> Result<Vec<bool>> {
    let mut idx = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        idx.push(
            part.parse::<usize>()
                .map_err(|_| Error::Config(format!("text mask: bad index {part:?}")))?,
        );
    }
    MaskSpec::text_positions(text_len, &idx)
}

pub fn load_image_mask(path: &Path, grid: usize) -> Result<Vec<bool>> {
    parse_image_mask(&std::fs::read_to_string(path)?, grid)
}

pub fn load_text_mask(path: &Path, text_len: usize) -> Result<Vec<bool>> {
    parse_text_mask(&std::fs::read_to_string(path)?, text_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    MaskedCfg,
    None,
    /// Per-modality guidance against forwards with the other modality
    /// replaced by noise; one joint plus one forward per modality.
    UnidiffuserFree,
}

/// Which forward receives the `(1 + w)` weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgConvention {
    /// `(1 + w)·ε_cond − w·ε_uncond`.
    #[default]
    Conditional,
    /// `(1 + w)·ε_uncond − w·ε_cond`.
    Substituted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub w: f64,
    pub mode: GuidanceMode,
    pub convention: CfgConvention,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 3.0,
            mode: GuidanceMode::MaskedCfg,
            convention: CfgConvention::Conditional,
        }
    }
}

impl GuidanceConfig {
    pub fn none() -> Self {
        Self {
            w: 0.0,
            mode: GuidanceMode::None,
            convention: CfgConvention::Conditional,
        }
    }

    pub fn masked(w: f64) -> Self {
        Self {
            w,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.w.is_finite() || self.w < 0.0 {
            return Err(Error::Config(format!("guidance scale must be finite and >= 0, got {}", self.w)));
        }
        Ok(())
    }
}

/// Independent random streams for one sampling run. The guidance stream is
/// separate so that turning guidance on or off never shifts the noise used by
/// the reverse chain.
#[derive(Debug, Clone)]
pub struct SamplerRng {
    pub chain: ChaCha8Rng,
    pub guidance: ChaCha8Rng,
}

impl SamplerRng {
    pub fn new(seed: u64) -> Self {
        let chain = ChaCha8Rng::seed_from_u64(seed);
        let mut guidance = ChaCha8Rng::seed_from_u64(seed);
        guidance.set_stream(1);
        Self { chain, guidance }
    }
}

/// Mask expanded to element granularity for a concrete state layout.
struct ElementMask {
    image: Option<Array2<bool>>,
    text: Option<Vec<bool>>,
}

impl ElementMask {
    fn new<F: Real>(mask: &MaskSpec, state: &MultimodalState<F>) -> Result<Self> {
        let image = match (&mask.image, &state.image) {
            (Some(m), Some(img)) => {
                let (h, w) = (img.shape()[2], img.shape()[3]);
                let grid = (m.len() as f64).sqrt().round() as usize;
                if grid * grid != m.len() || grid == 0 || h % grid != 0 || w % grid != 0 || h != w {
                    return Err(Error::Shape(format!(
                        "image mask of {} patches does not tile a {h}x{w} image",
                        m.len()
                    )));
                }
                let p = h / grid;
                Some(Array2::from_shape_fn((h, w), |(y, x)| m[(y / p) * grid + x / p]))
            }
            (None, None) => None,
            _ => {
                return Err(Error::Mode("image mask presence differs from the state".into()));
            }
        };
        let text = match (&mask.text, &state.text) {
            (Some(m), Some(txt)) => {
                if m.len() != txt.shape()[1] {
                    return Err(Error::Shape(format!(
                        "text mask has {} entries, state has {} tokens",
                        m.len(),
                        txt.shape()[1]
                    )));
                }
                Some(m.clone())
            }
            (None, None) => None,
            _ => return Err(Error::Mode("text mask presence differs from the state".into())),
        };
        Ok(Self { image, text })
    }

    /// Writes `src` into `dst` at observed (unmasked) positions.
    fn fill_observed<F: Real>(&self, dst: &mut MultimodalState<F>, src: &MultimodalState<F>) {
        if let (Some(m), Some(d), Some(s)) = (&self.image, dst.image.as_mut(), src.image.as_ref()) {
            for ((idx, v), &sv) in d.indexed_iter_mut().zip(s.iter()) {
                if !m[[idx.2, idx.3]] {
                    *v = sv;
                }
            }
        }
        if let (Some(m), Some(d), Some(s)) = (&self.text, dst.text.as_mut(), src.text.as_ref()) {
            for ((idx, v), &sv) in d.indexed_iter_mut().zip(s.iter()) {
                if !m[idx.1] {
                    *v = sv;
                }
            }
        }
    }

    /// Writes `src` into `dst` at masked positions.
    fn fill_masked<F: Real>(&self, dst: &mut MultimodalState<F>, src: &MultimodalState<F>) {
        if let (Some(m), Some(d), Some(s)) = (&self.image, dst.image.as_mut(), src.image.as_ref()) {
            for ((idx, v), &sv) in d.indexed_iter_mut().zip(s.iter()) {
                if m[[idx.2, idx.3]] {
                    *v = sv;
                }
            }
        }
        if let (Some(m), Some(d), Some(s)) = (&self.text, dst.text.as_mut(), src.text.as_ref()) {
            for ((idx, v), &sv) in d.indexed_iter_mut().zip(s.iter()) {
                if m[idx.1] {
                    *v = sv;
                }
            }
        }
    }
}

fn noised_to<F: Real>(
    observed: &MultimodalState<F>,
    eps: &MultimodalState<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<MultimodalState<F>> {
    let ab = sched.alpha_bar(t);
    let (s, n) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    observed.zip_with(eps, |x, e| s * x + n * e)
}

fn combine<F: Real>(
    primary: &MultimodalState<F>,
    secondary: &MultimodalState<F>,
    w: f64,
) -> Result<MultimodalState<F>> {
    let (a, b) = (F::of(1.0 + w), F::of(w));
    primary.zip_with(secondary, |p, s| a * p - b * s)
}

/// Masked classifier-free guidance for one step. `state` must already hold
/// the observed data noised to level `t` at unmasked positions. Issues two
/// forwards: the state as is, and the state with every unmasked position
/// replaced by fresh standard-normal noise.
pub fn masked_cfg_predict<F: Real, M, R>(
    model: &M,
    state: &MultimodalState<F>,
    mask: &MaskSpec,
    t: usize,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> Result<MultimodalState<F>>
where
    M: Denoiser<F> + ?Sized,
    R: rand::Rng + ?Sized,
{
    guidance.validate()?;
    let elem = ElementMask::new(mask, state)?;
    masked_cfg_with(model, state, &elem, t, guidance, rng)
}

fn masked_cfg_with<F: Real, M, R>(
    model: &M,
    state: &MultimodalState<F>,
    elem: &ElementMask,
    t: usize,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> Result<MultimodalState<F>>
where
    M: Denoiser<F> + ?Sized,
    R: rand::Rng + ?Sized,
{
    let ts = vec![t; state.batch()?];
    let cond = model.predict(state, &ts)?;
    let mut substituted = state.clone();
    elem.fill_observed(&mut substituted, &state.gaussian_like(rng));
    let uncond = model.predict(&substituted, &ts)?;
    match guidance.convention {
        CfgConvention::Conditional => combine(&cond, &uncond, guidance.w),
        CfgConvention::Substituted => combine(&uncond, &cond, guidance.w),
    }
}

fn unidiffuser_free<F: Real, M, R>(
    model: &M,
    state: &MultimodalState<F>,
    t: usize,
    w: f64,
    rng: &mut R,
) -> Result<MultimodalState<F>>
where
    M: Denoiser<F> + ?Sized,
    R: rand::Rng + ?Sized,
{
    let ts = vec![t; state.batch()?];
    let joint = model.predict(state, &ts)?;
    if state.mode()? != ActivationMode::Joint {
        return Ok(joint);
    }
    let noise = state.gaussian_like(rng);
    let mut no_text = state.clone();
    no_text.text = noise.text.clone();
    let mut no_image = state.clone();
    no_image.image = noise.image;
    let image_marginal = model.predict(&no_text, &ts)?;
    let text_marginal = model.predict(&no_image, &ts)?;
    let marginal = MultimodalState {
        image: image_marginal.image,
        text: text_marginal.text,
    };
    combine(&joint, &marginal, w)
}

fn guided_eps<F: Real, M: Denoiser<F> + ?Sized>(
    model: &M,
    state: &MultimodalState<F>,
    elem: &ElementMask,
    t: usize,
    guidance: &GuidanceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MultimodalState<F>> {
    match guidance.mode {
        GuidanceMode::None => model.predict(state, &vec![t; state.batch()?]),
        GuidanceMode::MaskedCfg => masked_cfg_with(model, state, elem, t, guidance, rng),
        GuidanceMode::UnidiffuserFree => unidiffuser_free(model, state, t, guidance.w, rng),
    }
}

/// Joint infilling. Masked positions start from pure noise and follow the
/// reverse chain (ancestral when `steps` equals the schedule length,
/// deterministic DDIM on a strided schedule otherwise). Unmasked positions
/// are re-noised from `observed` to the level of each step and set to
/// `observed` exactly at the end.
pub fn joint_infill<F: Real, M: Denoiser<F> + ?Sized>(
    model: &M,
    observed: &MultimodalState<F>,
    mask: &MaskSpec,
    sched: &NoiseSchedule,
    steps: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<MultimodalState<F>> {
    joint_infill_traced(model, observed, mask, sched, steps, guidance, seed, &mut |_, _| {})
}

/// [`joint_infill`] with a hook receiving `(t, state)` for the state entering
/// the forward at level `t`, and `(0, output)` at the end.
#[allow(clippy::too_many_arguments)]
pub fn joint_infill_traced<F: Real, M: Denoiser<F> + ?Sized>(
    model: &M,
    observed: &MultimodalState<F>,
    mask: &MaskSpec,
    sched: &NoiseSchedule,
    steps: usize,
    guidance: &GuidanceConfig,
    seed: u64,
    trace: &mut dyn FnMut(usize, &MultimodalState<F>),
) -> Result<MultimodalState<F>> {
    guidance.validate()?;
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let elem = ElementMask::new(mask, observed)?;
    if !mask.any_masked() {
        log::warn!("mask selects nothing to generate; returning the observation");
        return Ok(observed.clone());
    }
    let ancestral = steps == sched.steps();
    let schedule: Vec<usize> = if ancestral {
        (1..=sched.steps()).rev().collect()
    } else {
        sched.strided_timesteps(steps)?
    };
    let observed_any = mask.any_observed();
    let mut rng = SamplerRng::new(seed);

    let init = observed.gaussian_like(&mut rng.chain);
    let mut x = init.clone();
    if observed_any {
        elem.fill_observed(&mut x, &noised_to(observed, &init, schedule[0], sched)?);
    }

    for (i, &t) in schedule.iter().enumerate() {
        let t_prev = schedule.get(i + 1).copied().unwrap_or(0);
        trace(t, &x);
        let eps = guided_eps(model, &x, &elem, t, guidance, &mut rng.guidance)?;
        let z = (ancestral && t > 1).then(|| observed.gaussian_like(&mut rng.chain));
        let next = step_state(&x, &eps, t, t_prev, ancestral, z.as_ref(), sched)?;
        let mut stepped = x.clone();
        elem.fill_masked(&mut stepped, &next);
        if observed_any {
            if t_prev > 0 {
                let fresh = observed.gaussian_like(&mut rng.chain);
                elem.fill_observed(&mut stepped, &noised_to(observed, &fresh, t_prev, sched)?);
            } else {
                elem.fill_observed(&mut stepped, observed);
            }
        }
        x = stepped;
    }
    trace(0, &x);
    Ok(x)
}

fn step_state<F: Real>(
    x: &MultimodalState<F>,
    eps: &MultimodalState<F>,
    t: usize,
    t_prev: usize,
    ancestral: bool,
    z: Option<&MultimodalState<F>>,
    sched: &NoiseSchedule,
) -> Result<MultimodalState<F>> {
    fn pair<'a, T>(a: &'a Option<T>, b: &'a Option<T>, what: &str) -> Result<Option<(&'a T, &'a T)>> {
        match (a, b) {
            (Some(a), Some(b)) => Ok(Some((a, b))),
            (None, None) => Ok(None),
            _ => Err(Error::Mode(format!("{what} missing from the prediction"))),
        }
    }
    let mut out = MultimodalState {
        image: None,
        text: None,
    };
    if let Some((xi, ei)) = pair(&x.image, &eps.image, "image")? {
        let zi = z.and_then(|z| z.image.as_ref()).map(|a| a.view());
        out.image = Some(if ancestral {
            ddpm_reverse_step(xi.view(), ei.view(), t, sched, zi)?
        } else {
            ddim_reverse_step(xi.view(), ei.view(), t, t_prev, sched)?
        });
    }
    if let Some((xt, et)) = pair(&x.text, &eps.text, "text")? {
        let zt = z.and_then(|z| z.text.as_ref()).map(|a| a.view());
        out.text = Some(if ancestral {
            ddpm_reverse_step(xt.view(), et.view(), t, sched, zt)?
        } else {
            ddim_reverse_step(xt.view(), et.view(), t, t_prev, sched)?
        });
    }
    Ok(out)
}

/// Layout of a batch to sample from scratch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateShape {
    pub batch: usize,
    /// `(channels, height, width)`.
    pub image: Option<(usize, usize, usize)>,
    /// `(text_len, embed_dim)`.
    pub text: Option<(usize, usize)>,
}

impl StateShape {
    pub fn zeros<F: Real>(&self) -> MultimodalState<F> {
        MultimodalState {
            image: self
                .image
                .map(|(c, h, w)| ndarray::Array4::zeros((self.batch, c, h, w))),
            text: self
                .text
                .map(|(l, d)| ndarray::Array3::zeros((self.batch, l, d))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UncondVariant {
    /// One forward per step, no guidance.
    Plain,
    /// Unidiffuser's guidance against per-modality marginals at scale `w`.
    UnidiffuserFree { w: f64 },
}

/// Samples every present modality from noise.
pub fn unconditional_sample<F: Real, M: Denoiser<F> + ?Sized>(
    model: &M,
    shape: StateShape,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
    variant: UncondVariant,
) -> Result<MultimodalState<F>> {
    let template = shape.zeros::<F>();
    let grid_cells = |h: usize| h * h;
    let mask = MaskSpec {
        image: shape.image.map(|(_, h, _)| vec![true; grid_cells(h)]),
        text: shape.text.map(|(l, _)| vec![true; l]),
    };
    let guidance = match variant {
        UncondVariant::Plain => GuidanceConfig::none(),
        UncondVariant::UnidiffuserFree { w } => GuidanceConfig {
            w,
            mode: GuidanceMode::UnidiffuserFree,
            convention: CfgConvention::Conditional,
        },
    };
    joint_infill(model, &template, &mask, sched, steps, &guidance, seed)
}

/// The six generative scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "uncond")]
    Unconditional,
    #[serde(rename = "t2i")]
    TextToImage,
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "img-infill")]
    ImageInfill,
    #[serde(rename = "text-infill")]
    TextInfill,
    #[serde(rename = "joint-infill")]
    JointInfill,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Unconditional,
        Scenario::TextToImage,
        Scenario::ImageToText,
        Scenario::ImageInfill,
        Scenario::TextInfill,
        Scenario::JointInfill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Unconditional => "uncond",
            Scenario::TextToImage => "t2i",
            Scenario::ImageToText => "i2t",
            Scenario::ImageInfill => "img-infill",
            Scenario::TextInfill => "text-infill",
            Scenario::JointInfill => "joint-infill",
        }
    }

    pub fn needs_image(self) -> bool {
        matches!(
            self,
            Scenario::ImageToText | Scenario::ImageInfill | Scenario::TextInfill | Scenario::JointInfill
        )
    }

    pub fn needs_caption(self) -> bool {
        matches!(
            self,
            Scenario::TextToImage | Scenario::ImageInfill | Scenario::TextInfill | Scenario::JointInfill
        )
    }

    pub fn generates_image(self) -> bool {
        matches!(
            self,
            Scenario::Unconditional | Scenario::TextToImage | Scenario::ImageInfill | Scenario::JointInfill
        )
    }

    pub fn generates_text(self) -> bool {
        matches!(
            self,
            Scenario::Unconditional | Scenario::ImageToText | Scenario::TextInfill | Scenario::JointInfill
        )
    }

    /// Default guidance: masked CFG, except unconditional generation which
    /// falls back to per-modality guidance.
    pub fn default_guidance(self, w: f64) -> GuidanceConfig {
        match self {
            Scenario::Unconditional => GuidanceConfig {
                w,
                mode: GuidanceMode::UnidiffuserFree,
                convention: CfgConvention::Conditional,
            },
            _ => GuidanceConfig::masked(w),
        }
    }

    /// Preset mask. Infilling scenarios default to the centre-half image mask
    /// and use `text_masked` (token positions) for partial captions.
    pub fn mask(
        self,
        grid: usize,
        text_len: usize,
        image_mask: Option<Vec<bool>>,
        text_masked: Option<Vec<bool>>,
    ) -> Result<MaskSpec> {
        let all = |n: usize, v: bool| vec![v; n];
        let g2 = grid * grid;
        let img_partial = image_mask.unwrap_or_else(|| MaskSpec::center_half(grid));
        let need_text = |m: Option<Vec<bool>>| {
            m.ok_or_else(|| Error::Config(format!("scenario {} needs a text mask", self.name())))
        };
        let spec = match self {
            Scenario::Unconditional => MaskSpec::all(grid, text_len, true),
            Scenario::TextToImage => MaskSpec {
                image: Some(all(g2, true)),
                text: Some(all(text_len, false)),
            },
            Scenario::ImageToText => MaskSpec {
                image: Some(all(g2, false)),
                text: Some(all(text_len, true)),
            },
            Scenario::ImageInfill => MaskSpec {
                image: Some(img_partial),
                text: Some(all(text_len, false)),
            },
            Scenario::TextInfill => MaskSpec {
                image: Some(all(g2, false)),
                text: Some(need_text(text_masked)?),
            },
            Scenario::JointInfill => MaskSpec {
                image: Some(img_partial),
                text: Some(need_text(text_masked)?),
            },
        };
        if spec.image.as_ref().is_some_and(|m| m.len() != g2)
            || spec.text.as_ref().is_some_and(|m| m.len() != text_len)
        {
            return Err(Error::Shape("mask does not match the model geometry".into()));
        }
        Ok(spec)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

/// Replicates one example `batch` times along the leading axis.
pub fn repeat_batch<F: Real>(state: &MultimodalState<F>, batch: usize) -> MultimodalState<F> {
    let rep4 = |a: &ndarray::Array4<F>| {
        let views: Vec<_> = (0..batch).map(|_| a.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("same shapes")
    };
    let rep3 = |a: &ndarray::Array3<F>| {
        let views: Vec<_> = (0..batch).map(|_| a.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("same shapes")
    };
    MultimodalState {
        image: state.image.as_ref().map(rep4),
        text: state.text.as_ref().map(rep3),
    }
}
