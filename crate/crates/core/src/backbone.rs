//! The partially shared U-Net noise predictor and the U-ViT-multi baseline.
//!
//! Token layout per example:
//!
//! * image branch: `[time, patch_0 .. patch_{P-1}]`
//! * text branch:  `[time, word_0 .. word_{L-1}]`
//! * shared stack: `[time, patches.., words..]` (inactive modality omitted)
//!
//! Each stack gets a fresh copy of the time token; the time row coming out of
//! a stack is dropped. The U-ViT-multi baseline is the same network with
//! zero-depth modality branches, so tokens meet in the shared stack right
//! after the input embedders.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{
    Block, BlockCache, Branch, Ctx, Family, Grads, Init, LayerNorm, Linear, LnCache, ParamId,
    ParamStore, SkipCache, SkipFuse,
};
use crate::real::Real;
use crate::state::{ActivationMode, MultimodalState};

fn default_mlp_ratio() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_word_dim() -> usize {
    64
}

/// Every shape in the backbone follows from this record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub n_shared: usize,
    pub n_image_down: usize,
    pub n_image_up: usize,
    pub n_text_down: usize,
    pub n_text_up: usize,
    pub patch_size: usize,
    pub image_channels: usize,
    pub image_hw: usize,
    pub n_heads: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_word_dim")]
    pub word_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Learned absolute positional embeddings per modality.
    #[serde(default = "default_true")]
    pub positional: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    PsUnet,
    UvitMulti,
}

impl BackboneConfig {
    /// 32×32×3 pixel latent, patch 4, width 128, 5 shared blocks, image 2+2,
    /// text 1+1.
    pub fn desk() -> Self {
        Self {
            embed_dim: 128,
            n_shared: 5,
            n_image_down: 2,
            n_image_up: 2,
            n_text_down: 1,
            n_text_up: 1,
            patch_size: 4,
            image_channels: 3,
            image_hw: 32,
            n_heads: 4,
            text_len: 12,
            vocab_size: 23,
            word_dim: 64,
            mlp_ratio: 4,
            positional: true,
        }
    }

    /// U-ViT-multi at desk width with a parameter budget matched to
    /// [`BackboneConfig::desk`].
    pub fn desk_uvit() -> Self {
        Self {
            n_shared: 11,
            n_image_down: 0,
            n_image_up: 0,
            n_text_down: 0,
            n_text_up: 0,
            ..Self::desk()
        }
    }

    /// Full-scale shapes: 4×32×32 latent, patch 2, width 768, 9 shared
    /// blocks, image 4+4, text 2+2.
    pub fn full() -> Self {
        Self {
            embed_dim: 768,
            n_shared: 9,
            n_image_down: 4,
            n_image_up: 4,
            n_text_down: 2,
            n_text_up: 2,
            patch_size: 2,
            image_channels: 4,
            image_hw: 32,
            n_heads: 12,
            text_len: 77,
            vocab_size: 23,
            word_dim: 64,
            mlp_ratio: 4,
            positional: true,
        }
    }

    /// The 17-block U-ViT-multi baseline at full scale.
    pub fn full_uvit() -> Self {
        Self {
            n_shared: 17,
            n_image_down: 0,
            n_image_up: 0,
            n_text_down: 0,
            n_text_up: 0,
            ..Self::full()
        }
    }

    /// Tiny network for finite-difference checks.
    pub fn mini() -> Self {
        Self {
            embed_dim: 16,
            n_shared: 2,
            n_image_down: 1,
            n_image_up: 1,
            n_text_down: 1,
            n_text_up: 1,
            patch_size: 4,
            image_channels: 3,
            image_hw: 8,
            n_heads: 2,
            text_len: 4,
            vocab_size: 23,
            word_dim: 8,
            mlp_ratio: 2,
            positional: true,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "desk_uvit" => Some(Self::desk_uvit()),
            "full" => Some(Self::full()),
            "full_uvit" => Some(Self::full_uvit()),
            "mini" => Some(Self::mini()),
            _ => None,
        }
    }

    pub fn arch(&self) -> Arch {
        if self.n_image_down == 0 && self.n_text_down == 0 {
            Arch::UvitMulti
        } else {
            Arch::PsUnet
        }
    }

    pub fn grid(&self) -> usize {
        self.image_hw / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch_size * self.patch_size
    }

    /// Blocks an image token passes through.
    pub fn image_path_layers(&self) -> usize {
        self.n_image_down + self.n_shared + self.n_image_up
    }

    /// Blocks a text token passes through.
    pub fn text_path_layers(&self) -> usize {
        self.n_text_down + self.n_shared + self.n_text_up
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim must be positive and even, got {}", self.embed_dim));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            ));
        }
        if self.n_shared == 0 {
            return bad("need at least one shared block".into());
        }
        if self.n_image_down != self.n_image_up || self.n_text_down != self.n_text_up {
            return bad("down and up depths must match per modality".into());
        }
        if self.n_image_down < self.n_text_down {
            return bad(format!(
                "image branch ({}) must be at least as deep as text branch ({})",
                self.n_image_down, self.n_text_down
            ));
        }
        if self.patch_size == 0 || self.image_hw == 0 || self.image_hw % self.patch_size != 0 {
            return bad(format!(
                "image_hw {} not divisible by patch_size {}",
                self.image_hw, self.patch_size
            ));
        }
        if self.image_channels == 0 || self.text_len == 0 || self.mlp_ratio == 0 {
            return bad("channels, text_len and mlp_ratio must be positive".into());
        }
        if self.vocab_size < 3 || self.word_dim == 0 {
            return bad("vocabulary needs at least one word plus EOS and PAD".into());
        }
        Ok(())
    }
}

/// Which long-skip family to ablate in a probed forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipFamily {
    Shared,
    Image,
    Text,
}

/// Instrumentation knobs for structural tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct Probe {
    /// Replace every skip tensor of this family with zeros before fusion.
    pub ablate: Option<SkipFamily>,
}

#[derive(Debug, Clone)]
struct Head {
    norm: LayerNorm,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct UpLayer {
    fuse: SkipFuse,
    block: Block,
}

/// Noise-prediction backbone with parameters in `F` precision.
#[derive(Debug, Clone)]
pub struct Backbone<F: Real> {
    cfg: BackboneConfig,
    store: ParamStore<F>,
    time_embed: Linear,
    image_embed: Linear,
    image_pos: Option<ParamId>,
    image_type: ParamId,
    text_embed: Linear,
    text_pos: Option<ParamId>,
    text_type: ParamId,
    image_down: Vec<Block>,
    text_down: Vec<Block>,
    shared: Vec<Block>,
    shared_skips: Vec<SkipFuse>,
    image_up: Vec<UpLayer>,
    text_up: Vec<UpLayer>,
    image_head: Head,
    text_head: Head,
}

/// Builds a PS-U-Net with deterministic initialization from `seed`.
pub fn build_ps_unet<F: Real>(cfg: &BackboneConfig, seed: u64) -> Result<Backbone<F>> {
    Backbone::new(cfg.clone(), seed)
}

/// Builds the all-shared U-ViT-multi baseline.
pub fn build_uvit_multi<F: Real>(cfg: &BackboneConfig, seed: u64) -> Result<Backbone<F>> {
    if cfg.n_image_down != 0 || cfg.n_image_up != 0 || cfg.n_text_down != 0 || cfg.n_text_up != 0
    {
        return Err(Error::Config(
            "U-ViT-multi has no modality-specific blocks; set all branch depths to 0".into(),
        ));
    }
    Backbone::new(cfg.clone(), seed)
}

/// Per-stack saved state for backward.
pub struct ForwardCache<F: Real> {
    mode: ActivationMode,
    batch: usize,
    time_in: Array2<F>,
    patches: Option<Array2<F>>,
    text_in: Option<Array2<F>>,
    image_down: Vec<BlockCache<F>>,
    text_down: Vec<BlockCache<F>>,
    shared: Vec<(Option<SkipCache<F>>, BlockCache<F>)>,
    image_up: Vec<(SkipCache<F>, BlockCache<F>)>,
    text_up: Vec<(SkipCache<F>, BlockCache<F>)>,
    image_head: Option<(LnCache<F>, Array2<F>)>,
    text_head: Option<(LnCache<F>, Array2<F>)>,
    ablate: Option<SkipFamily>,
}

/// Concatenates per-example segments: for every example `b`, rows of each
/// part `(tensor, rows_per_example)` are laid out in order.
fn interleave<F: Real>(parts: &[(&Array2<F>, usize)], batch: usize) -> Array2<F> {
    let per: usize = parts.iter().map(|(_, n)| n).sum();
    let dim = parts[0].0.ncols();
    let mut out = Array2::zeros((batch * per, dim));
    for b in 0..batch {
        let mut off = b * per;
        for (x, n) in parts {
            out.slice_mut(s![off..off + n, ..])
                .assign(&x.slice(s![b * n..(b + 1) * n, ..]));
            off += n;
        }
    }
    out
}

/// Inverse of [`interleave`].
fn deinterleave<F: Real>(x: &Array2<F>, sizes: &[usize], batch: usize) -> Vec<Array2<F>> {
    let per: usize = sizes.iter().sum();
    let dim = x.ncols();
    let mut outs: Vec<Array2<F>> = sizes.iter().map(|&n| Array2::zeros((batch * n, dim))).collect();
    for b in 0..batch {
        let mut off = b * per;
        for (o, &n) in outs.iter_mut().zip(sizes) {
            o.slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&x.slice(s![off..off + n, ..]));
            off += n;
        }
    }
    outs
}

/// Sinusoidal embedding of integer timesteps, `(batch, dim)`.
pub fn timestep_embedding<F: Real>(t: &[usize], dim: usize) -> Array2<F> {
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    for (b, &tb) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = tb as f64 * freq;
            out[[b, i]] = F::of(arg.cos());
            out[[b, half + i]] = F::of(arg.sin());
        }
    }
    out
}

/// `(B, C, H, W)` image to `(B * P, C * p * p)` patch rows.
pub fn patchify<F: Real>(img: &Array4<F>, patch: usize) -> Array2<F> {
    let (b, c, h, w) = img.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((b * gh * gw, c * patch * patch));
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                let row = bi * gh * gw + py * gw + px;
                for ci in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            out[[row, (ci * patch + dy) * patch + dx]] =
                                img[[bi, ci, py * patch + dy, px * patch + dx]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Real>(
    rows: &Array2<F>,
    batch: usize,
    channels: usize,
    hw: usize,
    patch: usize,
) -> Array4<F> {
    let g = hw / patch;
    let mut out = Array4::zeros((batch, channels, hw, hw));
    for bi in 0..batch {
        for py in 0..g {
            for px in 0..g {
                let row = bi * g * g + py * g + px;
                for ci in 0..channels {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            out[[bi, ci, py * patch + dy, px * patch + dx]] =
                                rows[[row, (ci * patch + dy) * patch + dx]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_rows_tiled<F: Real>(x: &mut Array2<F>, table: &ndarray::ArrayView2<F>) {
    let n = table.nrows();
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row += &table.row(i % n);
    }
}

fn sum_rows_tiled<F: Real>(dx: &Array2<F>, n: usize) -> Array2<F> {
    let mut g = Array2::zeros((n, dx.ncols()));
    for (i, row) in dx.rows().into_iter().enumerate() {
        let mut gr = g.row_mut(i % n);
        gr += &row;
    }
    g
}

impl<F: Real> Backbone<F> {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let st = &mut store;
        let d = cfg.embed_dim;
        let (h, r) = (cfg.n_heads, cfg.mlp_ratio);

        let time_embed = Linear::new(st, "time_embed", Family::TimeEmbed, d, d, 0.02, rng);
        let image_embed =
            Linear::new(st, "image_embed", Family::ImageEmbed, cfg.patch_dim(), d, 0.02, rng);
        let image_pos = cfg.positional.then(|| {
            st.add("image_pos", Family::ImageEmbed, &[cfg.n_patches(), d], Init::Normal(0.02), rng)
        });
        let image_type = st.add("image_type", Family::ImageEmbed, &[d], Init::Normal(0.02), rng);
        let text_embed = Linear::new(st, "text_embed", Family::TextEmbed, d, d, 0.02, rng);
        let text_pos = cfg.positional.then(|| {
            st.add("text_pos", Family::TextEmbed, &[cfg.text_len, d], Init::Normal(0.02), rng)
        });
        let text_type = st.add("text_type", Family::TextEmbed, &[d], Init::Normal(0.02), rng);

        let image_down = (0..cfg.n_image_down)
            .map(|i| Block::new(st, &format!("image_down.{i}"), Family::ImageDown, d, h, r, rng))
            .collect();
        let text_down = (0..cfg.n_text_down)
            .map(|i| Block::new(st, &format!("text_down.{i}"), Family::TextDown, d, h, r, rng))
            .collect();
        let shared = (0..cfg.n_shared)
            .map(|i| Block::new(st, &format!("shared.{i}"), Family::Shared, d, h, r, rng))
            .collect();
        let shared_skips = (0..cfg.n_shared / 2)
            .map(|i| SkipFuse::new(st, &format!("shared_skip.{i}"), Family::SharedSkip, d, rng))
            .collect();
        let image_up = (0..cfg.n_image_up)
            .map(|j| UpLayer {
                fuse: SkipFuse::new(st, &format!("image_skip.{j}"), Family::ImageSkip, d, rng),
                block: Block::new(st, &format!("image_up.{j}"), Family::ImageUp, d, h, r, rng),
            })
            .collect();
        let text_up = (0..cfg.n_text_up)
            .map(|j| UpLayer {
                fuse: SkipFuse::new(st, &format!("text_skip.{j}"), Family::TextSkip, d, rng),
                block: Block::new(st, &format!("text_up.{j}"), Family::TextUp, d, h, r, rng),
            })
            .collect();
        let image_head = Head {
            norm: LayerNorm::new(st, "image_head.norm", Family::ImageHead, d, rng),
            proj: Linear::new(st, "image_head.proj", Family::ImageHead, d, cfg.patch_dim(), 0.02, rng),
        };
        let text_head = Head {
            norm: LayerNorm::new(st, "text_head.norm", Family::TextHead, d, rng),
            proj: Linear::new(st, "text_head.proj", Family::TextHead, d, d, 0.02, rng),
        };

        Ok(Self {
            cfg,
            store,
            time_embed,
            image_embed,
            image_pos,
            image_type,
            text_embed,
            text_pos,
            text_type,
            image_down,
            text_down,
            shared,
            shared_skips,
            image_up,
            text_up,
            image_head,
            text_head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn arch(&self) -> Arch {
        self.cfg.arch()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Trainable parameter count for the blocks that run in `mode`.
    pub fn param_count(&self, mode: ActivationMode) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| branch_active(p.family.branch(), mode))
            .map(|(_, p)| p.numel())
            .sum()
    }

    /// Converts every parameter to another precision.
    pub fn cast<G: Real>(&self) -> Backbone<G> {
        Backbone {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            time_embed: self.time_embed.clone(),
            image_embed: self.image_embed.clone(),
            image_pos: self.image_pos,
            image_type: self.image_type,
            text_embed: self.text_embed.clone(),
            text_pos: self.text_pos,
            text_type: self.text_type,
            image_down: self.image_down.clone(),
            text_down: self.text_down.clone(),
            shared: self.shared.clone(),
            shared_skips: self.shared_skips.clone(),
            image_up: self.image_up.clone(),
            text_up: self.text_up.clone(),
            image_head: self.image_head.clone(),
            text_head: self.text_head.clone(),
        }
    }

    fn check_input(&self, x: &MultimodalState<F>, t: &[usize], mode: ActivationMode) -> Result<usize> {
        let cfg = &self.cfg;
        if mode.uses_image() && x.image.is_none() {
            return Err(Error::Mode(format!("{} mode needs an image", mode.name())));
        }
        if mode.uses_text() && x.text.is_none() {
            return Err(Error::Mode(format!("{} mode needs text", mode.name())));
        }
        let mut batch = None;
        if mode.uses_image() {
            let img = x.image.as_ref().expect("checked");
            let want = [img.shape()[0], cfg.image_channels, cfg.image_hw, cfg.image_hw];
            if img.shape() != want {
                return Err(Error::Shape(format!(
                    "image {:?}, expected (batch, {}, {}, {})",
                    img.shape(),
                    cfg.image_channels,
                    cfg.image_hw,
                    cfg.image_hw
                )));
            }
            batch = Some(img.shape()[0]);
        }
        if mode.uses_text() {
            let txt = x.text.as_ref().expect("checked");
            let want = [txt.shape()[0], cfg.text_len, cfg.embed_dim];
            if txt.shape() != want {
                return Err(Error::Shape(format!(
                    "text {:?}, expected (batch, {}, {})",
                    txt.shape(),
                    cfg.text_len,
                    cfg.embed_dim
                )));
            }
            if let Some(b) = batch {
                if b != txt.shape()[0] {
                    return Err(Error::Shape("image and text batch sizes differ".into()));
                }
            }
            batch = Some(txt.shape()[0]);
        }
        let batch = batch.expect("some modality active");
        if t.len() != batch {
            return Err(Error::Shape(format!("{} timesteps for batch {batch}", t.len())));
        }
        Ok(batch)
    }

    /// Noise prediction for the modalities active in `mode`.
    pub fn forward(
        &self,
        x: &MultimodalState<F>,
        t: &[usize],
        mode: ActivationMode,
    ) -> Result<MultimodalState<F>> {
        let ctx = Ctx::new(&self.store);
        Ok(self.run(&ctx, x, t, mode, Probe::default())?.0)
    }

    /// Forward pass that keeps activations for [`Backbone::backward`].
    pub fn forward_train(
        &self,
        x: &MultimodalState<F>,
        t: &[usize],
        mode: ActivationMode,
    ) -> Result<(MultimodalState<F>, ForwardCache<F>)> {
        let ctx = Ctx::new(&self.store);
        self.run(&ctx, x, t, mode, Probe::default())
    }

    /// Forward pass with instrumentation. Returns the prediction and a flag
    /// per parameter telling whether it was read.
    pub fn forward_probed(
        &self,
        x: &MultimodalState<F>,
        t: &[usize],
        mode: ActivationMode,
        probe: Probe,
    ) -> Result<(MultimodalState<F>, Vec<bool>)> {
        let ctx = Ctx::tracing(&self.store);
        let (out, _) = self.run(&ctx, x, t, mode, probe)?;
        Ok((out, ctx.touched().expect("tracing context")))
    }

    fn run(
        &self,
        ctx: &Ctx<F>,
        x: &MultimodalState<F>,
        t: &[usize],
        mode: ActivationMode,
        probe: Probe,
    ) -> Result<(MultimodalState<F>, ForwardCache<F>)> {
        let batch = self.check_input(x, t, mode)?;
        let cfg = &self.cfg;
        let (np, lt) = (cfg.n_patches(), cfg.text_len);

        let time_in = timestep_embedding::<F>(t, cfg.embed_dim);
        let te = self.time_embed.forward(ctx, &time_in);

        let mut cache = ForwardCache {
            mode,
            batch,
            time_in,
            patches: None,
            text_in: None,
            image_down: Vec::new(),
            text_down: Vec::new(),
            shared: Vec::new(),
            image_up: Vec::new(),
            text_up: Vec::new(),
            image_head: None,
            text_head: None,
            ablate: probe.ablate,
        };

        // Modality-specific down stacks.
        let mut image_skips = Vec::new();
        let image_tokens = if mode.uses_image() {
            let patches = patchify(x.image.as_ref().expect("checked"), cfg.patch_size);
            let mut e = self.image_embed.forward(ctx, &patches);
            if let Some(pos) = self.image_pos {
                add_rows_tiled(&mut e, &ctx.param(pos));
            }
            e += &ctx.param(self.image_type).row(0);
            cache.patches = Some(patches);
            if self.image_down.is_empty() {
                Some(e)
            } else {
                let mut h = interleave(&[(&te, 1), (&e, np)], batch);
                for blk in &self.image_down {
                    let (y, c) = blk.forward(ctx, &h, np + 1);
                    cache.image_down.push(c);
                    image_skips.push(y.clone());
                    h = y;
                }
                Some(deinterleave(&h, &[1, np], batch).swap_remove(1))
            }
        } else {
            None
        };

        let mut text_skips = Vec::new();
        let text_tokens = if mode.uses_text() {
            let txt = x.text.as_ref().expect("checked");
            let text_in = txt
                .to_shape((batch * lt, cfg.embed_dim))
                .expect("contiguous")
                .to_owned();
            let mut e = self.text_embed.forward(ctx, &text_in);
            if let Some(pos) = self.text_pos {
                add_rows_tiled(&mut e, &ctx.param(pos));
            }
            e += &ctx.param(self.text_type).row(0);
            cache.text_in = Some(text_in);
            if self.text_down.is_empty() {
                Some(e)
            } else {
                let mut h = interleave(&[(&te, 1), (&e, lt)], batch);
                for blk in &self.text_down {
                    let (y, c) = blk.forward(ctx, &h, lt + 1);
                    cache.text_down.push(c);
                    text_skips.push(y.clone());
                    h = y;
                }
                Some(deinterleave(&h, &[1, lt], batch).swap_remove(1))
            }
        } else {
            None
        };

        // Shared stack with mirrored long skips.
        let mut parts: Vec<(&Array2<F>, usize)> = vec![(&te, 1)];
        let mut sizes = vec![1];
        if let Some(e) = &image_tokens {
            parts.push((e, np));
            sizes.push(np);
        }
        if let Some(e) = &text_tokens {
            parts.push((e, lt));
            sizes.push(lt);
        }
        let seq: usize = sizes.iter().sum();
        let mut h = interleave(&parts, batch);
        let n = cfg.n_shared;
        let first_out = n - n / 2;
        let mut saved: Vec<Array2<F>> = Vec::new();
        for (idx, blk) in self.shared.iter().enumerate() {
            let skip_cache = if idx >= first_out {
                let partner = n - 1 - idx;
                let skip = ablated(&saved[partner], probe.ablate == Some(SkipFamily::Shared));
                let (y, c) = self.shared_skips[idx - first_out].forward(ctx, &h, &skip);
                h = y;
                Some(c)
            } else {
                None
            };
            let (y, c) = blk.forward(ctx, &h, seq);
            cache.shared.push((skip_cache, c));
            if idx < n / 2 {
                saved.push(y.clone());
            }
            h = y;
        }
        let mut split = deinterleave(&h, &sizes, batch).into_iter().skip(1);

        // Modality-specific up stacks and heads.
        let mut out = MultimodalState {
            image: None,
            text: None,
        };
        if mode.uses_image() {
            let mut tok = split.next().expect("image segment");
            if !self.image_up.is_empty() {
                let mut h = interleave(&[(&te, 1), (&tok, np)], batch);
                let k = self.image_up.len();
                for (j, up) in self.image_up.iter().enumerate() {
                    let skip =
                        ablated(&image_skips[k - 1 - j], probe.ablate == Some(SkipFamily::Image));
                    let (f, sc) = up.fuse.forward(ctx, &h, &skip);
                    let (y, bc) = up.block.forward(ctx, &f, np + 1);
                    cache.image_up.push((sc, bc));
                    h = y;
                }
                tok = deinterleave(&h, &[1, np], batch).swap_remove(1);
            }
            let (normed, lc) = self.image_head.norm.forward(ctx, &tok);
            let rows = self.image_head.proj.forward(ctx, &normed);
            cache.image_head = Some((lc, normed));
            out.image = Some(unpatchify(
                &rows,
                batch,
                cfg.image_channels,
                cfg.image_hw,
                cfg.patch_size,
            ));
        }
        if mode.uses_text() {
            let mut tok = split.next().expect("text segment");
            if !self.text_up.is_empty() {
                let mut h = interleave(&[(&te, 1), (&tok, lt)], batch);
                let k = self.text_up.len();
                for (j, up) in self.text_up.iter().enumerate() {
                    let skip =
                        ablated(&text_skips[k - 1 - j], probe.ablate == Some(SkipFamily::Text));
                    let (f, sc) = up.fuse.forward(ctx, &h, &skip);
                    let (y, bc) = up.block.forward(ctx, &f, lt + 1);
                    cache.text_up.push((sc, bc));
                    h = y;
                }
                tok = deinterleave(&h, &[1, lt], batch).swap_remove(1);
            }
            let (normed, lc) = self.text_head.norm.forward(ctx, &tok);
            let rows = self.text_head.proj.forward(ctx, &normed);
            cache.text_head = Some((lc, normed));
            out.text = Some(
                rows.into_shape_with_order((batch, lt, cfg.embed_dim))
                    .expect("row count"),
            );
        }
        Ok((out, cache))
    }

    /// Gradients of a scalar loss given dL/d(prediction).
    pub fn backward(&self, cache: &ForwardCache<F>, dout: &MultimodalState<F>) -> Result<Grads<F>> {
        let ctx = Ctx::new(&self.store);
        let cfg = &self.cfg;
        let batch = cache.batch;
        let mode = cache.mode;
        let (np, lt, d) = (cfg.n_patches(), cfg.text_len, cfg.embed_dim);
        let mut grads = Grads::zeros_like(&self.store);
        let mut dte: Array2<F> = Array2::zeros((batch, d));

        // Heads and up stacks, giving d(shared output) per modality.
        let mut d_image_skips: Vec<Array2<F>> =
            vec![Array2::zeros((batch * (np + 1), d)); self.image_down.len()];
        let mut d_text_skips: Vec<Array2<F>> =
            vec![Array2::zeros((batch * (lt + 1), d)); self.text_down.len()];

        let d_image_mid = if mode.uses_image() {
            let dimg = dout
                .image
                .as_ref()
                .ok_or_else(|| Error::Mode("missing image gradient".into()))?;
            let drows = patchify(dimg, cfg.patch_size);
            let (lc, normed) = cache.image_head.as_ref().expect("image head ran");
            let dn = self.image_head.proj.backward(&ctx, normed, &drows, &mut grads);
            let mut dtok = self.image_head.norm.backward(&ctx, lc, &dn, &mut grads);
            if !self.image_up.is_empty() {
                let mut dh = interleave(&[(&Array2::zeros((batch, d)), 1), (&dtok, np)], batch);
                let k = self.image_up.len();
                for j in (0..k).rev() {
                    let up = &self.image_up[j];
                    let (sc, bc) = &cache.image_up[j];
                    let df = up.block.backward(&ctx, bc, &dh, np + 1, &mut grads);
                    let (dx, dskip) = up.fuse.backward(&ctx, sc, &df, &mut grads);
                    if cache.ablate != Some(SkipFamily::Image) {
                        d_image_skips[k - 1 - j] += &dskip;
                    }
                    dh = dx;
                }
                let mut parts = deinterleave(&dh, &[1, np], batch);
                dte += &parts[0];
                dtok = parts.swap_remove(1);
            }
            Some(dtok)
        } else {
            None
        };

        let d_text_mid = if mode.uses_text() {
            let dtxt = dout
                .text
                .as_ref()
                .ok_or_else(|| Error::Mode("missing text gradient".into()))?;
            let drows = dtxt
                .to_shape((batch * lt, d))
                .map_err(|e| Error::Shape(e.to_string()))?
                .to_owned();
            let (lc, normed) = cache.text_head.as_ref().expect("text head ran");
            let dn = self.text_head.proj.backward(&ctx, normed, &drows, &mut grads);
            let mut dtok = self.text_head.norm.backward(&ctx, lc, &dn, &mut grads);
            if !self.text_up.is_empty() {
                let mut dh = interleave(&[(&Array2::zeros((batch, d)), 1), (&dtok, lt)], batch);
                let k = self.text_up.len();
                for j in (0..k).rev() {
                    let up = &self.text_up[j];
                    let (sc, bc) = &cache.text_up[j];
                    let df = up.block.backward(&ctx, bc, &dh, lt + 1, &mut grads);
                    let (dx, dskip) = up.fuse.backward(&ctx, sc, &df, &mut grads);
                    if cache.ablate != Some(SkipFamily::Text) {
                        d_text_skips[k - 1 - j] += &dskip;
                    }
                    dh = dx;
                }
                let mut parts = deinterleave(&dh, &[1, lt], batch);
                dte += &parts[0];
                dtok = parts.swap_remove(1);
            }
            Some(dtok)
        } else {
            None
        };

        // Shared stack.
        let zero_time = Array2::zeros((batch, d));
        let mut parts: Vec<(&Array2<F>, usize)> = vec![(&zero_time, 1)];
        let mut sizes = vec![1];
        if let Some(g) = &d_image_mid {
            parts.push((g, np));
            sizes.push(np);
        }
        if let Some(g) = &d_text_mid {
            parts.push((g, lt));
            sizes.push(lt);
        }
        let seq: usize = sizes.iter().sum();
        let mut dh = interleave(&parts, batch);
        let n = cfg.n_shared;
        let first_out = n - n / 2;
        let mut d_saved: Vec<Option<Array2<F>>> = vec![None; n / 2];
        for idx in (0..n).rev() {
            if idx < n / 2 {
                if let Some(g) = d_saved[idx].take() {
                    dh += &g;
                }
            }
            let (sc, bc) = &cache.shared[idx];
            dh = self.shared[idx].backward(&ctx, bc, &dh, seq, &mut grads);
            if let Some(sc) = sc {
                let (dx, dskip) = self.shared_skips[idx - first_out].backward(&ctx, sc, &dh, &mut grads);
                if cache.ablate != Some(SkipFamily::Shared) {
                    d_saved[n - 1 - idx] = Some(dskip);
                }
                dh = dx;
            }
        }
        let mut split = deinterleave(&dh, &sizes, batch).into_iter();
        dte += &split.next().expect("time segment");

        // Down stacks and embedders.
        if mode.uses_image() {
            let mut de = split.next().expect("image segment");
            if !self.image_down.is_empty() {
                let mut dh = interleave(&[(&Array2::zeros((batch, d)), 1), (&de, np)], batch);
                for i in (0..self.image_down.len()).rev() {
                    dh += &d_image_skips[i];
                    dh = self.image_down[i].backward(&ctx, &cache.image_down[i], &dh, np + 1, &mut grads);
                }
                let mut parts = deinterleave(&dh, &[1, np], batch);
                dte += &parts[0];
                de = parts.swap_remove(1);
            }
            grads_acc_row_sum(&mut grads, self.image_type, &de);
            if let Some(pos) = self.image_pos {
                grads.values[pos.0] += &sum_rows_tiled(&de, np);
            }
            let patches = cache.patches.as_ref().expect("image embedded");
            self.image_embed.backward(&ctx, patches, &de, &mut grads);
        }
        if mode.uses_text() {
            let mut de = split.next().expect("text segment");
            if !self.text_down.is_empty() {
                let mut dh = interleave(&[(&Array2::zeros((batch, d)), 1), (&de, lt)], batch);
                for i in (0..self.text_down.len()).rev() {
                    dh += &d_text_skips[i];
                    dh = self.text_down[i].backward(&ctx, &cache.text_down[i], &dh, lt + 1, &mut grads);
                }
                let mut parts = deinterleave(&dh, &[1, lt], batch);
                dte += &parts[0];
                de = parts.swap_remove(1);
            }
            grads_acc_row_sum(&mut grads, self.text_type, &de);
            if let Some(pos) = self.text_pos {
                grads.values[pos.0] += &sum_rows_tiled(&de, lt);
            }
            let text_in = cache.text_in.as_ref().expect("text embedded");
            self.text_embed.backward(&ctx, text_in, &de, &mut grads);
        }
        self.time_embed.backward(&ctx, &cache.time_in, &dte, &mut grads);
        Ok(grads)
    }
}

fn grads_acc_row_sum<F: Real>(grads: &mut Grads<F>, id: ParamId, d: &Array2<F>) {
    let mut row = grads.values[id.0].row_mut(0);
    row += &d.sum_axis(Axis(0));
}

fn ablated<F: Real>(x: &Array2<F>, zero: bool) -> Array2<F> {
    if zero {
        Array2::zeros(x.raw_dim())
    } else {
        x.clone()
    }
}

fn branch_active(branch: Branch, mode: ActivationMode) -> bool {
    match branch {
        Branch::Common => true,
        Branch::Image => mode.uses_image(),
        Branch::Text => mode.uses_text(),
    }
}

impl<F: Real> Denoiser<F> for Backbone<F> {
    fn predict(&self, x_t: &MultimodalState<F>, t: &[usize]) -> Result<MultimodalState<F>> {
        let mode = x_t.mode()?;
        self.forward(x_t, t, mode)
    }
}

/// Reshapes a `(batch, text_len, dim)` tensor view into rows.
pub fn text_rows<F: Real>(t: &Array3<F>) -> Array2<F> {
    let (b, l, d) = t.dim();
    t.to_shape((b * l, d)).expect("contiguous").to_owned()
}
