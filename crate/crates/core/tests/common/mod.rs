#![allow(dead_code)]

use std::cell::Cell;

use ndarray::{Array3, Array4};
use psunet_core::diffusion::Denoiser;
use psunet_core::state::{gaussian, MultimodalState};
use psunet_core::{Backbone, BackboneConfig, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mini PS-U-Net with every parameter nudged off its initialization so that
/// zero-initialized projections do not hide structure.
pub fn mini_model(seed: u64) -> Backbone<f64> {
    let mut m = Backbone::<f64>::new(BackboneConfig::mini(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for (_, p) in m.params_mut().iter_mut() {
        p.value.mapv_inplace(|v| v + 0.2 * rng.sample::<f64, _>(StandardNormal));
    }
    m
}

pub fn joint_state(cfg: &BackboneConfig, batch: usize, seed: u64) -> MultimodalState<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MultimodalState::joint(
        gaussian::<f64, _, _, _>(Array4::<f64>::zeros((batch, cfg.image_channels, cfg.image_hw, cfg.image_hw)).raw_dim(), &mut rng),
        gaussian::<f64, _, _, _>(Array3::<f64>::zeros((batch, cfg.text_len, cfg.embed_dim)).raw_dim(), &mut rng),
    )
}

/// Counts calls to the wrapped denoiser.
pub struct Counting<'a, M> {
    pub inner: &'a M,
    pub calls: Cell<usize>,
}

impl<'a, M> Counting<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self { inner, calls: Cell::new(0) }
    }
}

impl<M: Denoiser<f64>> Denoiser<f64> for Counting<'_, M> {
    fn predict(&self, x: &MultimodalState<f64>, t: &[usize]) -> Result<MultimodalState<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(x, t)
    }
}

/// ε̂ = a·x + b, elementwise.
pub struct Affine(pub f64, pub f64);

impl Denoiser<f64> for Affine {
    fn predict(&self, x: &MultimodalState<f64>, _t: &[usize]) -> Result<MultimodalState<f64>> {
        Ok(x.map(|v| self.0 * v + self.1))
    }
}

pub fn max_abs_diff(a: &MultimodalState<f64>, b: &MultimodalState<f64>) -> f64 {
    let mut d = 0.0f64;
    if let (Some(x), Some(y)) = (&a.image, &b.image) {
        d = x.iter().zip(y.iter()).fold(d, |m, (p, q)| m.max((p - q).abs()));
    }
    if let (Some(x), Some(y)) = (&a.text, &b.text) {
        d = x.iter().zip(y.iter()).fold(d, |m, (p, q)| m.max((p - q).abs()));
    }
    d
}

pub fn bits_equal(a: &MultimodalState<f64>, b: &MultimodalState<f64>) -> bool {
    let eq = |x: &[f64], y: &[f64]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    let img = match (&a.image, &b.image) {
        (Some(x), Some(y)) => eq(x.as_slice().unwrap(), y.as_slice().unwrap()),
        (None, None) => true,
        _ => false,
    };
    let txt = match (&a.text, &b.text) {
        (Some(x), Some(y)) => eq(x.as_slice().unwrap(), y.as_slice().unwrap()),
        (None, None) => true,
        _ => false,
    };
    img && txt
}
