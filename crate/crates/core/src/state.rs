//! Paired image/text tensors shared by the backbone, samplers and trainer.

use ndarray::{Array, Array3, Array4, Dimension, ShapeBuilder};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;

/// Which branches of the backbone run for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationMode {
    Joint,
    ImageOnly,
    TextOnly,
}

impl ActivationMode {
    pub fn uses_image(self) -> bool {
        matches!(self, ActivationMode::Joint | ActivationMode::ImageOnly)
    }

    pub fn uses_text(self) -> bool {
        matches!(self, ActivationMode::Joint | ActivationMode::TextOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationMode::Joint => "joint",
            ActivationMode::ImageOnly => "image_only",
            ActivationMode::TextOnly => "text_only",
        }
    }
}

/// A batch of multimodal diffusion variables.
///
/// `image` is `(batch, channels, height, width)`; `text` is
/// `(batch, text_len, embed_dim)`. Either modality may be absent when the
/// backbone runs partially activated. The timestep lives outside the state so
/// one value per example is shared by both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalState<F: Real> {
    pub image: Option<Array4<F>>,
    pub text: Option<Array3<F>>,
}

impl<F: Real> MultimodalState<F> {
    pub fn joint(image: Array4<F>, text: Array3<F>) -> Self {
        Self {
            image: Some(image),
            text: Some(text),
        }
    }

    pub fn image_only(image: Array4<F>) -> Self {
        Self {
            image: Some(image),
            text: None,
        }
    }

    pub fn text_only(text: Array3<F>) -> Self {
        Self {
            image: None,
            text: Some(text),
        }
    }

    /// Batch size, or an error when modalities disagree or both are absent.
    pub fn batch(&self) -> Result<usize> {
        match (&self.image, &self.text) {
            (Some(i), Some(t)) => {
                if i.shape()[0] != t.shape()[0] {
                    return Err(Error::Shape(format!(
                        "image batch {} != text batch {}",
                        i.shape()[0],
                        t.shape()[0]
                    )));
                }
                Ok(i.shape()[0])
            }
            (Some(i), None) => Ok(i.shape()[0]),
            (None, Some(t)) => Ok(t.shape()[0]),
            (None, None) => Err(Error::Mode("state carries no modality".into())),
        }
    }

    pub fn mode(&self) -> Result<ActivationMode> {
        match (&self.image, &self.text) {
            (Some(_), Some(_)) => Ok(ActivationMode::Joint),
            (Some(_), None) => Ok(ActivationMode::ImageOnly),
            (None, Some(_)) => Ok(ActivationMode::TextOnly),
            (None, None) => Err(Error::Mode("state carries no modality".into())),
        }
    }

    /// Standard-normal tensor with the same layout as `self`. Draws image
    /// elements first, then text, in row-major order.
    pub fn gaussian_like<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        Self {
            image: self.image.as_ref().map(|a| gaussian(a.raw_dim(), rng)),
            text: self.text.as_ref().map(|a| gaussian(a.raw_dim(), rng)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            image: self.image.as_ref().map(|a| Array4::zeros(a.raw_dim())),
            text: self.text.as_ref().map(|a| Array3::zeros(a.raw_dim())),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        let img = match (&self.image, &other.image) {
            (Some(a), Some(b)) => a.shape() == b.shape(),
            (None, None) => true,
            _ => false,
        };
        let txt = match (&self.text, &other.text) {
            (Some(a), Some(b)) => a.shape() == b.shape(),
            (None, None) => true,
            _ => false,
        };
        img && txt
    }

    /// Elementwise combination of two states with identical layout.
    pub fn zip_with(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if !self.same_layout(other) {
            return Err(Error::Shape("multimodal states differ in layout".into()));
        }
        let image = match (&self.image, &other.image) {
            (Some(a), Some(b)) => {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, &y| *x = f(*x, y));
                Some(out)
            }
            _ => None,
        };
        let text = match (&self.text, &other.text) {
            (Some(a), Some(b)) => {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, &y| *x = f(*x, y));
                Some(out)
            }
            _ => None,
        };
        Ok(Self { image, text })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            image: self.image.as_ref().map(|a| a.mapv(&f)),
            text: self.text.as_ref().map(|a| a.mapv(&f)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.image.iter().flat_map(|a| a.iter()).all(|x| x.is_finite())
            && self.text.iter().flat_map(|a| a.iter()).all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> MultimodalState<G> {
        MultimodalState {
            image: self.image.as_ref().map(|a| a.mapv(|x| G::of(x.to_f64_lossy()))),
            text: self.text.as_ref().map(|a| a.mapv(|x| G::of(x.to_f64_lossy()))),
        }
    }
}

/// Standard-normal tensor. Draws in f64 and casts, so 32- and 64-bit runs
/// consume the same random stream.
pub fn gaussian<F: Real, D: Dimension, Sh, R>(shape: Sh, rng: &mut R) -> Array<F, D>
where
    Sh: ShapeBuilder<Dim = D>,
    R: Rng + ?Sized,
{
    Array::from_shape_simple_fn(shape, || {
        let z: f64 = rng.sample(StandardNormal);
        F::of(z)
    })
}
