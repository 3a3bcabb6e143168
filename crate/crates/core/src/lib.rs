//! Multimodal joint diffusion with a partially shared U-Net backbone.
//!
//! The crate covers the diffusion algebra, the PS-U-Net and U-ViT-multi
//! noise predictors with hand-written backpropagation, a word-level text
//! codec, a synthetic shape-scene dataset with an exact oracle, joint
//! infilling with masked classifier-free guidance, training and evaluation.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod real;
pub mod sampler;
pub mod state;
pub mod synth;
pub mod text;
pub mod train;

pub use backbone::{build_ps_unet, build_uvit_multi, Arch, Backbone, BackboneConfig};
pub use config::RunConfig;
pub use diffusion::{Denoiser, NoiseSchedule, ScheduleConfig};
pub use error::{Error, Result};
pub use real::Real;
pub use sampler::{GuidanceConfig, GuidanceMode, MaskSpec, Scenario};
pub use state::{ActivationMode, MultimodalState};
pub use synth::{SceneSpec, SynthSample};
pub use text::{EmbeddingTable, Vocabulary};
pub use train::{TrainConfig, Trainer};
