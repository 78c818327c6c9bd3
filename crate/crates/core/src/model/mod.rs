//! Freezable ViT encoder, decoder heads and checkpoints.

pub(crate) mod block;
pub mod checkpoint;
mod config;
mod params;
mod patch;
mod vit;

pub use config::{ModelConfig, Rescale};
pub use params::{Binder, Param, ParamGroup, ParamId, ParamStore};
pub use patch::{patchify, sincos_2d, unpatchify};
pub use vit::{Batch, DecoderHead, EncoderInput, LayerState, MimModel, StepGraph};
