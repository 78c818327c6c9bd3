use serde::{Deserialize, Serialize};

use crate::autodiff::GeluKind;
use crate::error::{Error, Result};
use crate::objective::HogConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Encoder blocks (1-based) whose outputs feed decoder heads.
    pub tap_layers: Vec<usize>,
    /// Target map side per tap, same order as `tap_layers`.
    pub supervision_scales: Vec<usize>,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub ln_eps: f64,
    pub gelu: GeluKind,
    pub hog: HogConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::vit_toy()
    }
}

/// One step of a decoder head's rescale chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rescale {
    Upsample,
    Pool,
}

impl ModelConfig {
    /// 64×64 images, 8×8 patch grid, 4 blocks; one head per rescale kind.
    pub fn vit_toy() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4,
            tap_layers: vec![1, 2, 3, 4],
            supervision_scales: vec![16, 8, 8, 4],
            decoder_dim: 32,
            decoder_heads: 4,
            mask_ratio: 0.75,
            ln_eps: 1e-6,
            gelu: GeluKind::Tanh,
            hog: HogConfig::default(),
        }
    }

    /// ViT-B/16 at 224² with taps at blocks 2, 4, 10, 12.
    pub fn vit_b() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            mlp_ratio: 4,
            tap_layers: vec![2, 4, 10, 12],
            supervision_scales: vec![56, 28, 14, 7],
            decoder_dim: 256,
            decoder_heads: 8,
            mask_ratio: 0.75,
            ln_eps: 1e-6,
            gelu: GeluKind::Tanh,
            hog: HogConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit-toy" => Ok(Self::vit_toy()),
            "vit-b" => Ok(Self::vit_b()),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (vit-toy | vit-b)"))),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Patch embedding plus every block.
    pub fn num_layers(&self) -> usize {
        self.num_blocks + 1
    }

    pub fn num_visible(&self) -> usize {
        self.num_patches() - crate::objective::masked_count(self.num_patches(), self.mask_ratio)
    }

    /// Upsample/pool steps taking the token grid to `scale`.
    pub fn rescale_chain(&self, scale: usize) -> Result<Vec<Rescale>> {
        let g = self.grid();
        let (big, small, step) = if scale >= g {
            (scale, g, Rescale::Upsample)
        } else {
            (g, scale, Rescale::Pool)
        };
        if small == 0 || big % small != 0 || !(big / small).is_power_of_two() {
            return Err(Error::config(
                "model.supervision_scales",
                format!("scale {scale} is not reachable from token grid {g} by 2× steps"),
            ));
        }
        Ok(vec![step; (big / small).trailing_zeros() as usize])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("model.{key}"), msg));
        if self.image_size == 0 || self.channels == 0 || self.patch_size == 0 {
            return bad("image_size", "image_size, channels and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(
                "patch_size",
                format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size),
            );
        }
        if self.num_blocks == 0 {
            return bad("num_blocks", "need at least one block".into());
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("num_heads", format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return bad("embed_dim", format!("must be a multiple of 4, got {}", self.embed_dim));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) || !self.decoder_dim.is_multiple_of(4) {
            return bad(
                "decoder_dim",
                format!(
                    "decoder_dim {} must be a multiple of 4 and of decoder_heads {}",
                    self.decoder_dim, self.decoder_heads
                ),
            );
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio", format!("mask_ratio ∈ (0,1) required, got {}", self.mask_ratio));
        }
        if self.num_visible() == 0 || self.num_visible() == self.num_patches() {
            return bad("mask_ratio", format!("ratio {} leaves {} visible patches", self.mask_ratio, self.num_visible()));
        }
        if self.tap_layers.is_empty() || self.tap_layers.len() != self.supervision_scales.len() {
            return bad(
                "tap_layers",
                format!(
                    "{} taps but {} supervision scales",
                    self.tap_layers.len(),
                    self.supervision_scales.len()
                ),
            );
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tap_layers", format!("must be strictly increasing, got {:?}", self.tap_layers));
        }
        if self.tap_layers[0] == 0 || *self.tap_layers.last().unwrap() > self.num_blocks {
            return bad(
                "tap_layers",
                format!("taps must lie in 1..={}, got {:?}", self.num_blocks, self.tap_layers),
            );
        }
        for &s in &self.supervision_scales {
            self.rescale_chain(s)?;
            if !self.image_size.is_multiple_of(s) {
                return bad("supervision_scales", format!("scale {s} does not divide image_size {}", self.image_size));
            }
        }
        if self.hog.bins == 0 {
            return bad("hog.bins", "need at least one bin".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps", "must be > 0".into());
        }
        Ok(())
    }
}
