use serde::{Deserialize, Serialize};

use crate::embedder::{BackboneSpec, ConvStage};
use crate::error::{Error, Result};

/// Ablation switches. Each one removes a single mechanism; all default on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Latent embedder and adaLN conditioning. Off: plain pre-norm blocks.
    pub latent_embedder: bool,
    /// Reconstruction MSE term in the training loss.
    pub aux_loss: bool,
    /// adaLN-modulated layer norm before the reconstruction projection.
    pub adaln_final_linear: bool,
    /// Learned relative position bias inside attention.
    pub relpos_bias: bool,
    /// Copy unmasked rows from the decoder input into the final sequence.
    pub masked_shortcut: bool,
    /// Random-ratio masking during training. Off: the encoder sees every
    /// patch in training too.
    pub masking: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            latent_embedder: true,
            aux_loss: true,
            adaln_final_linear: true,
            relpos_bias: true,
            masked_shortcut: true,
            masking: true,
        }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Self {
            latent_embedder: false,
            aux_loss: false,
            adaln_final_linear: false,
            relpos_bias: false,
            masked_shortcut: false,
            masking: false,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: f64,
    pub n_classes: usize,
    pub mask_ratio: [f64; 2],
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub toggles: Toggles,
}

impl ModelConfig {
    /// 64×64 desk-scale configuration.
    pub fn micro() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            channels: 1,
            patch_size: 8,
            dim: 64,
            heads: 4,
            encoder_depth: 4,
            decoder_depth: 2,
            mlp_ratio: 4.0,
            n_classes: 4,
            mask_ratio: [0.3, 0.8],
            backbone: BackboneSpec {
                stages: vec![
                    ConvStage { out_channels: 16, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 32, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 64, kernel: 3, stride: 2 },
                ],
                input_channels: 1,
                pretrained: None,
                freeze: false,
            },
            toggles: Toggles::default(),
        }
    }

    /// 128×128, wider and deeper than [`micro`](Self::micro).
    pub fn small() -> Self {
        Self {
            image_height: 128,
            image_width: 128,
            patch_size: 16,
            dim: 128,
            heads: 8,
            encoder_depth: 6,
            decoder_depth: 3,
            backbone: BackboneSpec {
                stages: vec![
                    ConvStage { out_channels: 16, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 32, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 64, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 128, kernel: 3, stride: 2 },
                ],
                input_channels: 1,
                pretrained: None,
                freeze: false,
            },
            ..Self::micro()
        }
    }

    /// Smallest model with every mechanism present: D=8, one encoder and
    /// one decoder block, four patches.
    pub fn tiny() -> Self {
        Self {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            dim: 8,
            heads: 2,
            encoder_depth: 1,
            decoder_depth: 1,
            mlp_ratio: 2.0,
            n_classes: 4,
            mask_ratio: [0.3, 0.7],
            backbone: BackboneSpec {
                stages: vec![ConvStage { out_channels: 4, kernel: 3, stride: 2 }],
                input_channels: 1,
                pretrained: None,
                freeze: false,
            },
            toggles: Toggles::default(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "micro" => Some(Self::micro()),
            "small" => Some(Self::small()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Longest sequence any block sees: every patch plus the cls token.
    pub fn max_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return fail("encoder_depth and decoder_depth must be at least 1".into());
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.channels == 0 || self.image_height == 0 || self.image_width == 0 {
            return fail("image dimensions must be positive".into());
        }
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return fail(format!("patch_size {p} must divide image size {}x{}", self.image_height, self.image_width));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return fail(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        let [lo, hi] = self.mask_ratio;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return fail(format!("mask_ratio [{lo}, {hi}] must satisfy 0 <= lo <= hi < 1"));
        }
        if crate::masking::kept_count(self.num_patches(), hi) == 0 {
            return fail(format!("mask_ratio upper bound {hi} leaves no tokens out of {}", self.num_patches()));
        }
        self.backbone.validate()?;
        if self.backbone.input_channels != self.channels {
            return fail(format!(
                "backbone input_channels {} differs from image channels {}",
                self.backbone.input_channels, self.channels
            ));
        }
        self.backbone.stage_shapes(self.image_height, self.image_width)?;
        Ok(())
    }
}
