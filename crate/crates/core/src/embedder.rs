//! Latent embedder: conv backbone → adaptive average pooling → linear
//! embedding, yielding one conditioning token per image.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::params::{he_uniform, xavier, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Configurable conv stack. Each stage is conv (padding `kernel / 2`) +
/// bias + GELU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stages: Vec<ConvStage>,
    pub input_channels: usize,
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub freeze: bool,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one conv stage".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("backbone input_channels must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride == 0 || s.kernel == 0 || s.out_channels == 0 {
                return Err(Error::Config(format!("backbone stage {i} has a zero kernel, stride or width")));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// `(channels, height, width)` after every stage.
    pub fn stage_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = Vec::with_capacity(self.stages.len());
        let (mut ch, mut cw) = (h, w);
        for s in &self.stages {
            let pad = s.kernel / 2;
            if s.kernel > ch + 2 * pad || s.kernel > cw + 2 * pad {
                return shape_err(format!("kernel {} too large for {}x{} feature map", s.kernel, ch, cw));
            }
            ch = (ch + 2 * pad - s.kernel) / s.stride + 1;
            cw = (cw + 2 * pad - s.kernel) / s.stride + 1;
            shapes.push((s.out_channels, ch, cw));
        }
        Ok(shapes)
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Vec<ConvLayer>,
    input_channels: usize,
}

/// Parameter name prefix shared by all backbone tensors.
pub const BACKBONE_PREFIX: &str = "embedder.conv";

impl Backbone {
    /// Registers He-uniform initialized conv weights. Frozen backbones are
    /// registered as non-trainable.
    pub fn build<F: Real, R: Rng + ?Sized>(
        spec: &BackboneSpec,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.stages.len());
        let mut cin = spec.input_channels;
        for (i, s) in spec.stages.iter().enumerate() {
            let fan_in = cin * s.kernel * s.kernel;
            let w = he_uniform(rng, &[s.out_channels, cin, s.kernel, s.kernel], fan_in);
            let weight = store.add(format!("{BACKBONE_PREFIX}{i}.w"), w, !spec.freeze)?;
            let bias = store.add(format!("{BACKBONE_PREFIX}{i}.b"), Tensor::zeros(&[s.out_channels]), !spec.freeze)?;
            layers.push(ConvLayer { weight, bias, stride: s.stride, pad: s.kernel / 2 });
            cin = s.out_channels;
        }
        Ok(Self { layers, input_channels: spec.input_channels })
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        match tape.shape(x).first() {
            Some(&c) if c == self.input_channels => {}
            _ => {
                return shape_err(format!(
                    "backbone expects {} input channels, got shape {:?}",
                    self.input_channels,
                    tape.shape(x)
                ))
            }
        }
        let mut h = x;
        for l in &self.layers {
            h = tape.conv2d(h, bound.var(l.weight), Some(bound.var(l.bias)), l.stride, l.pad)?;
            h = tape.gelu(h);
        }
        Ok(h)
    }
}

/// The single `1×D` conditioning token.
#[derive(Debug, Clone, Copy)]
pub struct LatentTokens(pub Var);

#[derive(Debug, Clone)]
pub struct LatentEmbedder {
    pub backbone: Backbone,
    embed_w: ParamId,
    embed_b: ParamId,
}

impl LatentEmbedder {
    pub fn build<F: Real, R: Rng + ?Sized>(
        spec: &BackboneSpec,
        dim: usize,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::build(spec, store, rng)?;
        let c_last = spec.out_channels();
        let embed_w = store.add("embedder.embed.w", xavier(rng, c_last, dim), true)?;
        let embed_b = store.add("embedder.embed.b", Tensor::zeros(&[dim]), true)?;
        Ok(Self { backbone, embed_w, embed_b })
    }

    pub fn embed_ids(&self) -> (ParamId, ParamId) {
        (self.embed_w, self.embed_b)
    }

    /// CNN → adaptive average pool (1×1) → flatten → linear.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<LatentTokens> {
        let feat = self.backbone.forward(tape, bound, x)?;
        let pooled = tape.adaptive_avg_pool(feat, 1, 1)?;
        let c = tape.shape(pooled)[0];
        let flat = tape.reshape(pooled, &[1, c])?;
        let z = tape.matmul(flat, bound.var(self.embed_w))?;
        Ok(LatentTokens(tape.add(z, bound.var(self.embed_b))?))
    }
}
