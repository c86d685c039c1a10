//! The masked latent transformer.
//!
//! Training path: latent embed → patch embed + positions → shuffle and keep
//! a random fraction → encoder → append mask tokens and unshuffle → decoder
//! → masked shortcut → class head and reconstruction head.
//!
//! Inference skips masking entirely: the encoder sees every patch, the
//! decoder receives the encoder output unchanged, and the masked shortcut
//! uses an all-ones mask.

pub mod attention;
pub mod block;
pub mod config;
pub mod params;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::embedder::{LatentEmbedder, LatentTokens, BACKBONE_PREFIX};
use crate::error::{shape_err, Error, Result};
use crate::masking::{self, MaskPlan};
use crate::rng::{self, streams};
use crate::tensor::{Real, Tensor};

pub use attention::{AttentionParams, Linear};
pub use block::{lt_block, BlockParams, Modulation};
pub use config::{ModelConfig, Toggles};
pub use params::{Bound, Param, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A token sequence flowing between stages.
#[derive(Debug, Clone)]
pub struct SequenceState<'p> {
    pub tokens: Var,
    pub has_cls: bool,
    /// Sequence position of every row (cls = 0, patch `k` = `k + 1`).
    pub positions: Vec<usize>,
    pub plan: Option<&'p MaskPlan>,
}

#[derive(Debug, Clone)]
struct FinalHead {
    modulation: Option<Linear>,
    proj: Linear,
}

/// Model parameters and the handles that locate them.
#[derive(Debug, Clone)]
pub struct Mltr<F: Real = f32> {
    config: ModelConfig,
    store: ParamStore<F>,
    embedder: Option<LatentEmbedder>,
    patch_embed: Linear,
    cls_token: ParamId,
    pos_enc: ParamId,
    pos_dec: ParamId,
    mask_token: ParamId,
    encoder: Vec<BlockParams>,
    decoder: Vec<BlockParams>,
    class_head: Linear,
    recon: FinalHead,
}

/// Everything a training forward pass produces.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub logits: Var,
    pub recon: Var,
    pub plan: MaskPlan,
    pub latent: Option<Var>,
    pub encoder_out: Var,
    pub decoder_in: Var,
    pub decoder_out: Var,
    pub shortcut: Var,
    pub attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct InferForward {
    pub logits: Var,
    pub recon: Var,
    pub decoder_in: Var,
    pub decoder_out: Var,
    pub shortcut: Var,
    /// Post-softmax attention per layer (encoder layers first) and head.
    pub attention: Vec<Vec<Var>>,
}

/// Decoder result: the sequence fed to the first decoder block (before
/// decoder positions are added) and the output of the last block.
#[derive(Debug, Clone)]
pub struct Decoded<'p> {
    pub input: Var,
    pub output: SequenceState<'p>,
    pub attention: Vec<Vec<Var>>,
}

impl<F: Real> Mltr<F> {
    /// Initializes every parameter deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[streams::INIT]);
        let mut store = ParamStore::new();
        let cfg = &config;
        let d = cfg.dim;
        let n = cfg.num_patches();

        let embedder = if cfg.toggles.latent_embedder {
            Some(LatentEmbedder::build(&cfg.backbone, d, &mut store, &mut rng)?)
        } else {
            None
        };
        let patch_embed = Linear::new(&mut store, &mut rng, "patch_embed", cfg.patch_dim(), d)?;
        let cls_token = store.add("cls_token", params::trunc_normal(&mut rng, &[1, d], 0.02), true)?;
        let pos_enc = store.add("pos_enc", params::trunc_normal(&mut rng, &[n + 1, d], 0.02), true)?;
        let pos_dec = store.add("pos_dec", params::trunc_normal(&mut rng, &[n + 1, d], 0.02), true)?;
        let mask_token = store.add("mask_token", params::trunc_normal(&mut rng, &[1, d], 0.02), true)?;
        let encoder = (0..cfg.encoder_depth)
            .map(|i| BlockParams::new(&mut store, &mut rng, &format!("enc.{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.decoder_depth)
            .map(|i| BlockParams::new(&mut store, &mut rng, &format!("dec.{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let class_head = Linear::new(&mut store, &mut rng, "class_head", d, cfg.n_classes)?;
        let recon = FinalHead {
            modulation: if cfg.toggles.adaln_final_linear && cfg.toggles.latent_embedder {
                Some(Linear::zeros(&mut store, "recon.adaln", d, 2 * d)?)
            } else {
                None
            },
            proj: Linear::new(&mut store, &mut rng, "recon.proj", d, cfg.patch_dim())?,
        };
        if let (Some(path), Some(_)) = (&cfg.backbone.pretrained, &embedder) {
            let ck = Checkpoint::read(path)?;
            checkpoint::load_into(&mut store, &ck.tensors, |name| name.starts_with(BACKBONE_PREFIX), false)?;
        }
        Ok(Self {
            config,
            store,
            embedder,
            patch_embed,
            cls_token,
            pos_enc,
            pos_dec,
            mask_token,
            encoder,
            decoder,
            class_head,
            recon,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn embedder(&self) -> Option<&LatentEmbedder> {
        self.embedder.as_ref()
    }

    pub fn encoder_blocks(&self) -> &[BlockParams] {
        &self.encoder
    }

    pub fn decoder_blocks(&self) -> &[BlockParams] {
        &self.decoder
    }

    pub fn num_layers(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    pub fn bind(&self, tape: &mut Tape<F>, grad: bool) -> Bound {
        self.store.bind(tape, grad)
    }

    fn check_image(&self, x: &Tensor<F>) -> Result<()> {
        let c = &self.config;
        let want = [c.channels, c.image_height, c.image_width];
        if x.shape() != want {
            return shape_err(format!("model expects image {:?}, got {:?}", want, x.shape()));
        }
        Ok(())
    }

    pub fn embed_latent(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Option<LatentTokens>> {
        match &self.embedder {
            Some(e) => Ok(Some(e.forward(tape, bound, x)?)),
            None => Ok(None),
        }
    }

    /// Patch tokens `[N, D]` with encoder positions already added.
    pub fn embed_patches(&self, tape: &mut Tape<F>, bound: &Bound, x: &Tensor<F>) -> Result<Var> {
        let grid = masking::patchify(x, self.config.patch_size)?;
        let n = grid.count;
        let patches = tape.constant(grid.tokens);
        let tokens = self.patch_embed.forward(tape, bound, patches)?;
        let pos = tape.slice_rows(bound.var(self.pos_enc), 1, n + 1)?;
        tape.add(tokens, pos)
    }

    fn modulations(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        blocks: &[BlockParams],
        z_le: Option<LatentTokens>,
    ) -> Result<Vec<Option<Modulation>>> {
        blocks
            .iter()
            .map(|b| match (&b.modulation, z_le) {
                (Some(map), Some(z)) => Modulation::from_latent(tape, bound, map, z, self.config.dim).map(Some),
                (Some(_), None) => Err(Error::Contract("latent token required by adaLN blocks".into())),
                (None, _) => Ok(None),
            })
            .collect()
    }

    fn run_blocks(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        blocks: &[BlockParams],
        mut z: Var,
        z_le: Option<LatentTokens>,
        positions: &[usize],
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let mods = self.modulations(tape, bound, blocks, z_le)?;
        let mut attn = Vec::with_capacity(blocks.len());
        for (b, m) in blocks.iter().zip(mods) {
            let out = lt_block(tape, bound, z, b, m, positions, self.config.toggles.relpos_bias)?;
            z = out.out;
            attn.push(out.attn_probs);
        }
        Ok((z, attn))
    }

    /// Prepends the cls token, masks (training) and runs the encoder.
    ///
    /// In training `plan` is required and the kept subset of `tokens` is
    /// encoded; in inference `plan` must be absent and every token is
    /// encoded.
    pub fn encode<'p>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        tokens: Var,
        z_le: Option<LatentTokens>,
        plan: Option<&'p MaskPlan>,
        mode: Mode,
    ) -> Result<(SequenceState<'p>, Vec<Vec<Var>>)> {
        let n = self.config.num_patches();
        if tape.shape(tokens) != [n, self.config.dim] {
            return shape_err(format!(
                "encoder expects [{n}, {}] tokens, got {:?}",
                self.config.dim,
                tape.shape(tokens)
            ));
        }
        let (body, positions): (Var, Vec<usize>) = match (mode, plan) {
            (Mode::Train, Some(p)) => {
                let kept = masking::gather_kept(tape, tokens, p)?;
                let pos = std::iter::once(0).chain(p.kept_positions().iter().map(|&k| k + 1)).collect();
                (kept, pos)
            }
            (Mode::Infer, None) => (tokens, (0..=n).collect()),
            (Mode::Train, None) => return Err(Error::Contract("training encode requires a mask plan".into())),
            (Mode::Infer, Some(_)) => return Err(Error::Contract("inference encode must not mask".into())),
        };
        let pos0 = tape.slice_rows(bound.var(self.pos_enc), 0, 1)?;
        let cls = tape.add(bound.var(self.cls_token), pos0)?;
        let seq = tape.concat_rows(&[cls, body])?;
        let (out, attn) = self.run_blocks(tape, bound, &self.encoder, seq, z_le, &positions)?;
        Ok((SequenceState { tokens: out, has_cls: true, positions, plan }, attn))
    }

    /// Appends the shared mask token for every masked position, unshuffles,
    /// adds decoder positions and runs the decoder.
    pub fn decode<'p>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        enc: &SequenceState<'p>,
        z_le: Option<LatentTokens>,
        mode: Mode,
    ) -> Result<Decoded<'p>> {
        let n = self.config.num_patches();
        if !enc.has_cls {
            return Err(Error::Contract("decoder input must start with the cls token".into()));
        }
        let z0 = match (mode, enc.plan) {
            (Mode::Train, Some(plan)) => {
                let rows = tape.shape(enc.tokens)[0];
                if rows != plan.kept + 1 {
                    return shape_err(format!("encoder output has {rows} rows, plan keeps {}", plan.kept));
                }
                let cls = tape.slice_rows(enc.tokens, 0, 1)?;
                let body = tape.slice_rows(enc.tokens, 1, rows)?;
                let fill = vec![0; n - plan.kept];
                let full = if fill.is_empty() {
                    body
                } else {
                    let masks = tape.index_select(bound.var(self.mask_token), &fill)?;
                    tape.concat_rows(&[body, masks])?
                };
                let restored = masking::restore_order(tape, full, plan)?;
                tape.concat_rows(&[cls, restored])?
            }
            (Mode::Infer, None) => {
                if tape.shape(enc.tokens)[0] != n + 1 {
                    return shape_err(format!("inference decoder expects {} rows", n + 1));
                }
                enc.tokens
            }
            (Mode::Train, None) => return Err(Error::Contract("training decode requires a mask plan".into())),
            (Mode::Infer, Some(_)) => return Err(Error::Contract("inference decode must not mask".into())),
        };
        let seq = tape.add(z0, bound.var(self.pos_dec))?;
        let positions: Vec<usize> = (0..=n).collect();
        let (out, attention) = self.run_blocks(tape, bound, &self.decoder, seq, z_le, &positions)?;
        Ok(Decoded {
            input: z0,
            output: SequenceState { tokens: out, has_cls: true, positions, plan: enc.plan },
            attention,
        })
    }

    /// Logits from the cls row.
    pub fn class_head(&self, tape: &mut Tape<F>, bound: &Bound, z: &SequenceState<'_>) -> Result<Var> {
        if !z.has_cls {
            return Err(Error::Contract("class head needs a cls token".into()));
        }
        let cls = tape.slice_rows(z.tokens, 0, 1)?;
        let logits = self.class_head.forward(tape, bound, cls)?;
        tape.reshape(logits, &[self.config.n_classes])
    }

    /// Projects the non-cls rows back to pixels, shaped `C×H×W`.
    pub fn reconstruction_head(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        z: &SequenceState<'_>,
        z_le: Option<LatentTokens>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = cfg.num_patches();
        if tape.shape(z.tokens)[0] != n + 1 {
            return shape_err(format!("reconstruction head expects {} rows, got {:?}", n + 1, tape.shape(z.tokens)));
        }
        let body = tape.slice_rows(z.tokens, 1, n + 1)?;
        let h = if cfg.toggles.adaln_final_linear {
            let normed = tape.layer_norm(body, F::from_f64_lossy(block::LN_EPS))?;
            match (&self.recon.modulation, z_le) {
                (Some(map), Some(zl)) => {
                    let m = map.forward(tape, bound, zl.0)?;
                    let shift = tape.slice_cols(m, 0, cfg.dim)?;
                    let scale = tape.slice_cols(m, cfg.dim, 2 * cfg.dim)?;
                    block::modulate(tape, normed, scale, shift)?
                }
                _ => normed,
            }
        } else {
            body
        };
        let pix = self.recon.proj.forward(tape, bound, h)?;
        let map = masking::unpatch_index_map(cfg.channels, cfg.image_height, cfg.image_width, cfg.patch_size)?;
        tape.gather(pix, &map, &[cfg.channels, cfg.image_height, cfg.image_width])
    }

    fn shortcut(&self, tape: &mut Tape<F>, dec: &Decoded<'_>, mask: &[bool]) -> Result<Var> {
        if self.config.toggles.masked_shortcut {
            masked_shortcut(tape, dec.input, dec.output.tokens, mask)
        } else {
            Ok(dec.output.tokens)
        }
    }

    /// Full training forward pass for one image with masking ratio `rho`.
    /// The permutation is drawn from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: &Tensor<F>,
        rho: f64,
        rng: &mut R,
    ) -> Result<TrainForward> {
        self.check_image(x)?;
        let n = self.config.num_patches();
        let rho = if self.config.toggles.masking { rho } else { 0.0 };
        let plan = MaskPlan::new(n, rho, rng)?;
        let image = tape.constant(x.clone());
        let z_le = self.embed_latent(tape, bound, image)?;
        let tokens = self.embed_patches(tape, bound, x)?;
        let (enc, mut attention) = self.encode(tape, bound, tokens, z_le, Some(&plan), Mode::Train)?;
        let encoder_out = enc.tokens;
        let dec = self.decode(tape, bound, &enc, z_le, Mode::Train)?;
        let shortcut = self.shortcut(tape, &dec, &plan.mask)?;
        let state = SequenceState { tokens: shortcut, ..dec.output.clone() };
        let logits = self.class_head(tape, bound, &state)?;
        let recon = self.reconstruction_head(tape, bound, &state, z_le)?;
        attention.extend(dec.attention);
        Ok(TrainForward {
            logits,
            recon,
            latent: z_le.map(|z| z.0),
            encoder_out,
            decoder_in: dec.input,
            decoder_out: dec.output.tokens,
            shortcut,
            attention,
            plan,
        })
    }

    /// Inference forward pass: no masking, masked shortcut with an all-ones
    /// mask.
    pub fn forward_infer(&self, tape: &mut Tape<F>, bound: &Bound, x: &Tensor<F>) -> Result<InferForward> {
        self.check_image(x)?;
        let n = self.config.num_patches();
        let image = tape.constant(x.clone());
        let z_le = self.embed_latent(tape, bound, image)?;
        let tokens = self.embed_patches(tape, bound, x)?;
        let (enc, mut attention) = self.encode(tape, bound, tokens, z_le, None, Mode::Infer)?;
        let dec = self.decode(tape, bound, &enc, z_le, Mode::Infer)?;
        let shortcut = self.shortcut(tape, &dec, &vec![true; n])?;
        let state = SequenceState { tokens: shortcut, ..dec.output.clone() };
        let logits = self.class_head(tape, bound, &state)?;
        let recon = self.reconstruction_head(tape, bound, &state, z_le)?;
        attention.extend(dec.attention);
        Ok(InferForward { logits, recon, decoder_in: dec.input, decoder_out: dec.output.tokens, shortcut, attention })
    }

    /// Inference logits for one image.
    pub fn predict(&self, x: &Tensor<F>) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward_infer(&mut tape, &bound, x)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    /// Inference logits for a batch, one row per image. Images are processed
    /// in parallel; results keep input order.
    pub fn predict_batch(&self, images: &[Tensor<F>]) -> Result<Vec<Vec<F>>> {
        images.par_iter().map(|x| self.predict(x)).collect()
    }

    /// Seeded masking-ratio draw from the configured range.
    pub fn sample_ratio<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let [lo, hi] = self.config.mask_ratio;
        masking::sample_ratio(rng, lo, hi)
    }
}

/// Final-sequence mixing: row 0 (cls) comes from the decoder output; row
/// `i + 1` is copied from the decoder input when `mask[i]` (kept) and from
/// the decoder output otherwise.
pub fn masked_shortcut<F: Real>(tape: &mut Tape<F>, z_in: Var, z_out: Var, mask: &[bool]) -> Result<Var> {
    let rows = tape.shape(z_in).first().copied().unwrap_or(0);
    if rows != mask.len() + 1 {
        return shape_err(format!("masked shortcut: mask of {} for {rows} rows (cls included)", mask.len()));
    }
    let take_in: Vec<bool> = std::iter::once(false).chain(mask.iter().copied()).collect();
    tape.row_select(z_in, z_out, &take_in)
}
