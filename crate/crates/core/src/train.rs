//! Training loop, evaluation, checkpoint assembly, backbone pretraining and
//! attention export.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::checkpoint::{self, Checkpoint, RawTensor};
use crate::config::RunConfig;
use crate::data::manifest::{self, DatasetManifest, Split};
use crate::data::pnm::ImageBuffer;
use crate::data::synth::{self, SynthSpec};
use crate::data::{batch_order, Dataset, TrainSet};
use crate::embedder::{Backbone, BackboneSpec, BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::loss::combined_loss;
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::{Linear, Mltr, ParamStore};
use crate::optim::{cosine_lr, OptimState, Optimizer, Slot};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "epoch,step,lr,loss_total,loss_ce,loss_aux,train_acc";
const OPTIM_PREFIX: &str = "optim.";

/// Train and evaluation data for one run. When the manifest has no test
/// images, evaluation uses the training images.
#[derive(Debug, Clone)]
pub struct RunData {
    pub manifest: DatasetManifest,
    pub train: TrainSet,
    pub eval: Dataset,
    pub eval_split: Split,
}

/// Loads the dataset named by `root` (or the config's root), falling back
/// to the config's synthetic corpus.
pub fn prepare_data(cfg: &RunConfig, root: Option<&Path>) -> Result<RunData> {
    let m = &cfg.model;
    let (w, h) = (m.image_width, m.image_height);
    let pre = &cfg.data.preprocess;
    let (manifest, train, test) = match root.or(cfg.data.root.as_deref()) {
        Some(root) => {
            let manifest = manifest::load_manifest(root, cfg.data.split_ratio, cfg.train.seed)?;
            let train = Dataset::load(root, &manifest, Split::Train, w, h, pre)?;
            let test = Dataset::load(root, &manifest, Split::Test, w, h, pre)?;
            (manifest, train, test)
        }
        None => {
            let spec = cfg
                .data
                .synth
                .as_ref()
                .ok_or_else(|| Error::Config("no dataset: set data.root, data.synth or pass --data".into()))?;
            let spec = SynthSpec { split_ratio: cfg.data.split_ratio, ..spec.clone() };
            let (manifest, images) = synth::synth_generate(&spec)?;
            let pick = |split: Split| -> Result<Dataset> {
                let (bufs, labels): (Vec<ImageBuffer>, Vec<usize>) = manifest
                    .entries
                    .iter()
                    .zip(&images)
                    .filter(|(e, _)| e.split == split)
                    .map(|(e, img)| (img.clone(), e.class))
                    .unzip();
                Dataset::from_buffers(&bufs, labels, w, h, pre)
            };
            let (train, test) = (pick(Split::Train)?, pick(Split::Test)?);
            (manifest, train, test)
        }
    };
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let (eval, eval_split) = if test.is_empty() { (train.clone(), Split::Train) } else { (test, Split::Test) };
    let train = TrainSet::new(train, cfg.data.augment.clone(), cfg.train.seed)?;
    Ok(RunData { manifest, train, eval, eval_split })
}

pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode metrics over `data`.
pub fn evaluate(model: &Mltr<f32>, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let logits = model.predict_batch(&data.images)?;
    let pred: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let cm = ConfusionMatrix::from_predictions(model.config().n_classes, &data.labels, &pred)?;
    Metrics::from_confusion(&cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_aux: Option<f64>,
    pub train_acc: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let aux = self.loss_aux.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.loss_total, self.loss_ce, aux, self.train_acc
        )
    }
}

pub fn csv(history: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for row in history {
        let _ = writeln!(out, "{}", row.csv_row());
    }
    out
}

fn accumulate(acc: &mut [Option<Vec<f32>>], sample: Vec<Option<Vec<f32>>>) {
    for (acc, g) in acc.iter_mut().zip(sample) {
        match (acc.as_mut(), g) {
            (Some(acc), Some(g)) => acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *acc = Some(g),
            _ => {}
        }
    }
}

fn scale_grads(grads: &mut [Option<Vec<f32>>], n: f32) {
    grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v /= n));
}

/// Mean gradients and mean losses of one batch.
struct StepResult {
    grads: Vec<Option<Vec<f32>>>,
    loss_total: f64,
    loss_ce: f64,
    loss_aux: f64,
}

/// Per-sample forward and backward passes run in parallel on their own
/// tapes; gradients are then summed in batch order, so the result does not
/// depend on thread scheduling.
fn batch_gradients(
    model: &Mltr<f32>,
    samples: &[(Tensor<f32>, usize)],
    rho: f64,
    seed: u64,
    step: u64,
) -> Result<StepResult> {
    let aux = model.config().toggles.aux_loss;
    let per_sample = samples
        .par_iter()
        .enumerate()
        .map(|(b, (x, label))| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let mut mask_rng = rng::stream(seed, &[streams::MASK, step, b as u64]);
            let out = model.forward_train(&mut tape, &bound, x, rho, &mut mask_rng)?;
            let image = tape.constant(x.clone());
            let parts = combined_loss(&mut tape, out.logits, *label, out.recon, image, aux)?;
            tape.backward(parts.total)?;
            let grads: Vec<Option<Vec<f32>>> =
                model.params().iter().map(|(id, _)| tape.grad(bound.var(id)).map(<[f32]>::to_vec)).collect();
            let losses = (
                tape.value(parts.total).item() as f64,
                tape.value(parts.ce).item() as f64,
                parts.aux.map_or(0.0, |a| tape.value(a).item() as f64),
            );
            Ok((grads, losses))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = samples.len() as f32;
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; model.params().len()];
    let (mut total, mut ce, mut aux_sum) = (0.0, 0.0, 0.0);
    for (sample_grads, (t, c, a)) in per_sample {
        total += t;
        ce += c;
        aux_sum += a;
        accumulate(&mut grads, sample_grads);
    }
    scale_grads(&mut grads, n);
    let k = samples.len() as f64;
    Ok(StepResult { grads, loss_total: total / k, loss_ce: ce / k, loss_aux: aux_sum / k })
}

/// Model tensors, followed by optimizer moments and Lookahead slow weights
/// under the `optim.` prefix.
pub fn to_checkpoint(cfg: &RunConfig, model: &Mltr<f32>, opt: Option<&Optimizer<f32>>) -> Result<Checkpoint> {
    let mut tensors = checkpoint::store_tensors(model.params());
    let mut step = 0;
    if let Some(opt) = opt {
        step = opt.state.step;
        for s in &opt.state.slots {
            let shape = model.params().get(s.param).value.shape();
            tensors.push(RawTensor::from_slice(format!("{OPTIM_PREFIX}m.{}", s.name), shape, &s.m));
            tensors.push(RawTensor::from_slice(format!("{OPTIM_PREFIX}v.{}", s.name), shape, &s.v));
            if let Some(slow) = &s.slow {
                tensors.push(RawTensor::from_slice(format!("{OPTIM_PREFIX}slow.{}", s.name), shape, slow));
            }
        }
    }
    Ok(Checkpoint { config_json: cfg.to_json()?, step, tensors })
}

/// Rebuilds the run configuration and model from a checkpoint. Every
/// model tensor must be present with its exact shape.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Mltr<f32>)> {
    let cfg = RunConfig::from_json(&ck.config_json).map_err(|e| Error::Corrupt(format!("embedded config: {e}")))?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.backbone.pretrained = None;
    let mut model = Mltr::<f32>::new(model_cfg, cfg.train.seed)?;
    checkpoint::load_into(model.params_mut(), &ck.tensors, |n| !n.starts_with(OPTIM_PREFIX), true)?;
    Ok((cfg, model))
}

/// Restores optimizer state saved by [`to_checkpoint`].
pub fn optimizer_from_checkpoint(cfg: &RunConfig, model: &Mltr<f32>, ck: &Checkpoint) -> Result<Optimizer<f32>> {
    let mut opt = Optimizer::new(model.params(), cfg.train.adam, cfg.train.lookahead)?;
    let load = |kind: &str, name: &str| -> Result<Vec<f32>> {
        let key = format!("{OPTIM_PREFIX}{kind}.{name}");
        let t = ck.get(&key).ok_or_else(|| Error::Mismatch(vec![format!("{key}: missing")]))?;
        Ok(t.to_tensor::<f32>()?.into_data())
    };
    let slots = opt
        .state
        .slots
        .iter()
        .map(|s| {
            Ok(Slot {
                m: load("m", &s.name)?,
                v: load("v", &s.name)?,
                slow: if s.slow.is_some() { Some(load("slow", &s.name)?) } else { None },
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    opt.state = OptimState { step: ck.step, slots };
    Ok(opt)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mltr<f32>,
    pub history: Vec<EpochLog>,
    /// Evaluation metrics of the best epoch, whose state is `checkpoint`.
    pub metrics: Metrics,
    pub best_epoch: u64,
    pub checkpoint: Checkpoint,
}

/// Called after every epoch with the log row and, when the evaluation
/// accuracy improved, the new best checkpoint.
pub trait EpochSink {
    fn epoch(&mut self, log: &EpochLog, best: Option<&Checkpoint>) -> Result<()>;
}

impl EpochSink for () {
    fn epoch(&mut self, _: &EpochLog, _: Option<&Checkpoint>) -> Result<()> {
        Ok(())
    }
}

/// Writes `log.csv` row by row and `model.ckpt` at every new best epoch.
pub struct DirSink<'a> {
    pub dir: &'a Path,
}

pub const LOG_FILE: &str = "log.csv";
pub const CKPT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";

impl EpochSink for DirSink<'_> {
    fn epoch(&mut self, log: &EpochLog, best: Option<&Checkpoint>) -> Result<()> {
        use std::io::Write;
        let path = self.dir.join(LOG_FILE);
        let fresh = log.epoch == 0;
        let mut f = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?;
        if fresh {
            writeln!(f, "{LOG_HEADER}")?;
        }
        writeln!(f, "{}", log.csv_row())?;
        if let Some(ck) = best {
            ck.write(&self.dir.join(CKPT_FILE))?;
        }
        Ok(())
    }
}

/// Runs the configured number of epochs (or until the training-accuracy
/// target is met). The learning rate follows a per-step cosine schedule
/// over the planned number of steps; one masking ratio is drawn per step.
pub fn train(cfg: &RunConfig, data: &RunData, sink: &mut dyn EpochSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let seed = t.seed;
    let mut model = Mltr::<f32>::new(cfg.model.clone(), seed)?;
    let mut opt = Optimizer::new(model.params(), t.adam, t.lookahead)?;
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(t.batch) as u64;
    let total_steps = steps_per_epoch * t.epochs;
    let eval_is_train = data.eval_split == Split::Train;

    let mut history = Vec::new();
    let mut best: Option<(f64, u64, Metrics, Checkpoint)> = None;
    for epoch in 0..t.epochs {
        let (mut total, mut ce, mut aux) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for idx in batch_order(n, t.batch, seed, epoch) {
            let step = opt.step_count();
            lr = cosine_lr(step, total_steps, t.lr_max, t.lr_min);
            let rho = model.sample_ratio(&mut rng::stream(seed, &[streams::RATIO, step]))?;
            let samples: Vec<_> = idx.iter().map(|&i| data.train.get(i)).collect();
            let r = batch_gradients(&model, &samples, rho, seed, step)?;
            opt.step(model.params_mut(), &r.grads, lr)?;
            let w = samples.len() as f64;
            total += r.loss_total * w;
            ce += r.loss_ce * w;
            aux += r.loss_aux * w;
        }
        let train_metrics = evaluate(&model, &data.train.base)?;
        let eval_metrics = if eval_is_train { train_metrics.clone() } else { evaluate(&model, &data.eval)? };
        let log = EpochLog {
            epoch,
            step: opt.step_count(),
            lr,
            loss_total: total / n as f64,
            loss_ce: ce / n as f64,
            loss_aux: cfg.model.toggles.aux_loss.then_some(aux / n as f64),
            train_acc: train_metrics.accuracy,
        };
        let improved = best.as_ref().is_none_or(|(acc, ..)| eval_metrics.accuracy > *acc);
        let ck = if improved { Some(to_checkpoint(cfg, &model, Some(&opt))?) } else { None };
        sink.epoch(&log, ck.as_ref())?;
        log::info!(
            "epoch {epoch}: loss {:.5} (ce {:.5}) train acc {:.4} eval acc {:.4}",
            log.loss_total,
            log.loss_ce,
            log.train_acc,
            eval_metrics.accuracy
        );
        let done = t.target_train_accuracy.is_some_and(|target| log.train_acc >= target);
        history.push(log);
        if let Some(ck) = ck {
            best = Some((eval_metrics.accuracy, epoch, eval_metrics, ck));
        }
        if done {
            break;
        }
    }
    let (_, best_epoch, metrics, checkpoint) =
        best.ok_or_else(|| Error::Config("train.epochs must be at least 1".into()))?;
    Ok(TrainOutcome { model, history, metrics, best_epoch, checkpoint })
}

/// Trains the latent-embedder backbone as a plain classifier (backbone,
/// global average pooling, linear head) and returns a checkpoint whose
/// backbone tensors can be loaded through `backbone.pretrained`.
pub fn pretrain_backbone(cfg: &RunConfig, data: &RunData, epochs: u64) -> Result<Checkpoint> {
    let spec = &cfg.model.backbone;
    spec.validate()?;
    let seed = cfg.train.seed;
    let mut rng = rng::stream(seed, &[streams::INIT, 1]);
    let mut store = ParamStore::<f32>::new();
    // Pretraining always updates the backbone, whatever the downstream
    // freeze flag says.
    let trainable = BackboneSpec { freeze: false, pretrained: None, ..spec.clone() };
    let backbone = Backbone::build(&trainable, &mut store, &mut rng)?;
    let head = Linear::new(&mut store, &mut rng, "pretrain.head", spec.out_channels(), cfg.model.n_classes)?;
    let mut opt = Optimizer::new(&store, cfg.train.adam, cfg.train.lookahead)?;
    let n = data.train.len();
    let total_steps = n.div_ceil(cfg.train.batch) as u64 * epochs;
    let c = spec.out_channels();
    for epoch in 0..epochs {
        for idx in batch_order(n, cfg.train.batch, seed, epoch) {
            let lr = cosine_lr(opt.step_count(), total_steps, cfg.train.lr_max, cfg.train.lr_min);
            let samples: Vec<_> = idx.iter().map(|&i| data.train.get(i)).collect();
            let per_sample = samples
                .par_iter()
                .map(|(x, label)| {
                    let mut tape = Tape::new();
                    let bound = store.bind(&mut tape, true);
                    let xv = tape.constant(x.clone());
                    let feat = backbone.forward(&mut tape, &bound, xv)?;
                    let pooled = tape.adaptive_avg_pool(feat, 1, 1)?;
                    let flat = tape.reshape(pooled, &[1, c])?;
                    let logits = head.forward(&mut tape, &bound, flat)?;
                    let logits = tape.reshape(logits, &[cfg.model.n_classes])?;
                    let loss = tape.cross_entropy(logits, *label)?;
                    tape.backward(loss)?;
                    Ok(store.iter().map(|(id, _)| tape.grad(bound.var(id)).map(<[f32]>::to_vec)).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Vec<Option<Vec<f32>>> = vec![None; store.len()];
            for sample in per_sample {
                accumulate(&mut grads, sample);
            }
            scale_grads(&mut grads, samples.len() as f32);
            opt.step(&mut store, &grads, lr)?;
        }
    }
    let tensors =
        checkpoint::store_tensors(&store).into_iter().filter(|t| t.name.starts_with(BACKBONE_PREFIX)).collect();
    Ok(Checkpoint { config_json: cfg.to_json()?, step: opt.step_count(), tensors })
}

/// Post-softmax attention of one layer and head at inference, as an
/// `L × L` row-major matrix with `L = N + 1`. Layers count encoder blocks
/// first, then decoder blocks.
pub fn attention_map(model: &Mltr<f32>, image: &Tensor<f32>, layer: usize, head: usize) -> Result<Tensor<f32>> {
    let layers = model.num_layers();
    let heads = model.config().heads;
    if layer >= layers || head >= heads {
        return Err(Error::Index(format!("layer {layer} head {head} outside {layers} layers x {heads} heads")));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let out = model.forward_infer(&mut tape, &bound, image)?;
    Ok(tape.value(out.attention[layer][head]).clone())
}

pub fn attention_csv(map: &Tensor<f32>) -> String {
    let cols = map.shape()[1];
    let mut out = String::new();
    for row in map.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Attention map scaled so its maximum is white.
pub fn attention_image(map: &Tensor<f32>) -> ImageBuffer {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let max = map.data().iter().cloned().fold(0.0f32, f32::max);
    let data = map
        .data()
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    ImageBuffer { width: w, height: h, channels: 1, data }
}
