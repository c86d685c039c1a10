//! Data loading, preprocessing, augmentation and batching.

pub mod augment;
pub mod manifest;
pub mod pnm;
pub mod preprocess;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;
use augment::AugmentConfig;
use manifest::{DatasetManifest, Split};
use pnm::ImageBuffer;
use preprocess::PreprocessConfig;

/// Preprocessed `[1, H, W]` images with class labels, in manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Preprocesses decoded images in parallel; the output keeps input
    /// order.
    pub fn from_buffers(
        buffers: &[ImageBuffer],
        labels: Vec<usize>,
        width: usize,
        height: usize,
        cfg: &PreprocessConfig,
    ) -> Result<Self> {
        let images =
            buffers.par_iter().map(|b| preprocess::preprocess(b, width, height, cfg)).collect::<Result<Vec<_>>>()?;
        Ok(Self { images, labels })
    }

    /// Reads and preprocesses the images of one split.
    pub fn load(
        root: &Path,
        manifest: &DatasetManifest,
        split: Split,
        width: usize,
        height: usize,
        cfg: &PreprocessConfig,
    ) -> Result<Self> {
        let entries: Vec<_> = manifest.split(split).collect();
        let buffers = entries
            .par_iter()
            .map(|e| {
                let path = manifest::resolve(root, e);
                pnm::read(&path).map_err(|err| match err {
                    Error::Io(io) => Error::Dataset(format!("{}: {io}", path.display())),
                    Error::Format { offset, msg } => {
                        Error::Dataset(format!("{}: byte {offset}: {msg}", path.display()))
                    }
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_buffers(&buffers, entries.iter().map(|e| e.class).collect(), width, height, cfg)
    }
}

/// Training set expanded by augmentation. Item `i` is copy `i % m` of base
/// image `i / m` for multiplier `m`; its random draws come from a stream
/// keyed by `i`, so every item is reproducible on its own.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub base: Dataset,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl TrainSet {
    pub fn new(base: Dataset, augment: AugmentConfig, seed: u64) -> Result<Self> {
        if augment.multiplier == 0 {
            return Err(Error::Config("augmentation multiplier must be at least 1".into()));
        }
        Ok(Self { base, augment, seed })
    }

    pub fn len(&self) -> usize {
        self.base.len() * self.augment.multiplier
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> (Tensor<f32>, usize) {
        let m = self.augment.multiplier;
        let (b, copy) = (i / m, i % m);
        let mut rng = rng::stream(self.seed, &[streams::AUGMENT, i as u64]);
        (augment::augmented_copy(&self.base.images[b], copy, &mut rng, &self.augment), self.base.labels[b])
    }
}

/// Sample indices for one epoch, shuffled by a stream keyed by
/// `(seed, epoch)` and cut into batches; the last batch may be short.
pub fn batch_order(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[streams::SHUFFLE, epoch]));
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Stacked `[B, C, H, W]` batches with their labels.
pub fn batch_iter(
    set: &TrainSet,
    batch: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = (Tensor<f32>, Vec<usize>)> + '_ {
    batch_order(set.len(), batch, seed, epoch).into_iter().map(move |idx| {
        let items: Vec<_> = idx.iter().map(|&i| set.get(i)).collect();
        let mut shape = vec![items.len()];
        shape.extend_from_slice(items[0].0.shape());
        let data = items.iter().flat_map(|(t, _)| t.data().iter().copied()).collect();
        let labels = items.iter().map(|(_, l)| *l).collect();
        (Tensor::new(shape, data).expect("uniform sample shapes"), labels)
    })
}
