//! Dataset directory convention and the train/test split.
//!
//! A dataset root holds one subdirectory per class, `normal`, `mild`,
//! `moderate` and `severe` (ordinal indices 0 to 3), containing `.pgm` or
//! `.ppm` files. An optional `split.json` pins the split; otherwise it is
//! derived from the seed.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

pub const CLASSES: [&str; 4] = ["normal", "mild", "moderate", "severe"];
pub const SPLIT_FILE: &str = "split.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub class: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split_ratio: f64,
    pub entries: Vec<Entry>,
}

/// Pinned split as stored in `split.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, class: usize, split: Split) -> usize {
        self.split(split).filter(|e| e.class == class).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.class >= CLASSES.len() {
                return Err(Error::Dataset(format!("{}: class {} out of range", e.path, e.class)));
            }
            if !seen.insert(&e.path) {
                return Err(Error::Dataset(format!("{} listed twice", e.path)));
            }
        }
        Ok(())
    }
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASSES.iter().position(|c| *c == name)
}

/// Number of training images per class for a `ratio` split.
///
/// The overall training count is `round(total·ratio)`; each class gets the
/// floor of its share and the leftover goes to the classes with the
/// largest fractional parts, earlier classes first on ties.
pub fn apportion(counts: &[usize], ratio: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (total as f64 * ratio).round() as usize;
    let shares: Vec<f64> = counts.iter().map(|&n| n as f64 * ratio).collect();
    let mut train: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = target.saturating_sub(train.iter().sum());
    for &c in order.iter().cycle().take(counts.len() * 2) {
        if left == 0 {
            break;
        }
        if train[c] < counts[c] {
            train[c] += 1;
            left -= 1;
        }
    }
    train
}

fn list_class(root: &Path, class: &str) -> Result<Vec<String>> {
    let dir = root.join(class);
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing class directory {}", dir.display())));
    }
    let mut files = BTreeSet::new();
    for entry in std::fs::read_dir(&dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        let lower = name.to_ascii_lowercase();
        if lower.ends_with(".pgm") || lower.ends_with(".ppm") {
            files.insert(format!("{class}/{name}"));
        }
    }
    if files.is_empty() {
        return Err(Error::Dataset(format!("class directory {} has no images", dir.display())));
    }
    Ok(files.into_iter().collect())
}

/// Scans `root` and assigns every image to a split, from `split.json` when
/// present and otherwise by a seeded per-class shuffle.
pub fn load_manifest(root: &Path, split_ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(split_ratio > 0.0 && split_ratio <= 1.0) {
        return Err(Error::Config(format!("split ratio {split_ratio} outside (0, 1]")));
    }
    let per_class: Vec<Vec<String>> = CLASSES.iter().map(|c| list_class(root, c)).collect::<Result<_>>()?;
    let pinned = root.join(SPLIT_FILE);
    let mut entries = Vec::new();
    if pinned.is_file() {
        let split: SplitFile = serde_json::from_str(&std::fs::read_to_string(&pinned)?)?;
        let present: HashSet<&String> = per_class.iter().flatten().collect();
        let train: HashSet<&String> = split.train.iter().collect();
        for (list, tag) in [(&split.train, Split::Train), (&split.test, Split::Test)] {
            for path in list {
                if !present.contains(path) {
                    return Err(Error::Dataset(format!("{SPLIT_FILE} lists missing image {path}")));
                }
                if tag == Split::Test && train.contains(path) {
                    return Err(Error::Dataset(format!("{path} is in both splits")));
                }
                let class = path.split('/').next().and_then(class_index).expect("listed under a class directory");
                entries.push(Entry { path: path.clone(), class, split: tag });
            }
        }
    } else {
        let counts: Vec<usize> = per_class.iter().map(Vec::len).collect();
        let train = apportion(&counts, split_ratio);
        for (class, files) in per_class.into_iter().enumerate() {
            let mut order = files;
            order.shuffle(&mut rng::stream(seed, &[streams::SPLIT, class as u64]));
            for (i, path) in order.into_iter().enumerate() {
                let split = if i < train[class] { Split::Train } else { Split::Test };
                entries.push(Entry { path, class, split });
            }
        }
    }
    let manifest = DatasetManifest { seed, split_ratio, entries };
    manifest.validate()?;
    Ok(manifest)
}

pub fn resolve(root: &Path, entry: &Entry) -> PathBuf {
    entry.path.split('/').fold(root.to_path_buf(), |p, part| p.join(part))
}
