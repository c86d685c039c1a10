//! Classification metrics computed from a single confusion matrix.
//!
//! Orientation: `counts[i][j]` is the number of samples whose true class is
//! `i` and predicted class is `j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut cm = Self::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.k();
        if truth >= k || pred >= k {
            return Err(Error::Index(format!("class ({truth}, {pred}) outside 0..{k}")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    fn require_samples(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Contract("confusion matrix is empty".into())),
            t => Ok(t as f64),
        }
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.require_samples()?;
    Ok(cm.trace() as f64 / total)
}

/// Unweighted mean of per-class F1. A class with `P + R == 0` contributes 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.require_samples()?;
    let k = cm.k();
    let c = cm.counts();
    let mut sum = 0.0;
    for (i, row) in c.iter().enumerate() {
        let tp = row[i] as f64;
        let predicted: u64 = c.iter().map(|r| r[i]).sum();
        let actual: u64 = row.iter().sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        if p + r > 0.0 {
            sum += 2.0 * p * r / (p + r);
        }
    }
    Ok(sum / k as f64)
}

/// Quadratic weighted kappa `1 − ΣW·O / ΣW·E` with `W = (i−j)²/(K−1)²`.
///
/// When all mass sits on one class for both raters `ΣW·E` is zero; the
/// result is then 1 if `ΣW·O` is also zero and a contract error otherwise.
pub fn qw_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.k();
    if k < 2 {
        return Err(Error::Contract("kappa needs at least two classes".into()));
    }
    let total = cm.require_samples()?;
    let c = cm.counts();
    let rows: Vec<f64> = c.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| (0..k).map(|i| c[i][j]).sum::<u64>() as f64).collect();
    let norm = ((k - 1) * (k - 1)) as f64;
    let (mut wo, mut we) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let d = i as f64 - j as f64;
            let w = d * d / norm;
            wo += w * c[i][j] as f64;
            we += w * rows[i] * cols[j] / total;
        }
    }
    if we == 0.0 {
        return if wo == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::Contract("kappa undefined: zero expected disagreement".into()))
        };
    }
    Ok(1.0 - wo / we)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub qw_kappa: f64,
    pub confusion_matrix: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            accuracy: accuracy(cm)?,
            f1_macro: macro_f1(cm)?,
            qw_kappa: qw_kappa(cm)?,
            confusion_matrix: cm.counts().to_vec(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
