//! Occupancy IoU and per-category IoU from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{EMPTY, NUM_CLASSES};

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<[u64; NUM_CLASSES]>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self { counts: vec![[0; NUM_CLASSES]; NUM_CLASSES] }
    }
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::invalid(format!("grid shapes differ: {} vs {} voxels", truth.len(), pred.len())));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t as usize >= NUM_CLASSES || p as usize >= NUM_CLASSES {
                return Err(Error::invalid(format!("label out of range: {t} / {p}")));
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// IoU of category `c`, or `None` when it is absent from both truth and prediction.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let tp = self.counts[c][c];
        let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
        let fp: u64 = self.counts.iter().map(|row| row[c]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// IoU of the occupied / empty split.
    pub fn occupancy_iou(&self) -> Option<f64> {
        let e = EMPTY as usize;
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for t in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                let n = self.counts[t][p];
                match (t != e, p != e) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fn_ += n,
                    _ => {}
                }
            }
        }
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn report(&self) -> Metrics {
        let per_class: Vec<Option<f64>> = (0..NUM_CLASSES).map(|c| self.class_iou(c)).collect();
        let present: Vec<f64> = per_class[1..].iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        Metrics { iou: self.occupancy_iou().unwrap_or(0.0), miou, per_class_iou: per_class }
    }
}

/// Evaluation metrics as fractions in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    /// Mean over semantic categories present in truth or prediction.
    pub miou: f64,
    /// Indexed by category, empty included; `None` when absent from both.
    pub per_class_iou: Vec<Option<f64>>,
}

impl Metrics {
    /// Mean IoU over `categories`, skipping absent ones.
    pub fn mean_over(&self, categories: &[usize]) -> Option<f64> {
        let v: Vec<f64> = categories.iter().filter_map(|&c| self.per_class_iou.get(c).copied().flatten()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}
