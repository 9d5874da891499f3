//! Entropy-ranked query proposal.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_into, Real, Tensor};

/// Shannon entropy (natural log) of `softmax(logits)` per row, with `0·ln 0 = 0`.
pub fn entropy_from_logits<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    let c = logits.cols;
    let mut p = vec![0.0f64; c];
    let mut row = vec![0.0f64; c];
    (0..logits.rows)
        .map(|r| {
            for (d, s) in row.iter_mut().zip(logits.row(r)) {
                *d = s.f64();
            }
            softmax_into(&row, &mut p);
            -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
        })
        .collect()
}

/// Selected coarse voxels and the entropy field they were ranked by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyMask {
    /// Ascending voxel indices.
    pub selected: Vec<usize>,
    pub entropies: Vec<f64>,
}

impl EntropyMask {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains_flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.entropies.len()];
        for &v in &self.selected {
            f[v] = true;
        }
        f
    }
}

/// `⌈K/100 · n⌉`, clamped to `n`.
pub fn selection_count(k_percent: f64, n: usize) -> usize {
    if k_percent <= 0.0 {
        return 0;
    }
    ((k_percent * n as f64 / 100.0).ceil() as usize).min(n)
}

/// The `⌈K%·V⌉` highest-entropy voxels; ties go to the lower index.
pub fn select_queries(entropies: Vec<f64>, k_percent: f64) -> EntropyMask {
    let n = selection_count(k_percent, entropies.len());
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]).then(a.cmp(&b)));
    let mut selected = order[..n].to_vec();
    selected.sort_unstable();
    EntropyMask { selected, entropies }
}
