//! Adaptive hard sample weighting: decayed cumulative losses pick the
//! samples that take part in backpropagation and scale their losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AhswConfig {
    /// Epochs without weighting.
    pub warmup: usize,
    /// Percentage of samples that participate after warm-up.
    pub sample_percent: f64,
    /// Weight of the hardest sample.
    pub lambda: f64,
    /// Per-epoch decay of past losses.
    pub gamma: f64,
}

impl Default for AhswConfig {
    fn default() -> Self {
        Self { warmup: 10, sample_percent: 70.0, lambda: 5.0, gamma: 0.5 }
    }
}

impl AhswConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_percent > 0.0 && self.sample_percent <= 100.0) {
            return Err(Error::Config(format!("ahsw.sample_percent must lie in (0, 100], got {}", self.sample_percent)));
        }
        if !(self.lambda > 1.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("ahsw.lambda must exceed 1, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("ahsw.gamma must lie in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Unweighted per-epoch losses of every sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLossHistory {
    pub losses: Vec<Vec<f64>>,
}

impl SampleLossHistory {
    pub fn new(n_samples: usize) -> Self {
        Self { losses: vec![Vec::new(); n_samples] }
    }

    pub fn n_samples(&self) -> usize {
        self.losses.len()
    }

    /// Appends one epoch of losses, one per sample.
    pub fn record(&mut self, epoch_losses: &[f64]) -> Result<()> {
        if epoch_losses.len() != self.losses.len() {
            return Err(Error::invalid(format!("expected {} sample losses, got {}", self.losses.len(), epoch_losses.len())));
        }
        if let Some(bad) = epoch_losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::invalid(format!("sample losses must be finite and non-negative, got {bad}")));
        }
        for (h, &l) in self.losses.iter_mut().zip(epoch_losses) {
            h.push(l);
        }
        Ok(())
    }

    /// Cumulatives of every sample for epoch `n` (1-based).
    pub fn cumulatives(&self, gamma: f64, n: usize) -> Result<Vec<f64>> {
        self.losses.iter().map(|h| cumulative_loss(&h[..(n - 1).min(h.len())], gamma, n)).collect()
    }
}

/// `Σ_{e=1}^{n−1} γ^{n−1−e} ℓ^(e)` over a history of length `n − 1`.
pub fn cumulative_loss(history: &[f64], gamma: f64, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("cumulative loss is undefined before the second epoch"));
    }
    if history.len() != n - 1 {
        return Err(Error::invalid(format!("epoch {n} needs {} past losses, got {}", n - 1, history.len())));
    }
    Ok(history.iter().enumerate().map(|(i, &l)| gamma.powi((n - 2 - i) as i32) * l).sum())
}

/// Participation and loss weight of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub participates: bool,
    pub weight: f64,
}

/// Samples taking part after warm-up: `⌈K/100 · N⌉`.
pub fn participant_count(sample_percent: f64, n: usize) -> usize {
    ((sample_percent * n as f64 / 100.0).ceil() as usize).min(n)
}

/// Plans epoch `n` (1-based). During warm-up every sample takes part with
/// weight 1; afterwards the largest cumulatives take part (ties by lower
/// sample id) and weights are min-max scaled into `[1, λ]` over all samples.
pub fn plan_epoch(cumulatives: &[f64], cfg: &AhswConfig, n: usize) -> Vec<SamplePlan> {
    let all = SamplePlan { participates: true, weight: 1.0 };
    if n <= cfg.warmup {
        return vec![all; cumulatives.len()];
    }
    let lo = cumulatives.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cumulatives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut order: Vec<usize> = (0..cumulatives.len()).collect();
    order.sort_by(|&a, &b| cumulatives[b].total_cmp(&cumulatives[a]).then(a.cmp(&b)));
    let mut out: Vec<SamplePlan> = cumulatives
        .iter()
        .map(|&c| {
            let weight = if hi > lo { 1.0 + (cfg.lambda - 1.0) * (c - lo) / (hi - lo) } else { 1.0 };
            SamplePlan { participates: false, weight: weight.clamp(1.0, cfg.lambda) }
        })
        .collect();
    for &i in &order[..participant_count(cfg.sample_percent, cumulatives.len())] {
        out[i].participates = true;
    }
    out
}
