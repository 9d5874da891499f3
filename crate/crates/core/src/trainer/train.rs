//! Dataset generation, the training loop, evaluation and work counters.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::config::RunConfig;
use super::metrics::{ConfusionMatrix, Metrics};
use super::model::{argmax_labels, Model, ModelPlan};
use super::optim::{AdamHyper, AdamW};
use crate::ahsw::{plan_epoch, SampleLossHistory, SamplePlan};
use crate::autograd::{Graph, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::fusion::LayerCounts;
use crate::losses::LossBreakdown;
use crate::synthdata::{derive_rng, generate_sequence, read_dataset, read_sequence, write_dataset, write_sequence, DatasetIndex, SceneSample, SequenceEntry, Split};

const RNG_INIT: u64 = 31;
const RNG_FORWARD: u64 = 32;
/// Epoch slot used for evaluation-time randomness.
pub(crate) const EVAL_EPOCH: u64 = u64::MAX;

/// One sequence; its last frame is the supervised target.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<SceneSample>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let index = read_dataset(root)?;
        let read = |split| -> Result<Vec<Sequence>> {
            index
                .split(split)
                .map(|e| Ok(Sequence { name: e.name.clone(), frames: read_sequence(&root.join(&e.name))?.1 }))
                .collect()
        };
        Ok(Self { train: read(Split::Train)?, val: read(Split::Val)? })
    }

    /// The dataset [`generate_dataset`] would write, kept in memory.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let n_train = cfg.data.train_sequences;
        let mut out = Self { train: Vec::new(), val: Vec::new() };
        for i in 0..n_train + cfg.data.val_sequences {
            let frames = generate_sequence(&cfg.data.scene_spec(cfg.data.sequence_seed(i))?)?;
            if i < n_train {
                out.train.push(Sequence { name: format!("train_{i:04}"), frames });
            } else {
                out.val.push(Sequence { name: format!("val_{:04}", i - n_train), frames });
            }
        }
        Ok(out)
    }

    pub fn split(&self, split: Split) -> &[Sequence] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Writes `data.train_sequences + data.val_sequences` sequences under `out`.
pub fn generate_dataset(cfg: &RunConfig, out: &Path) -> Result<DatasetIndex> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n_train = cfg.data.train_sequences;
    let mut entries = Vec::new();
    for i in 0..n_train + cfg.data.val_sequences {
        let (split, name) = if i < n_train { (Split::Train, format!("train_{i:04}")) } else { (Split::Val, format!("val_{:04}", i - n_train)) };
        let seed = cfg.data.sequence_seed(i);
        let spec = cfg.data.scene_spec(seed)?;
        let samples = generate_sequence(&spec)?;
        write_sequence(&out.join(&name), &spec, &samples)?;
        entries.push(SequenceEntry { name, split, seed });
    }
    let index = DatasetIndex::new(entries);
    write_dataset(out, &index)?;
    Ok(index)
}

/// One line of the metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Completed epochs; 0 is the untrained model.
    pub epoch: usize,
    /// Mean unweighted training losses over every sample (evaluated or trained).
    pub train: Option<LossBreakdown>,
    /// Mean validation losses.
    pub val: LossBreakdown,
    pub metrics: Metrics,
    pub participants: usize,
    /// Smallest and largest weight among participants.
    pub weight_range: [f64; 2],
    /// Work counters of one forward pass of the current frame, per layer.
    pub layer_counts: Vec<LayerCounts>,
    pub wall_time_s: f64,
    pub fusion_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    /// Validation cross-entropy of the untrained model.
    pub fn initial_val_ce(&self) -> Option<f64> {
        self.records.iter().find(|r| r.epoch == 0).map(|r| r.val.ce)
    }

    /// First epoch whose validation cross-entropy is at or below `threshold`.
    pub fn epochs_to_val_ce(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.epoch > 0 && r.val.ce <= threshold).map(|r| r.epoch)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

pub struct TrainOutcome<T> {
    pub report: TrainReport,
    pub checkpoint: Checkpoint<T>,
    /// Per-epoch participation plans, for invariant checks.
    pub plans: Vec<Vec<SamplePlan>>,
}

pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch:03}.ckpt"))
}

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Trains from scratch or from `resume`, writing a checkpoint per epoch and
/// one metrics line per epoch under `out`.
pub fn train<T: Real>(cfg: &RunConfig, data: &Dataset, out: &Path, resume: Option<Checkpoint<T>>, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("the dataset has no training sequences"));
    }
    let eff = cfg.effective();
    let plan = ModelPlan::<T>::new(&eff)?;
    check_grid(data, &plan)?;
    let n = data.train.len();
    let hyper = AdamHyper { lr: cfg.train.lr, beta1: cfg.train.beta1, beta2: cfg.train.beta2, eps: cfg.train.adam_eps, weight_decay: cfg.train.weight_decay };

    let (model, mut store, mut opt, mut history, start) = match resume {
        Some(ck) => {
            if ck.header.kind != CheckpointKind::Model || ck.header.config_hash != cfg.hash() {
                return Err(Error::Checkpoint("resume checkpoint was trained with a different configuration".into()));
            }
            let model = ck.header.model.ok_or_else(|| Error::Checkpoint("checkpoint has no model".into()))?;
            let opt = ck.optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
            if ck.header.history.n_samples() != n {
                return Err(Error::Checkpoint("checkpoint history does not match the dataset".into()));
            }
            (model, ck.params, opt, ck.header.history, ck.header.epoch)
        }
        None => {
            let mut store = ParamStore::new();
            let model = Model::new(&mut store, &eff, &mut derive_rng(cfg.train.seed, RNG_INIT, 0, 0));
            let opt = AdamW::new(&store, hyper);
            (model, store, opt, SampleLossHistory::new(n), 0)
        }
    };

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut records = if start > 0 && metrics_path.exists() { read_metrics(&metrics_path)?.into_iter().filter(|r| r.epoch <= start).collect() } else { Vec::new() };
    if start == 0 {
        let t0 = Instant::now();
        let (metrics, val, fusion_time) = evaluate_split(&model, &store, &plan, &eff, &data.val)?;
        let counts = count_fusion_work(&model, &store, &plan, &eff, &data.train[0].frames)?;
        let rec = EpochRecord {
            epoch: 0,
            train: None,
            val,
            metrics,
            participants: 0,
            weight_range: [0.0, 0.0],
            layer_counts: counts,
            wall_time_s: t0.elapsed().as_secs_f64(),
            fusion_time_s: fusion_time.as_secs_f64(),
        };
        on_epoch(&rec);
        records.push(rec);
    }
    write_metrics(&metrics_path, &records)?;

    let mut plans = Vec::new();
    for epoch in start + 1..=cfg.train.epochs {
        let t0 = Instant::now();
        let mut fusion_time = Duration::ZERO;
        let plan_e = epoch_plan(cfg, &history, epoch, n)?;
        let participants: Vec<usize> = (0..n).filter(|&i| plan_e[i].participates).collect();
        let mut losses = vec![0.0; n];
        let mut train_mean = LossBreakdown::default();
        let mut counts = Vec::new();
        for batch in participants.chunks(cfg.train.batch_size) {
            let mut grads: Vec<Option<Tensor<T>>> = vec![None; store.len()];
            for &i in batch {
                let g = Graph::new();
                let frames = &data.train[i].frames;
                let fwd = model.forward(&g, &store, &plan, &eff, frames, forward_seed(cfg, epoch as u64, i))?;
                fusion_time += fwd.fusion_time;
                counts = fwd.current().iter().map(|r| r.counts).collect();
                let (loss, parts) = model.sample_loss(&g, &store, &eff, &fwd, frames, epoch, i)?;
                if !parts.total.is_finite() {
                    return Err(Error::Invalid(format!("non-finite loss at epoch {epoch}, training sample {i}")));
                }
                losses[i] = history_loss(cfg, &parts);
                train_mean.accumulate(&parts, 1.0 / n as f64);
                let scaled = loss.scale(T::c(plan_e[i].weight / batch.len() as f64));
                let gr = g.backward(scaled);
                for (slot, id) in grads.iter_mut().zip(store.ids()) {
                    if let Some(t) = gr.param(id) {
                        match slot {
                            Some(acc) => acc.add_assign(t),
                            None => *slot = Some(t.clone()),
                        }
                    }
                }
            }
            opt.update(&mut store, &grads);
        }
        for i in (0..n).filter(|&i| !plan_e[i].participates) {
            let g = Graph::inference();
            let frames = &data.train[i].frames;
            let fwd = model.forward(&g, &store, &plan, &eff, frames, forward_seed(cfg, epoch as u64, i))?;
            fusion_time += fwd.fusion_time;
            let (_, parts) = model.sample_loss(&g, &store, &eff, &fwd, frames, epoch, i)?;
            losses[i] = history_loss(cfg, &parts);
            train_mean.accumulate(&parts, 1.0 / n as f64);
        }
        history.record(&losses)?;
        let (metrics, val, val_fusion) = evaluate_split(&model, &store, &plan, &eff, &data.val)?;
        fusion_time += val_fusion;
        let weights: Vec<f64> = participants.iter().map(|&i| plan_e[i].weight).collect();
        let rec = EpochRecord {
            epoch,
            train: Some(train_mean),
            val,
            metrics,
            participants: participants.len(),
            weight_range: [weights.iter().copied().fold(f64::INFINITY, f64::min), weights.iter().copied().fold(f64::NEG_INFINITY, f64::max)],
            layer_counts: counts,
            wall_time_s: t0.elapsed().as_secs_f64(),
            fusion_time_s: fusion_time.as_secs_f64(),
        };
        on_epoch(&rec);
        records.push(rec);
        write_metrics(&metrics_path, &records)?;
        plans.push(plan_e);
        let ck = Checkpoint::new(CheckpointKind::Model, epoch, cfg, Some(model.clone()), store.clone(), Some(opt.clone()), history.clone());
        ck.save(&checkpoint_path(out, epoch))?;
    }
    let checkpoint = Checkpoint::new(CheckpointKind::Model, cfg.train.epochs.max(start), cfg, Some(model), store, Some(opt), history);
    Ok(TrainOutcome { report: TrainReport { config_hash: cfg.hash(), records }, checkpoint, plans })
}

pub(crate) fn forward_seed(cfg: &RunConfig, epoch: u64, sample: usize) -> u64 {
    use rand::Rng;
    derive_rng(cfg.train.seed, RNG_FORWARD, epoch, sample as u64).random()
}

/// Loss stored in the sample history. The proxy term can be negative but is
/// bounded below by `−β`; the shift keeps the history non-negative and,
/// being the same for every sample, leaves every epoch plan unchanged.
fn history_loss(cfg: &RunConfig, parts: &LossBreakdown) -> f64 {
    let shift = if cfg.ablation.proxy_loss { cfg.loss.beta } else { 0.0 };
    (parts.total + shift).max(0.0)
}

fn epoch_plan(cfg: &RunConfig, history: &SampleLossHistory, epoch: usize, n: usize) -> Result<Vec<SamplePlan>> {
    let all = vec![SamplePlan { participates: true, weight: 1.0 }; n];
    if !cfg.ablation.ahsw || epoch <= cfg.ahsw.warmup.max(1) {
        return Ok(all);
    }
    let cumulatives = history.cumulatives(cfg.ahsw.gamma, epoch)?;
    Ok(plan_epoch(&cumulatives, &cfg.ahsw, epoch))
}

fn check_grid<T: Real>(data: &Dataset, plan: &ModelPlan<T>) -> Result<()> {
    for s in data.train.iter().chain(&data.val) {
        if s.frames.iter().any(|f| f.gt.grid != plan.fine) {
            return Err(Error::invalid(format!("sequence {} was generated on a different grid than the configuration", s.name)));
        }
    }
    Ok(())
}

fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Parses a metrics report written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e))).collect()
}

/// Metrics and mean losses over `seqs`, plus time spent in fusion layers.
pub fn evaluate_split<T: Real>(model: &Model, store: &ParamStore<T>, plan: &ModelPlan<T>, eff: &RunConfig, seqs: &[Sequence]) -> Result<(Metrics, LossBreakdown, Duration)> {
    let mut cm = ConfusionMatrix::default();
    let mut mean = LossBreakdown::default();
    let mut fusion = Duration::ZERO;
    for (i, s) in seqs.iter().enumerate() {
        let g = Graph::inference();
        let fwd = model.forward(&g, store, plan, eff, &s.frames, forward_seed(eff, EVAL_EPOCH, i))?;
        fusion += fwd.fusion_time;
        let (_, parts) = model.sample_loss(&g, store, eff, &fwd, &s.frames, EVAL_EPOCH as usize, i)?;
        mean.accumulate(&parts, 1.0 / seqs.len() as f64);
        let target = s.frames.last().expect("non-empty sequence");
        cm.add(&target.gt.labels, &argmax_labels(&fwd.logits.value()))?;
    }
    Ok((cm.report(), mean, fusion))
}

/// Predicted labels of the last frame of `frames` on the fine grid.
pub fn predict<T: Real>(ck: &Checkpoint<T>, frames: &[SceneSample], sample: usize) -> Result<Vec<u8>> {
    let target = frames.last().ok_or_else(|| Error::invalid("empty sequence"))?;
    let cfg = &ck.header.config;
    let fine = cfg.data.grid()?;
    if target.gt.grid != fine {
        return Err(Error::invalid("sample grid does not match the checkpoint's grid"));
    }
    match ck.header.kind {
        CheckpointKind::Oracle => Ok(target.gt.labels.clone()),
        CheckpointKind::Model => {
            let eff = cfg.effective();
            let model = ck.header.model.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no model".into()))?;
            let plan = ModelPlan::<T>::new(&eff)?;
            let g = Graph::inference();
            let fwd = model.forward(&g, &ck.params, &plan, &eff, frames, forward_seed(&eff, EVAL_EPOCH, sample))?;
            Ok(argmax_labels(&fwd.logits.value()))
        }
    }
}

/// Metrics of a checkpoint on one split of a dataset.
pub fn evaluate<T: Real>(ck: &Checkpoint<T>, data: &Dataset, split: Split) -> Result<Metrics> {
    let cfg = &ck.header.config;
    let fine = cfg.data.grid()?;
    let seqs = data.split(split);
    let mut cm = ConfusionMatrix::default();
    let model_plan = match ck.header.kind {
        CheckpointKind::Model => Some(ModelPlan::<T>::new(&cfg.effective())?),
        CheckpointKind::Oracle => None,
    };
    let eff = cfg.effective();
    for (i, s) in seqs.iter().enumerate() {
        let target = s.frames.last().ok_or_else(|| Error::invalid(format!("sequence {} is empty", s.name)))?;
        if s.frames.iter().any(|f| f.gt.grid != fine) {
            return Err(Error::invalid(format!("sequence {} does not match the checkpoint's grid", s.name)));
        }
        let pred = match (&model_plan, &ck.header.model) {
            (Some(plan), Some(model)) => {
                let g = Graph::inference();
                let fwd = model.forward(&g, &ck.params, plan, &eff, &s.frames, forward_seed(&eff, EVAL_EPOCH, i))?;
                argmax_labels(&fwd.logits.value())
            }
            (Some(_), None) => return Err(Error::Checkpoint("checkpoint has no model".into())),
            (None, _) => target.gt.labels.clone(),
        };
        cm.add(&target.gt.labels, &pred)?;
    }
    Ok(cm.report())
}

/// Per-layer work counters of one forward pass over the current frame.
pub fn count_fusion_work<T: Real>(model: &Model, store: &ParamStore<T>, plan: &ModelPlan<T>, eff: &RunConfig, frames: &[SceneSample]) -> Result<Vec<LayerCounts>> {
    let g = Graph::inference();
    let fwd = model.forward(&g, store, plan, eff, frames, forward_seed(eff, EVAL_EPOCH, 0))?;
    Ok(fwd.current().iter().map(|r| r.counts).collect())
}

/// Work counters and fusion-stage time for a freshly initialised model of `cfg`.
pub struct FusionProfile {
    pub counts: Vec<LayerCounts>,
    /// Fastest of the repeats, summed over `frames`.
    pub fusion_time: Duration,
}

/// Runs inference `repeats` times over `seqs` and keeps the fastest fusion time.
pub fn profile_fusion<T: Real>(cfg: &RunConfig, seqs: &[Sequence], repeats: usize) -> Result<FusionProfile> {
    let eff = cfg.effective();
    let plan = ModelPlan::<T>::new(&eff)?;
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &eff, &mut derive_rng(cfg.train.seed, RNG_INIT, 0, 0));
    let mut best = Duration::MAX;
    let mut counts = Vec::new();
    for _ in 0..repeats.max(1) {
        let mut total = Duration::ZERO;
        for (i, s) in seqs.iter().enumerate() {
            let g = Graph::inference();
            let fwd = model.forward(&g, &store, &plan, &eff, &s.frames, forward_seed(&eff, EVAL_EPOCH, i))?;
            total += fwd.fusion_time;
            counts = fwd.current().iter().map(|r| r.counts).collect();
        }
        best = best.min(total);
    }
    Ok(FusionProfile { counts, fusion_time: best })
}
