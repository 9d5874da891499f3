//! The full network: encoders, stacked sparse fusion layers, temporal fusion
//! and the upsampling decoder, plus the per-sample objective.

use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::autograd::{Graph, ParamStore, Real, Var};
use crate::backbones::{ImageEncoder, ImagePlan, LidarEncoder};
use crate::error::{Error, Result};
use crate::fusion::{EntropyMask, FrameContext, FusionLayer, LayerCounts, ProjectionCache, VoxelPoints};
use crate::geometry::{CameraModel, VoxelGridSpec};
use crate::losses::{ce_loss, lovasz_loss, proxy_loss, proxy_subsample, scal_geo, scal_sem, total_loss, LossBreakdown, LossTerms, ProxyBank};
use crate::synthdata::{derive_rng, SceneSample};
use crate::temporal::{temporal_fuse, DecoderParams, DecoderPlan, PosedVolume, TemporalParams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub image: ImageEncoder,
    pub lidar: LidarEncoder,
    pub layers: Vec<FusionLayer>,
    pub temporal: TemporalParams,
    pub decoder: DecoderParams,
    pub bank: ProxyBank,
}

impl Model {
    /// Builds the parameters of `cfg` (already [`RunConfig::effective`]).
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model.d;
        Self {
            image: ImageEncoder::new(store, d, cfg.model.image_hidden, rng),
            lidar: LidarEncoder::new(store, d, rng),
            layers: (0..cfg.fusion.n_layers).map(|l| FusionLayer::new(store, &format!("fusion{l}"), d, &cfg.fusion, rng)).collect(),
            temporal: TemporalParams::new(store, "temporal", d, rng),
            decoder: DecoderParams::new(store, "decoder", d, cfg.model.upsample, rng),
            bank: ProxyBank::new(store, rng),
        }
    }
}

/// Index structures shared by every sample of one configuration.
pub struct ModelPlan<T> {
    pub fine: VoxelGridSpec,
    pub coarse: VoxelGridSpec,
    pub rig: Vec<CameraModel>,
    pub image: ImagePlan<T>,
    pub projections: ProjectionCache,
    pub decoder: DecoderPlan<T>,
}

impl<T: Real> ModelPlan<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let fine = cfg.data.grid()?;
        let coarse = fine.coarsen(cfg.model.upsample)?;
        let rig = cfg.data.scene_spec(0)?.rig;
        let [w, h] = cfg.data.image_size;
        Ok(Self {
            fine,
            coarse,
            image: ImagePlan::new(rig.len(), w, h),
            projections: ProjectionCache::new(&coarse, &rig),
            decoder: DecoderPlan::new(&coarse, cfg.model.upsample),
            rig,
        })
    }
}

/// Fusion-layer outputs kept for supervision and inspection.
pub struct LayerRecord<'g, T: Real> {
    pub logits: Vec<Var<'g, T>>,
    pub mask_g: Option<EntropyMask>,
    pub mask_s: Option<EntropyMask>,
    pub counts: LayerCounts,
}

pub struct ForwardOutput<'g, T: Real> {
    /// Fine logits of the current (last) frame.
    pub logits: Var<'g, T>,
    /// Per processed frame (oldest first), per layer.
    pub layers: Vec<Vec<LayerRecord<'g, T>>>,
    /// Indices into the input frames that were processed.
    pub frames: Vec<usize>,
    /// Time spent inside the fusion layers.
    pub fusion_time: Duration,
}

impl<'g, T: Real> ForwardOutput<'g, T> {
    /// Layer records of the current frame.
    pub fn current(&self) -> &[LayerRecord<'g, T>] {
        self.layers.last().map_or(&[], |v| v.as_slice())
    }
}

const RNG_PROXY: u64 = 21;

impl Model {
    /// Runs the pipeline on `frames` (oldest first); the last frame is the
    /// prediction target. Only the frames the temporal window needs are encoded.
    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        plan: &ModelPlan<T>,
        cfg: &RunConfig,
        frames: &[SceneSample],
        seed: u64,
    ) -> Result<ForwardOutput<'g, T>> {
        let Some(last) = frames.len().checked_sub(1) else {
            return Err(Error::invalid("a sample needs at least one frame"));
        };
        let first = last.saturating_sub(cfg.temporal.k);
        let mut volumes = Vec::new();
        let mut records = Vec::new();
        let mut fusion_time = Duration::ZERO;
        for (fi, frame) in frames.iter().enumerate().skip(first) {
            if frame.gt.grid != plan.fine {
                return Err(Error::invalid("sample grid does not match the configured grid"));
            }
            let pyramid = self.image.encode(g, store, &plan.image, &frame.images)?;
            let vol = self.lidar.encode(g, store, &frame.points, &plan.coarse);
            let voxel_points = VoxelPoints::new(&frame.points, &plan.coarse);
            let ctx = FrameContext {
                grid: &plan.coarse,
                rig: &plan.rig,
                projections: &plan.projections,
                pyramid: &pyramid,
                voxel_points: &voxel_points,
                seed: seed ^ (fi as u64).wrapping_mul(0x9E37_79B9),
            };
            let mut x = vol.features;
            let mut frame_records = Vec::with_capacity(self.layers.len());
            let t0 = Instant::now();
            for (l, layer) in self.layers.iter().enumerate() {
                let out = layer.forward(g, store, &cfg.fusion, &ctx, x, l);
                x = out.features;
                frame_records.push(LayerRecord { logits: out.logits, mask_g: out.mask_g, mask_s: out.mask_s, counts: out.counts });
            }
            fusion_time += t0.elapsed();
            volumes.push((x, fi));
            records.push(frame_records);
        }
        let (cur, cur_idx) = *volumes.last().expect("at least one frame");
        let current = PosedVolume { features: cur, pose: &frames[cur_idx].pose };
        let past: Vec<_> = volumes[..volumes.len() - 1].iter().rev().map(|&(v, fi)| Some(PosedVolume { features: v, pose: &frames[fi].pose })).collect();
        let fused = temporal_fuse(g, store, &self.temporal, &cfg.temporal, &plan.coarse, current, &past);
        let decoded = crate::temporal::upsample_decode(g, store, &self.decoder, &plan.decoder, fused);
        Ok(ForwardOutput { logits: decoded.logits, layers: records, frames: (first..=last).collect(), fusion_time })
    }

    /// Total loss of one sample and its per-term values. `epoch` and `sample`
    /// seed the proxy-loss voxel subset.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loss<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        cfg: &RunConfig,
        out: &ForwardOutput<'g, T>,
        frames: &[SceneSample],
        epoch: usize,
        sample: usize,
    ) -> Result<(Var<'g, T>, LossBreakdown)> {
        let target = frames.last().expect("non-empty");
        let labels: Rc<[usize]> = target.gt.labels.iter().map(|&l| l as usize).collect();
        let probs = out.logits.softmax_rows();
        let proxy = if cfg.ablation.proxy_loss {
            let mut rng = derive_rng(cfg.train.seed, RNG_PROXY, epoch as u64, sample as u64);
            let keep = proxy_subsample(&labels, cfg.loss.proxy_max_voxels, &mut rng);
            let sub_labels: Vec<usize> = keep.iter().map(|&v| labels[v]).collect();
            let sub = out.logits.gather_rows(keep.into());
            Some(proxy_loss(g, store, &self.bank, sub, &sub_labels, cfg.loss.alpha, cfg.loss.beta))
        } else {
            None
        };
        let aux = self.aux_loss(cfg, out, frames)?;
        let terms = LossTerms {
            proxy,
            ce: ce_loss(out.logits, labels.clone()),
            lovasz: lovasz_loss(probs, labels.clone()),
            scal_geo: scal_geo(probs, labels.clone()),
            scal_sem: scal_sem(probs, labels),
            aux,
        };
        total_loss(&terms)
    }

    /// Weighted cross-entropy of every proposal head against the coarse labels.
    fn aux_loss<'g, T: Real>(&self, cfg: &RunConfig, out: &ForwardOutput<'g, T>, frames: &[SceneSample]) -> Result<Option<Var<'g, T>>> {
        if cfg.loss.aux_weight == 0.0 {
            return Ok(None);
        }
        let mut sum: Option<Var<'g, T>> = None;
        let mut count = 0usize;
        for (records, &fi) in out.layers.iter().zip(&out.frames) {
            let coarse = frames[fi].gt.downsample(cfg.model.upsample)?;
            let labels: Rc<[usize]> = coarse.labels.iter().map(|&l| l as usize).collect();
            for r in records {
                for &lg in &r.logits {
                    let ce = ce_loss(lg, labels.clone());
                    sum = Some(match sum {
                        Some(s) => s.add(ce),
                        None => ce,
                    });
                    count += 1;
                }
            }
        }
        Ok(sum.map(|s| s.scale(T::c(cfg.loss.aux_weight / count as f64))))
    }
}

/// Argmax label per row.
pub fn argmax_labels<T: Real>(logits: &crate::autograd::Tensor<T>) -> Vec<u8> {
    (0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
