//! Sparse camera–LiDAR fusion: per-layer entropy proposals select the
//! uncertain coarse voxels, which alone receive G-SCA and S-SCA updates.

mod blend;
mod gsca;
mod proposal;
mod ssca;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use blend::{masked_table, sparse_blend, BlendParams};
pub use gsca::{gsca, DeformableAttentionParams, ProjectionCache};
pub use proposal::{entropy_from_logits, select_queries, selection_count, EntropyMask};
pub use ssca::{farthest_point_sampling, gather_keys, preprocess_points, ssca, KeyLabel, SscaParams, SHALLOW_LEVELS};

use crate::autograd::{Graph, ParamStore, Real, Var};
use crate::backbones::ImageFeaturePyramid;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, VoxelGridSpec};
use crate::nn::Linear;
use crate::synthdata::{derive_rng, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Percentage of coarse voxels selected by each proposal.
    pub k_percent: f64,
    pub n_layers: usize,
    /// G-SCA heads and sampling points per head.
    pub n_heads: usize,
    pub n_points: usize,
    /// S-SCA heads.
    pub ssca_heads: usize,
    /// Point-count bounds for S-SCA.
    pub tau: usize,
    pub theta: usize,
    pub gsca: bool,
    pub ssca: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { k_percent: 35.0, n_layers: 3, n_heads: 4, n_points: 8, ssca_heads: 4, tau: 5, theta: 20, gsca: true, ssca: true }
    }
}

impl FusionConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(0.0..=100.0).contains(&self.k_percent) {
            return Err(Error::Config(format!("fusion.k_percent must lie in [0, 100], got {}", self.k_percent)));
        }
        if self.n_heads == 0 || d % self.n_heads != 0 || self.ssca_heads == 0 || d % self.ssca_heads != 0 {
            return Err(Error::Config(format!("feature dim {d} must be divisible by both head counts")));
        }
        if self.n_points == 0 {
            return Err(Error::Config("fusion.n_points must be >= 1".into()));
        }
        if self.tau < 1 || self.tau > self.theta {
            return Err(Error::Config(format!("need 1 <= tau <= theta, got tau={} theta={}", self.tau, self.theta)));
        }
        Ok(())
    }
}

/// Per-layer work counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub gsca_calls: usize,
    pub ssca_calls: usize,
    pub conv_sites: usize,
}

impl LayerCounts {
    pub fn attention_calls(&self) -> usize {
        self.gsca_calls + self.ssca_calls
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionLayer {
    pub head_g: Linear,
    pub gsca: DeformableAttentionParams,
    pub blend_g: BlendParams,
    pub head_s: Linear,
    pub ssca: SscaParams,
    pub blend_s: BlendParams,
}

impl FusionLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, cfg: &FusionConfig, rng: &mut impl Rng) -> Self {
        Self {
            head_g: Linear::new(store, &format!("{name}.head_g"), d, NUM_CLASSES, true, rng),
            gsca: DeformableAttentionParams::new(store, &format!("{name}.gsca"), d, cfg.n_heads, cfg.n_points, rng),
            blend_g: BlendParams::new(store, &format!("{name}.blend_g"), d, rng),
            head_s: Linear::new(store, &format!("{name}.head_s"), d, NUM_CLASSES, true, rng),
            ssca: SscaParams::new(store, &format!("{name}.ssca"), d, cfg.ssca_heads, rng),
            blend_s: BlendParams::new(store, &format!("{name}.blend_s"), d, rng),
        }
    }
}

/// Everything a fusion layer reads besides the volume itself.
pub struct FrameContext<'a, 'g, T: Real> {
    pub grid: &'a VoxelGridSpec,
    pub rig: &'a [CameraModel],
    pub projections: &'a ProjectionCache,
    pub pyramid: &'a ImageFeaturePyramid<'g, T>,
    /// LiDAR points grouped by coarse voxel.
    pub voxel_points: &'a VoxelPoints,
    /// Seeds the padding points of S-SCA.
    pub seed: u64,
}

/// Points bucketed by the voxel that contains them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VoxelPoints {
    buckets: std::collections::BTreeMap<usize, Vec<Vector3<f64>>>,
}

impl VoxelPoints {
    pub fn new(points: &[[f32; 3]], grid: &VoxelGridSpec) -> Self {
        let mut buckets: std::collections::BTreeMap<usize, Vec<Vector3<f64>>> = Default::default();
        for p in points {
            let v = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            if let Some(idx) = grid.locate(&v) {
                buckets.entry(grid.linear(idx)).or_default().push(v);
            }
        }
        Self { buckets }
    }

    pub fn get(&self, voxel: usize) -> &[Vector3<f64>] {
        self.buckets.get(&voxel).map_or(&[], |v| v.as_slice())
    }
}

/// Result of one fusion layer.
pub struct LayerOutput<'g, T: Real> {
    pub features: Var<'g, T>,
    /// Proposal-head logits over all coarse voxels, for G-SCA then S-SCA.
    pub logits: Vec<Var<'g, T>>,
    pub mask_g: Option<EntropyMask>,
    pub mask_s: Option<EntropyMask>,
    pub counts: LayerCounts,
}

const RNG_PADDING: u64 = 11;

/// In-voxel points of each selected voxel brought into `[tau, theta]`.
pub fn processed_points(ctx_points: &VoxelPoints, grid: &VoxelGridSpec, selected: &[usize], cfg: &FusionConfig, seed: u64, layer: usize) -> Vec<Vec<Vector3<f64>>> {
    selected
        .iter()
        .map(|&v| {
            let c = grid.center_unchecked(grid.unravel(v));
            let h = Vector3::repeat(grid.voxel_size * 0.5);
            let mut rng = derive_rng(seed, RNG_PADDING, v as u64, layer as u64);
            preprocess_points(ctx_points.get(v), cfg.tau, cfg.theta, &(c - h), &(c + h), &mut rng)
        })
        .collect()
}

impl FusionLayer {
    /// entropy proposal → G-SCA → blend, then entropy proposal → S-SCA → blend.
    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        cfg: &FusionConfig,
        ctx: &FrameContext<'_, 'g, T>,
        volume: Var<'g, T>,
        layer: usize,
    ) -> LayerOutput<'g, T> {
        let mut x = volume;
        let mut out = LayerOutput { features: x, logits: vec![], mask_g: None, mask_s: None, counts: LayerCounts::default() };
        if cfg.gsca {
            let logits = self.head_g.forward(g, store, x);
            let mask = select_queries(entropy_from_logits(&logits.value()), cfg.k_percent);
            let res = gsca(g, store, &self.gsca, x, &mask.selected, ctx.pyramid, ctx.projections);
            x = sparse_blend(g, store, &self.blend_g, ctx.grid, x, &mask.selected, res);
            out.counts.gsca_calls = mask.len();
            out.counts.conv_sites += mask.len();
            out.logits.push(logits);
            out.mask_g = Some(mask);
        }
        if cfg.ssca {
            let logits = self.head_s.forward(g, store, x);
            let mask = select_queries(entropy_from_logits(&logits.value()), cfg.k_percent);
            let pts = processed_points(ctx.voxel_points, ctx.grid, &mask.selected, cfg, ctx.seed, layer);
            let res = ssca(g, store, &self.ssca, x, &mask.selected, &pts, ctx.pyramid, ctx.rig);
            x = sparse_blend(g, store, &self.blend_s, ctx.grid, x, &mask.selected, res);
            out.counts.ssca_calls = mask.len();
            out.counts.conv_sites += mask.len();
            out.logits.push(logits);
            out.mask_s = Some(mask);
        }
        out.features = x;
        out
    }
}
