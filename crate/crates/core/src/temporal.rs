//! Cross-frame fusion of ego-aligned coarse volumes and the upsampling decoder
//! that produces fine features and per-voxel logits.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Csr, Graph, ParamStore, Real, Segments, Tensor, Var};
use crate::backbones::{submanifold_table, VoxelFeatureVolume};
use crate::error::{Error, Result};
use crate::geometry::{alignment_map, EgoPose, VoxelGridSpec};
use crate::nn::{Conv, Linear};
use crate::synthdata::NUM_CLASSES;

/// What stands in for history that does not exist (sequence start).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingFrames {
    /// Leave the frame out of the key set.
    #[default]
    Drop,
    /// Attend to a zero feature in its place.
    ZeroPad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    /// Past frames fused with the current one.
    pub k: usize,
    pub n_heads: usize,
    pub missing: MissingFrames,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self { k: 3, n_heads: 2, missing: MissingFrames::Drop }
    }
}

impl TemporalConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::Config(format!("feature dim {d} must be divisible by temporal.n_heads = {}", self.n_heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl TemporalParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, false, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng),
        }
    }
}

/// One coarse volume and the ego pose it is expressed in.
#[derive(Clone, Copy)]
pub struct PosedVolume<'a, 'g, T: Real> {
    pub features: Var<'g, T>,
    pub pose: &'a EgoPose,
}

/// Past volumes resampled into the current ego frame, stacked after the
/// current one, with the key set of every voxel.
pub struct AlignedStack<'g, T: Real> {
    /// `(1 + past) · V` rows; frame `j` occupies rows `j·V..(j+1)·V`.
    pub stacked: Var<'g, T>,
    pub segments: Rc<Segments>,
}

/// Aligns `past` (most recent first) into `current`'s frame. Positions that
/// leave the grid are treated like missing frames.
pub fn align_stack<'g, T: Real>(
    g: &'g Graph<T>,
    grid: &VoxelGridSpec,
    current: PosedVolume<'_, 'g, T>,
    past: &[Option<PosedVolume<'_, 'g, T>>],
    missing: MissingFrames,
) -> AlignedStack<'g, T> {
    let n = grid.num_voxels();
    let d = current.features.shape().1;
    let mut parts = vec![current.features];
    let mut valid: Vec<Vec<bool>> = Vec::new();
    for frame in past {
        match frame {
            Some(f) => {
                let am = alignment_map::<T>(grid, f.pose, current.pose);
                parts.push(f.features.sparse_combine(am.map));
                valid.push(am.valid);
            }
            None => {
                parts.push(g.constant(Tensor::zeros(n, d)));
                valid.push(vec![missing == MissingFrames::ZeroPad; n]);
            }
        }
    }
    let mut segs = Segments::new();
    for i in 0..n {
        segs.push(std::iter::once(i).chain(valid.iter().enumerate().filter(|(_, v)| v[i]).map(|(j, _)| (j + 1) * n + i)));
    }
    let stacked = if parts.len() == 1 { parts[0] } else { Var::concat_rows(&parts) };
    AlignedStack { stacked, segments: Rc::new(segs) }
}

/// Per-voxel attention over the current and aligned past features: the
/// current feature is the query, every available frame a key/value.
pub fn temporal_fuse<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    p: &TemporalParams,
    cfg: &TemporalConfig,
    grid: &VoxelGridSpec,
    current: PosedVolume<'_, 'g, T>,
    past: &[Option<PosedVolume<'_, 'g, T>>],
) -> Var<'g, T> {
    let past = &past[..past.len().min(cfg.k)];
    let stack = align_stack(g, grid, current, past, cfg.missing);
    let d = current.features.shape().1;
    let q = p.query.forward(g, store, current.features);
    let k = p.key.forward(g, store, stack.stacked);
    let v = p.value.forward(g, store, stack.stacked);
    let scale = T::one() / T::c((d / cfg.n_heads) as f64).sqrt();
    q.segment_attention(k, v, stack.segments, cfg.n_heads, scale)
}

/// Inference-only convenience over plain volumes: `volumes[0]` is the current
/// frame, the rest are past frames, most recent first.
pub fn temporal_fuse_volumes<T: Real>(
    store: &ParamStore<T>,
    p: &TemporalParams,
    cfg: &TemporalConfig,
    volumes: &[(&VoxelFeatureVolume<T>, &EgoPose)],
) -> Result<VoxelFeatureVolume<T>> {
    let Some(((cur, cur_pose), rest)) = volumes.split_first() else {
        return Err(Error::invalid("temporal fusion needs the current volume"));
    };
    if rest.iter().any(|(v, _)| v.grid != cur.grid) {
        return Err(Error::invalid("volumes must share one grid"));
    }
    let g = Graph::inference();
    let current = PosedVolume { features: g.constant(cur.features.clone()), pose: cur_pose };
    let past: Vec<_> = rest.iter().map(|(v, pose)| Some(PosedVolume { features: g.constant(v.features.clone()), pose })).collect();
    let out = temporal_fuse(&g, store, p, cfg, &cur.grid, current, &past);
    VoxelFeatureVolume::new(cur.grid, (*out.value()).clone(), cur.occupancy_mask.clone())
}

/// Trilinear interpolation from `coarse` onto the grid refined by `s`, with
/// positions clamped to the outermost coarse centres.
pub fn upsample_map<T: Real>(coarse: &VoxelGridSpec, s: usize) -> (VoxelGridSpec, Csr<T>) {
    let fine = VoxelGridSpec::new(coarse.dims.map(|d| d * s), coarse.voxel_size / s as f64, coarse.origin).expect("refined grid is valid");
    let mut csr = Csr::new(coarse.num_voxels());
    let axis = |f: usize, a: usize| -> [(usize, f64); 2] {
        let c = ((f as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (coarse.dims[a] - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(coarse.dims[a] - 1);
        let t = c - i0 as f64;
        [(i0, 1.0 - t), (i1, t)]
    };
    for i in 0..fine.num_voxels() {
        let [h, w, z] = fine.unravel(i);
        let (ah, aw, az) = (axis(h, 0), axis(w, 1), axis(z, 2));
        let mut taps: Vec<(usize, T)> = Vec::with_capacity(8);
        for &(ih, wh) in &ah {
            for &(iw, ww) in &aw {
                for &(iz, wz) in &az {
                    let wt = wh * ww * wz;
                    if wt != 0.0 {
                        taps.push((coarse.linear([ih, iw, iz]), T::c(wt)));
                    }
                }
            }
        }
        csr.push_row(taps);
    }
    (fine, csr)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub scale: usize,
    pub conv1: Conv,
    pub conv2: Conv,
    pub head: Linear,
}

impl DecoderParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, scale: usize, rng: &mut impl Rng) -> Self {
        Self {
            scale,
            conv1: Conv::new(store, &format!("{name}.conv1"), 27, d, d, true, rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), 27, d, d, true, rng),
            head: Linear::new(store, &format!("{name}.head"), d, NUM_CLASSES, true, rng),
        }
    }
}

/// Precomputed index structures for one coarse/fine grid pair.
#[derive(Clone, Debug)]
pub struct DecoderPlan<T> {
    pub fine: VoxelGridSpec,
    pub upsample: Rc<Csr<T>>,
    pub table: Rc<crate::autograd::NeighborTable>,
}

impl<T: Real> DecoderPlan<T> {
    pub fn new(coarse: &VoxelGridSpec, scale: usize) -> Self {
        let (fine, up) = upsample_map(coarse, scale);
        let all: Vec<usize> = (0..fine.num_voxels()).collect();
        let table = submanifold_table(&fine, &all);
        Self { fine, upsample: Rc::new(up), table: Rc::new(table) }
    }
}

pub struct Decoded<'g, T: Real> {
    /// Fine features `F_M`.
    pub features: Var<'g, T>,
    pub logits: Var<'g, T>,
}

/// Trilinear upsample, two dense 3×3×3 convolutions with ReLU, then a
/// linear head to per-voxel category logits.
pub fn upsample_decode<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    p: &DecoderParams,
    plan: &DecoderPlan<T>,
    coarse: Var<'g, T>,
) -> Decoded<'g, T> {
    let up = coarse.sparse_combine(plan.upsample.clone());
    let x = p.conv1.forward(g, store, up, plan.table.clone()).relu();
    let x = p.conv2.forward(g, store, x, plan.table.clone()).relu();
    let logits = p.head.forward(g, store, x);
    Decoded { features: x, logits }
}
