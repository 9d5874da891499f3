//! Toy encoders: a three-level convolutional image pyramid and a pooled
//! point-statistics LiDAR encoder with submanifold sparse convolutions.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Csr, Graph, MapDims, NeighborTable, ParamId, ParamStore, Real, Tensor, Var, NO_NEIGHBOR};
use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;
use crate::nn::{uniform_init, Conv, Linear};
use crate::synthdata::ImageRgb;

pub const PYRAMID_LEVELS: usize = 3;
/// Per-voxel point statistics fed to the LiDAR embedding.
pub const POINT_STATS: usize = 5;

/// Dense voxel features, one row per voxel in [`VoxelGridSpec::linear`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFeatureVolume<T> {
    pub grid: VoxelGridSpec,
    pub features: Tensor<T>,
    /// Voxels containing at least one LiDAR point.
    pub occupancy_mask: Vec<bool>,
}

impl<T: Real> VoxelFeatureVolume<T> {
    pub fn new(grid: VoxelGridSpec, features: Tensor<T>, occupancy_mask: Vec<bool>) -> Result<Self> {
        if features.rows != grid.num_voxels() || occupancy_mask.len() != grid.num_voxels() {
            return Err(Error::invalid("volume rows do not match the grid"));
        }
        if !features.is_finite() {
            return Err(Error::invalid("volume features must be finite"));
        }
        Ok(Self { grid, features, occupancy_mask })
    }
}

/// A volume whose features live on an autograd graph.
#[derive(Clone)]
pub struct VolumeVar<'g, T: Real> {
    pub grid: VoxelGridSpec,
    pub features: Var<'g, T>,
    pub mask: Rc<[bool]>,
}

impl<'g, T: Real> VolumeVar<'g, T> {
    pub fn snapshot(&self) -> VoxelFeatureVolume<T> {
        VoxelFeatureVolume { grid: self.grid, features: (*self.features.value()).clone(), occupancy_mask: self.mask.to_vec() }
    }
}

/// Level sizes for an input of `width × height`: each level halves (ceil).
pub fn pyramid_dims(width: usize, height: usize) -> [MapDims; PYRAMID_LEVELS] {
    let mut d = MapDims { width, height };
    std::array::from_fn(|_| {
        d = MapDims { width: d.width.div_ceil(2), height: d.height.div_ceil(2) };
        d
    })
}

/// Zero-padded 3×3 neighbourhoods over `views` stacked maps.
pub fn conv2d_table(views: usize, dims: MapDims) -> NeighborTable {
    let (w, h) = (dims.width, dims.height);
    let mut idx = Vec::with_capacity(views * w * h * 9);
    for v in 0..views {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        idx.push(if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            (v * w * h + yy as usize * w + xx as usize) as u32
                        } else {
                            NO_NEIGHBOR
                        });
                    }
                }
            }
        }
    }
    NeighborTable { n_in: views * w * h, k: 9, idx }
}

/// 2×2 average pooling with ceil sizing; edge cells average the children present.
pub fn pool2d_map<T: Real>(views: usize, dims: MapDims) -> Csr<T> {
    let (w, h) = (dims.width, dims.height);
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut csr = Csr::new(views * w * h);
    for v in 0..views {
        for oy in 0..oh {
            for ox in 0..ow {
                let kids: Vec<usize> = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (2 * ox + dx, 2 * oy + dy)))
                    .filter(|&(x, y)| x < w && y < h)
                    .map(|(x, y)| v * w * h + y * w + x)
                    .collect();
                let wt = T::one() / T::c(kids.len() as f64);
                csr.push_row(kids.into_iter().map(|k| (k, wt)));
            }
        }
    }
    csr
}

/// Precomputed index structures for one image size and view count.
pub struct ImagePlan<T> {
    pub views: usize,
    pub input: MapDims,
    pub levels: [MapDims; PYRAMID_LEVELS],
    convs: [Rc<NeighborTable>; PYRAMID_LEVELS],
    pools: [Rc<Csr<T>>; PYRAMID_LEVELS],
}

impl<T: Real> ImagePlan<T> {
    pub fn new(views: usize, width: usize, height: usize) -> Self {
        let input = MapDims { width, height };
        let levels = pyramid_dims(width, height);
        let conv_in = [input, levels[0], levels[1]];
        Self {
            views,
            input,
            levels,
            convs: conv_in.map(|d| Rc::new(conv2d_table(views, d))),
            pools: conv_in.map(|d| Rc::new(pool2d_map(views, d))),
        }
    }
}

/// Multi-view, multi-level features. Level `l` stacks views: row
/// `view·w·h + y·w + x`, `D` columns.
pub struct ImageFeaturePyramid<'g, T: Real> {
    pub n_views: usize,
    pub dims: [MapDims; PYRAMID_LEVELS],
    pub levels: [Var<'g, T>; PYRAMID_LEVELS],
}

impl<'g, T: Real> ImageFeaturePyramid<'g, T> {
    /// Rows of one view at level `l` (0-based).
    pub fn view_map(&self, l: usize, view: usize) -> Var<'g, T> {
        let n = self.dims[l].width * self.dims[l].height;
        let idx: Rc<[usize]> = (view * n..(view + 1) * n).collect();
        self.levels[l].gather_rows(idx)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageEncoder {
    pub convs: [Conv; PYRAMID_LEVELS],
    pub heads: [Linear; PYRAMID_LEVELS],
    pub d: usize,
}

impl ImageEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let c_in = [3, hidden, hidden];
        let convs = std::array::from_fn(|l| Conv::new(store, &format!("img.conv{l}"), 9, c_in[l], hidden, true, rng));
        let heads = std::array::from_fn(|l| Linear::new(store, &format!("img.head{l}"), hidden, d, true, rng));
        Self { convs, heads, d }
    }

    /// conv 3×3 → ReLU → 2×2 average per stage, then a 1×1 head to `D`.
    pub fn encode<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        plan: &ImagePlan<T>,
        images: &[ImageRgb],
    ) -> Result<ImageFeaturePyramid<'g, T>> {
        if images.len() != plan.views {
            return Err(Error::invalid(format!("expected {} views, got {}", plan.views, images.len())));
        }
        if images.iter().any(|im| im.width != plan.input.width || im.height != plan.input.height) {
            return Err(Error::invalid("all views must match the planned image size"));
        }
        let data: Vec<T> = images.iter().flat_map(|im| im.data.iter().map(|&v| T::c(v as f64))).collect();
        let mut x = g.constant(Tensor::new(data.len() / 3, 3, data));
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        for l in 0..PYRAMID_LEVELS {
            x = self.convs[l].forward(g, store, x, plan.convs[l].clone()).relu().sparse_combine(plan.pools[l].clone());
            levels.push(self.heads[l].forward(g, store, x));
        }
        Ok(ImageFeaturePyramid {
            n_views: plan.views,
            dims: plan.levels,
            levels: levels.try_into().unwrap_or_else(|_| unreachable!()),
        })
    }
}

/// Points pooled into occupied voxels, ascending by voxel index.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledVoxels {
    pub active: Vec<usize>,
    pub counts: Vec<usize>,
    /// Mean offset of the points from the voxel centre, in voxel units.
    pub mean_offset: Vec<[f64; 3]>,
    /// Mean height above the grid floor, as a fraction of the grid height.
    pub mean_height: Vec<f64>,
}

impl PooledVoxels {
    pub fn features<T: Real>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(self.active.len(), POINT_STATS);
        for i in 0..self.active.len() {
            let r = t.row_mut(i);
            r[0] = T::c((1.0 + self.counts[i] as f64).ln());
            for a in 0..3 {
                r[1 + a] = T::c(self.mean_offset[i][a]);
            }
            r[4] = T::c(self.mean_height[i]);
        }
        t
    }
}

/// Groups points by voxel. Each voxel's points are summed in a canonical
/// order so the result does not depend on input order.
pub fn pool_points(points: &[[f32; 3]], grid: &VoxelGridSpec) -> PooledVoxels {
    let mut per: Vec<(usize, [f32; 3])> = points
        .iter()
        .filter_map(|p| {
            let v = nalgebra::Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            grid.locate(&v).map(|idx| (grid.linear(idx), *p))
        })
        .collect();
    per.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            (0..3).map(|k| a.1[k].total_cmp(&b.1[k])).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let height = grid.dims[2] as f64 * grid.voxel_size;
    let mut out = PooledVoxels { active: vec![], counts: vec![], mean_offset: vec![], mean_height: vec![] };
    let mut i = 0;
    while i < per.len() {
        let v = per[i].0;
        let mut j = i;
        let mut sum = [0.0f64; 3];
        while j < per.len() && per[j].0 == v {
            for a in 0..3 {
                sum[a] += per[j].1[a] as f64;
            }
            j += 1;
        }
        let n = (j - i) as f64;
        let c = grid.center_unchecked(grid.unravel(v));
        out.active.push(v);
        out.counts.push(j - i);
        out.mean_offset.push(std::array::from_fn(|a| (sum[a] / n - c[a]) / grid.voxel_size));
        out.mean_height.push((sum[2] / n - grid.origin[2]) / height);
        i = j;
    }
    out
}

/// 3×3×3 neighbourhoods restricted to `active` sites (input and output rows
/// both index `active`).
pub fn submanifold_table(grid: &VoxelGridSpec, active: &[usize]) -> NeighborTable {
    let mut pos = vec![NO_NEIGHBOR; grid.num_voxels()];
    for (i, &v) in active.iter().enumerate() {
        pos[v] = i as u32;
    }
    let offs = VoxelGridSpec::kernel_offsets();
    let mut idx = Vec::with_capacity(active.len() * 27);
    for &v in active {
        let at = grid.unravel(v);
        for o in offs {
            idx.push(grid.offset(at, o).map_or(NO_NEIGHBOR, |n| pos[grid.linear(n)]));
        }
    }
    NeighborTable { n_in: active.len(), k: 27, idx }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LidarEncoder {
    pub embed: Linear,
    pub convs: [Conv; 2],
    pub empty: ParamId,
    pub d: usize,
}

impl LidarEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            embed: Linear::new(store, "lidar.embed", POINT_STATS, d, true, rng),
            convs: std::array::from_fn(|i| Conv::new(store, &format!("lidar.subm{i}"), 27, d, d, true, rng)),
            empty: store.add("lidar.empty", uniform_init(1, d, d, rng)),
            d,
        }
    }

    /// Embeds pooled statistics, applies two residual submanifold convolutions
    /// over occupied voxels and fills the rest with the learnable empty row.
    pub fn encode<'g, T: Real>(&self, g: &'g Graph<T>, store: &ParamStore<T>, points: &[[f32; 3]], grid: &VoxelGridSpec) -> VolumeVar<'g, T> {
        let pooled = pool_points(points, grid);
        let n = grid.num_voxels();
        let mut mask = vec![false; n];
        for &v in &pooled.active {
            mask[v] = true;
        }
        let base = g.param(store, self.empty).repeat_rows(n);
        let features = if pooled.active.is_empty() {
            base
        } else {
            let table = Rc::new(submanifold_table(grid, &pooled.active));
            let mut x = self.embed.forward(g, store, g.constant(pooled.features()));
            for c in &self.convs {
                x = x.add(c.forward(g, store, x, table.clone()).relu());
            }
            base.scatter_rows(pooled.active.into(), x)
        };
        VolumeVar { grid: *grid, features, mask: mask.into() }
    }
}
