//! Geometry-aware spatial cross attention: deformable sampling of the
//! top pyramid level around each masked voxel's projection, averaged over
//! the views that see it.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Csr, Graph, MapDims, ParamStore, Real, Tensor, Var};
use crate::backbones::ImageFeaturePyramid;
use crate::geometry::{hit_views, CameraModel, VoxelGridSpec};
use crate::nn::{scaled_init, Linear};

/// Hit views and normalised image coordinates of every voxel centre.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionCache {
    ptr: Vec<usize>,
    views: Vec<usize>,
    uv: Vec<[f64; 2]>,
}

impl ProjectionCache {
    pub fn new(grid: &VoxelGridSpec, rig: &[CameraModel]) -> Self {
        let mut out = Self { ptr: vec![0], views: vec![], uv: vec![] };
        for i in 0..grid.num_voxels() {
            let p = grid.center_unchecked(grid.unravel(i));
            for v in hit_views(&p, rig) {
                let cam = &rig[v];
                let pr = cam.project(&p).expect("hit view projects");
                out.views.push(v);
                out.uv.push([pr.u / cam.image_size.0 as f64, pr.v / cam.image_size.1 as f64]);
            }
            out.ptr.push(out.views.len());
        }
        out
    }

    /// `(view, normalised uv)` for each camera that sees voxel `i`, ascending by view.
    pub fn hits(&self, i: usize) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        let s = self.ptr[i]..self.ptr[i + 1];
        self.views[s.clone()].iter().copied().zip(self.uv[s].iter().copied())
    }

    pub fn num_hits(&self, i: usize) -> usize {
        self.ptr[i + 1] - self.ptr[i]
    }
}

/// Offsets are initialised small so early sampling stays near the projection.
const OFFSET_INIT: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformableAttentionParams {
    pub n_heads: usize,
    pub n_points: usize,
    /// `W′` for all heads side by side (`D → D`).
    pub value: Linear,
    /// `W` for all heads stacked (`D → D`, no bias).
    pub output: Linear,
    pub offsets: Linear,
    pub weights: Linear,
}

impl DeformableAttentionParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, n_heads: usize, n_points: usize, rng: &mut impl Rng) -> Self {
        let hk = n_heads * n_points;
        Self {
            n_heads,
            n_points,
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, false, rng),
            offsets: Linear::with_init(
                store,
                &format!("{name}.offsets"),
                scaled_init(d, 2 * hk, OFFSET_INIT / (d as f64).sqrt(), rng),
                Some(scaled_init(1, 2 * hk, OFFSET_INIT, rng)),
            ),
            weights: Linear::new(store, &format!("{name}.weights"), d, hk, true, rng),
        }
    }

    /// Offsets `[n, H·K·2]` and per-head normalised weights `[n, H·K]` for queries `q`.
    pub fn predict<'g, T: Real>(&self, g: &'g Graph<T>, store: &ParamStore<T>, q: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let off = self.offsets.forward(g, store, q);
        let att = self.weights.forward(g, store, q).softmax_groups(self.n_points);
        (off, att)
    }

    /// `Σ_m W_m Σ_k A_mk W′_m x(p + Δp_mk)` for each query on one map.
    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        q: Var<'g, T>,
        refs: Rc<[[T; 2]]>,
        map: Var<'g, T>,
        dims: MapDims,
    ) -> Var<'g, T> {
        let (off, att) = self.predict(g, store, q);
        let v = self.value.forward(g, store, map);
        let s = v.deform_sample(dims, self.n_heads, self.n_points, refs, off, att);
        self.output.forward(g, store, s)
    }
}

/// Residual rows for `selected` voxels (one row each, in order). Voxels seen by
/// no camera get a zero row.
#[allow(clippy::too_many_arguments)]
pub fn gsca<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    p: &DeformableAttentionParams,
    volume: Var<'g, T>,
    selected: &[usize],
    pyramid: &ImageFeaturePyramid<'g, T>,
    proj: &ProjectionCache,
) -> Var<'g, T> {
    let d = volume.shape().1;
    let n = selected.len();
    if n == 0 {
        return g.constant(Tensor::zeros(0, d));
    }
    let top = pyramid.levels.len() - 1;
    let dims = pyramid.dims[top];
    let q = volume.gather_rows(selected.into());
    let (off, att) = p.predict(g, store, q);

    let mut per_view: Vec<(Vec<usize>, Vec<[T; 2]>)> = vec![(vec![], vec![]); pyramid.n_views];
    for (r, &v) in selected.iter().enumerate() {
        for (view, uv) in proj.hits(v) {
            per_view[view].0.push(r);
            per_view[view].1.push([T::c(uv[0]), T::c(uv[1])]);
        }
    }
    let mut parts = Vec::new();
    let mut slot: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut base = 0;
    for (view, (rows, refs)) in per_view.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        for (j, &r) in rows.iter().enumerate() {
            slot[r].push(base + j);
        }
        base += rows.len();
        let rows: Rc<[usize]> = rows.into();
        let value = p.value.forward(g, store, pyramid.view_map(top, view));
        parts.push(value.deform_sample(dims, p.n_heads, p.n_points, refs.into(), off.gather_rows(rows.clone()), att.gather_rows(rows)));
    }
    if parts.is_empty() {
        return g.constant(Tensor::zeros(n, d));
    }
    let mut avg = Csr::new(base);
    for s in slot {
        let w = if s.is_empty() { T::zero() } else { T::one() / T::c(s.len() as f64) };
        avg.push_row(s.into_iter().map(|c| (c, w)));
    }
    let mean = Var::concat_rows(&parts).sparse_combine(Rc::new(avg));
    p.output.forward(g, store, mean)
}
