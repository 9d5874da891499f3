//! Semantic-aware spatial cross attention: in-voxel LiDAR points (thinned
//! or padded) are projected into the shallow pyramid levels and the sampled
//! features serve as keys for a multi-head attention from the voxel query.

use std::rc::Rc;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{bilinear_taps, normalized_to_pixel, Csr, Graph, ParamStore, Real, Segments, Tensor, Var};
use crate::backbones::ImageFeaturePyramid;
use crate::geometry::CameraModel;
use crate::nn::Linear;

/// Farthest point sampling down to `k` points: starts from the point nearest
/// `center`, then repeatedly takes the point with the largest distance to the
/// selected set. Ties go to the lowest index. Returns indices in pick order.
pub fn farthest_point_sampling(points: &[Vector3<f64>], k: usize, center: &Vector3<f64>) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let k = k.min(points.len());
    let first = (0..points.len())
        .min_by(|&a, &b| (points[a] - center).norm_squared().total_cmp(&(points[b] - center).norm_squared()).then(a.cmp(&b)))
        .expect("non-empty");
    let mut picked = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    let mut taken = vec![false; points.len()];
    taken[first] = true;
    while picked.len() < k {
        let mut best = usize::MAX;
        for i in 0..points.len() {
            if !taken[i] && (best == usize::MAX || dist[i] > dist[best]) {
                best = i;
            }
        }
        taken[best] = true;
        picked.push(best);
        for i in 0..points.len() {
            let d = (points[i] - points[best]).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }
    picked
}

/// Brings the point count into `[tau, theta]`: FPS when above `theta`,
/// uniform padding inside `[lo, hi]` when below `tau`, unchanged otherwise.
pub fn preprocess_points(
    points: &[Vector3<f64>],
    tau: usize,
    theta: usize,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
    rng: &mut impl Rng,
) -> Vec<Vector3<f64>> {
    assert!(tau <= theta, "tau must not exceed theta");
    if points.len() > theta {
        let center = (lo + hi) * 0.5;
        return farthest_point_sampling(points, theta, &center).into_iter().map(|i| points[i]).collect();
    }
    let mut out = points.to_vec();
    while out.len() < tau {
        out.push(Vector3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z)));
    }
    out
}

/// Provenance of one key: view, shallow level (0-based) and point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyLabel {
    pub view: usize,
    pub level: usize,
    pub point: usize,
}

/// Bilinear tap rows for every `(point, hit view, level)` key, as a sparse map
/// over the stacked shallow levels (`levels` concatenated in order).
pub fn gather_keys<T: Real>(
    points: &[Vector3<f64>],
    levels: &[usize],
    dims: &[crate::autograd::MapDims],
    rig: &[CameraModel],
) -> (Vec<KeyLabel>, Vec<Vec<(usize, T)>>) {
    let n_views = rig.len();
    let offsets: Vec<usize> = levels
        .iter()
        .scan(0, |acc, &l| {
            let o = *acc;
            *acc += n_views * dims[l].width * dims[l].height;
            Some(o)
        })
        .collect();
    let mut labels = Vec::new();
    let mut taps = Vec::new();
    for (j, p) in points.iter().enumerate() {
        for cam in rig {
            let Some(pr) = cam.project(p) else { continue };
            let (un, vn) = (pr.u / cam.image_size.0 as f64, pr.v / cam.image_size.1 as f64);
            for (li, &l) in levels.iter().enumerate() {
                let md = dims[l];
                let (px, py) = normalized_to_pixel(md, T::c(un), T::c(vn));
                let (t, ..) = bilinear_taps(md, px, py);
                let base = offsets[li] + cam.view_index * md.width * md.height;
                taps.push(t.iter().filter(|(_, w)| *w != T::zero()).map(|&(r, w)| (base + r, w)).collect());
                labels.push(KeyLabel { view: cam.view_index, level: l, point: j });
            }
        }
    }
    (labels, taps)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SscaParams {
    pub n_heads: usize,
    pub query: Linear,
    pub key: Linear,
    /// `Θ′` for all heads side by side.
    pub value: Linear,
    /// `Θ` for all heads stacked.
    pub output: Linear,
}

impl SscaParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            n_heads,
            query: Linear::new(store, &format!("{name}.query"), d, d, false, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, false, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, false, rng),
        }
    }

    pub fn scale<T: Real>(&self, d: usize) -> T {
        T::one() / T::c((d / self.n_heads) as f64).sqrt()
    }

    /// Attention of each query row over its key segment; empty segments give zero rows.
    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        q: Var<'g, T>,
        keys: Var<'g, T>,
        segments: Rc<Segments>,
    ) -> Var<'g, T> {
        let d = q.shape().1;
        let qp = self.query.forward(g, store, q);
        let kp = self.key.forward(g, store, keys);
        let vp = self.value.forward(g, store, keys);
        let att = qp.segment_attention(kp, vp, segments, self.n_heads, self.scale(d));
        self.output.forward(g, store, att)
    }
}

/// Shallow levels used as keys (0-based pyramid indices).
pub const SHALLOW_LEVELS: [usize; 2] = [0, 1];

/// S-SCA residual rows for `selected` voxels given each voxel's processed points.
pub fn ssca<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    p: &SscaParams,
    volume: Var<'g, T>,
    selected: &[usize],
    voxel_points: &[Vec<Vector3<f64>>],
    pyramid: &ImageFeaturePyramid<'g, T>,
    rig: &[CameraModel],
) -> Var<'g, T> {
    let d = volume.shape().1;
    if selected.is_empty() {
        return g.constant(Tensor::zeros(0, d));
    }
    let n_in: usize = SHALLOW_LEVELS.iter().map(|&l| pyramid.levels[l].shape().0).sum();
    let mut csr = Csr::new(n_in);
    let mut segs = Segments::new();
    for pts in voxel_points {
        let (_, taps) = gather_keys::<T>(pts, &SHALLOW_LEVELS, &pyramid.dims, rig);
        let start = csr.n_out();
        for t in taps {
            csr.push_row(t);
        }
        segs.push(start..csr.n_out());
    }
    let q = volume.gather_rows(selected.into());
    if csr.n_out() == 0 {
        return g.constant(Tensor::zeros(selected.len(), d));
    }
    let stacked = Var::concat_rows(&SHALLOW_LEVELS.map(|l| pyramid.levels[l]));
    let keys = stacked.sparse_combine(Rc::new(csr));
    p.forward(g, store, q, keys, Rc::new(segs))
}
