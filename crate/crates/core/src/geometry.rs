//! Voxel grids, pin-hole cameras, frustum tests and ego-motion alignment.
//!
//! Frames: the ego frame is x forward, y left, z up, with its origin at the
//! sensor head. Camera frames are x right, y down, z along the optical axis.

use std::rc::Rc;

use nalgebra::{Isometry3, Matrix3, Matrix4, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::autograd::{Csr, Real, Tensor};
use crate::backbones::VoxelFeatureVolume;
use crate::error::{Error, Result};

/// Points closer than this to the image plane (or behind it) do not project.
pub const EPS_DEPTH: f64 = 1e-3;

/// Fractional voxel coordinates closer than this to an integer are snapped.
const SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGridSpec {
    /// `(H, W, Z)` voxel counts along ego x, y, z.
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// World position of the grid's minimum corner.
    pub origin: [f64; 3],
}

impl VoxelGridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        let g = Self { dims, voxel_size, origin };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("grid dims must be >= 1, got {:?}", self.dims)));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::invalid(format!("voxel size must be > 0, got {}", self.voxel_size)));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn linear(&self, [h, w, z]: [usize; 3]) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + z
    }

    #[inline]
    pub fn unravel(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let hw = i / self.dims[2];
        [hw / self.dims[1], hw % self.dims[1], z]
    }

    pub fn contains_index(&self, idx: [usize; 3]) -> bool {
        idx.iter().zip(&self.dims).all(|(&i, &d)| i < d)
    }

    /// `origin + (index + 0.5)·voxel_size`.
    pub fn voxel_center(&self, index: [usize; 3]) -> Result<Vector3<f64>> {
        if !self.contains_index(index) {
            return Err(Error::invalid(format!("voxel index {index:?} outside grid {:?}", self.dims)));
        }
        Ok(self.center_unchecked(index))
    }

    #[inline]
    pub(crate) fn center_unchecked(&self, index: [usize; 3]) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (index[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (index[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (index[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    /// Voxel containing `p`, if inside the grid.
    pub fn locate(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let c = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if c < 0.0 || c >= self.dims[a] as f64 {
                return None;
            }
            out[a] = c as usize;
        }
        Some(out)
    }

    /// The grid with `factor`-times larger voxels over the same extent.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.dims.iter().any(|d| d % factor != 0) {
            return Err(Error::invalid(format!("grid {:?} not divisible by {factor}", self.dims)));
        }
        Self::new(self.dims.map(|d| d / factor), self.voxel_size * factor as f64, self.origin)
    }

    /// Continuous voxel coordinates (voxel centres at integers).
    #[inline]
    pub fn continuous_index(&self, p: &Vector3<f64>) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) / self.voxel_size - 0.5)
    }

    /// Per-voxel 3×3×3 neighbour offsets in a fixed order (z fastest).
    pub fn kernel_offsets() -> [[i64; 3]; 27] {
        let mut out = [[0i64; 3]; 27];
        let mut k = 0;
        for dh in -1..=1 {
            for dw in -1..=1 {
                for dz in -1..=1 {
                    out[k] = [dh, dw, dz];
                    k += 1;
                }
            }
        }
        out
    }

    pub fn offset(&self, idx: [usize; 3], off: [i64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = idx[a] as i64 + off[a];
            if v < 0 || v >= self.dims[a] as i64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(out)
    }
}

fn check_rigid(m: &[[f64; 4]; 4], what: &str) -> Result<()> {
    let mat = mat4(m);
    let r = mat.fixed_view::<3, 3>(0, 0).into_owned();
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    let last = (m[3][0].abs() + m[3][1].abs() + m[3][2].abs() + (m[3][3] - 1.0).abs()) < 1e-9;
    if !m.iter().flatten().all(|v| v.is_finite()) || ortho > 1e-6 || (det - 1.0).abs() > 1e-6 || !last {
        return Err(Error::invalid(format!("{what} is not a rigid transform")));
    }
    Ok(())
}

fn mat4(m: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| m[r][c])
}

fn isometry(m: &[[f64; 4]; 4]) -> Isometry3<f64> {
    let mat = mat4(m);
    let r = Rotation3::from_matrix_unchecked(mat.fixed_view::<3, 3>(0, 0).into_owned());
    Isometry3::from_parts(
        Translation3::new(m[0][3], m[1][3], m[2][3]),
        UnitQuaternion::from_rotation_matrix(&r),
    )
}

fn to_rows(iso: &Isometry3<f64>) -> [[f64; 4]; 4] {
    let m = iso.to_homogeneous();
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

/// Pin-hole camera with ego→camera extrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "CameraRepr", into = "CameraRepr")]
pub struct CameraModel {
    pub view_index: usize,
    intrinsics: [[f64; 3]; 3],
    extrinsics: [[f64; 4]; 4],
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    ego_to_cam: Isometry3<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRepr {
    view_index: usize,
    intrinsics: [[f64; 3]; 3],
    extrinsics: [[f64; 4]; 4],
    image_size: (usize, usize),
}

impl TryFrom<CameraRepr> for CameraModel {
    type Error = Error;
    fn try_from(r: CameraRepr) -> Result<Self> {
        CameraModel::new(r.view_index, r.intrinsics, r.extrinsics, r.image_size)
    }
}

impl From<CameraModel> for CameraRepr {
    fn from(c: CameraModel) -> Self {
        CameraRepr { view_index: c.view_index, intrinsics: c.intrinsics, extrinsics: c.extrinsics, image_size: c.image_size }
    }
}

/// A projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraModel {
    pub fn new(
        view_index: usize,
        intrinsics: [[f64; 3]; 3],
        extrinsics: [[f64; 4]; 4],
        image_size: (usize, usize),
    ) -> Result<Self> {
        let k = Matrix3::from_fn(|r, c| intrinsics[r][c]);
        if !(intrinsics[0][0] > 0.0 && intrinsics[1][1] > 0.0) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        let k_inv = k.try_inverse().ok_or_else(|| Error::invalid("camera intrinsics are singular"))?;
        check_rigid(&extrinsics, "camera extrinsics")?;
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::invalid("camera image size must be non-zero"));
        }
        Ok(Self { view_index, intrinsics, extrinsics, image_size, k, k_inv, ego_to_cam: isometry(&extrinsics) })
    }

    /// Camera at ego position `center` looking along ego yaw `yaw` (radians),
    /// horizontal field of view `hfov` (radians), square pixels.
    pub fn looking_at_yaw(view_index: usize, yaw: f64, center: Vector3<f64>, hfov: f64, image_size: (usize, usize)) -> Result<Self> {
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        let f = (w / 2.0) / (hfov / 2.0).tan();
        let intr = [[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]];
        let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * center);
        let mut ext = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                ext[i][j] = r[(i, j)];
            }
            ext[i][3] = t[i];
        }
        ext[3][3] = 1.0;
        Self::new(view_index, intr, ext, image_size)
    }

    pub fn intrinsics(&self) -> &[[f64; 3]; 3] {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &[[f64; 4]; 4] {
        &self.extrinsics
    }

    /// Camera centre in the ego frame.
    pub fn center(&self) -> Vector3<f64> {
        self.ego_to_cam.inverse_transform_point(&Point3::origin()).coords
    }

    /// Ego-frame direction of the ray through pixel `(u, v)` (unnormalised, unit depth).
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = self.k_inv * Vector3::new(u, v, 1.0);
        self.ego_to_cam.inverse_transform_vector(&d)
    }

    /// Ego-frame point at camera depth `depth` along pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let pc = self.k_inv * Vector3::new(u, v, 1.0) * depth;
        self.ego_to_cam.inverse_transform_point(&Point3::from(pc)).coords
    }

    /// Pin-hole projection of an ego-frame point; `None` behind the camera or
    /// outside the image.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Projection> {
        let pc = self.ego_to_cam.transform_point(&Point3::from(*p));
        if pc.z <= EPS_DEPTH {
            return None;
        }
        let h = self.k * pc.coords;
        let (u, v) = (h.x / h.z, h.y / h.z);
        let (w, hh) = (self.image_size.0 as f64, self.image_size.1 as f64);
        if !(0.0..w).contains(&u) || !(0.0..hh).contains(&v) {
            return None;
        }
        Some(Projection { u, v, depth: pc.z })
    }
}

/// `project(p, cam)` as a free function.
pub fn project(p: &Vector3<f64>, cam: &CameraModel) -> Option<Projection> {
    cam.project(p)
}

/// View indices whose frustum contains `p`, ascending.
pub fn hit_views(p: &Vector3<f64>, rig: &[CameraModel]) -> Vec<usize> {
    let mut v: Vec<usize> = rig.iter().filter(|c| c.project(p).is_some()).map(|c| c.view_index).collect();
    v.sort_unstable();
    v
}

/// `n` cameras at equal yaw increments starting at 0, each pushed `offset`
/// metres outward from the ego origin.
pub fn ring_rig(n: usize, hfov_deg: f64, image_size: (usize, usize), offset: f64) -> Result<Vec<CameraModel>> {
    (0..n)
        .map(|i| {
            let yaw = i as f64 * std::f64::consts::TAU / n as f64;
            let c = Vector3::new(yaw.cos(), yaw.sin(), 0.0) * offset;
            CameraModel::looking_at_yaw(i, yaw, c, hfov_deg.to_radians(), image_size)
        })
        .collect()
}

/// Ego pose: rigid transform from the ego frame at `frame_index` to world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "PoseRepr", into = "PoseRepr")]
pub struct EgoPose {
    pub frame_index: usize,
    transform: [[f64; 4]; 4],
    iso: Isometry3<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    frame_index: usize,
    transform: [[f64; 4]; 4],
}

impl TryFrom<PoseRepr> for EgoPose {
    type Error = Error;
    fn try_from(r: PoseRepr) -> Result<Self> {
        EgoPose::new(r.frame_index, r.transform)
    }
}

impl From<EgoPose> for PoseRepr {
    fn from(p: EgoPose) -> Self {
        PoseRepr { frame_index: p.frame_index, transform: p.transform }
    }
}

impl EgoPose {
    pub fn new(frame_index: usize, transform: [[f64; 4]; 4]) -> Result<Self> {
        check_rigid(&transform, "ego pose")?;
        Ok(Self { frame_index, transform, iso: isometry(&transform) })
    }

    /// Planar pose: yaw about +z and translation.
    pub fn planar(frame_index: usize, x: f64, y: f64, z: f64, yaw: f64) -> Self {
        let iso = Isometry3::from_parts(Translation3::new(x, y, z), UnitQuaternion::from_euler_angles(0.0, 0.0, yaw));
        Self { frame_index, transform: to_rows(&iso), iso }
    }

    pub fn identity(frame_index: usize) -> Self {
        Self::planar(frame_index, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn transform(&self) -> &[[f64; 4]; 4] {
        &self.transform
    }

    pub fn isometry(&self) -> &Isometry3<f64> {
        &self.iso
    }

    pub fn ego_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.iso.transform_point(&Point3::from(*p)).coords
    }

    pub fn world_to_ego(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.iso.inverse_transform_point(&Point3::from(*p)).coords
    }

    pub fn ego_dir_to_world(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.iso.transform_vector(d)
    }

    /// Transform taking points from this ego frame into `other`'s ego frame.
    pub fn relative_to(&self, other: &EgoPose) -> Isometry3<f64> {
        other.iso.inverse() * self.iso
    }
}

/// Trilinear resampling map that carries a volume defined in `src`'s ego
/// frame into `dst`'s ego frame over the same grid.
#[derive(Clone, Debug)]
pub struct AlignMap<T> {
    pub map: Rc<Csr<T>>,
    /// Whether each destination voxel's source position fell inside the grid.
    pub valid: Vec<bool>,
}

pub fn alignment_map<T: Real>(grid: &VoxelGridSpec, pose_src: &EgoPose, pose_dst: &EgoPose) -> AlignMap<T> {
    let n = grid.num_voxels();
    let rel = pose_dst.relative_to(pose_src);
    let mut csr = Csr::new(n);
    let mut valid = Vec::with_capacity(n);
    let dims = grid.dims;
    for i in 0..n {
        let idx = grid.unravel(i);
        let p = rel.transform_point(&Point3::from(grid.center_unchecked(idx))).coords;
        let mut c = grid.continuous_index(&p);
        let mut inside = true;
        for a in 0..3 {
            let r = c[a].round();
            if (c[a] - r).abs() < SNAP {
                c[a] = r;
            }
            if c[a] < 0.0 || c[a] > (dims[a] - 1) as f64 {
                inside = false;
            }
        }
        valid.push(inside);
        if !inside {
            csr.push_row([]);
            continue;
        }
        let base = c.map(|v| v.floor() as usize);
        let frac = [0, 1, 2].map(|a| c[a] - base[a] as f64);
        let mut taps = Vec::with_capacity(8);
        for corner in 0..8usize {
            let mut w = 1.0;
            let mut at = [0usize; 3];
            for a in 0..3 {
                let hi = (corner >> (2 - a)) & 1 == 1;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
                at[a] = base[a] + hi as usize;
            }
            if w != 0.0 {
                taps.push((grid.linear(at), T::c(w)));
            }
        }
        csr.push_row(taps);
    }
    AlignMap { map: Rc::new(csr), valid }
}

/// Resamples `vol` (defined in `pose_src`'s ego frame) into `pose_dst`'s ego
/// frame; out-of-bounds positions receive zero features.
pub fn align_volume<T: Real>(vol: &VoxelFeatureVolume<T>, pose_src: &EgoPose, pose_dst: &EgoPose, grid: &VoxelGridSpec) -> Result<VoxelFeatureVolume<T>> {
    if vol.grid != *grid {
        return Err(Error::invalid("volume grid does not match alignment grid"));
    }
    let am = alignment_map::<T>(grid, pose_src, pose_dst);
    let features: Tensor<T> = am.map.apply(&vol.features);
    let occ = am.map.apply(&Tensor::new(
        vol.occupancy_mask.len(),
        1,
        vol.occupancy_mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
    ));
    Ok(VoxelFeatureVolume {
        grid: *grid,
        features,
        occupancy_mask: occ.data.iter().map(|&v| v > T::c(0.5)).collect(),
    })
}
