//! Procedural scenes: long-tailed object placement, ray-cast LiDAR sweeps,
//! rendered camera views and voxelised ground truth along an ego trajectory.

mod io;
mod scene;

use nalgebra::Vector3;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

pub use io::{read_dataset, read_sequence, write_dataset, write_sequence, ArrayDesc, DatasetIndex, SequenceEntry, Split};
pub use scene::{Primitive, Scene, Shape};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, EgoPose, VoxelGridSpec};

/// Semantic categories excluding empty.
pub const N_CLS: usize = 8;
/// Output classes including empty (label 0).
pub const NUM_CLASSES: usize = N_CLS + 1;
pub const EMPTY: u8 = 0;
pub const GROUND: u8 = 1;

/// Top surface of the ground slab in the world frame (sensor at z = 0).
pub const GROUND_TOP: f64 = -1.7;
pub const GROUND_THICKNESS: f64 = 1.0;

pub const LIDAR_RINGS: usize = 16;
pub const LIDAR_ELEV_MIN_DEG: f64 = -25.0;
pub const LIDAR_ELEV_MAX_DEG: f64 = 5.0;
pub const LIDAR_RANGE_SIGMA: f64 = 0.02;
pub const LIDAR_MAX_RANGE: f64 = 60.0;
pub const PIXEL_SIGMA: f64 = 0.05;

/// Ego speed in metres per frame and yaw rate in radians per frame.
pub const EGO_SPEED: f64 = 1.0;
pub const EGO_YAW_RATE: f64 = 0.02;

const PLACEMENT_RETRIES: usize = 200;
const CORRIDOR_CLEARANCE: f64 = 2.5;
const OBJECT_GAP: f64 = 0.3;

pub const SKY_COLOR: [f32; 3] = [0.55, 0.70, 0.90];
/// Fixed RGB per label; index 0 (empty) is never rendered.
pub const CATEGORY_COLORS: [[f32; 3]; NUM_CLASSES] = [
    [0.0, 0.0, 0.0],
    [0.40, 0.35, 0.30],
    [0.85, 0.20, 0.15],
    [0.15, 0.65, 0.20],
    [0.95, 0.80, 0.10],
    [0.20, 0.30, 0.85],
    [0.80, 0.30, 0.80],
    [0.10, 0.80, 0.80],
    [1.00, 0.55, 0.05],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_objects: usize,
    /// Prior over labels `1..=N_CLS`; entry `c - 1` is category `c`.
    pub class_frequencies: Vec<f64>,
    pub sequence_length: usize,
    pub rig: Vec<CameraModel>,
    /// Fine ground-truth grid, in each frame's ego coordinates.
    pub grid: VoxelGridSpec,
    pub lidar_rays: usize,
    pub sweeps_per_frame: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_frequencies.len() != N_CLS {
            return Err(Error::invalid(format!("expected {N_CLS} class frequencies, got {}", self.class_frequencies.len())));
        }
        if self.class_frequencies.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::invalid("class frequencies must be finite and non-negative"));
        }
        let total: f64 = self.class_frequencies.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("class frequencies sum to {total}, expected 1")));
        }
        if self.n_objects > 0 && self.class_frequencies[1..].iter().all(|&f| f == 0.0) {
            return Err(Error::invalid("objects requested but every object category has zero frequency"));
        }
        if self.sequence_length == 0 {
            return Err(Error::invalid("sequence_length must be >= 1"));
        }
        if self.sweeps_per_frame == 0 {
            return Err(Error::invalid("sweeps_per_frame must be >= 1"));
        }
        if self.rig.is_empty() {
            return Err(Error::invalid("camera rig is empty"));
        }
        if self.rig.iter().any(|c| c.image_size != self.rig[0].image_size) {
            return Err(Error::invalid("all cameras must share one image size"));
        }
        for (i, c) in self.rig.iter().enumerate() {
            if c.view_index != i {
                return Err(Error::invalid("camera view indices must be 0..n in order"));
            }
        }
        self.grid.validate()
    }
}

/// Dense label volume; label 0 is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub grid: VoxelGridSpec,
    /// Flattened with [`VoxelGridSpec::linear`].
    pub labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(grid: VoxelGridSpec, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.num_voxels() {
            return Err(Error::invalid(format!("{} labels for a grid of {} voxels", labels.len(), grid.num_voxels())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > N_CLS) {
            return Err(Error::invalid(format!("label {bad} exceeds {N_CLS}")));
        }
        Ok(Self { grid, labels })
    }

    pub fn empty(grid: VoxelGridSpec) -> Self {
        Self { grid, labels: vec![EMPTY; grid.num_voxels()] }
    }

    pub fn get(&self, idx: [usize; 3]) -> u8 {
        self.labels[self.grid.linear(idx)]
    }

    /// Label counts indexed by label.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Labels on a `factor`-times coarser grid: the most frequent non-empty
    /// child label (lowest label on ties), or empty if every child is empty.
    pub fn downsample(&self, factor: usize) -> Result<OccupancyGrid> {
        let coarse = self.grid.coarsen(factor)?;
        let mut labels = Vec::with_capacity(coarse.num_voxels());
        for i in 0..coarse.num_voxels() {
            let [h, w, z] = coarse.unravel(i);
            let mut counts = [0usize; NUM_CLASSES];
            for dh in 0..factor {
                for dw in 0..factor {
                    for dz in 0..factor {
                        counts[self.get([h * factor + dh, w * factor + dw, z * factor + dz]) as usize] += 1;
                    }
                }
            }
            let best = (1..NUM_CLASSES).filter(|&c| counts[c] > 0).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)));
            labels.push(best.unwrap_or(0) as u8);
        }
        Ok(OccupancyGrid { grid: coarse, labels })
    }
}

/// Interleaved RGB image, rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageRgb {
    pub fn filled(width: usize, height: usize, c: [f32; 3]) -> Self {
        Self { width, height, data: c.iter().copied().cycle().take(width * height * 3).collect() }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub frame_index: usize,
    /// One image per camera, in rig order.
    pub images: Vec<ImageRgb>,
    /// Accumulated sweeps in this frame's ego coordinates.
    pub points: Vec<[f32; 3]>,
    pub gt: OccupancyGrid,
    pub pose: EgoPose,
}

/// Independent deterministic stream for one `(purpose, a, b)` triple.
pub fn derive_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (a << 32) ^ b);
    r
}

const RNG_PLACEMENT: u64 = 1;
const RNG_LIDAR: u64 = 2;
const RNG_RENDER: u64 = 3;

/// Ego pose at continuous time `tau` (frames): constant speed and yaw rate
/// starting at the world origin.
pub fn trajectory_pose(tau: f64) -> EgoPose {
    let yaw = EGO_YAW_RATE * tau;
    let r = EGO_SPEED / EGO_YAW_RATE;
    EgoPose::planar(tau.max(0.0).round() as usize, r * yaw.sin(), r * (1.0 - yaw.cos()), 0.0, yaw)
}

fn ground() -> Primitive {
    Primitive { category: GROUND, shape: Shape::Slab { top: GROUND_TOP, bottom: GROUND_TOP - GROUND_THICKNESS } }
}

/// Characteristic object size of a category, growing with its prior so
/// that frequent categories also cover more voxels.
fn category_scale(freq: f64, max_freq: f64) -> f64 {
    1.0 + 3.0 * (freq / max_freq).sqrt()
}

fn make_object(category: u8, s: f64, x: f64, y: f64, rng: &mut ChaCha8Rng) -> Primitive {
    let shape = match category % 3 {
        2 => {
            let half = [s * rng.random_range(0.3..0.5), s * rng.random_range(0.3..0.5), s * rng.random_range(0.25..0.5)];
            Shape::Box { center: [x, y, GROUND_TOP + half[2]], half, yaw: rng.random_range(0.0..std::f64::consts::PI) }
        }
        0 => {
            let radius = s * rng.random_range(0.3..0.45);
            let h = s * rng.random_range(0.6..1.2);
            Shape::Cylinder { center: [x, y], z0: GROUND_TOP, z1: GROUND_TOP + h, radius }
        }
        _ => {
            let radius = s * rng.random_range(0.35..0.5);
            Shape::Sphere { center: [x, y, GROUND_TOP + radius], radius }
        }
    };
    Primitive { category, shape }
}

fn dist_to_path(p: [f64; 2], path: &[[f64; 2]]) -> f64 {
    path.windows(2)
        .map(|s| {
            let (a, b) = (s[0], s[1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let ap = [p[0] - a[0], p[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
            (ap[0] - t * ab[0]).hypot(ap[1] - t * ab[1])
        })
        .fold(f64::INFINITY, f64::min)
}

/// Ground plus `n_objects` non-overlapping primitives off the ego path.
pub fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = derive_rng(spec.seed, RNG_PLACEMENT, 0, 0);
    let last = spec.sequence_length as f64;
    let path: Vec<[f64; 2]> = (0..=((last + 1.0) * 4.0) as usize)
        .map(|i| {
            let p = trajectory_pose(-1.0 + i as f64 * 0.25);
            let t = p.isometry().translation.vector;
            [t.x, t.y]
        })
        .collect();
    let g = &spec.grid;
    let ext = [0, 1].map(|a| (g.origin[a], g.origin[a] + g.dims[a] as f64 * g.voxel_size));
    let (px0, px1) = path.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
    let (py0, py1) = path.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
    let xr = (px0 + ext[0].0, px1 + ext[0].1);
    let yr = (py0 + ext[1].0, py1 + ext[1].1);

    let obj_freq = &spec.class_frequencies[1..];
    let mut prims = Vec::with_capacity(spec.n_objects + 1);
    if spec.n_objects > 0 {
        let max_f = obj_freq.iter().copied().fold(0.0, f64::max);
        let pick = WeightedIndex::new(obj_freq).map_err(|e| Error::invalid(format!("class frequencies: {e}")))?;
        for n in 0..spec.n_objects {
            let category = (pick.sample(&mut rng) + 2) as u8;
            let s = category_scale(obj_freq[category as usize - 2], max_f);
            let mut placed = None;
            for _ in 0..PLACEMENT_RETRIES {
                let x = rng.random_range(xr.0..xr.1);
                let y = rng.random_range(yr.0..yr.1);
                let cand = make_object(category, s, x, y, &mut rng);
                let r = cand.footprint_radius();
                if dist_to_path([x, y], &path) - r < CORRIDOR_CLEARANCE {
                    continue;
                }
                let clear = prims.iter().all(|q: &Primitive| {
                    let c = q.footprint_center();
                    (c[0] - x).hypot(c[1] - y) > r + q.footprint_radius() + OBJECT_GAP
                });
                if clear {
                    placed = Some(cand);
                    break;
                }
            }
            match placed {
                Some(p) => prims.push(p),
                None => {
                    return Err(Error::Placement(format!(
                        "could not place object {} of {} without overlap after {PLACEMENT_RETRIES} attempts",
                        n + 1,
                        spec.n_objects
                    )))
                }
            }
        }
    }
    prims.push(ground());
    Ok(Scene { primitives: prims })
}

/// Elevation of LiDAR ring `r`, radians.
pub fn ring_elevation(r: usize) -> f64 {
    let step = (LIDAR_ELEV_MAX_DEG - LIDAR_ELEV_MIN_DEG) / (LIDAR_RINGS - 1) as f64;
    (LIDAR_ELEV_MIN_DEG + step * r as f64).to_radians()
}

/// One sweep from the sensor at `pose`: ray `r` uses ring `r mod 16` and
/// azimuth step `r / 16`, rotated by `phase` radians. Returns noisy first
/// hits in the ego frame of `pose`.
pub fn sample_lidar(scene: &Scene, pose: &EgoPose, n_rays: usize, phase: f64, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    if n_rays == 0 || scene.primitives.is_empty() {
        return Vec::new();
    }
    let noise = Normal::new(0.0, LIDAR_RANGE_SIGMA).expect("valid sigma");
    let n_az = n_rays.div_ceil(LIDAR_RINGS);
    let origin = pose.ego_to_world(&Vector3::zeros());
    let mut out = Vec::new();
    for r in 0..n_rays {
        let el = ring_elevation(r % LIDAR_RINGS);
        let az = phase + std::f64::consts::TAU * (r / LIDAR_RINGS) as f64 / n_az as f64;
        let d_ego = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        let d = pose.ego_dir_to_world(&d_ego);
        if let Some((t, _)) = scene.cast(&origin, &d, LIDAR_MAX_RANGE) {
            let t = t + noise.sample(rng);
            out.push(d_ego * t);
        }
    }
    out
}

/// Index of the primitive seen through each pixel centre of `cam`, row-major.
pub fn render_ids(scene: &Scene, cam: &CameraModel, pose: &EgoPose) -> Vec<Option<usize>> {
    let (w, h) = cam.image_size;
    let o = pose.ego_to_world(&cam.center());
    let mut ids = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = pose.ego_dir_to_world(&cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5)).normalize();
            ids.push(scene.cast(&o, &d, f64::INFINITY).map(|(_, i)| i));
        }
    }
    ids
}

/// Flat-shaded category colours with Gaussian pixel noise; sky elsewhere.
pub fn render_views(scene: &Scene, rig: &[CameraModel], pose: &EgoPose, rng: &mut impl Rng) -> Vec<ImageRgb> {
    let noise = Normal::new(0.0, PIXEL_SIGMA).expect("valid sigma");
    rig.iter()
        .map(|cam| {
            let (w, h) = cam.image_size;
            let ids = render_ids(scene, cam, pose);
            let mut data = Vec::with_capacity(w * h * 3);
            for id in ids {
                let c = id.map_or(SKY_COLOR, |i| CATEGORY_COLORS[scene.primitives[i].category as usize]);
                for ch in c {
                    data.push(ch + noise.sample(rng) as f32);
                }
            }
            ImageRgb { width: w, height: h, data }
        })
        .collect()
}

/// Labels of the fine grid placed in the ego frame of `pose`.
pub fn voxelize(scene: &Scene, grid: &VoxelGridSpec, pose: &EgoPose) -> OccupancyGrid {
    let labels = (0..grid.num_voxels())
        .map(|i| scene.label_at(&pose.ego_to_world(&grid.center_unchecked(grid.unravel(i)))))
        .collect();
    OccupancyGrid { grid: *grid, labels }
}

/// Generates every frame of one sequence. Deterministic in `spec.seed`.
pub fn generate_sequence(spec: &SceneSpec) -> Result<Vec<SceneSample>> {
    let scene = build_scene(spec)?;
    let s = spec.sweeps_per_frame;
    let mut out = Vec::with_capacity(spec.sequence_length);
    for t in 0..spec.sequence_length {
        let pose = trajectory_pose(t as f64);
        let pose = EgoPose::new(t, *pose.transform())?;
        let mut points = Vec::new();
        let n_az = spec.lidar_rays.div_ceil(LIDAR_RINGS).max(1);
        for sweep in 0..s {
            let tau = t as f64 - sweep as f64 / s as f64;
            let sp = trajectory_pose(tau);
            let mut rng = derive_rng(spec.seed, RNG_LIDAR, t as u64, sweep as u64);
            let phase = std::f64::consts::TAU / n_az as f64 * sweep as f64 / s as f64;
            let rel = sp.relative_to(&pose);
            for p in sample_lidar(&scene, &sp, spec.lidar_rays, phase, &mut rng) {
                let q = rel.transform_point(&p.into());
                points.push([q.x as f32, q.y as f32, q.z as f32]);
            }
        }
        let mut rng = derive_rng(spec.seed, RNG_RENDER, t as u64, 0);
        let images = render_views(&scene, &spec.rig, &pose, &mut rng);
        let gt = voxelize(&scene, &spec.grid, &pose);
        out.push(SceneSample { frame_index: t, images, points, gt, pose });
    }
    Ok(out)
}

/// Rig used by the default configurations: four cameras at 90° steps,
/// 100° horizontal field of view, 0.2 m outward from the sensor.
pub fn default_rig(image_size: (usize, usize)) -> Result<Vec<CameraModel>> {
    crate::geometry::ring_rig(4, 100.0, image_size, 0.2)
}

#[cfg(test)]
mod tests;
