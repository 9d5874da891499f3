//! World-frame primitives, ray casting and point labelling.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Rays closer than this are treated as starting on the surface.
const T_MIN: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Infinite horizontal slab between `bottom` and `top`.
    Slab { top: f64, bottom: f64 },
    /// Box rotated by `yaw` about the vertical axis through `center`.
    Box { center: [f64; 3], half: [f64; 3], yaw: f64 },
    /// Vertical cylinder.
    Cylinder { center: [f64; 2], z0: f64, z1: f64, radius: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub category: u8,
    pub shape: Shape,
}

impl Primitive {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match &self.shape {
            Shape::Slab { top, bottom } => p.z <= *top && p.z > *bottom,
            Shape::Box { center, half, yaw } => {
                let l = to_box_local(p, center, *yaw);
                (0..3).all(|a| l[a].abs() <= half[a])
            }
            Shape::Cylinder { center, z0, z1, radius } => {
                let (dx, dy) = (p.x - center[0], p.y - center[1]);
                p.z >= *z0 && p.z <= *z1 && dx * dx + dy * dy <= radius * radius
            }
            Shape::Sphere { center, radius } => (p - Vector3::from(*center)).norm_squared() <= radius * radius,
        }
    }

    /// Distance along the unit direction `d` to the first entry point, for a
    /// ray starting outside the primitive.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match &self.shape {
            Shape::Slab { top, bottom } => {
                if o.z > *top && d.z < 0.0 {
                    Some((top - o.z) / d.z)
                } else if o.z <= *bottom && d.z > 0.0 {
                    Some((bottom - o.z) / d.z)
                } else {
                    None
                }
            }
            Shape::Box { center, half, yaw } => {
                let lo = to_box_local(o, center, *yaw);
                let (s, c) = (-yaw).sin_cos();
                let ld = Vector3::new(c * d.x - s * d.y, s * d.x + c * d.y, d.z);
                slab_hit(&lo, &ld, half)
            }
            Shape::Cylinder { center, z0, z1, radius } => cylinder_hit(o, d, center, *z0, *z1, *radius),
            Shape::Sphere { center, radius } => {
                let oc = o - Vector3::from(*center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if c <= 0.0 || disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > T_MIN).then_some(t)
            }
        }
    }

    /// Radius of the vertical bounding cylinder around the primitive's axis.
    pub fn footprint_radius(&self) -> f64 {
        match &self.shape {
            Shape::Slab { .. } => f64::INFINITY,
            Shape::Box { half, .. } => half[0].hypot(half[1]),
            Shape::Cylinder { radius, .. } | Shape::Sphere { radius, .. } => *radius,
        }
    }

    pub fn footprint_center(&self) -> [f64; 2] {
        match &self.shape {
            Shape::Slab { .. } => [0.0, 0.0],
            Shape::Box { center, .. } | Shape::Sphere { center, .. } => [center[0], center[1]],
            Shape::Cylinder { center, .. } => *center,
        }
    }
}

fn to_box_local(p: &Vector3<f64>, center: &[f64; 3], yaw: f64) -> Vector3<f64> {
    let (s, c) = (-yaw).sin_cos();
    let (dx, dy) = (p.x - center[0], p.y - center[1]);
    Vector3::new(c * dx - s * dy, s * dx + c * dy, p.z - center[2])
}

fn slab_hit(o: &Vector3<f64>, d: &Vector3<f64>, half: &[f64; 3]) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let ta = (-half[a] - o[a]) / d[a];
        let tb = (half[a] - o[a]) / d[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1 && t0 > T_MIN).then_some(t0)
}

fn cylinder_hit(o: &Vector3<f64>, d: &Vector3<f64>, center: &[f64; 2], z0: f64, z1: f64, r: f64) -> Option<f64> {
    let (ox, oy) = (o.x - center[0], o.y - center[1]);
    let mut best: Option<f64> = None;
    let mut keep = |t: f64| {
        if t > T_MIN && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = ox * d.x + oy * d.y;
        let c = ox * ox + oy * oy - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / a;
            let z = o.z + t * d.z;
            if z >= z0 && z <= z1 {
                keep(t);
            }
        }
    }
    if d.z.abs() > 1e-15 {
        for zc in [z0, z1] {
            let t = (zc - o.z) / d.z;
            let (x, y) = (ox + t * d.x, oy + t * d.y);
            if x * x + y * y <= r * r {
                keep(t);
            }
        }
    }
    let inside = ox * ox + oy * oy < r * r && o.z > z0 && o.z < z1;
    if inside { None } else { best }
}

/// A static world: the primitives in category-priority order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    /// First hit within `max_t` along unit direction `d`: `(distance, primitive index)`.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>, max_t: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.intersect(o, d) {
                if t <= max_t && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    /// Category of the first primitive containing `p`; 0 when empty.
    pub fn label_at(&self, p: &Vector3<f64>) -> u8 {
        self.primitives.iter().find(|q| q.contains(p)).map_or(0, |q| q.category)
    }
}
