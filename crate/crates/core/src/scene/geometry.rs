//! Primitive solids: ray intersection, containment/penetration and surface
//! distance. Boxes are axis-aligned and cylinders stand upright on `base`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Rays shorter than this are treated as starting on the surface.
const T_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    Box {
        center: Vector3<f64>,
        half_extents: Vector3<f64>,
    },
    Cylinder {
        /// Center of the bottom cap.
        base: Vector3<f64>,
        radius: f64,
        height: f64,
    },
}

/// Nearest intersection of a ray with a shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; with a camera ray whose optical-axis component is 1
    /// this equals the z-depth.
    pub t: f64,
    /// Outward unit surface normal at the hit.
    pub normal: Vector3<f64>,
}

impl Shape {
    pub fn is_valid(&self) -> bool {
        let finite = |v: &Vector3<f64>| v.iter().all(|c| c.is_finite());
        match self {
            Shape::Sphere { center, radius } => finite(center) && *radius > 0.0 && radius.is_finite(),
            Shape::Box { center, half_extents } => {
                finite(center) && half_extents.iter().all(|h| *h > 0.0 && h.is_finite())
            }
            Shape::Cylinder { base, radius, height } => {
                finite(base) && *radius > 0.0 && *height > 0.0 && radius.is_finite() && height.is_finite()
            }
        }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        match self {
            Shape::Sphere { center, .. } | Shape::Box { center, .. } => *center,
            Shape::Cylinder { base, height, .. } => base + Vector3::new(0.0, 0.0, height / 2.0),
        }
    }

    /// Same shape moved so its centroid is at `centroid`.
    pub fn with_centroid(&self, centroid: Vector3<f64>) -> Shape {
        let shift = centroid - self.centroid();
        match *self {
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: center + shift,
                radius,
            },
            Shape::Box { center, half_extents } => Shape::Box {
                center: center + shift,
                half_extents,
            },
            Shape::Cylinder { base, radius, height } => Shape::Cylinder {
                base: base + shift,
                radius,
                height,
            },
        }
    }

    /// Distance along `view_dir` (unit, pointing away from the viewer) from the
    /// centroid of the pixel-sampled visible surface to the shape centroid.
    /// Exact for a box or upright cylinder seen face-on; orthographic
    /// approximation (2r/3) for spheres.
    pub fn view_depth_offset(&self, view_dir: &Vector3<f64>) -> f64 {
        match self {
            Shape::Sphere { radius, .. } => 2.0 * radius / 3.0,
            Shape::Box { half_extents, .. } => view_dir.abs().dot(half_extents),
            Shape::Cylinder { radius, height, .. } => {
                let axial = view_dir.z.abs();
                axial * height / 2.0 + (1.0 - axial * axial).max(0.0).sqrt() * radius * 2.0 / 3.0
            }
        }
    }

    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        match self {
            Shape::Sphere { center, radius } => intersect_sphere(center, *radius, origin, dir),
            Shape::Box { center, half_extents } => intersect_box(center, half_extents, origin, dir),
            Shape::Cylinder { base, radius, height } => intersect_cylinder(base, *radius, *height, origin, dir),
        }
    }

    /// Depth of `p` below the surface and the outward normal of the nearest
    /// face, or `None` when `p` is not strictly inside.
    pub fn penetration(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Shape::Sphere { center, radius } => {
                let d = p - center;
                let dist = d.norm();
                if dist >= *radius {
                    return None;
                }
                let normal = if dist > 0.0 { d / dist } else { Vector3::z() };
                Some((radius - dist, normal))
            }
            Shape::Box { center, half_extents } => {
                let d = p - center;
                let mut best: Option<(f64, Vector3<f64>)> = None;
                for i in 0..3 {
                    let depth = half_extents[i] - d[i].abs();
                    if depth <= 0.0 {
                        return None;
                    }
                    if best.is_none_or(|(b, _)| depth < b) {
                        let mut n = Vector3::zeros();
                        n[i] = if d[i] >= 0.0 { 1.0 } else { -1.0 };
                        best = Some((depth, n));
                    }
                }
                best
            }
            Shape::Cylinder { base, radius, height } => {
                let d = p - base;
                let rho = d.x.hypot(d.y);
                let radial = radius - rho;
                let top = height - d.z;
                let bottom = d.z;
                if radial <= 0.0 || top <= 0.0 || bottom <= 0.0 {
                    return None;
                }
                let radial_n = if rho > 0.0 {
                    Vector3::new(d.x / rho, d.y / rho, 0.0)
                } else {
                    Vector3::x()
                };
                let candidates = [(radial, radial_n), (top, Vector3::z()), (bottom, -Vector3::z())];
                candidates.into_iter().min_by(|a, b| a.0.total_cmp(&b.0))
            }
        }
    }

    /// Unsigned distance from `p` to the shape's boundary surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Shape::Box { center, half_extents } => {
                let q = (p - center).abs() - half_extents;
                let outside = q.map(|c| c.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            Shape::Cylinder { base, radius, height } => {
                let d = p - base;
                let radial = d.x.hypot(d.y) - radius;
                let axial = (d.z - height / 2.0).abs() - height / 2.0;
                let outside = radial.max(0.0).hypot(axial.max(0.0));
                let inside = radial.max(axial).min(0.0);
                (outside + inside).abs()
            }
        }
    }
}

fn intersect_sphere(center: &Vector3<f64>, radius: f64, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let oc = origin - center;
    let a = dir.norm_squared();
    let half_b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = half_b * half_b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let mut t = (-half_b - sq) / a;
    if t <= T_EPS {
        t = (-half_b + sq) / a;
        if t <= T_EPS {
            return None;
        }
    }
    let normal = (origin + dir * t - center) / radius;
    Some(Hit { t, normal })
}

fn intersect_box(center: &Vector3<f64>, half: &Vector3<f64>, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut near_sign = 0.0;
    let mut far_axis = 0;
    let mut far_sign = 0.0;
    for i in 0..3 {
        let lo = center[i] - half[i];
        let hi = center[i] + half[i];
        if dir[i].abs() < 1e-300 {
            if origin[i] < lo || origin[i] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (mut t0, mut t1) = ((lo - origin[i]) * inv, (hi - origin[i]) * inv);
        // Entering through the low face means the outward normal points to -axis.
        let (mut s0, mut s1) = (-1.0, 1.0);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            std::mem::swap(&mut s0, &mut s1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = i;
            near_sign = s0;
        }
        if t1 < t_far {
            t_far = t1;
            far_axis = i;
            far_sign = s1;
        }
        if t_near > t_far {
            return None;
        }
    }
    let (t, axis, sign) = if t_near > T_EPS {
        (t_near, near_axis, near_sign)
    } else if t_far > T_EPS {
        (t_far, far_axis, far_sign)
    } else {
        return None;
    };
    let mut normal = Vector3::zeros();
    normal[axis] = sign;
    Some(Hit { t, normal })
}

fn intersect_cylinder(
    base: &Vector3<f64>,
    radius: f64,
    height: f64,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<Hit> {
    let o = origin - base;
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, normal: Vector3<f64>| {
        if t > T_EPS && best.is_none_or(|b| t < b.t) {
            best = Some(Hit { t, normal });
        }
    };

    // Side wall.
    let a = dir.x * dir.x + dir.y * dir.y;
    if a > 1e-300 {
        let half_b = o.x * dir.x + o.y * dir.y;
        let c = o.x * o.x + o.y * o.y - radius * radius;
        let disc = half_b * half_b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-half_b - sq) / a, (-half_b + sq) / a] {
                let z = o.z + dir.z * t;
                if (0.0..=height).contains(&z) {
                    let px = o.x + dir.x * t;
                    let py = o.y + dir.y * t;
                    consider(t, Vector3::new(px / radius, py / radius, 0.0));
                }
            }
        }
    }
    // Caps.
    if dir.z.abs() > 1e-300 {
        for (z, n) in [(0.0, -Vector3::z()), (height, Vector3::z())] {
            let t = (z - o.z) / dir.z;
            let px = o.x + dir.x * t;
            let py = o.y + dir.y * t;
            if px * px + py * py <= radius * radius {
                consider(t, n);
            }
        }
    }
    best
}
