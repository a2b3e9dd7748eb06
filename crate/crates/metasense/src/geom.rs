//! Small 3D vector helpers and the pose of an aperture plane in world space.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Placement of an aperture plane: a world-space center and an orthonormal
/// in-plane basis. 2D aperture coordinates (u, v) lift to
/// `center + u * u_axis + v * v_axis`; the plane normal is `u_axis x v_axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanePose {
    pub center: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
}

impl PlanePose {
    /// Axis-aligned pose facing +z (u along +x, v along +y).
    pub fn facing_plus_z(center: Vec3) -> Self {
        Self {
            center,
            u_axis: [1.0, 0.0, 0.0],
            v_axis: [0.0, 1.0, 0.0],
        }
    }

    /// Build a pose from a center and outward normal. The in-plane basis is
    /// chosen deterministically by projecting out the world axis least
    /// aligned with the normal.
    pub fn from_center_normal(center: Vec3, normal: Vec3) -> Self {
        let n = normalize(normal);
        let reference = if n[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let u_axis = normalize(sub(reference, scale(n, dot(reference, n))));
        let v_axis = cross(n, u_axis);
        Self {
            center,
            u_axis,
            v_axis,
        }
    }

    pub fn lift(&self, p: [f64; 2]) -> Vec3 {
        add(
            self.center,
            add(scale(self.u_axis, p[0]), scale(self.v_axis, p[1])),
        )
    }

    pub fn normal(&self) -> Vec3 {
        cross(self.u_axis, self.v_axis)
    }
}
