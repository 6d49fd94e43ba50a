//! Rotation representations used by the orientation pipeline.
//!
//! Planar orientations are stored as a unit `(cos, sin)` pair, spatial ones
//! as 3x3 rotation matrices. Quaternions appear only where a rotation is a
//! learned offset or a random sample; everything the network consumes is an
//! axis column.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Degeneracy threshold shared by every rotation routine.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RotError {
    #[error("degenerate axes: a half has near-zero norm or the halves are parallel")]
    DegenerateAxes,
}

/// Spatial dimension of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dim {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl Dim {
    pub fn from_usize(d: usize) -> Option<Dim> {
        match d {
            2 => Some(Dim::Two),
            3 => Some(Dim::Three),
            _ => None,
        }
    }

    /// Length of a position vector.
    pub fn n(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }

    /// Length of the orientation encoding `w` (2 in the plane, 6 in space).
    pub fn w_len(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 6,
        }
    }

    /// Number of raw parameters in a rotational offset.
    pub fn offset_len(self) -> usize {
        match self {
            Dim::Two => 1,
            Dim::Three => 4,
        }
    }
}

/// Planar rotation as a unit `(cos, sin)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot2 {
    pub c: f64,
    pub s: f64,
}

impl Rot2 {
    pub const IDENTITY: Rot2 = Rot2 { c: 1.0, s: 0.0 };

    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Rot2 { c, s }
    }

    /// Normalizes an arbitrary non-zero 2-vector into a rotation.
    pub fn from_vec(c: f64, s: f64) -> Option<Self> {
        let n = c.hypot(s);
        (n > EPS).then(|| Rot2 { c: c / n, s: s / n })
    }

    pub fn angle(&self) -> f64 {
        self.s.atan2(self.c)
    }

    pub fn compose(&self, other: &Rot2) -> Rot2 {
        Rot2 {
            c: self.c * other.c - self.s * other.s,
            s: self.s * other.c + self.c * other.s,
        }
    }

    pub fn inverse(&self) -> Rot2 {
        Rot2 { c: self.c, s: -self.s }
    }
}

/// First two columns of a rotation matrix. `rz` is implied by their cross product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotAxes6 {
    pub rx: Vector3<f64>,
    pub ry: Vector3<f64>,
}

impl RotAxes6 {
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        RotAxes6 {
            rx: m.column(0).into_owned(),
            ry: m.column(1).into_owned(),
        }
    }

    pub fn rz(&self) -> Vector3<f64> {
        self.rx.cross(&self.ry)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.rx, self.ry, self.rz()])
    }

    /// Flattened `[rx, ry]`, the 6-vector layout of `w`.
    pub fn to_array(&self) -> [f64; 6] {
        [self.rx.x, self.rx.y, self.rx.z, self.ry.x, self.ry.y, self.ry.z]
    }
}

/// Orthonormalizes a raw 6-vector `[rx~, ry~]`: `rx` keeps the direction of
/// the first half, `ry` is the second half with its `rx` component removed.
pub fn gram_schmidt_project(wt: &[f64; 6]) -> Result<RotAxes6, RotError> {
    let a = Vector3::new(wt[0], wt[1], wt[2]);
    let b = Vector3::new(wt[3], wt[4], wt[5]);
    let (na, nb) = (a.norm(), b.norm());
    if na < EPS || nb < EPS {
        return Err(RotError::DegenerateAxes);
    }
    let proj = b - a * (a.dot(&b) / a.dot(&a));
    // parallel halves leave nothing after projection (relative to |b|)
    let np = proj.norm();
    if np < EPS * nb.max(1.0) {
        return Err(RotError::DegenerateAxes);
    }
    Ok(RotAxes6 {
        rx: a / na,
        ry: proj / np,
    })
}

/// An orientation in either dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rotation {
    Planar(Rot2),
    Spatial(Matrix3<f64>),
}

impl Rotation {
    pub fn identity(dim: Dim) -> Self {
        match dim {
            Dim::Two => Rotation::Planar(Rot2::IDENTITY),
            Dim::Three => Rotation::Spatial(Matrix3::identity()),
        }
    }

    pub fn dim(&self) -> Dim {
        match self {
            Rotation::Planar(_) => Dim::Two,
            Rotation::Spatial(_) => Dim::Three,
        }
    }

    pub fn from_angle(theta: f64) -> Self {
        Rotation::Planar(Rot2::from_angle(theta))
    }

    pub fn from_quat(q: &UnitQuaternion<f64>) -> Self {
        Rotation::Spatial(q.to_rotation_matrix().into_inner())
    }

    /// Rotation about `axis` (need not be unit) by `angle` radians.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Rotation::from_quat(&q)
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        match (self, other) {
            (Rotation::Planar(a), Rotation::Planar(b)) => Rotation::Planar(a.compose(b)),
            (Rotation::Spatial(a), Rotation::Spatial(b)) => Rotation::Spatial(a * b),
            _ => panic!("cannot compose rotations of different dimension"),
        }
    }

    pub fn inverse(&self) -> Rotation {
        match self {
            Rotation::Planar(r) => Rotation::Planar(r.inverse()),
            Rotation::Spatial(m) => Rotation::Spatial(m.transpose()),
        }
    }

    /// The action encoding `w`: `[cos, sin]` or `[rx, ry]`.
    pub fn encode(&self) -> Vec<f64> {
        match self {
            Rotation::Planar(r) => vec![r.c, r.s],
            Rotation::Spatial(m) => RotAxes6::from_matrix(m).to_array().to_vec(),
        }
    }

    /// Inverse of [`Rotation::encode`]; 3D encodings are re-orthonormalized.
    pub fn decode(dim: Dim, w: &[f64]) -> Result<Rotation, RotError> {
        match dim {
            Dim::Two => Rot2::from_vec(w[0], w[1])
                .map(Rotation::Planar)
                .ok_or(RotError::DegenerateAxes),
            Dim::Three => {
                let arr: [f64; 6] = w[..6].try_into().expect("6-vector");
                Ok(Rotation::Spatial(gram_schmidt_project(&arr)?.to_matrix()))
            }
        }
    }

    /// Planar angle, or `None` in 3D.
    pub fn angle(&self) -> Option<f64> {
        match self {
            Rotation::Planar(r) => Some(r.angle()),
            Rotation::Spatial(_) => None,
        }
    }

    pub fn to_quat(&self) -> UnitQuaternion<f64> {
        match self {
            Rotation::Planar(r) => UnitQuaternion::from_axis_angle(&Vector3::z_axis(), r.angle()),
            Rotation::Spatial(m) => {
                UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m))
            }
        }
    }
}

/// Composes the offset on the right: `x_R * R(delta)`.
pub fn apply_offset(x_r: &Rotation, delta: &Rotation) -> Rotation {
    x_r.compose(delta)
}

/// Angle in `[0, pi]` of the relative rotation `a^-1 b`.
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    match (a, b) {
        (Rotation::Planar(a), Rotation::Planar(b)) => a.inverse().compose(b).angle().abs(),
        (Rotation::Spatial(a), Rotation::Spatial(b)) => {
            let r = a.transpose() * b;
            let cos = (r.trace() - 1.0) * 0.5;
            let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
            let sin = 0.5 * v.norm();
            sin.atan2(cos)
        }
        _ => panic!("geodesic angle between rotations of different dimension"),
    }
}

/// Constant-speed interpolation along the shorter great arc.
pub fn slerp(q0: &UnitQuaternion<f64>, q1: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let a = q0.as_ref().coords;
    let mut b = q1.as_ref().coords;
    let mut d = a.dot(&b);
    if d < 0.0 {
        b = -b;
        d = -d;
    }
    let out = if d > 1.0 - 1e-12 {
        a * (1.0 - t) + b * t
    } else {
        let theta = d.min(1.0).acos();
        let s = theta.sin();
        a * (((1.0 - t) * theta).sin() / s) + b * ((t * theta).sin() / s)
    };
    UnitQuaternion::from_quaternion(Quaternion::from(out))
}

/// Interpolates between two rotations of the same dimension: shortest-arc
/// angle interpolation in the plane, quaternion slerp in space.
pub fn interpolate(a: &Rotation, b: &Rotation, t: f64) -> Rotation {
    match (a, b) {
        (Rotation::Planar(ra), Rotation::Planar(rb)) => {
            let d = ra.inverse().compose(rb).angle();
            Rotation::Planar(ra.compose(&Rot2::from_angle(d * t)))
        }
        (Rotation::Spatial(_), Rotation::Spatial(_)) => {
            Rotation::from_quat(&slerp(&a.to_quat(), &b.to_quat(), t))
        }
        _ => panic!("cannot interpolate rotations of different dimension"),
    }
}

/// Uniform sample: an angle in `[-pi, pi)` or a uniform unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R, dim: Dim) -> Rotation {
    match dim {
        Dim::Two => Rotation::from_angle(rng.random_range(-PI..PI)),
        Dim::Three => Rotation::from_quat(&random_quat(rng)),
    }
}

/// Uniform unit quaternion (Shoemake's subgroup algorithm).
pub fn random_quat<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * 2.0 * PI;
    let u3: f64 = rng.random::<f64>() * 2.0 * PI;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    UnitQuaternion::from_quaternion(Quaternion::new(
        b * u3.cos(),
        a * u2.sin(),
        a * u2.cos(),
        b * u3.sin(),
    ))
}

pub fn quat_to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Builds a unit quaternion from `wxyz`, normalizing the input.
pub fn quat_from_wxyz(v: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]))
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}
