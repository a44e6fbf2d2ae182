//! Camera pose model and pinhole projection.
//!
//! Frames: the map frame has X along the initial travel direction, Y up and
//! Z to the right. The camera frame has Z along the optical axis, X to the
//! right and Y down. At zero yaw/pitch/roll the camera looks along map +X
//! with no tilt, so the map-to-camera rotation is the fixed axis permutation
//! [`BASE_ALIGNMENT`].
//!
//! The full rotation is `Rz(roll) * Rx(pitch) * BASE_ALIGNMENT * Ry(yaw)`:
//! yaw turns about map up (positive yaw turns the view toward map +Z), pitch
//! about the camera X axis and roll about the optical axis.

use std::f64::consts::PI;

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_model::LineLandmark;

/// Points closer than this along the optical axis are rejected.
pub const MIN_DEPTH_M: f64 = 0.1;

#[rustfmt::skip]
pub const BASE_ALIGNMENT: Matrix3<f64> = Matrix3::new(
    0.0,  0.0, 1.0,
    0.0, -1.0, 0.0,
    1.0,  0.0, 0.0,
);

/// Derivative of a 2D projection with respect to (Cx, Cy, Cz, yaw, pitch, roll).
pub type PoseJacobian2 = SMatrix<f64, 2, 6>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("point lies behind the camera")]
pub struct BehindCamera;

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// 6-DOF camera pose in the map frame. Angles are radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub center: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::new(Vector3::zeros(), 0.0, 0.0, 0.0)
    }
}

impl CameraPose {
    pub fn new(center: Vector3<f64>, yaw: f64, pitch: f64, roll: f64) -> Self {
        Self {
            center,
            yaw: normalize_angle(yaw),
            pitch: normalize_angle(pitch),
            roll: normalize_angle(roll),
        }
    }

    /// Parameter vector in the order (Cx, Cy, Cz, yaw, pitch, roll).
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.center.x,
            self.center.y,
            self.center.z,
            self.yaw,
            self.pitch,
            self.roll,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }

    /// Map-to-camera rotation.
    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_angles(self.yaw, self.pitch, self.roll)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (p - self.center)
    }

    /// Unit optical-axis direction projected onto the ground plane, as
    /// (map X, map Z).
    pub fn heading(&self) -> Vector2<f64> {
        let forward = self.rotation().transpose() * Vector3::z();
        let h = Vector2::new(forward.x, forward.z);
        let n = h.norm();
        if n > 1e-12 {
            h / n
        } else {
            Vector2::new(self.yaw.cos(), self.yaw.sin())
        }
    }
}

#[rustfmt::skip]
fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0,
                 0.0,   c,  -s,
                 0.0,   s,   c)
}

#[rustfmt::skip]
fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(  c, 0.0,   s,
                 0.0, 1.0, 0.0,
                  -s, 0.0,   c)
}

#[rustfmt::skip]
fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(  c,  -s, 0.0,
                   s,   c, 0.0,
                 0.0, 0.0, 1.0)
}

#[rustfmt::skip]
fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0,
                 0.0,  -s,  -c,
                 0.0,   c,  -s)
}

#[rustfmt::skip]
fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new( -s, 0.0,   c,
                 0.0, 0.0, 0.0,
                  -c, 0.0,  -s)
}

#[rustfmt::skip]
fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new( -s,  -c, 0.0,
                   c,  -s, 0.0,
                 0.0, 0.0, 0.0)
}

pub fn rotation_from_angles(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    rot_z(roll) * rot_x(pitch) * BASE_ALIGNMENT * rot_y(yaw)
}

/// Inverse of [`rotation_from_angles`]; unique for |pitch| < pi/2.
pub fn angles_from_rotation(r: &Matrix3<f64>) -> (f64, f64, f64) {
    // r * A^T = Rz(roll) Rx(pitch) Ry(-yaw)
    let m = r * BASE_ALIGNMENT.transpose();
    let pitch = m[(2, 1)].clamp(-1.0, 1.0).asin();
    let yaw = m[(2, 0)].atan2(m[(2, 2)]);
    let roll = (-m[(0, 1)]).atan2(m[(1, 1)]);
    (yaw, pitch, roll)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    /// Rectified KITTI odometry left grayscale camera.
    fn default() -> Self {
        Self {
            fx: 718.856,
            fy: 718.856,
            cx: 607.1928,
            cy: 185.2157,
            skew: 0.0,
            width: 1241,
            height: 376,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid intrinsics: {0}")]
pub struct InvalidIntrinsics(pub &'static str);

impl Intrinsics {
    pub fn validate(&self) -> Result<(), InvalidIntrinsics> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(InvalidIntrinsics("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(InvalidIntrinsics("image size must be positive"));
        }
        if ![self.cx, self.cy, self.skew].iter().all(|v| v.is_finite()) {
            return Err(InvalidIntrinsics("principal point and skew must be finite"));
        }
        Ok(())
    }

    pub fn contains(&self, u: &Vector2<f64>) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x <= (self.width - 1) as f64 && u.y <= (self.height - 1) as f64
    }

    fn apply(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            (self.fx * pc.x + self.skew * pc.y) / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }
}

/// Projections of a line landmark's two control points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedLine {
    pub u1: Vector2<f64>,
    pub u2: Vector2<f64>,
}

pub fn project_point(
    p: &Vector3<f64>,
    pose: &CameraPose,
    k: &Intrinsics,
) -> Result<Vector2<f64>, BehindCamera> {
    let pc = pose.to_camera(p);
    if pc.z <= MIN_DEPTH_M {
        return Err(BehindCamera);
    }
    Ok(k.apply(&pc))
}

pub fn project_line(
    line: &LineLandmark,
    pose: &CameraPose,
    k: &Intrinsics,
) -> Result<ProjectedLine, BehindCamera> {
    Ok(ProjectedLine {
        u1: project_point(&line.p1, pose, k)?,
        u2: project_point(&line.p2, pose, k)?,
    })
}

/// Rotation and its partial derivatives with respect to yaw, pitch and roll.
#[derive(Debug, Clone, Copy)]
pub struct RotationWithDerivatives {
    pub r: Matrix3<f64>,
    pub d_yaw: Matrix3<f64>,
    pub d_pitch: Matrix3<f64>,
    pub d_roll: Matrix3<f64>,
}

impl RotationWithDerivatives {
    pub fn new(pose: &CameraPose) -> Self {
        let (ry, rx, rz) = (rot_y(pose.yaw), rot_x(pose.pitch), rot_z(pose.roll));
        let a_ry = BASE_ALIGNMENT * ry;
        Self {
            r: rz * rx * a_ry,
            d_yaw: rz * rx * BASE_ALIGNMENT * d_rot_y(pose.yaw),
            d_pitch: rz * d_rot_x(pose.pitch) * a_ry,
            d_roll: d_rot_z(pose.roll) * rx * a_ry,
        }
    }
}

/// Projects `p` and returns the 2x6 derivative of the pixel with respect
/// to the pose parameters.
pub fn project_point_with_jacobian(
    p: &Vector3<f64>,
    pose: &CameraPose,
    rot: &RotationWithDerivatives,
    k: &Intrinsics,
) -> Result<(Vector2<f64>, PoseJacobian2), BehindCamera> {
    let d = p - pose.center;
    let pc = rot.r * d;
    if pc.z <= MIN_DEPTH_M {
        return Err(BehindCamera);
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let z2 = z * z;
    let du_dpc = Matrix2x3::new(
        k.fx / z,
        k.skew / z,
        -(k.fx * x + k.skew * y) / z2,
        0.0,
        k.fy / z,
        -k.fy * y / z2,
    );
    let mut dpc = Matrix3x6::zeros();
    dpc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rot.r));
    dpc.set_column(3, &(rot.d_yaw * d));
    dpc.set_column(4, &(rot.d_pitch * d));
    dpc.set_column(5, &(rot.d_roll * d));
    Ok((k.apply(&pc), du_dpc * dpc))
}

type Matrix3x6 = SMatrix<f64, 3, 6>;
