//! Independent re-derivations used as test oracles, plus scene helpers.
#![allow(dead_code)]

use nalgebra::{DVector, Matrix3, Rotation3, Vector2, Vector3, Vector6};
use rand::Rng;
use semloc::camera::{CameraPose, Intrinsics};
use semloc::feature_extract::{DetectedLine, DetectedPoint, FrameDetections};
use semloc::map_model::{preselect, PreselectedSet, PreselectConfig, RoughPose};
use semloc::residual::{CorrespondenceSet, ResidualConfig};

/// Map-to-camera rotation built from axis-angle elementary rotations and an
/// explicit basis change (camera X = map Z, camera Y = -map Y, camera Z =
/// map X).
pub fn rotation_oracle(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let basis = Matrix3::from_rows(&[
        Vector3::new(0.0, 0.0, 1.0).transpose(),
        Vector3::new(0.0, -1.0, 0.0).transpose(),
        Vector3::new(1.0, 0.0, 0.0).transpose(),
    ]);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), roll);
    rz.matrix() * rx.matrix() * basis * ry.matrix()
}

pub fn project_oracle(p: &Vector3<f64>, pose: &CameraPose, k: &Intrinsics) -> Option<Vector2<f64>> {
    let r = rotation_oracle(pose.yaw, pose.pitch, pose.roll);
    let q = r * (p - pose.center);
    if q.z <= 0.1 {
        return None;
    }
    Some(Vector2::new(
        k.fx * q.x / q.z + k.skew * q.y / q.z + k.cx,
        k.fy * q.y / q.z + k.cy,
    ))
}

/// Distance from `u` to the infinite line through `a` and `b`, via the foot
/// of the perpendicular.
pub fn point_to_line_oracle(u: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let d = b - a;
    let t = (u - a).dot(&d) / d.dot(&d);
    let foot = a + d * t;
    ((u.x - foot.x).powi(2) + (u.y - foot.y).powi(2)).sqrt()
}

pub fn line_distance_oracle(u1: &Vector2<f64>, u2: &Vector2<f64>, det: &DetectedLine) -> f64 {
    (point_to_line_oracle(u1, &det.m1, &det.m2) + point_to_line_oracle(u2, &det.m1, &det.m2)) / 2.0
}

/// Total cost summed term by term: squared line distances, squared point
/// distances and the weighted flat-ground prior.
pub fn cost_oracle(
    pre: &PreselectedSet,
    det: &FrameDetections,
    corr: &CorrespondenceSet,
    pose: &CameraPose,
    k: &Intrinsics,
    cfg: &ResidualConfig,
    y_lane: Option<f64>,
) -> f64 {
    let mut total = 0.0;
    for &(l, d) in &corr.line_pairs {
        let lm = &pre.lines[l];
        let u1 = project_oracle(&lm.p1, pose, k).unwrap();
        let u2 = project_oracle(&lm.p2, pose, k).unwrap();
        total += line_distance_oracle(&u1, &u2, &det.lines[d]).powi(2);
    }
    for &(l, d) in &corr.point_pairs {
        let u = project_oracle(&pre.points[l].p, pose, k).unwrap();
        total += (u - det.points[d].m).norm_squared();
    }
    let deg = 180.0 / std::f64::consts::PI;
    let mut r_n = (pose.pitch * deg).powi(2) + (pose.roll * deg).powi(2);
    if let Some(y) = y_lane {
        r_n += ((pose.center.y - y - cfg.camera_height_m) * 100.0).powi(2);
    }
    total + cfg.lambda_n.powi(2) * r_n
}

/// Central-difference Jacobian of a residual function of the pose vector.
pub fn numeric_jacobian(f: impl Fn(&CameraPose) -> DVector<f64>, pose: &CameraPose, h: f64) -> Vec<DVector<f64>> {
    let v: Vector6<f64> = pose.to_vector();
    (0..6)
        .map(|j| {
            let mut plus = v;
            let mut minus = v;
            plus[j] += h;
            minus[j] -= h;
            (f(&CameraPose::from_vector(&plus)) - f(&CameraPose::from_vector(&minus))) / (2.0 * h)
        })
        .collect()
}

pub fn uniform_in_ball<R: Rng>(rng: &mut R, radius: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// `truth` moved by at most `meters` and at most `degrees` per angle.
pub fn perturb<R: Rng>(rng: &mut R, truth: &CameraPose, meters: f64, degrees: f64) -> CameraPose {
    let a = degrees.to_radians();
    CameraPose::new(
        truth.center + uniform_in_ball(rng, meters),
        truth.yaw + rng.random_range(-a..=a),
        truth.pitch + rng.random_range(-a..=a),
        truth.roll + rng.random_range(-a..=a),
    )
}

pub fn preselect_at(map: &semloc::SemanticMap, pose: &CameraPose) -> PreselectedSet {
    preselect(
        map,
        &RoughPose::new(pose.center, pose.heading(), 0),
        &PreselectConfig::default(),
    )
}

/// Detections that exactly match the projections of every paired landmark,
/// with detected segments slid along their own lines.
pub fn exact_detections<R: Rng>(
    pre: &PreselectedSet,
    pose: &CameraPose,
    k: &Intrinsics,
    rng: &mut R,
) -> (FrameDetections, CorrespondenceSet) {
    let mut det = FrameDetections::default();
    let mut corr = CorrespondenceSet::default();
    for (i, l) in pre.lines.iter().enumerate() {
        let (Some(u1), Some(u2)) = (project_oracle(&l.p1, pose, k), project_oracle(&l.p2, pose, k)) else {
            continue;
        };
        let (s, t) = (rng.random_range(-0.3..0.3), rng.random_range(0.7..1.3));
        let d = u2 - u1;
        corr.line_pairs.push((i, det.lines.len()));
        det.lines.push(DetectedLine::new(u1 + d * s, u1 + d * t, l.semantic));
    }
    for (i, p) in pre.points.iter().enumerate() {
        if let Some(u) = project_oracle(&p.p, pose, k) {
            corr.point_pairs.push((i, det.points.len()));
            det.points.push(DetectedPoint::new(u, p.semantic));
        }
    }
    (det, corr)
}

fn random_xyz<R: Rng>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-5000.0..5000.0),
        rng.random_range(-20.0..40.0),
        rng.random_range(-5000.0..5000.0),
    )
}

/// Map with random contents and unique ids; all classes appear.
pub fn random_map<R: Rng>(rng: &mut R) -> semloc::SemanticMap {
    use semloc::map_model::{LanePolyline, LineLandmark, PointLandmark, SemanticClass};
    let line_classes = [SemanticClass::PoleLike, SemanticClass::Milestone, SemanticClass::LaneLine];
    let mut id = rng.random_range(0..1000u32);
    let mut next = |rng: &mut R| {
        id += 1 + rng.random_range(0..5u32);
        id
    };
    let mut map = semloc::SemanticMap::default();
    for _ in 0..rng.random_range(0..30) {
        let p1 = random_xyz(rng);
        let p2 = p1 + Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(0.5..9.0), rng.random_range(-9.0..9.0));
        map.lines.push(LineLandmark {
            id: next(rng),
            p1,
            p2,
            semantic: line_classes[rng.random_range(0..3)],
            size_m: (p2 - p1).norm() + rng.random_range(0.0..1.0),
            road_index: rng.random_range(0..4),
        });
    }
    for _ in 0..rng.random_range(0..10) {
        map.points.push(PointLandmark {
            id: next(rng),
            p: random_xyz(rng),
            semantic: SemanticClass::TrafficSign,
            size_m: rng.random_range(0.1..3.0),
            road_index: rng.random_range(0..4),
        });
    }
    for _ in 0..rng.random_range(0..4) {
        let mut p = random_xyz(rng);
        let points = (0..rng.random_range(2..40))
            .map(|_| {
                p += Vector3::new(rng.random_range(0.5..10.0), 0.0, rng.random_range(-0.2..0.2));
                p
            })
            .collect();
        map.lanes.push(LanePolyline {
            id: next(rng),
            points,
            road_index: rng.random_range(0..4),
        });
    }
    map
}

/// Largest coordinate or size difference between two maps with the same
/// structure, or `None` when ids, classes, road indices or counts differ.
pub fn map_difference(a: &semloc::SemanticMap, b: &semloc::SemanticMap) -> Option<f64> {
    let mut worst: f64 = 0.0;
    let mut cmp = |x: &Vector3<f64>, y: &Vector3<f64>| worst = worst.max((x - y).abs().max());
    if a.lines.len() != b.lines.len() || a.points.len() != b.points.len() || a.lanes.len() != b.lanes.len() {
        return None;
    }
    for (x, y) in a.lines.iter().zip(&b.lines) {
        if (x.id, x.semantic, x.road_index) != (y.id, y.semantic, y.road_index) {
            return None;
        }
        cmp(&x.p1, &y.p1);
        cmp(&x.p2, &y.p2);
        cmp(&Vector3::new(x.size_m, 0.0, 0.0), &Vector3::new(y.size_m, 0.0, 0.0));
    }
    for (x, y) in a.points.iter().zip(&b.points) {
        if (x.id, x.semantic, x.road_index) != (y.id, y.semantic, y.road_index) {
            return None;
        }
        cmp(&x.p, &y.p);
        cmp(&Vector3::new(x.size_m, 0.0, 0.0), &Vector3::new(y.size_m, 0.0, 0.0));
    }
    for (x, y) in a.lanes.iter().zip(&b.lanes) {
        if (x.id, x.road_index, x.points.len()) != (y.id, y.road_index, y.points.len()) {
            return None;
        }
        for (p, q) in x.points.iter().zip(&y.points) {
            cmp(p, q);
        }
    }
    Some(worst)
}
