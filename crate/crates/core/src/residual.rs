//! Reprojection residuals between projected landmarks and detected features.
//!
//! The stacked residual vector is
//!
//! ```text
//! [ D_L(line pair 1), ..., D_P(point pair 1), ..., λ·pitch°, λ·roll°, λ·Δh_cm ]
//! ```
//!
//! so that the cost is its squared norm. `D_L` is the mean perpendicular
//! distance of the two projected control points to the infinite line through
//! the detected endpoints; `D_P` is the Euclidean pixel distance. The last
//! rows form a weak flat-ground prior on pitch, roll and camera height above
//! the nearest lane control point (degrees and centimeters, so that a single
//! weight balances them against pixels).

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{DVector, Dyn, OMatrix, RowSVector, Vector2, Vector3, U6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{
    project_line, project_point, project_point_with_jacobian, CameraPose, Intrinsics,
    ProjectedLine, RotationWithDerivatives,
};
use crate::feature_extract::{DetectedLine, DetectedPoint, FrameDetections};
use crate::map_model::{PreselectedSet, SemanticClass};

/// Residual assigned to a pair whose landmark fails cheirality at the
/// evaluated pose. Its Jacobian row is zero.
pub const BEHIND_CAMERA_PENALTY_PX: f64 = 1e4;

const MIN_DETECTION_PX: f64 = 1e-6;

/// Jacobian with one row per residual and one column per pose parameter.
pub type ResidualJacobian = OMatrix<f64, Dyn, U6>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResidualError {
    #[error("detected line endpoints coincide")]
    DegenerateDetection,
    #[error("correspondence set is empty")]
    EmptyCorrespondence,
    #[error("correspondence index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("landmark {landmark} is paired more than once")]
    DuplicateLandmark { landmark: usize },
    #[error("class mismatch: landmark {landmark:?} vs detection {detection:?}")]
    ClassMismatch {
        landmark: SemanticClass,
        detection: SemanticClass,
    },
}

/// Pairs of (preselected landmark index, detection index).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct CorrespondenceSet {
    pub line_pairs: Vec<(usize, usize)>,
    pub point_pairs: Vec<(usize, usize)>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.line_pairs.len() + self.point_pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(
        &self,
        preselected: &PreselectedSet,
        detections: &FrameDetections,
    ) -> Result<(), ResidualError> {
        check_pairs(
            &self.line_pairs,
            preselected.lines.len(),
            detections.lines.len(),
            |l, d| (preselected.lines[l].semantic, detections.lines[d].semantic),
            "line",
        )?;
        check_pairs(
            &self.point_pairs,
            preselected.points.len(),
            detections.points.len(),
            |l, d| (preselected.points[l].semantic, detections.points[d].semantic),
            "point",
        )?;
        for &(_, d) in &self.line_pairs {
            if detections.lines[d].length() < MIN_DETECTION_PX {
                return Err(ResidualError::DegenerateDetection);
            }
        }
        Ok(())
    }
}

fn check_pairs(
    pairs: &[(usize, usize)],
    n_landmarks: usize,
    n_detections: usize,
    classes: impl Fn(usize, usize) -> (SemanticClass, SemanticClass),
    kind: &str,
) -> Result<(), ResidualError> {
    let mut seen = vec![false; n_landmarks];
    for &(l, d) in pairs {
        if l >= n_landmarks || d >= n_detections {
            return Err(ResidualError::IndexOutOfRange(format!("{kind} pair ({l}, {d})")));
        }
        if std::mem::replace(&mut seen[l], true) {
            return Err(ResidualError::DuplicateLandmark { landmark: l });
        }
        let (landmark, detection) = classes(l, d);
        if landmark != detection {
            return Err(ResidualError::ClassMismatch {
                landmark,
                detection,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualConfig {
    pub lambda_n: f64,
    /// Camera height above the road surface, meters.
    pub camera_height_m: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            lambda_n: 0.001,
            camera_height_m: 1.65,
        }
    }
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Mean perpendicular distance of the projected endpoints to the infinite
/// line through the detected endpoints.
pub fn line_distance(proj: &ProjectedLine, det: &DetectedLine) -> Result<f64, ResidualError> {
    let d = det.m2 - det.m1;
    let len = d.norm();
    if len < MIN_DETECTION_PX {
        return Err(ResidualError::DegenerateDetection);
    }
    let c1 = cross2(&d, &(proj.u1 - det.m1)).abs();
    let c2 = cross2(&d, &(proj.u2 - det.m1)).abs();
    Ok(0.5 * (c1 + c2) / len)
}

pub fn point_distance(proj: &Vector2<f64>, det: &DetectedPoint) -> f64 {
    (proj - det.m).norm()
}

/// Flat-ground prior terms in degrees and centimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftTerms {
    pub pitch_deg: f64,
    pub roll_deg: f64,
    /// Absent when no lane was preselected.
    pub height_cm: Option<f64>,
}

impl SoftTerms {
    /// Squared norm of the triple (unweighted).
    pub fn r_n(&self) -> f64 {
        self.pitch_deg.powi(2) + self.roll_deg.powi(2) + self.height_cm.map_or(0.0, |h| h * h)
    }
}

pub fn soft_constraint(pose: &CameraPose, y_lane: Option<f64>, config: &ResidualConfig) -> SoftTerms {
    SoftTerms {
        pitch_deg: pose.pitch.to_degrees(),
        roll_deg: pose.roll.to_degrees(),
        height_cm: y_lane.map(|y| (pose.center.y - (y + config.camera_height_m)) * 100.0),
    }
}

/// Height of the preselected lane control point closest to `position`.
pub fn nearest_lane_height(preselected: &PreselectedSet, position: &Vector3<f64>) -> Option<f64> {
    preselected
        .lines
        .iter()
        .filter(|l| l.semantic == SemanticClass::LaneLine)
        .flat_map(|l| [l.p1, l.p2])
        .min_by(|a, b| {
            (a - position)
                .norm_squared()
                .total_cmp(&(b - position).norm_squared())
        })
        .map(|p| p.y)
}

/// Least-squares problem over the camera pose for a fixed correspondence
/// set.
#[derive(Debug, Clone)]
pub struct PoseProblem<'a> {
    preselected: &'a PreselectedSet,
    detections: &'a FrameDetections,
    correspondences: &'a CorrespondenceSet,
    intrinsics: &'a Intrinsics,
    config: ResidualConfig,
    y_lane: Option<f64>,
}

impl<'a> PoseProblem<'a> {
    pub fn new(
        preselected: &'a PreselectedSet,
        detections: &'a FrameDetections,
        correspondences: &'a CorrespondenceSet,
        intrinsics: &'a Intrinsics,
        config: ResidualConfig,
        y_lane: Option<f64>,
    ) -> Result<Self, ResidualError> {
        if correspondences.is_empty() {
            return Err(ResidualError::EmptyCorrespondence);
        }
        correspondences.validate(preselected, detections)?;
        Ok(Self {
            preselected,
            detections,
            correspondences,
            intrinsics,
            config,
            y_lane,
        })
    }

    pub fn correspondences(&self) -> &CorrespondenceSet {
        self.correspondences
    }

    pub fn y_lane(&self) -> Option<f64> {
        self.y_lane
    }

    pub fn residual_len(&self) -> usize {
        self.correspondences.len() + 2 + usize::from(self.y_lane.is_some())
    }

    /// Sum of squared line and point distances, without the prior.
    pub fn data_cost(&self, pose: &CameraPose) -> f64 {
        let n = self.correspondences.len();
        self.residuals(pose).rows(0, n).norm_squared()
    }

    pub fn residuals(&self, pose: &CameraPose) -> DVector<f64> {
        let mut r = DVector::zeros(self.residual_len());
        let mut row = 0;
        for &(l, d) in &self.correspondences.line_pairs {
            let det = &self.detections.lines[d];
            r[row] = match project_line(&self.preselected.lines[l], pose, self.intrinsics) {
                Ok(proj) => line_distance(&proj, det).unwrap_or(BEHIND_CAMERA_PENALTY_PX),
                Err(_) => BEHIND_CAMERA_PENALTY_PX,
            };
            row += 1;
        }
        for &(l, d) in &self.correspondences.point_pairs {
            r[row] = match project_point(&self.preselected.points[l].p, pose, self.intrinsics) {
                Ok(u) => point_distance(&u, &self.detections.points[d]),
                Err(_) => BEHIND_CAMERA_PENALTY_PX,
            };
            row += 1;
        }
        let soft = soft_constraint(pose, self.y_lane, &self.config);
        let lambda = self.config.lambda_n;
        r[row] = lambda * soft.pitch_deg;
        r[row + 1] = lambda * soft.roll_deg;
        if let Some(h) = soft.height_cm {
            r[row + 2] = lambda * h;
        }
        r
    }

    /// Analytic Jacobian of [`Self::residuals`] with respect to
    /// (Cx, Cy, Cz, yaw, pitch, roll).
    pub fn jacobian(&self, pose: &CameraPose) -> ResidualJacobian {
        let mut jac = ResidualJacobian::zeros(self.residual_len());
        let rot = RotationWithDerivatives::new(pose);
        let k = self.intrinsics;
        let mut row = 0;
        for &(l, d) in &self.correspondences.line_pairs {
            let lm = &self.preselected.lines[l];
            let det = &self.detections.lines[d];
            let e1 = project_point_with_jacobian(&lm.p1, pose, &rot, k);
            let e2 = project_point_with_jacobian(&lm.p2, pose, &rot, k);
            if let (Ok((u1, j1)), Ok((u2, j2))) = (e1, e2) {
                let dir = det.m2 - det.m1;
                let len = dir.norm();
                let normal = Vector2::new(-dir.y, dir.x) / len;
                let s1 = cross2(&dir, &(u1 - det.m1)).signum();
                let s2 = cross2(&dir, &(u2 - det.m1)).signum();
                let g: RowSVector<f64, 6> =
                    0.5 * (s1 * normal.transpose() * j1 + s2 * normal.transpose() * j2);
                jac.set_row(row, &g);
            }
            row += 1;
        }
        for &(l, d) in &self.correspondences.point_pairs {
            let lm = &self.preselected.points[l];
            if let Ok((u, j)) = project_point_with_jacobian(&lm.p, pose, &rot, k) {
                let e = u - self.detections.points[d].m;
                let n = e.norm();
                if n > 0.0 {
                    let g: RowSVector<f64, 6> = (e / n).transpose() * j;
                    jac.set_row(row, &g);
                }
            }
            row += 1;
        }
        let lambda = self.config.lambda_n;
        let deg = 180.0 / std::f64::consts::PI;
        jac[(row, 4)] = lambda * deg;
        jac[(row + 1, 5)] = lambda * deg;
        if self.y_lane.is_some() {
            jac[(row + 2, 1)] = lambda * 100.0;
        }
        jac
    }
}

/// Smooth companion of a [`PoseProblem`] with the same zero set. Each line
/// pair contributes its two signed endpoint distances scaled by 1/√2, each
/// point pair its two pixel offsets, and the prior rows are unchanged.
///
/// The exact cost is not differentiable where a single control point lies
/// on its detected line, and Levenberg-Marquardt tends to stall there. The
/// solver uses this form to get close to the optimum before polishing on
/// the exact cost.
#[derive(Debug, Clone, Copy)]
pub struct EndpointForm<'p, 'a>(pub &'p PoseProblem<'a>);

impl EndpointForm<'_, '_> {
    fn len(&self) -> usize {
        let c = self.0.correspondences;
        2 * c.len() + 2 + usize::from(self.0.y_lane.is_some())
    }

    pub fn residuals(&self, pose: &CameraPose) -> DVector<f64> {
        let p = self.0;
        let mut r = DVector::zeros(self.len());
        let mut row = 0;
        for &(l, d) in &p.correspondences.line_pairs {
            let lm = &p.preselected.lines[l];
            let det = &p.detections.lines[d];
            let dir = det.m2 - det.m1;
            let len = dir.norm();
            for end in [&lm.p1, &lm.p2] {
                r[row] = match project_point(end, pose, p.intrinsics) {
                    Ok(u) => cross2(&dir, &(u - det.m1)) / len * FRAC_1_SQRT_2,
                    Err(_) => BEHIND_CAMERA_PENALTY_PX,
                };
                row += 1;
            }
        }
        for &(l, d) in &p.correspondences.point_pairs {
            match project_point(&p.preselected.points[l].p, pose, p.intrinsics) {
                Ok(u) => r.rows_mut(row, 2).copy_from(&(u - p.detections.points[d].m)),
                Err(_) => r.rows_mut(row, 2).fill(BEHIND_CAMERA_PENALTY_PX),
            }
            row += 2;
        }
        let n = p.correspondences.len();
        let exact = p.residuals(pose);
        let prior = exact.len() - n;
        r.rows_mut(row, prior).copy_from(&exact.rows(n, prior));
        r
    }

    pub fn jacobian(&self, pose: &CameraPose) -> ResidualJacobian {
        let p = self.0;
        let mut jac = ResidualJacobian::zeros(self.len());
        let rot = RotationWithDerivatives::new(pose);
        let mut row = 0;
        for &(l, d) in &p.correspondences.line_pairs {
            let lm = &p.preselected.lines[l];
            let det = &p.detections.lines[d];
            let dir = det.m2 - det.m1;
            let normal = Vector2::new(-dir.y, dir.x) / dir.norm();
            for end in [&lm.p1, &lm.p2] {
                if let Ok((_, j)) = project_point_with_jacobian(end, pose, &rot, p.intrinsics) {
                    let g: RowSVector<f64, 6> = FRAC_1_SQRT_2 * normal.transpose() * j;
                    jac.set_row(row, &g);
                }
                row += 1;
            }
        }
        for &(l, _) in &p.correspondences.point_pairs {
            if let Ok((_, j)) = project_point_with_jacobian(&p.preselected.points[l].p, pose, &rot, p.intrinsics) {
                jac.rows_mut(row, 2).copy_from(&j);
            }
            row += 2;
        }
        let n = p.correspondences.len();
        let exact = p.jacobian(pose);
        let prior = exact.nrows() - n;
        jac.rows_mut(row, prior).copy_from(&exact.rows(n, prior));
        jac
    }
}

/// Cost and stacked residual vector at `pose`.
pub fn total_residual(problem: &PoseProblem<'_>, pose: &CameraPose) -> (f64, DVector<f64>) {
    let r = problem.residuals(pose);
    (r.norm_squared(), r)
}

pub fn residual_jacobian(problem: &PoseProblem<'_>, pose: &CameraPose) -> ResidualJacobian {
    problem.jacobian(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_model::{LineLandmark, PointLandmark};

    fn det_line(a: (f64, f64), b: (f64, f64)) -> DetectedLine {
        DetectedLine::new(Vector2::new(a.0, a.1), Vector2::new(b.0, b.1), SemanticClass::PoleLike)
    }

    fn proj(a: (f64, f64), b: (f64, f64)) -> ProjectedLine {
        ProjectedLine {
            u1: Vector2::new(a.0, a.1),
            u2: Vector2::new(b.0, b.1),
        }
    }

    #[test]
    fn line_distance_examples() {
        let det = det_line((0.0, 0.0), (10.0, 0.0));
        assert_eq!(line_distance(&proj((2.0, 0.0), (-7.0, 0.0)), &det).unwrap(), 0.0);
        assert_eq!(line_distance(&proj((3.0, 2.0), (7.0, 4.0)), &det).unwrap(), 3.0);
        let degenerate = det_line((1.0, 1.0), (1.0, 1.0));
        assert_eq!(
            line_distance(&proj((3.0, 2.0), (7.0, 4.0)), &degenerate),
            Err(ResidualError::DegenerateDetection)
        );
    }

    #[test]
    fn point_distance_examples() {
        let det = DetectedPoint::new(Vector2::new(3.0, 4.0), SemanticClass::TrafficSign);
        assert_eq!(point_distance(&Vector2::new(3.0, 4.0), &det), 0.0);
        assert_eq!(point_distance(&Vector2::new(0.0, 0.0), &det), 5.0);
    }

    #[test]
    fn soft_constraint_units() {
        let cfg = ResidualConfig {
            lambda_n: 0.001,
            camera_height_m: 1.5,
        };
        let flat = CameraPose::new(Vector3::new(0.0, 1.7, 0.0), 0.3, 0.0, 0.0);
        let t = soft_constraint(&flat, Some(0.2), &cfg);
        assert!(t.r_n().abs() < 1e-20);

        let tilted = CameraPose::new(Vector3::new(0.0, 1.7, 0.0), 0.0, 0.0174533, 0.0);
        let t = soft_constraint(&tilted, Some(0.2), &cfg);
        assert!((t.r_n() - 1.0).abs() < 1e-5);

        let high = CameraPose::new(Vector3::new(0.0, 1.8, 0.0), 0.0, 0.0, 0.0);
        let t = soft_constraint(&high, Some(0.2), &cfg);
        assert!((t.height_cm.unwrap() - 10.0).abs() < 1e-9);
        assert!((t.r_n() - 100.0).abs() < 1e-7);

        let no_lane = soft_constraint(&high, None, &cfg);
        assert_eq!(no_lane.height_cm, None);
        assert_eq!(no_lane.r_n(), 0.0);
    }

    fn single_sign_problem_inputs() -> (PreselectedSet, FrameDetections, CorrespondenceSet) {
        let preselected = PreselectedSet {
            lines: vec![],
            points: vec![PointLandmark {
                id: 1,
                p: Vector3::new(10.0, 0.0, 0.0),
                semantic: SemanticClass::TrafficSign,
                size_m: 1.0,
                road_index: 0,
            }],
        };
        let k = Intrinsics::default();
        let detections = FrameDetections {
            lines: vec![],
            points: vec![DetectedPoint::new(
                Vector2::new(k.cx + 3.0, k.cy + 4.0),
                SemanticClass::TrafficSign,
            )],
        };
        let corr = CorrespondenceSet {
            line_pairs: vec![],
            point_pairs: vec![(0, 0)],
        };
        (preselected, detections, corr)
    }

    #[test]
    fn single_point_pair_cost() {
        let (pre, det, corr) = single_sign_problem_inputs();
        let k = Intrinsics::default();
        let problem = PoseProblem::new(&pre, &det, &corr, &k, ResidualConfig::default(), None).unwrap();
        let (cost, r) = total_residual(&problem, &CameraPose::default());
        assert_eq!(r.len(), 3);
        assert!((cost - 25.0).abs() < 1e-9);
    }

    #[test]
    fn on_axis_point_row_ignores_roll() {
        let (pre, mut det, corr) = single_sign_problem_inputs();
        let k = Intrinsics::default();
        det.points[0].m = Vector2::new(k.cx + 0.5, k.cy);
        let problem = PoseProblem::new(&pre, &det, &corr, &k, ResidualConfig::default(), None).unwrap();
        let pose = CameraPose::new(Vector3::new(2.0, 0.0, 0.0), 0.0, 0.0, 0.0);
        let jac = problem.jacobian(&pose);
        assert_eq!(jac[(0, 5)], 0.0);
        assert_eq!(jac[(0, 0)], 0.0);
    }

    #[test]
    fn soft_rows_are_linear() {
        let (pre, det, corr) = single_sign_problem_inputs();
        let k = Intrinsics::default();
        let cfg = ResidualConfig::default();
        let problem = PoseProblem::new(&pre, &det, &corr, &k, cfg, Some(0.0)).unwrap();
        let jac = problem.jacobian(&CameraPose::new(Vector3::new(-3.0, 1.0, 0.2), 0.1, 0.05, -0.02));
        let deg = 180.0 / std::f64::consts::PI;
        assert_eq!(jac[(1, 4)], cfg.lambda_n * deg);
        assert_eq!(jac[(1, 0)], 0.0);
        assert_eq!(jac[(2, 5)], cfg.lambda_n * deg);
        assert_eq!(jac[(3, 1)], cfg.lambda_n * 100.0);
    }

    #[test]
    fn construction_errors() {
        let (pre, det, _) = single_sign_problem_inputs();
        let k = Intrinsics::default();
        let empty = CorrespondenceSet::default();
        assert_eq!(
            PoseProblem::new(&pre, &det, &empty, &k, ResidualConfig::default(), None).unwrap_err(),
            ResidualError::EmptyCorrespondence
        );
        let bad = CorrespondenceSet {
            line_pairs: vec![],
            point_pairs: vec![(0, 3)],
        };
        assert!(matches!(
            PoseProblem::new(&pre, &det, &bad, &k, ResidualConfig::default(), None),
            Err(ResidualError::IndexOutOfRange(_))
        ));

        let lines_pre = PreselectedSet {
            lines: vec![LineLandmark {
                id: 1,
                p1: Vector3::new(10.0, 0.0, 1.0),
                p2: Vector3::new(10.0, 3.0, 1.0),
                semantic: SemanticClass::PoleLike,
                size_m: 3.0,
                road_index: 0,
            }],
            points: vec![],
        };
        let mut lines_det = FrameDetections::default();
        lines_det.lines.push(DetectedLine::new(
            Vector2::new(5.0, 5.0),
            Vector2::new(5.0, 5.0),
            SemanticClass::PoleLike,
        ));
        let corr = CorrespondenceSet {
            line_pairs: vec![(0, 0)],
            point_pairs: vec![],
        };
        assert_eq!(
            PoseProblem::new(&lines_pre, &lines_det, &corr, &k, ResidualConfig::default(), None)
                .unwrap_err(),
            ResidualError::DegenerateDetection
        );
        lines_det.lines[0] = DetectedLine::new(
            Vector2::new(5.0, 5.0),
            Vector2::new(5.0, 50.0),
            SemanticClass::LaneLine,
        );
        assert!(matches!(
            PoseProblem::new(&lines_pre, &lines_det, &corr, &k, ResidualConfig::default(), None),
            Err(ResidualError::ClassMismatch { .. })
        ));
    }

    #[test]
    fn behind_camera_pair_gets_penalty() {
        let (pre, det, corr) = single_sign_problem_inputs();
        let k = Intrinsics::default();
        let problem = PoseProblem::new(&pre, &det, &corr, &k, ResidualConfig::default(), None).unwrap();
        let pose = CameraPose::new(Vector3::new(20.0, 0.0, 0.0), 0.0, 0.0, 0.0);
        assert_eq!(problem.residuals(&pose)[0], BEHIND_CAMERA_PENALTY_PX);
        assert_eq!(problem.jacobian(&pose).row(0).norm(), 0.0);
    }
}
