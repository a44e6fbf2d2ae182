//! Sequence driver and trajectory metrics.
//!
//! The first two frames take their poses from an external source (GPS). Every
//! later frame is initialized by constant-velocity extrapolation from the two
//! previous estimates, preselects landmarks around that prediction, and runs
//! the association/localization step. When no association validates, the
//! frame coasts on the prediction.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{associate_and_localize, LocalizerConfig};
use crate::camera::{normalize_angle, CameraPose, Intrinsics};
use crate::feature_extract::FrameDetections;
use crate::map_model::{preselect, RoughPose, SemanticMap};

#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub frame_id: u64,
    pub road_index: u32,
    pub detections: FrameDetections,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameStatus {
    Bootstrapped,
    Localized,
    Coasted,
}

impl FrameStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameStatus::Bootstrapped => "bootstrapped",
            FrameStatus::Localized => "localized",
            FrameStatus::Coasted => "coasted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bootstrapped" => Some(FrameStatus::Bootstrapped),
            "localized" => Some(FrameStatus::Localized),
            "coasted" => Some(FrameStatus::Coasted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub status: FrameStatus,
    pub pose: CameraPose,
    /// √cost of the final solve; only set for localized frames.
    pub sqrt_r: Option<f64>,
    pub n_corr: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub n_frames: usize,
    pub rms_position: f64,
    pub mean_position: f64,
    pub max_position: f64,
    pub rms_lateral: f64,
    pub rms_longitudinal: f64,
    pub rms_vertical: f64,
    pub mean_angle: f64,
    pub max_angle: f64,
    pub fraction_below_half_meter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub records: Vec<FrameRecord>,
    pub summary: Option<TrajectorySummary>,
}

impl TrajectoryResult {
    pub fn count(&self, status: FrameStatus) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("need two bootstrap poses, got {0}")]
    InsufficientBootstrap(usize),
    #[error("frame ids must be strictly increasing (frame {0} after {1})")]
    FrameOrder(u64, u64),
    #[error("ground truth has {truth} poses for {records} frames")]
    GroundTruthMismatch { truth: usize, records: usize },
}

/// Constant-velocity extrapolation `2·prev − prev2`, angles along the
/// shorter arc.
pub fn predict_pose(prev: &CameraPose, prev2: &CameraPose) -> CameraPose {
    let step = |a: f64, b: f64| a + normalize_angle(a - b);
    CameraPose::new(
        prev.center * 2.0 - prev2.center,
        step(prev.yaw, prev2.yaw),
        step(prev.pitch, prev2.pitch),
        step(prev.roll, prev2.roll),
    )
}

pub fn run_sequence(
    map: &SemanticMap,
    frames: &[FrameInput],
    bootstrap: &[CameraPose],
    k: &Intrinsics,
    config: &LocalizerConfig,
) -> Result<TrajectoryResult, PipelineError> {
    if bootstrap.len() < 2 {
        return Err(PipelineError::InsufficientBootstrap(bootstrap.len()));
    }
    for w in frames.windows(2) {
        if w[1].frame_id <= w[0].frame_id {
            return Err(PipelineError::FrameOrder(w[1].frame_id, w[0].frame_id));
        }
    }
    let mut records: Vec<FrameRecord> = Vec::with_capacity(frames.len());
    for (idx, frame) in frames.iter().enumerate() {
        if idx < 2 {
            records.push(FrameRecord {
                frame_id: frame.frame_id,
                status: FrameStatus::Bootstrapped,
                pose: bootstrap[idx],
                sqrt_r: None,
                n_corr: 0,
            });
            continue;
        }
        let init = predict_pose(&records[idx - 1].pose, &records[idx - 2].pose);
        let rough = RoughPose::new(init.center, init.heading(), frame.road_index);
        let preselected = preselect(map, &rough, &config.preselect);
        let mut frame_config = *config;
        frame_config.association.rng_seed = config.association.rng_seed.wrapping_add(frame.frame_id);
        let record = match associate_and_localize(&preselected, &frame.detections, &init, k, &frame_config) {
            Ok(loc) => FrameRecord {
                frame_id: frame.frame_id,
                status: FrameStatus::Localized,
                pose: loc.solve.pose,
                sqrt_r: Some(loc.solve.sqrt_cost),
                n_corr: loc.correspondences.len(),
            },
            Err(_) => FrameRecord {
                frame_id: frame.frame_id,
                status: FrameStatus::Coasted,
                pose: init,
                sqrt_r: None,
                n_corr: 0,
            },
        };
        records.push(record);
    }
    Ok(TrajectoryResult {
        records,
        summary: None,
    })
}

/// Error of one pose estimate. Axis components are expressed in the
/// ground-truth camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameError {
    pub position: f64,
    pub lateral: f64,
    pub vertical: f64,
    pub longitudinal: f64,
    /// Geodesic angle between estimated and true rotations, radians.
    pub angle: f64,
}

pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a * b.transpose();
    let cos = 0.5 * (m.trace() - 1.0);
    let axis = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    (0.5 * axis.norm()).atan2(cos)
}

pub fn frame_error(estimate: &CameraPose, truth: &CameraPose) -> FrameError {
    let r_true = truth.rotation();
    let delta = r_true * (estimate.center - truth.center);
    FrameError {
        position: delta.norm(),
        lateral: delta.x,
        vertical: delta.y,
        longitudinal: delta.z,
        angle: rotation_angle_between(&estimate.rotation(), &r_true),
    }
}

pub fn summarize(errors: &[FrameError]) -> TrajectorySummary {
    let n = errors.len();
    if n == 0 {
        return TrajectorySummary {
            n_frames: 0,
            rms_position: 0.0,
            mean_position: 0.0,
            max_position: 0.0,
            rms_lateral: 0.0,
            rms_longitudinal: 0.0,
            rms_vertical: 0.0,
            mean_angle: 0.0,
            max_angle: 0.0,
            fraction_below_half_meter: 0.0,
        };
    }
    let nf = n as f64;
    let rms = |f: &dyn Fn(&FrameError) -> f64| (errors.iter().map(|e| f(e).powi(2)).sum::<f64>() / nf).sqrt();
    TrajectorySummary {
        n_frames: n,
        rms_position: rms(&|e| e.position),
        mean_position: errors.iter().map(|e| e.position).sum::<f64>() / nf,
        max_position: errors.iter().map(|e| e.position).fold(0.0, f64::max),
        rms_lateral: rms(&|e| e.lateral),
        rms_longitudinal: rms(&|e| e.longitudinal),
        rms_vertical: rms(&|e| e.vertical),
        mean_angle: errors.iter().map(|e| e.angle).sum::<f64>() / nf,
        max_angle: errors.iter().map(|e| e.angle).fold(0.0, f64::max),
        fraction_below_half_meter: errors.iter().filter(|e| e.position < 0.5).count() as f64 / nf,
    }
}

/// Per-frame errors and summary against `ground_truth` (one pose per record).
pub fn evaluate(
    records: &[FrameRecord],
    ground_truth: &[CameraPose],
) -> Result<(Vec<FrameError>, TrajectorySummary), PipelineError> {
    if ground_truth.len() != records.len() {
        return Err(PipelineError::GroundTruthMismatch {
            truth: ground_truth.len(),
            records: records.len(),
        });
    }
    let errors: Vec<FrameError> = records
        .iter()
        .zip(ground_truth)
        .map(|(r, t)| frame_error(&r.pose, t))
        .collect();
    let summary = summarize(&errors);
    Ok((errors, summary))
}
