//! Monocular vehicle localization against a compact semantic landmark map.
//!
//! The map stores each road landmark as a handful of numbers: two control
//! points for line-shaped objects (poles, milestones, lane segments), a
//! centroid for point-shaped ones (traffic signs), a semantic class, a rough
//! size and a road index. Per frame, landmarks likely to be visible are
//! preselected, projected through a pinhole camera, and aligned with 2D line
//! and point features by Levenberg-Marquardt over the 6-DOF camera pose. Data
//! association is solved jointly with the pose by hypothesis sampling and
//! validation.
//!
//! Modules, bottom-up:
//!
//! - [`map_model`]: landmark types, control-point fitting, preselection and
//!   the text map format.
//! - [`camera`]: pose parameterization, rotation convention and projection.
//! - [`feature_extract`]: semantic probability masks to line/point features.
//! - [`residual`]: line/point distances, the flat-ground prior, the stacked
//!   residual vector and its analytic Jacobian.
//! - [`solver`]: Levenberg-Marquardt over the pose, plus cost landscapes.
//! - [`association`]: gated nearest-neighbour matching and the
//!   hypothesize-and-validate localizer.
//! - [`pipeline`]: constant-velocity sequence driver and error metrics.
//! - [`synthworld`]: procedural corridors with exact ground truth.
//! - [`formats`] and [`workflow`]: file formats and the command workflows
//!   used by the `semloc` binary.

pub mod association;
pub mod camera;
pub mod feature_extract;
pub mod formats;
pub mod map_model;
pub mod pipeline;
pub mod residual;
pub mod solver;
pub mod synthworld;
pub mod workflow;

pub use association::{associate_and_localize, closest_correspond, AssociationConfig};
pub use camera::{CameraPose, Intrinsics};
pub use map_model::{SemanticClass, SemanticMap};
pub use residual::CorrespondenceSet;
