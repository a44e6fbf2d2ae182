//! Procedural road corridors with exact ground truth.
//!
//! A world is a straight or constant-curvature corridor lined with poles on
//! alternating sides, traffic signs and lane polylines, plus a camera
//! trajectory driving along it. Detections and semantic masks are rendered
//! through [`crate::camera`] so they agree with what the localizer projects.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{project_line, project_point, CameraPose, Intrinsics};
use crate::feature_extract::{DetectedLine, DetectedPoint, FrameDetections, ProbabilityRaster, SemanticMask};
use crate::map_model::{
    lane_segments, LanePolyline, LineLandmark, PointLandmark, PreselectConfig, RoughPose,
    SemanticClass, SemanticMap,
};
use crate::pipeline::FrameInput;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub corridor_length_m: f64,
    /// Signed centerline curvature, 1/m; positive bends toward map +Z.
    pub curvature_per_m: f64,
    pub lane_count: usize,
    pub lane_spacing_m: f64,
    pub lane_sample_m: f64,
    pub pole_spacing_m: f64,
    pub pole_lateral_m: f64,
    pub pole_height_min_m: f64,
    pub pole_height_max_m: f64,
    /// Uniform jitter of pole placement along the road.
    pub pole_jitter_m: f64,
    /// Uniform jitter of the pole setback from the road.
    pub pole_setback_jitter_m: f64,
    /// Distance between consecutive traffic signs; 0 disables signs.
    pub sign_spacing_m: f64,
    pub sign_lateral_m: f64,
    pub sign_height_min_m: f64,
    pub sign_height_max_m: f64,
    pub sign_size_m: f64,
    pub camera_height_m: f64,
    pub frame_spacing_m: f64,
    /// Relative amplitude of the periodic speed variation.
    pub speed_variation: f64,
    /// Corridor length left ahead of the last frame.
    pub trajectory_margin_m: f64,
    pub lateral_sway_m: f64,
    pub attitude_jitter_deg: f64,
    pub pixel_noise_px: f64,
    pub outlier_rate: f64,
    pub dropout_rate: f64,
    /// Rendered line features shorter than this (after clipping) are not
    /// detected.
    pub min_line_px: f64,
    pub stroke_width_px: f64,
    pub min_disc_radius_px: f64,
    pub rng_seed: u64,
    pub intrinsics: Intrinsics,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            corridor_length_m: 270.0,
            curvature_per_m: 0.0,
            lane_count: 2,
            lane_spacing_m: 3.5,
            lane_sample_m: 5.0,
            pole_spacing_m: 13.0,
            pole_lateral_m: 5.5,
            pole_height_min_m: 1.5,
            pole_height_max_m: 3.0,
            pole_jitter_m: 1.0,
            pole_setback_jitter_m: 0.5,
            sign_spacing_m: 54.0,
            sign_lateral_m: 6.5,
            sign_height_min_m: 2.5,
            sign_height_max_m: 4.0,
            sign_size_m: 0.8,
            camera_height_m: 1.65,
            frame_spacing_m: 1.4,
            speed_variation: 0.2,
            trajectory_margin_m: 60.0,
            lateral_sway_m: 0.3,
            attitude_jitter_deg: 0.5,
            pixel_noise_px: 0.0,
            outlier_rate: 0.0,
            dropout_rate: 0.0,
            min_line_px: 10.0,
            stroke_width_px: 3.0,
            min_disc_radius_px: 4.0,
            rng_seed: 0,
            intrinsics: Intrinsics::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), String> {
        let rates = [self.outlier_rate, self.dropout_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err("rates must lie in [0, 1]".into());
        }
        if !(self.pixel_noise_px >= 0.0) {
            return Err("pixel noise must be non-negative".into());
        }
        let spacings = [self.pole_spacing_m, self.lane_sample_m, self.frame_spacing_m, self.lane_spacing_m];
        if spacings.iter().any(|s| !(*s > 0.0)) {
            return Err("spacings must be positive".into());
        }
        if self.sign_spacing_m < 0.0 || self.pole_height_min_m <= 0.0 || self.pole_height_max_m < self.pole_height_min_m {
            return Err("invalid sign spacing or pole heights".into());
        }
        if self.speed_variation.abs() >= 1.0 {
            return Err("speed variation must stay below 1".into());
        }
        self.intrinsics.validate().map_err(|e| e.to_string())
    }

    fn centerline(&self, s: f64) -> (Vector3<f64>, f64) {
        let k = self.curvature_per_m;
        let heading = k * s;
        let p = if k.abs() < 1e-12 {
            Vector3::new(s, 0.0, 0.0)
        } else {
            Vector3::new(heading.sin() / k, 0.0, (1.0 - heading.cos()) / k)
        };
        (p, heading)
    }

    /// Ground point at arc length `s` and lateral offset `offset` (positive
    /// to the right).
    fn road_point(&self, s: f64, offset: f64) -> Vector3<f64> {
        let (c, h) = self.centerline(s);
        c + Vector3::new(-h.sin(), 0.0, h.cos()) * offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub map: SemanticMap,
    pub trajectory: Vec<CameraPose>,
}

pub fn generate_world(config: &WorldConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let length = config.corridor_length_m;
    let mut map = SemanticMap::default();
    if !(length > 0.0) {
        return World {
            map,
            trajectory: Vec::new(),
        };
    }
    let mut next_id = 0u32;
    let mut take_id = || {
        next_id += 1;
        next_id - 1
    };

    let n_poles = (length / config.pole_spacing_m).ceil() as usize;
    for i in 0..n_poles {
        let j = config.pole_jitter_m;
        let jitter = |rng: &mut ChaCha8Rng| if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        let s = i as f64 * config.pole_spacing_m + jitter(&mut rng);
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let sj = config.pole_setback_jitter_m;
        let setback = if sj > 0.0 { rng.random_range(-sj..=sj) } else { 0.0 };
        let offset = side * (config.pole_lateral_m + setback);
        let height = if config.pole_height_max_m > config.pole_height_min_m {
            rng.random_range(config.pole_height_min_m..config.pole_height_max_m)
        } else {
            config.pole_height_min_m
        };
        let base = config.road_point(s, offset);
        map.lines.push(LineLandmark {
            id: take_id(),
            p1: base,
            p2: base + Vector3::new(0.0, height, 0.0),
            semantic: SemanticClass::PoleLike,
            size_m: height,
            road_index: 0,
        });
    }

    if config.sign_spacing_m > 0.0 {
        let n_signs = (length / config.sign_spacing_m).round() as usize;
        for i in 0..n_signs {
            let s = (i as f64 + 0.5) * config.sign_spacing_m;
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            let height = rng.random_range(config.sign_height_min_m..=config.sign_height_max_m);
            map.points.push(PointLandmark {
                id: take_id(),
                p: config.road_point(s, side * config.sign_lateral_m) + Vector3::new(0.0, height, 0.0),
                semantic: SemanticClass::TrafficSign,
                size_m: config.sign_size_m,
                road_index: 0,
            });
        }
    }

    let n_samples = (length / config.lane_sample_m).floor() as usize + 1;
    for lane in 0..config.lane_count {
        let offset = (lane as f64 - (config.lane_count as f64 - 1.0) / 2.0) * config.lane_spacing_m;
        let points = (0..n_samples)
            .map(|i| config.road_point(i as f64 * config.lane_sample_m, offset))
            .collect();
        map.lanes.push(LanePolyline {
            id: take_id(),
            points,
            road_index: 0,
        });
    }

    // Body motion: two sinusoids per angle with random phases, scaled so the
    // amplitude never exceeds the configured jitter.
    let amp = config.attitude_jitter_deg.to_radians();
    let phases: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let wobble = |s: f64, p0: f64, p1: f64| {
        amp * (0.7 * (2.0 * PI * s / 41.0 + p0).sin() + 0.3 * (2.0 * PI * s / 17.0 + p1).sin())
    };

    let end = length - config.trajectory_margin_m;
    let mut trajectory = Vec::new();
    let mut s = 0.0;
    let mut k = 0usize;
    let sway_period = 80.0;
    while s <= end {
        let sway = config.lateral_sway_m * (2.0 * PI * s / sway_period).sin();
        let sway_slope = config.lateral_sway_m * 2.0 * PI / sway_period * (2.0 * PI * s / sway_period).cos();
        let (_, heading) = config.centerline(s);
        let pitch = wobble(s, phases[0], phases[1]);
        let roll = wobble(s, phases[2], phases[3]);
        let center = config.road_point(s, sway) + Vector3::new(0.0, config.camera_height_m, 0.0);
        trajectory.push(CameraPose::new(center, heading + sway_slope.atan(), pitch, roll));
        s += config.frame_spacing_m * (1.0 + config.speed_variation * (2.0 * PI * k as f64 / 40.0).sin());
        k += 1;
    }
    World { map, trajectory }
}

/// Clips segment `a-b` to the image rectangle (Liang-Barsky).
pub fn clip_to_image(a: Vector2<f64>, b: Vector2<f64>, k: &Intrinsics) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let (xmax, ymax) = ((k.width - 1) as f64, (k.height - 1) as f64);
    let d = b - a;
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for (p, q) in [(-d.x, a.x), (d.x, xmax - a.x), (-d.y, a.y), (d.y, ymax - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    (t0 <= t1).then(|| (a + d * t0, a + d * t1))
}

/// A landmark as the camera sees it, before noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibleLine {
    pub landmark_id: u32,
    pub semantic: SemanticClass,
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisiblePoint {
    pub landmark_id: u32,
    pub semantic: SemanticClass,
    pub m: Vector2<f64>,
    /// Projected half-size of the landmark, pixels.
    pub radius_px: f64,
}

fn rough_at(pose: &CameraPose) -> RoughPose {
    RoughPose::new(pose.center, pose.heading(), 0)
}

/// Line landmarks (including lane segments ahead of `pose`) whose image
/// clipped to the frame is at least `min_line_px` long.
pub fn visible_lines(map: &SemanticMap, pose: &CameraPose, config: &WorldConfig) -> Vec<VisibleLine> {
    let k = &config.intrinsics;
    let lanes = lane_segments(map, &rough_at(pose), &PreselectConfig::default());
    map.lines
        .iter()
        .chain(lanes.iter())
        .filter_map(|l| {
            let proj = project_line(l, pose, k).ok()?;
            let (a, b) = clip_to_image(proj.u1, proj.u2, k)?;
            ((b - a).norm() >= config.min_line_px).then_some(VisibleLine {
                landmark_id: l.id,
                semantic: l.semantic,
                a,
                b,
            })
        })
        .collect()
}

pub fn visible_points(map: &SemanticMap, pose: &CameraPose, config: &WorldConfig) -> Vec<VisiblePoint> {
    let k = &config.intrinsics;
    map.points
        .iter()
        .filter_map(|p| {
            let m = project_point(&p.p, pose, k).ok()?;
            let depth = pose.to_camera(&p.p).z;
            k.contains(&m).then_some(VisiblePoint {
                landmark_id: p.id,
                semantic: p.semantic,
                m,
                radius_px: 0.5 * k.fx * p.size_m / depth,
            })
        })
        .collect()
}

/// Detections of one frame with the hidden true pairing: the landmark id
/// behind each detection, or `None` for injected outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub detections: FrameDetections,
    pub line_labels: Vec<Option<u32>>,
    pub point_labels: Vec<Option<u32>>,
}

impl RenderedFrame {
    pub fn into_input(self, frame_id: u64, road_index: u32) -> FrameInput {
        FrameInput {
            frame_id,
            road_index,
            detections: self.detections,
        }
    }
}

fn random_pixel<R: Rng>(rng: &mut R, k: &Intrinsics) -> Vector2<f64> {
    Vector2::new(
        rng.random_range(0.0..(k.width - 1) as f64),
        rng.random_range(0.0..(k.height - 1) as f64),
    )
}

pub fn render_detections<R: Rng>(
    map: &SemanticMap,
    pose: &CameraPose,
    config: &WorldConfig,
    rng: &mut R,
) -> RenderedFrame {
    let k = &config.intrinsics;
    let sigma = config.pixel_noise_px;
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let jitter = |rng: &mut R| -> Vector2<f64> {
        if sigma > 0.0 {
            Vector2::new(noise.sample(rng), noise.sample(rng))
        } else {
            Vector2::zeros()
        }
    };

    let mut lines: Vec<(DetectedLine, Option<u32>)> = Vec::new();
    for v in visible_lines(map, pose, config) {
        let (m1, m2) = (v.a + jitter(rng), v.b + jitter(rng));
        if config.outlier_rate > 0.0 && rng.random_bool(config.outlier_rate) {
            let mut a = random_pixel(rng, k);
            let mut b = random_pixel(rng, k);
            while (b - a).norm() < config.min_line_px.max(1.0) {
                a = random_pixel(rng, k);
                b = random_pixel(rng, k);
            }
            lines.push((DetectedLine::new(a, b, v.semantic), None));
        }
        if config.dropout_rate > 0.0 && rng.random_bool(config.dropout_rate) {
            continue;
        }
        let mut det = DetectedLine::new(m1, m2, v.semantic);
        det.support = (v.b - v.a).norm().round() as usize;
        lines.push((det, Some(v.landmark_id)));
    }

    let mut points: Vec<(DetectedPoint, Option<u32>)> = Vec::new();
    for v in visible_points(map, pose, config) {
        let m = v.m + jitter(rng);
        if config.outlier_rate > 0.0 && rng.random_bool(config.outlier_rate) {
            points.push((DetectedPoint::new(random_pixel(rng, k), v.semantic), None));
        }
        if config.dropout_rate > 0.0 && rng.random_bool(config.dropout_rate) {
            continue;
        }
        points.push((DetectedPoint::new(m, v.semantic), Some(v.landmark_id)));
    }

    lines.shuffle(rng);
    points.shuffle(rng);
    let (lines, line_labels) = lines.into_iter().unzip();
    let (points, point_labels) = points.into_iter().unzip();
    RenderedFrame {
        detections: FrameDetections { lines, points },
        line_labels,
        point_labels,
    }
}

fn distance_to_segment(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let d = b - a;
    let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
    (p - (a + d * t)).norm()
}

fn stamp_segment(raster: &mut ProbabilityRaster, a: &Vector2<f64>, b: &Vector2<f64>, half_width: f64) {
    let (w, h) = (raster.width as f64, raster.height as f64);
    let x0 = (a.x.min(b.x) - half_width).floor().max(0.0) as u32;
    let x1 = (a.x.max(b.x) + half_width).ceil().min(w - 1.0) as u32;
    let y0 = (a.y.min(b.y) - half_width).floor().max(0.0) as u32;
    let y1 = (a.y.max(b.y) + half_width).ceil().min(h - 1.0) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = Vector2::new(x as f64, y as f64);
            if distance_to_segment(&p, a, b) <= half_width {
                raster.set(x, y, 1.0);
            }
        }
    }
}

fn stamp_disc(raster: &mut ProbabilityRaster, c: &Vector2<f64>, radius: f64) {
    let (w, h) = (raster.width as f64, raster.height as f64);
    let x0 = (c.x - radius).floor().max(0.0) as u32;
    let x1 = (c.x + radius).ceil().min(w - 1.0) as u32;
    let y0 = (c.y - radius).floor().max(0.0) as u32;
    let y1 = (c.y + radius).ceil().min(h - 1.0) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if (Vector2::new(x as f64, y as f64) - c).norm() <= radius {
                raster.set(x, y, 1.0);
            }
        }
    }
}

/// Binary-valued probability rasters: strokes of `stroke_width_px` for
/// line landmarks, filled discs for point landmarks.
pub fn render_masks(map: &SemanticMap, pose: &CameraPose, config: &WorldConfig) -> SemanticMask {
    let k = &config.intrinsics;
    let mut mask = SemanticMask::empty(k.width, k.height);
    for v in visible_lines(map, pose, config) {
        let raster = mask.classes.get_mut(&v.semantic).expect("all classes present");
        stamp_segment(raster, &v.a, &v.b, 0.5 * config.stroke_width_px);
    }
    for v in visible_points(map, pose, config) {
        let raster = mask.classes.get_mut(&v.semantic).expect("all classes present");
        stamp_disc(raster, &v.m, v.radius_px.max(config.min_disc_radius_px));
    }
    mask
}

/// Seeded generator for frame `frame` of a world.
pub fn frame_rng(seed: u64, frame: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame + 1);
    rng
}

/// Renders every trajectory frame.
pub fn render_sequence(world: &World, config: &WorldConfig) -> Vec<RenderedFrame> {
    world
        .trajectory
        .iter()
        .enumerate()
        .map(|(i, pose)| render_detections(&world.map, pose, config, &mut frame_rng(config.rng_seed, i as u64)))
        .collect()
}
