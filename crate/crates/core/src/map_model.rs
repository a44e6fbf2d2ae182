//! Compact semantic map: landmark types, control-point fitting, rough-pose
//! preselection and the line-oriented text format.
//!
//! Coordinates are meters in the map frame (X along the initial travel
//! direction, Y up, Z to the right).

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{parse_f64, parse_int, ParseError};

/// Singleton point landmarks get this size so that preselection stays
/// well-defined.
pub const MIN_POINT_SIZE_M: f64 = 1e-3;

const COINCIDENT_EPS_M: f64 = 1e-9;
const MIN_SEGMENT_M: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SemanticClass {
    PoleLike,
    TrafficSign,
    LaneLine,
    Milestone,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; 4] = [
        SemanticClass::PoleLike,
        SemanticClass::TrafficSign,
        SemanticClass::LaneLine,
        SemanticClass::Milestone,
    ];

    /// Poles, lane lines and milestones are described by two control points;
    /// traffic signs by a single centroid.
    pub fn is_line_shaped(self) -> bool {
        !matches!(self, SemanticClass::TrafficSign)
    }

    pub fn token(self) -> &'static str {
        match self {
            SemanticClass::PoleLike => "POLE",
            SemanticClass::TrafficSign => "SIGN",
            SemanticClass::LaneLine => "LANE",
            SemanticClass::Milestone => "MILESTONE",
        }
    }
}

impl fmt::Display for SemanticClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for SemanticClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "POLE" => Ok(SemanticClass::PoleLike),
            "SIGN" => Ok(SemanticClass::TrafficSign),
            "LANE" => Ok(SemanticClass::LaneLine),
            "MILESTONE" => Ok(SemanticClass::Milestone),
            other => Err(format!("unknown semantic class `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineLandmark {
    pub id: u32,
    pub p1: Vector3<f64>,
    pub p2: Vector3<f64>,
    pub semantic: SemanticClass,
    pub size_m: f64,
    pub road_index: u32,
}

impl LineLandmark {
    pub fn length(&self) -> f64 {
        (self.p2 - self.p1).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointLandmark {
    pub id: u32,
    pub p: Vector3<f64>,
    pub semantic: SemanticClass,
    pub size_m: f64,
    pub road_index: u32,
}

/// A lane line stored as an ordered point sequence along the travel
/// direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LanePolyline {
    pub id: u32,
    pub points: Vec<Vector3<f64>>,
    pub road_index: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SemanticMap {
    pub lines: Vec<LineLandmark>,
    pub points: Vec<PointLandmark>,
    pub lanes: Vec<LanePolyline>,
}

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("cluster is empty")]
    EmptyCluster,
    #[error("cluster points coincide; no line direction can be fitted")]
    DegenerateCluster,
    #[error("duplicate landmark id {0}")]
    DuplicateId(u32),
    #[error("landmark {id}: {reason}")]
    InvalidLandmark { id: u32, reason: String },
}

impl SemanticMap {
    pub fn is_empty(&self) -> bool {
        self.lines.is_empty() && self.points.is_empty() && self.lanes.is_empty()
    }

    pub fn validate(&self) -> Result<(), MapError> {
        let mut seen = HashSet::new();
        let ids = self
            .lines
            .iter()
            .map(|l| l.id)
            .chain(self.points.iter().map(|p| p.id))
            .chain(self.lanes.iter().map(|l| l.id));
        for id in ids {
            if !seen.insert(id) {
                return Err(MapError::DuplicateId(id));
            }
        }
        let invalid = |id, reason: &str| MapError::InvalidLandmark {
            id,
            reason: reason.to_string(),
        };
        for l in &self.lines {
            if !l.semantic.is_line_shaped() {
                return Err(invalid(l.id, "point-shaped class on a line landmark"));
            }
            if l.length() <= MIN_SEGMENT_M {
                return Err(invalid(l.id, "control points coincide"));
            }
            if !(l.size_m > 0.0) {
                return Err(invalid(l.id, "size must be positive"));
            }
        }
        for p in &self.points {
            if p.semantic.is_line_shaped() {
                return Err(invalid(p.id, "line-shaped class on a point landmark"));
            }
            if !(p.size_m > 0.0) {
                return Err(invalid(p.id, "size must be positive"));
            }
        }
        for lane in &self.lanes {
            if lane.points.len() < 2 {
                return Err(invalid(lane.id, "lane needs at least two points"));
            }
            if lane.points.windows(2).any(|w| w[0] == w[1]) {
                return Err(invalid(lane.id, "consecutive lane points coincide"));
            }
        }
        Ok(())
    }
}

/// Rough ego position used for preselection. `heading` is the unit travel
/// direction in the ground plane, as (map X, map Z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoughPose {
    pub position: Vector3<f64>,
    pub heading: Vector2<f64>,
    pub road_index: u32,
}

impl RoughPose {
    pub fn new(position: Vector3<f64>, heading: Vector2<f64>, road_index: u32) -> Self {
        let n = heading.norm();
        let heading = if n > 0.0 { heading / n } else { Vector2::new(1.0, 0.0) };
        Self {
            position,
            heading,
            road_index,
        }
    }

    fn ahead(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.position;
        d.x * self.heading.x + d.z * self.heading.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreselectConfig {
    /// Minimum size-to-distance ratio; a landmark is kept when its ratio is
    /// strictly greater.
    pub threshold: f64,
    pub lane_near_m: f64,
    pub lane_far_m: f64,
}

impl Default for PreselectConfig {
    fn default() -> Self {
        Self {
            threshold: 0.017,
            lane_near_m: 5.0,
            lane_far_m: 20.0,
        }
    }
}

/// Landmarks kept for one frame. Lane segments fitted from polylines appear
/// in `lines` with class [`SemanticClass::LaneLine`] and the polyline's id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreselectedSet {
    pub lines: Vec<LineLandmark>,
    pub points: Vec<PointLandmark>,
}

impl PreselectedSet {
    pub fn is_empty(&self) -> bool {
        self.lines.is_empty() && self.points.is_empty()
    }
}

fn centroid(cluster: &[Vector3<f64>]) -> Vector3<f64> {
    cluster.iter().sum::<Vector3<f64>>() / cluster.len() as f64
}

/// p1 is the lower control point; for near-horizontal segments the one
/// earlier along X, then Z.
fn canonical_order(a: Vector3<f64>, b: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let key = |v: &Vector3<f64>| [v.y, v.x, v.z];
    let (ka, kb) = (key(&a), key(&b));
    for i in 0..3 {
        if (ka[i] - kb[i]).abs() > MIN_SEGMENT_M {
            return if ka[i] < kb[i] { (a, b) } else { (b, a) };
        }
    }
    (a, b)
}

/// Fits the principal axis of `cluster` and takes the extreme projections
/// of the cluster onto it as control points.
pub fn fit_line_landmark(
    id: u32,
    cluster: &[Vector3<f64>],
    semantic: SemanticClass,
    road_index: u32,
) -> Result<LineLandmark, MapError> {
    if cluster.is_empty() {
        return Err(MapError::EmptyCluster);
    }
    let c = centroid(cluster);
    let spread = cluster
        .iter()
        .map(|p| (p - c).norm())
        .fold(0.0_f64, f64::max);
    if spread <= COINCIDENT_EPS_M {
        return Err(MapError::DegenerateCluster);
    }
    let scatter = cluster
        .iter()
        .map(|p| {
            let d = p - c;
            d * d.transpose()
        })
        .fold(Matrix3::zeros(), |acc, m| acc + m);
    let eig = SymmetricEigen::new(scatter);
    let axis_idx = eig.eigenvalues.imax();
    let axis: Vector3<f64> = eig.eigenvectors.column(axis_idx).normalize();

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in cluster {
        let t = (p - c).dot(&axis);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    let (p1, p2) = canonical_order(c + axis * lo, c + axis * hi);
    let size_m = (p2 - p1).norm();
    if size_m <= MIN_SEGMENT_M {
        return Err(MapError::DegenerateCluster);
    }
    Ok(LineLandmark {
        id,
        p1,
        p2,
        semantic,
        size_m,
        road_index,
    })
}

/// Centroid plus the largest pairwise distance in the cluster.
pub fn fit_point_landmark(
    id: u32,
    cluster: &[Vector3<f64>],
    semantic: SemanticClass,
    road_index: u32,
) -> Result<PointLandmark, MapError> {
    if cluster.is_empty() {
        return Err(MapError::EmptyCluster);
    }
    let mut extent = 0.0_f64;
    for (i, a) in cluster.iter().enumerate() {
        for b in &cluster[i + 1..] {
            extent = extent.max((a - b).norm());
        }
    }
    Ok(PointLandmark {
        id,
        p: centroid(cluster),
        semantic,
        size_m: extent.max(MIN_POINT_SIZE_M),
        road_index,
    })
}

/// Fits the part of each lane polyline on the ego road lying inside the
/// along-heading window in front of `rough`.
pub fn lane_segments(
    map: &SemanticMap,
    rough: &RoughPose,
    config: &PreselectConfig,
) -> Vec<LineLandmark> {
    map.lanes
        .iter()
        .filter(|lane| lane.road_index == rough.road_index)
        .filter_map(|lane| {
            let window: Vec<Vector3<f64>> = lane
                .points
                .iter()
                .filter(|p| {
                    let d = rough.ahead(p);
                    d >= config.lane_near_m && d <= config.lane_far_m
                })
                .copied()
                .collect();
            if window.len() < 2 {
                return None;
            }
            fit_line_landmark(lane.id, &window, SemanticClass::LaneLine, lane.road_index).ok()
        })
        .collect()
}

pub fn size_ratio(size_m: f64, control_point: &Vector3<f64>, rough: &Vector3<f64>) -> f64 {
    let d = (rough - control_point).norm();
    if d == 0.0 {
        f64::INFINITY
    } else {
        size_m / d
    }
}

pub fn preselect(map: &SemanticMap, rough: &RoughPose, config: &PreselectConfig) -> PreselectedSet {
    let keep = |size, p: &Vector3<f64>| size_ratio(size, p, &rough.position) > config.threshold;
    let mut lines: Vec<LineLandmark> = map
        .lines
        .iter()
        .filter(|l| l.road_index == rough.road_index && keep(l.size_m, &l.p1))
        .cloned()
        .collect();
    lines.extend(lane_segments(map, rough, config));
    let points = map
        .points
        .iter()
        .filter(|p| p.road_index == rough.road_index && keep(p.size_m, &p.p))
        .cloned()
        .collect();
    PreselectedSet { lines, points }
}

pub const MAP_HEADER: &str = "SEMMAP 1";

fn push_xyz(out: &mut String, v: &Vector3<f64>) {
    write!(out, " {:.6} {:.6} {:.6}", v.x, v.y, v.z).unwrap();
}

pub fn serialize_map(map: &SemanticMap) -> String {
    let mut out = String::from(MAP_HEADER);
    out.push('\n');
    for l in &map.lines {
        write!(out, "L {} {} {}", l.id, l.semantic, l.road_index).unwrap();
        push_xyz(&mut out, &l.p1);
        push_xyz(&mut out, &l.p2);
        writeln!(out, " {:.6}", l.size_m).unwrap();
    }
    for p in &map.points {
        write!(out, "P {} {} {}", p.id, p.semantic, p.road_index).unwrap();
        push_xyz(&mut out, &p.p);
        writeln!(out, " {:.6}", p.size_m).unwrap();
    }
    for lane in &map.lanes {
        write!(out, "LANE {} {} {}", lane.id, lane.road_index, lane.points.len()).unwrap();
        for p in &lane.points {
            push_xyz(&mut out, p);
        }
        out.push('\n');
    }
    out
}

fn expect_fields(fields: &[&str], n: usize, line: usize, what: &str) -> Result<(), ParseError> {
    if fields.len() != n {
        return Err(ParseError::new(
            line,
            format!("{what} record needs {n} fields, found {}", fields.len()),
        ));
    }
    Ok(())
}

fn parse_xyz(fields: &[&str], line: usize) -> Result<Vector3<f64>, ParseError> {
    Ok(Vector3::new(
        parse_f64(fields[0], line)?,
        parse_f64(fields[1], line)?,
        parse_f64(fields[2], line)?,
    ))
}

fn parse_class(s: &str, line: usize) -> Result<SemanticClass, ParseError> {
    s.parse().map_err(|e: String| ParseError::new(line, e))
}

pub fn parse_map(text: &str) -> Result<SemanticMap, ParseError> {
    let mut map = SemanticMap::default();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if !saw_header {
            if fields != ["SEMMAP", "1"] {
                return Err(ParseError::new(line, "expected `SEMMAP 1` header"));
            }
            saw_header = true;
            continue;
        }
        match fields[0] {
            "L" => {
                expect_fields(&fields, 11, line, "line landmark")?;
                let semantic = parse_class(fields[2], line)?;
                if !semantic.is_line_shaped() {
                    return Err(ParseError::new(line, "point-shaped class in L record"));
                }
                map.lines.push(LineLandmark {
                    id: parse_int(fields[1], line)?,
                    semantic,
                    road_index: parse_int(fields[3], line)?,
                    p1: parse_xyz(&fields[4..7], line)?,
                    p2: parse_xyz(&fields[7..10], line)?,
                    size_m: parse_f64(fields[10], line)?,
                });
            }
            "P" => {
                expect_fields(&fields, 8, line, "point landmark")?;
                let semantic = parse_class(fields[2], line)?;
                if semantic.is_line_shaped() {
                    return Err(ParseError::new(line, "line-shaped class in P record"));
                }
                map.points.push(PointLandmark {
                    id: parse_int(fields[1], line)?,
                    semantic,
                    road_index: parse_int(fields[3], line)?,
                    p: parse_xyz(&fields[4..7], line)?,
                    size_m: parse_f64(fields[7], line)?,
                });
            }
            "LANE" => {
                if fields.len() < 4 {
                    return Err(ParseError::new(line, "LANE record needs id, road and count"));
                }
                let n: usize = parse_int(fields[3], line)?;
                expect_fields(&fields, 4 + 3 * n, line, "lane")?;
                let points = fields[4..]
                    .chunks(3)
                    .map(|xyz| parse_xyz(xyz, line))
                    .collect::<Result<Vec<_>, _>>()?;
                map.lanes.push(LanePolyline {
                    id: parse_int(fields[1], line)?,
                    road_index: parse_int(fields[2], line)?,
                    points,
                });
            }
            other => return Err(ParseError::new(line, format!("unknown record `{other}`"))),
        }
    }
    if !saw_header {
        return Err(ParseError::new(1, "missing `SEMMAP 1` header"));
    }
    map.validate().map_err(|e| ParseError::new(0, e.to_string()))?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn pole(id: u32, base: Vector3<f64>, size: f64) -> LineLandmark {
        LineLandmark {
            id,
            p1: base,
            p2: base + v(0.0, size, 0.0),
            semantic: SemanticClass::PoleLike,
            size_m: size,
            road_index: 0,
        }
    }

    fn rough_origin() -> RoughPose {
        RoughPose::new(Vector3::zeros(), Vector2::new(1.0, 0.0), 0)
    }

    #[test]
    fn collinear_cluster_gives_exact_control_points() {
        let l = fit_line_landmark(
            1,
            &[v(0.0, 0.0, 0.0), v(0.0, 1.0, 0.0), v(0.0, 2.0, 0.0)],
            SemanticClass::PoleLike,
            0,
        )
        .unwrap();
        assert!((l.p1 - v(0.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((l.p2 - v(0.0, 2.0, 0.0)).norm() < 1e-12);
        assert!((l.size_m - 2.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_cluster_is_degenerate() {
        let err = fit_line_landmark(1, &[v(1.0, 2.0, 3.0); 2], SemanticClass::PoleLike, 0);
        assert_eq!(err, Err(MapError::DegenerateCluster));
        assert_eq!(
            fit_line_landmark(1, &[], SemanticClass::PoleLike, 0),
            Err(MapError::EmptyCluster)
        );
    }

    #[test]
    fn point_landmark_centroid_and_extent() {
        let p = fit_point_landmark(
            3,
            &[v(0.0, 0.0, 0.0), v(2.0, 0.0, 0.0)],
            SemanticClass::TrafficSign,
            0,
        )
        .unwrap();
        assert_eq!(p.p, v(1.0, 0.0, 0.0));
        assert_eq!(p.size_m, 2.0);

        let single = fit_point_landmark(4, &[v(1.0, 1.0, 1.0)], SemanticClass::TrafficSign, 0)
            .unwrap();
        assert_eq!(single.p, v(1.0, 1.0, 1.0));
        assert_eq!(single.size_m, MIN_POINT_SIZE_M);
        assert_eq!(
            fit_point_landmark(4, &[], SemanticClass::TrafficSign, 0),
            Err(MapError::EmptyCluster)
        );
    }

    #[test]
    fn preselection_threshold_is_strict() {
        let far = v(100.0, 0.0, 0.0);
        let map = SemanticMap {
            lines: vec![pole(1, far, 2.0), pole(2, far, 1.7)],
            ..Default::default()
        };
        let sel = preselect(&map, &rough_origin(), &PreselectConfig::default());
        let ids: Vec<u32> = sel.lines.iter().map(|l| l.id).collect();
        assert_eq!(ids, vec![1]);
    }

    #[test]
    fn preselection_filters_by_road() {
        let mut other = pole(2, v(10.0, 0.0, 0.0), 5.0);
        other.road_index = 7;
        let map = SemanticMap {
            lines: vec![pole(1, v(10.0, 0.0, 0.0), 5.0), other],
            points: vec![PointLandmark {
                id: 3,
                p: v(10.0, 2.0, 3.0),
                semantic: SemanticClass::TrafficSign,
                size_m: 1.0,
                road_index: 7,
            }],
            lanes: vec![],
        };
        let sel = preselect(&map, &rough_origin(), &PreselectConfig::default());
        assert_eq!(sel.lines.len(), 1);
        assert!(sel.points.is_empty());
        let mut rough = rough_origin();
        rough.road_index = 7;
        let sel = preselect(&map, &rough, &PreselectConfig::default());
        assert_eq!(sel.lines[0].id, 2);
        assert_eq!(sel.points[0].id, 3);
    }

    #[test]
    fn lane_window_spans_five_to_twenty_meters() {
        let points: Vec<_> = (-10..=60).map(|x| v(x as f64, 0.0, 1.75)).collect();
        let map = SemanticMap {
            lanes: vec![LanePolyline {
                id: 9,
                points: points.clone(),
                road_index: 0,
            }],
            ..Default::default()
        };
        // enumerate the window independently
        let inside: Vec<f64> = points
            .iter()
            .map(|p| p.x)
            .filter(|x| (5.0..=20.0).contains(x))
            .collect();
        assert_eq!(inside.first(), Some(&5.0));
        assert_eq!(inside.last(), Some(&20.0));

        let sel = preselect(&map, &rough_origin(), &PreselectConfig::default());
        assert_eq!(sel.lines.len(), 1);
        let seg = &sel.lines[0];
        assert_eq!(seg.semantic, SemanticClass::LaneLine);
        assert_eq!(seg.id, 9);
        assert!((seg.p1 - v(5.0, 0.0, 1.75)).norm() < 1e-9);
        assert!((seg.p2 - v(20.0, 0.0, 1.75)).norm() < 1e-9);

        // heading reversed: nothing lies in front except points behind origin
        let back = RoughPose::new(Vector3::zeros(), Vector2::new(-1.0, 0.0), 0);
        let sel = preselect(&map, &back, &PreselectConfig::default());
        let seg = &sel.lines[0];
        assert!((seg.p1.x + 10.0).abs() < 1e-9 && (seg.p2.x + 5.0).abs() < 1e-9);
    }

    #[test]
    fn empty_map_round_trips_as_header_only() {
        let text = serialize_map(&SemanticMap::default());
        assert_eq!(text, "SEMMAP 1\n");
        assert_eq!(parse_map(&text).unwrap(), SemanticMap::default());
    }

    #[test]
    fn malformed_records_report_their_line() {
        let text = "SEMMAP 1\n# comment\nL 1 POLE 0 0 0 0 0 2 0\n";
        let err = parse_map(text).unwrap_err();
        assert_eq!(err.line, 3);

        let err = parse_map("SEMMAP 1\nP 1 POLE 0 0 0 0 1\n").unwrap_err();
        assert_eq!(err.line, 2);
        let err = parse_map("SEMMAP 1\nL 1 POLE 0 0 0 0 0 2 0 x\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(parse_map("L 1 POLE 0 0 0 0 0 2 0 2\n").is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let map = SemanticMap {
            lines: vec![pole(1, v(0.0, 0.0, 0.0), 2.0), pole(1, v(5.0, 0.0, 0.0), 2.0)],
            ..Default::default()
        };
        assert_eq!(map.validate(), Err(MapError::DuplicateId(1)));
        assert!(parse_map(&serialize_map(&map)).is_err());
    }
}
