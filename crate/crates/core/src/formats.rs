//! Text file formats shared by the command workflows.
//!
//! All formats are line oriented with whitespace-separated fields and `#`
//! comments:
//!
//! - intrinsics: `K <fx> <fy> <cx> <cy> <skew> <width> <height>`
//! - detections: `F <frame> <road_index>` followed by
//!   `DL <class> <x1> <y1> <x2> <y2>` and `DP <class> <x> <y>` records
//! - ground truth: `GT <frame> <Cx> <Cy> <Cz> <yaw> <pitch> <roll>`
//! - landmark clusters: `CLUSTER <id> <class> <road>` followed by one
//!   `<x> <y> <z>` row per point
//! - results: CSV `frame,status,Cx,Cy,Cz,yaw,pitch,roll,sqrtR,n_corr`
//!
//! Semantic masks are 8-bit binary PGM files, probability × 255.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{GrayImage, ImageEncoder};
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::camera::{CameraPose, Intrinsics};
use crate::feature_extract::{DetectedLine, DetectedPoint, FrameDetections, ProbabilityRaster};
use crate::map_model::SemanticClass;
use crate::pipeline::{FrameInput, FrameRecord, FrameStatus};

/// Malformed input; `line` is 1-based (0 when the problem is not tied to a
/// single line).
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

impl ParseError {
    pub fn new(line: usize, reason: impl Into<String>) -> Self {
        Self {
            line,
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.reason)
        } else {
            write!(f, "line {}: {}", self.line, self.reason)
        }
    }
}

pub fn parse_f64(s: &str, line: usize) -> Result<f64, ParseError> {
    let v: f64 = s
        .parse()
        .map_err(|_| ParseError::new(line, format!("`{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(ParseError::new(line, format!("`{s}` is not finite")));
    }
    Ok(v)
}

pub fn parse_int<T: FromStr>(s: &str, line: usize) -> Result<T, ParseError> {
    s.parse()
        .map_err(|_| ParseError::new(line, format!("`{s}` is not a valid integer")))
}

fn parse_class(s: &str, line: usize) -> Result<SemanticClass, ParseError> {
    s.parse().map_err(|e: String| ParseError::new(line, e))
}

/// Non-empty, comment-stripped lines with their 1-based numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let content = raw.split('#').next().unwrap_or("").trim();
        (!content.is_empty()).then(|| (i + 1, content.split_whitespace().collect()))
    })
}

fn arity(fields: &[&str], n: usize, line: usize) -> Result<(), ParseError> {
    if fields.len() != n {
        return Err(ParseError::new(
            line,
            format!("`{}` record needs {n} fields, found {}", fields[0], fields.len()),
        ));
    }
    Ok(())
}

pub fn write_intrinsics(k: &Intrinsics) -> String {
    format!(
        "K {} {} {} {} {} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.skew, k.width, k.height
    )
}

pub fn parse_intrinsics(text: &str) -> Result<Intrinsics, ParseError> {
    let mut found = None;
    for (line, f) in records(text) {
        if f[0] != "K" {
            return Err(ParseError::new(line, format!("unknown record `{}`", f[0])));
        }
        if found.is_some() {
            return Err(ParseError::new(line, "duplicate K record"));
        }
        arity(&f, 8, line)?;
        let k = Intrinsics {
            fx: parse_f64(f[1], line)?,
            fy: parse_f64(f[2], line)?,
            cx: parse_f64(f[3], line)?,
            cy: parse_f64(f[4], line)?,
            skew: parse_f64(f[5], line)?,
            width: parse_int(f[6], line)?,
            height: parse_int(f[7], line)?,
        };
        k.validate().map_err(|e| ParseError::new(line, e.to_string()))?;
        found = Some(k);
    }
    found.ok_or_else(|| ParseError::new(0, "no K record"))
}

pub fn write_detections(frames: &[FrameInput]) -> String {
    let mut out = String::new();
    for frame in frames {
        writeln!(out, "F {} {}", frame.frame_id, frame.road_index).unwrap();
        for l in &frame.detections.lines {
            writeln!(
                out,
                "DL {} {:.6} {:.6} {:.6} {:.6}",
                l.semantic, l.m1.x, l.m1.y, l.m2.x, l.m2.y
            )
            .unwrap();
        }
        for p in &frame.detections.points {
            writeln!(out, "DP {} {:.6} {:.6}", p.semantic, p.m.x, p.m.y).unwrap();
        }
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<FrameInput>, ParseError> {
    let mut frames: Vec<FrameInput> = Vec::new();
    for (line, f) in records(text) {
        match f[0] {
            "F" => {
                arity(&f, 3, line)?;
                let frame_id = parse_int(f[1], line)?;
                if let Some(prev) = frames.last() {
                    if frame_id <= prev.frame_id {
                        return Err(ParseError::new(line, "frame ids must increase"));
                    }
                }
                frames.push(FrameInput {
                    frame_id,
                    road_index: parse_int(f[2], line)?,
                    detections: FrameDetections::default(),
                });
            }
            "DL" | "DP" => {
                let frame = frames
                    .last_mut()
                    .ok_or_else(|| ParseError::new(line, "detection before any `F` record"))?;
                let class = parse_class(f[1], line)?;
                if f[0] == "DL" {
                    arity(&f, 6, line)?;
                    if !class.is_line_shaped() {
                        return Err(ParseError::new(line, "point-shaped class in DL record"));
                    }
                    frame.detections.lines.push(DetectedLine::new(
                        Vector2::new(parse_f64(f[2], line)?, parse_f64(f[3], line)?),
                        Vector2::new(parse_f64(f[4], line)?, parse_f64(f[5], line)?),
                        class,
                    ));
                } else {
                    arity(&f, 4, line)?;
                    if class.is_line_shaped() {
                        return Err(ParseError::new(line, "line-shaped class in DP record"));
                    }
                    frame.detections.points.push(DetectedPoint::new(
                        Vector2::new(parse_f64(f[2], line)?, parse_f64(f[3], line)?),
                        class,
                    ));
                }
            }
            other => return Err(ParseError::new(line, format!("unknown record `{other}`"))),
        }
    }
    Ok(frames)
}

pub fn write_ground_truth(poses: &[(u64, CameraPose)]) -> String {
    let mut out = String::new();
    for (frame, p) in poses {
        writeln!(
            out,
            "GT {} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            frame, p.center.x, p.center.y, p.center.z, p.yaw, p.pitch, p.roll
        )
        .unwrap();
    }
    out
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<(u64, CameraPose)>, ParseError> {
    let mut out: Vec<(u64, CameraPose)> = Vec::new();
    for (line, f) in records(text) {
        if f[0] != "GT" {
            return Err(ParseError::new(line, format!("unknown record `{}`", f[0])));
        }
        arity(&f, 8, line)?;
        let frame: u64 = parse_int(f[1], line)?;
        if out.last().is_some_and(|(prev, _)| frame <= *prev) {
            return Err(ParseError::new(line, "frame ids must increase"));
        }
        let v: Vec<f64> = f[2..]
            .iter()
            .map(|s| parse_f64(s, line))
            .collect::<Result<_, _>>()?;
        out.push((frame, CameraPose::new(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5])));
    }
    Ok(out)
}

pub const RESULT_HEADER: &str = "frame,status,Cx,Cy,Cz,yaw,pitch,roll,sqrtR,n_corr";

pub fn write_results(records: &[FrameRecord]) -> String {
    let mut out = String::from(RESULT_HEADER);
    out.push('\n');
    for r in records {
        let p = &r.pose;
        let sqrt_r = r.sqrt_r.map(|v| format!("{v:.9}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{},{}",
            r.frame_id,
            r.status.as_str(),
            p.center.x,
            p.center.y,
            p.center.z,
            p.yaw,
            p.pitch,
            p.roll,
            sqrt_r,
            r.n_corr
        )
        .unwrap();
    }
    out
}

pub fn parse_results(text: &str) -> Result<Vec<FrameRecord>, ParseError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RESULT_HEADER => {}
        _ => return Err(ParseError::new(1, format!("expected header `{RESULT_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.trim().split(',').collect();
        if f.len() != 10 {
            return Err(ParseError::new(line, format!("expected 10 columns, found {}", f.len())));
        }
        let status = FrameStatus::parse(f[1])
            .ok_or_else(|| ParseError::new(line, format!("unknown status `{}`", f[1])))?;
        let v: Vec<f64> = f[2..8]
            .iter()
            .map(|s| parse_f64(s, line))
            .collect::<Result<_, _>>()?;
        out.push(FrameRecord {
            frame_id: parse_int(f[0], line)?,
            status,
            pose: CameraPose::new(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5]),
            sqrt_r: if f[8].is_empty() { None } else { Some(parse_f64(f[8], line)?) },
            n_corr: parse_int(f[9], line)?,
        });
    }
    Ok(out)
}

/// Labeled 3D point cluster, input to map compilation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCluster {
    pub id: u32,
    pub semantic: SemanticClass,
    pub road_index: u32,
    pub points: Vec<Vector3<f64>>,
}

pub fn parse_clusters(text: &str) -> Result<Vec<LabeledCluster>, ParseError> {
    let mut out: Vec<LabeledCluster> = Vec::new();
    for (line, f) in records(text) {
        if f[0] == "CLUSTER" {
            arity(&f, 4, line)?;
            out.push(LabeledCluster {
                id: parse_int(f[1], line)?,
                semantic: parse_class(f[2], line)?,
                road_index: parse_int(f[3], line)?,
                points: Vec::new(),
            });
            continue;
        }
        let cluster = out
            .last_mut()
            .ok_or_else(|| ParseError::new(line, "point before any CLUSTER record"))?;
        if f.len() != 3 {
            return Err(ParseError::new(line, format!("point needs 3 coordinates, found {}", f.len())));
        }
        cluster.points.push(Vector3::new(
            parse_f64(f[0], line)?,
            parse_f64(f[1], line)?,
            parse_f64(f[2], line)?,
        ));
    }
    Ok(out)
}

pub fn write_clusters(clusters: &[LabeledCluster]) -> String {
    let mut out = String::new();
    for c in clusters {
        writeln!(out, "CLUSTER {} {} {}", c.id, c.semantic, c.road_index).unwrap();
        for p in &c.points {
            writeln!(out, "{:.6} {:.6} {:.6}", p.x, p.y, p.z).unwrap();
        }
    }
    out
}

/// Mask file name for one frame and class, e.g. `000012_POLE.pgm`.
pub fn mask_file_name(frame: u64, class: SemanticClass) -> String {
    format!("{frame:06}_{}.pgm", class.token())
}

pub fn write_pgm(path: &Path, raster: &ProbabilityRaster) -> std::io::Result<()> {
    let bytes: Vec<u8> = raster
        .data
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, raster.width, raster.height, image::ExtendedColorType::L8)
        .map_err(std::io::Error::other)
}

pub fn read_pgm(path: &Path) -> Result<ProbabilityRaster, image::ImageError> {
    let img: GrayImage = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()?
        .into_luma8();
    Ok(ProbabilityRaster {
        width: img.width(),
        height: img.height(),
        data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intrinsics_round_trip() {
        let k = Intrinsics::default();
        assert_eq!(parse_intrinsics(&write_intrinsics(&k)).unwrap(), k);
        assert_eq!(parse_intrinsics("K 1 2 3\n").unwrap_err().line, 1);
        assert!(parse_intrinsics("K 0 700 600 180 0 1200 360\n").is_err());
    }

    #[test]
    fn detections_round_trip() {
        let frames = vec![
            FrameInput {
                frame_id: 4,
                road_index: 1,
                detections: FrameDetections {
                    lines: vec![DetectedLine::new(
                        Vector2::new(1.5, 2.25),
                        Vector2::new(3.0, 400.125),
                        SemanticClass::PoleLike,
                    )],
                    points: vec![DetectedPoint::new(Vector2::new(7.0, 8.5), SemanticClass::TrafficSign)],
                },
            },
            FrameInput {
                frame_id: 5,
                road_index: 1,
                detections: FrameDetections::default(),
            },
        ];
        let text = write_detections(&frames);
        assert_eq!(parse_detections(&text).unwrap(), frames);
    }

    #[test]
    fn detection_errors_carry_line_numbers() {
        assert_eq!(parse_detections("DL POLE 0 0 1 1\n").unwrap_err().line, 1);
        assert_eq!(parse_detections("F 0 0\nDP POLE 1 1\n").unwrap_err().line, 2);
        assert_eq!(parse_detections("F 0 0\n\nDL POLE 1 1 2\n").unwrap_err().line, 3);
        assert_eq!(parse_detections("F 1 0\nF 1 0\n").unwrap_err().line, 2);
    }

    #[test]
    fn results_round_trip() {
        let recs = vec![
            FrameRecord {
                frame_id: 0,
                status: FrameStatus::Bootstrapped,
                pose: CameraPose::new(Vector3::new(1.0, 1.65, -0.5), 0.01, 0.0, 0.0),
                sqrt_r: None,
                n_corr: 0,
            },
            FrameRecord {
                frame_id: 1,
                status: FrameStatus::Localized,
                pose: CameraPose::new(Vector3::new(2.0, 1.65, -0.5), 0.02, 0.001, -0.002),
                sqrt_r: Some(1.25),
                n_corr: 7,
            },
        ];
        let text = write_results(&recs);
        assert_eq!(parse_results(&text).unwrap(), recs);
        assert!(parse_results("frame\n").is_err());
    }

    #[test]
    fn clusters_parse() {
        let text = "CLUSTER 3 POLE 0\n0 0 0\n0 1 0\n# trailing comment\nCLUSTER 4 SIGN 0\n1 2 3\n";
        let c = parse_clusters(text).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].points.len(), 2);
        assert_eq!(c[1].semantic, SemanticClass::TrafficSign);
        assert_eq!(parse_clusters(&write_clusters(&c)).unwrap(), c);
        assert_eq!(parse_clusters("1 2 3\n").unwrap_err().line, 1);
        assert_eq!(parse_clusters("CLUSTER 1 POLE 0\n1 2\n").unwrap_err().line, 2);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(mask_file_name(3, SemanticClass::PoleLike));
        let mut r = ProbabilityRaster::zeros(7, 5);
        r.set(2, 3, 1.0);
        r.set(4, 1, 0.5);
        write_pgm(&path, &r).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!((back.width, back.height), (7, 5));
        assert_eq!(back.get(2, 3), 1.0);
        assert!((back.get(4, 1) - 0.5).abs() < 0.01);
        assert_eq!(back.get(0, 0), 0.0);
        assert!(path.to_string_lossy().ends_with("000003_POLE.pgm"));
    }
}
