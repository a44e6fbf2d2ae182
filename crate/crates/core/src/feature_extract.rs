//! Geometric features from per-class semantic probability rasters.
//!
//! Each class raster is thresholded into a binary image, split into
//! 8-connected regions, and every region becomes either a line (RANSAC over
//! pixel pairs, least-squares refit on the inliers) or a point (the region
//! centroid), depending on whether the class is line- or point-shaped.
//!
//! Pixel coordinates refer to pixel centers: pixel column `x`, row `y` sits
//! at `(x, y)`.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_model::SemanticClass;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl ProbabilityRaster {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: f32) {
        self.data[(y * self.width + x) as usize] = value;
    }
}

/// One probability raster per semantic class, all of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMask {
    pub width: u32,
    pub height: u32,
    pub classes: BTreeMap<SemanticClass, ProbabilityRaster>,
}

impl SemanticMask {
    pub fn empty(width: u32, height: u32) -> Self {
        let classes = SemanticClass::ALL
            .iter()
            .map(|&c| (c, ProbabilityRaster::zeros(width, height)))
            .collect();
        Self {
            width,
            height,
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl BinaryRaster {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.data[(y * self.width + x) as usize] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Connected set of foreground pixels as (x, y) pairs in discovery order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub pixels: Vec<(u32, u32)>,
}

impl Region {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedLine {
    pub m1: Vector2<f64>,
    pub m2: Vector2<f64>,
    pub semantic: SemanticClass,
    pub support: usize,
}

impl DetectedLine {
    pub fn new(m1: Vector2<f64>, m2: Vector2<f64>, semantic: SemanticClass) -> Self {
        Self {
            m1,
            m2,
            semantic,
            support: 0,
        }
    }

    pub fn length(&self) -> f64 {
        (self.m2 - self.m1).norm()
    }

    /// Endpoints lie within `[-w, 2w] x [-h, 2h]`.
    pub fn within_sanity_box(&self, width: u32, height: u32) -> bool {
        let (w, h) = (width as f64, height as f64);
        [self.m1, self.m2]
            .iter()
            .all(|m| m.x >= -w && m.x <= 2.0 * w && m.y >= -h && m.y <= 2.0 * h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedPoint {
    pub m: Vector2<f64>,
    pub semantic: SemanticClass,
    pub support: usize,
}

impl DetectedPoint {
    pub fn new(m: Vector2<f64>, semantic: SemanticClass) -> Self {
        Self {
            m,
            semantic,
            support: 0,
        }
    }
}

/// Line and point features of one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameDetections {
    pub lines: Vec<DetectedLine>,
    pub points: Vec<DetectedPoint>,
}

impl FrameDetections {
    pub fn is_empty(&self) -> bool {
        self.lines.is_empty() && self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// A pixel is foreground when its probability is strictly above this.
    pub threshold: f64,
    pub min_region_px: usize,
    pub inlier_tol_px: f64,
    pub ransac_iterations: usize,
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            min_region_px: 30,
            inlier_tol_px: 2.0,
            ransac_iterations: 100,
            min_inlier_ratio: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("region does not support a line model")]
pub struct NoLine;

pub fn binarize(raster: &ProbabilityRaster, threshold: f64) -> BinaryRaster {
    BinaryRaster {
        width: raster.width,
        height: raster.height,
        data: raster.data.iter().map(|&p| f64::from(p) > threshold).collect(),
    }
}

/// 8-connected components of the foreground, dropping those smaller than
/// `min_region_px`. Regions come out ordered by their first pixel in
/// row-major order.
pub fn region_grow(binary: &BinaryRaster, min_region_px: usize) -> Vec<Region> {
    let (w, h) = (binary.width as i64, binary.height as i64);
    let mut visited = vec![false; binary.data.len()];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            if !binary.data[idx] || visited[idx] {
                continue;
            }
            visited[idx] = true;
            queue.push_back((x, y));
            let mut pixels = Vec::new();
            while let Some((px, py)) = queue.pop_front() {
                pixels.push((px as u32, py as u32));
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (px + dx, py + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let n = (ny * w + nx) as usize;
                        if binary.data[n] && !visited[n] {
                            visited[n] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            if pixels.len() >= min_region_px {
                regions.push(Region { pixels });
            }
        }
    }
    regions
}

/// Total-least-squares line through `pts`: (centroid, unit direction).
fn tls_line(pts: &[Vector2<f64>]) -> (Vector2<f64>, Vector2<f64>) {
    let n = pts.len() as f64;
    let c = pts.iter().sum::<Vector2<f64>>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pts {
        let d = p - c;
        sxx += d.x * d.x;
        syy += d.y * d.y;
        sxy += d.x * d.y;
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    (c, Vector2::new(angle.cos(), angle.sin()))
}

fn perpendicular_distance(p: &Vector2<f64>, a: &Vector2<f64>, dir: &Vector2<f64>) -> f64 {
    let d = p - a;
    (dir.x * d.y - dir.y * d.x).abs()
}

/// RANSAC line over 2-pixel samples followed by a least-squares refit on
/// the best consensus set. Endpoints are the extreme inlier projections on
/// the refit line, ordered top to bottom (then left to right).
pub fn fit_region_line(
    region: &Region,
    semantic: SemanticClass,
    config: &ExtractionConfig,
    seed: u64,
) -> Result<DetectedLine, NoLine> {
    let n = region.len();
    if n < 2 {
        return Err(NoLine);
    }
    // Work relative to the first pixel so that shifted regions give
    // bit-identical fits.
    let (ox, oy) = region.pixels[0];
    let pts: Vec<Vector2<f64>> = region
        .pixels
        .iter()
        .map(|&(x, y)| Vector2::new(x as f64 - ox as f64, y as f64 - oy as f64))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vector2<f64>, Vector2<f64>)> = None;
    for _ in 0..config.ransac_iterations {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let diff = pts[j] - pts[i];
        let len = diff.norm();
        if len == 0.0 {
            continue;
        }
        let dir = diff / len;
        let count = pts
            .iter()
            .filter(|p| perpendicular_distance(p, &pts[i], &dir) <= config.inlier_tol_px)
            .count();
        if best.is_none_or(|(c, _, _)| count > c) {
            best = Some((count, pts[i], dir));
        }
    }
    let (count, anchor, dir) = best.ok_or(NoLine)?;
    if (count as f64) < config.min_inlier_ratio * n as f64 {
        return Err(NoLine);
    }
    let inliers: Vec<Vector2<f64>> = pts
        .iter()
        .filter(|p| perpendicular_distance(p, &anchor, &dir) <= config.inlier_tol_px)
        .copied()
        .collect();
    let (c, dir) = tls_line(&inliers);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &inliers {
        let t = (p - c).dot(&dir);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if hi - lo <= 0.0 {
        return Err(NoLine);
    }
    let offset = Vector2::new(ox as f64, oy as f64);
    let a = c + dir * lo + offset;
    let b = c + dir * hi + offset;
    let (m1, m2) = if (a.y, a.x) <= (b.y, b.x) { (a, b) } else { (b, a) };
    Ok(DetectedLine {
        m1,
        m2,
        semantic,
        support: count,
    })
}

pub fn region_centroid(region: &Region, semantic: SemanticClass) -> DetectedPoint {
    let n = region.len() as f64;
    let (sx, sy) = region
        .pixels
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
    DetectedPoint {
        m: Vector2::new(sx / n, sy / n),
        semantic,
        support: region.len(),
    }
}

fn mix_seed(seed: u64, class: SemanticClass, region: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        .wrapping_add((class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((region as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn extract_class(
    raster: &ProbabilityRaster,
    class: SemanticClass,
    config: &ExtractionConfig,
) -> FrameDetections {
    let binary = binarize(raster, config.threshold);
    let regions = region_grow(&binary, config.min_region_px);
    let mut out = FrameDetections::default();
    for (i, region) in regions.iter().enumerate() {
        if class.is_line_shaped() {
            if let Ok(line) = fit_region_line(region, class, config, mix_seed(config.seed, class, i)) {
                out.lines.push(line);
            }
        } else {
            out.points.push(region_centroid(region, class));
        }
    }
    out
}

pub fn extract_features(mask: &SemanticMask, config: &ExtractionConfig) -> FrameDetections {
    let mut out = FrameDetections::default();
    for (&class, raster) in &mask.classes {
        let found = extract_class(raster, class, config);
        out.lines.extend(found.lines);
        out.points.extend(found.points);
    }
    out
}
