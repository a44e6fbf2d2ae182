//! File-level workflows behind the `semloc` commands.
//!
//! A run is described by a TOML [`RunManifest`]; relative paths inside it
//! resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{closest_correspond, LocalizerConfig};
use crate::camera::{CameraPose, Intrinsics};
use crate::feature_extract::{extract_features, ExtractionConfig, SemanticMask};
use crate::formats::{self, LabeledCluster, ParseError};
use crate::map_model::{
    fit_line_landmark, fit_point_landmark, parse_map, preselect, serialize_map, LanePolyline, MapError,
    RoughPose, SemanticClass, SemanticMap,
};
use crate::pipeline::{evaluate, run_sequence, FrameError, FrameInput, FrameRecord, FrameStatus, PipelineError, TrajectorySummary};
use crate::residual::PoseProblem;
use crate::solver::{cost_landscape, LandscapeGrid, PoseParam};
use crate::synthworld::{generate_world, render_masks, render_sequence, WorldConfig};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("{}", path.display())]
    Manifest {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cluster {id}")]
    Cluster {
        id: u32,
        #[source]
        source: MapError,
    },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Invalid(String),
}

fn read(path: &Path) -> Result<String, WorkflowError> {
    fs::read_to_string(path).map_err(|source| WorkflowError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), WorkflowError> {
    fs::write(path, text).map_err(|source| WorkflowError::Io {
        path: path.to_owned(),
        source,
    })
}

fn parsed<T>(path: &Path, r: Result<T, ParseError>) -> Result<T, WorkflowError> {
    r.map_err(|source| WorkflowError::Parse {
        path: path.to_owned(),
        source,
    })
}

/// Inputs and configuration of one localization run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunManifest {
    pub map: PathBuf,
    /// Detection file; takes precedence over `masks`.
    pub detections: Option<PathBuf>,
    /// Directory of `<frame>_<CLASS>.pgm` semantic masks.
    pub masks: Option<PathBuf>,
    /// Road index assigned to frames read from masks.
    pub road_index: u32,
    /// Defaults to the built-in camera when absent.
    pub intrinsics: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Pose file whose first two poses start the sequence; falls back to
    /// `ground_truth`.
    pub bootstrap: Option<PathBuf>,
    pub localizer: LocalizerConfig,
    pub extraction: ExtractionConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, WorkflowError> {
        let text = read(path)?;
        let mut manifest: RunManifest = toml::from_str(&text).map_err(|source| WorkflowError::Manifest {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.resolve(base);
        Ok(manifest)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.map);
        for p in [
            &mut self.detections,
            &mut self.masks,
            &mut self.intrinsics,
            &mut self.ground_truth,
            &mut self.bootstrap,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Sets every seed of the run.
    pub fn set_seed(&mut self, seed: u64) {
        self.localizer.association.rng_seed = seed;
        self.extraction.seed = seed;
    }
}

/// Fits one landmark per cluster. Lane clusters become polylines ordered
/// along their principal direction.
pub fn compile_map(clusters: &[LabeledCluster]) -> Result<SemanticMap, WorkflowError> {
    let mut map = SemanticMap::default();
    for c in clusters {
        let wrap = |source| WorkflowError::Cluster { id: c.id, source };
        match c.semantic {
            SemanticClass::LaneLine => map.lanes.push(lane_polyline(c).map_err(wrap)?),
            class if class.is_line_shaped() => {
                map.lines.push(fit_line_landmark(c.id, &c.points, class, c.road_index).map_err(wrap)?)
            }
            class => map.points.push(fit_point_landmark(c.id, &c.points, class, c.road_index).map_err(wrap)?),
        }
    }
    map.validate()?;
    Ok(map)
}

fn lane_polyline(c: &LabeledCluster) -> Result<LanePolyline, MapError> {
    if c.points.len() < 2 {
        return Err(if c.points.is_empty() {
            MapError::EmptyCluster
        } else {
            MapError::DegenerateCluster
        });
    }
    let n = c.points.len() as f64;
    let mean = c.points.iter().sum::<Vector3<f64>>() / n;
    let scatter = c
        .points
        .iter()
        .fold(nalgebra::Matrix3::zeros(), |acc, p| acc + (p - mean) * (p - mean).transpose());
    let eig = SymmetricEigen::new(scatter);
    let axis = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
    let mut points = c.points.clone();
    points.sort_by(|a, b| (a - mean).dot(&axis).total_cmp(&(b - mean).dot(&axis)));
    Ok(LanePolyline {
        id: c.id,
        points,
        road_index: c.road_index,
    })
}

pub fn compile_map_file(clusters: &Path, out: &Path) -> Result<SemanticMap, WorkflowError> {
    let text = read(clusters)?;
    let clusters = parsed(clusters, formats::parse_clusters(&text))?;
    let map = compile_map(&clusters)?;
    write(out, &serialize_map(&map))?;
    Ok(map)
}

pub fn load_map(path: &Path) -> Result<SemanticMap, WorkflowError> {
    let text = read(path)?;
    let map = parsed(path, parse_map(&text))?;
    map.validate()?;
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub frames: usize,
    pub line_landmarks: usize,
    pub point_landmarks: usize,
    pub lanes: usize,
    pub map_bytes: usize,
    pub mask_frames: usize,
}

/// Writes a synthetic run into `out_dir`: map, detections, ground truth,
/// intrinsics, a manifest and, every `mask_stride` frames (0 disables),
/// semantic masks.
pub fn synth(out_dir: &Path, config: &WorldConfig, mask_stride: usize) -> Result<SynthSummary, WorkflowError> {
    config.validate().map_err(WorkflowError::Invalid)?;
    let mkdir = |p: &Path| {
        fs::create_dir_all(p).map_err(|source| WorkflowError::Io {
            path: p.to_owned(),
            source,
        })
    };
    mkdir(out_dir)?;
    let world = generate_world(config);
    let rendered = render_sequence(&world, config);
    let frames: Vec<FrameInput> = rendered
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_input(i as u64, 0))
        .collect();
    let truth: Vec<(u64, CameraPose)> = world.trajectory.iter().enumerate().map(|(i, p)| (i as u64, *p)).collect();

    let map_text = serialize_map(&world.map);
    write(&out_dir.join("map.txt"), &map_text)?;
    write(&out_dir.join("detections.txt"), &formats::write_detections(&frames))?;
    write(&out_dir.join("groundtruth.txt"), &formats::write_ground_truth(&truth))?;
    write(&out_dir.join("intrinsics.txt"), &formats::write_intrinsics(&config.intrinsics))?;

    let mut mask_frames = 0;
    if mask_stride > 0 {
        let dir = out_dir.join("masks");
        mkdir(&dir)?;
        for (i, pose) in world.trajectory.iter().enumerate().step_by(mask_stride) {
            let mask = render_masks(&world.map, pose, config);
            for (class, raster) in &mask.classes {
                let path = dir.join(formats::mask_file_name(i as u64, *class));
                formats::write_pgm(&path, raster).map_err(|source| WorkflowError::Io { path, source })?;
            }
            mask_frames += 1;
        }
    }

    let mut manifest = RunManifest {
        map: "map.txt".into(),
        detections: Some("detections.txt".into()),
        masks: (mask_stride > 0).then(|| "masks".into()),
        intrinsics: Some("intrinsics.txt".into()),
        ground_truth: Some("groundtruth.txt".into()),
        ..Default::default()
    };
    manifest.localizer.residual.camera_height_m = config.camera_height_m;
    manifest.set_seed(config.rng_seed);
    write(&out_dir.join("manifest.toml"), &manifest.to_toml())?;

    Ok(SynthSummary {
        frames: frames.len(),
        line_landmarks: world.map.lines.len(),
        point_landmarks: world.map.points.len(),
        lanes: world.map.lanes.len(),
        map_bytes: map_text.len(),
        mask_frames,
    })
}

/// Reads a directory of `<frame>_<CLASS>.pgm` files and extracts features
/// per frame. Classes without a file are treated as empty.
pub fn frames_from_masks(
    dir: &Path,
    road_index: u32,
    config: &ExtractionConfig,
) -> Result<Vec<FrameInput>, WorkflowError> {
    let entries = fs::read_dir(dir).map_err(|source| WorkflowError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let mut by_frame: BTreeMap<u64, Vec<(SemanticClass, PathBuf)>> = BTreeMap::new();
    for entry in entries {
        let path = entry
            .map_err(|source| WorkflowError::Io {
                path: dir.to_owned(),
                source,
            })?
            .path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some((frame, token)) = stem.split_once('_') else {
            continue;
        };
        let (Ok(frame), Ok(class)) = (frame.parse::<u64>(), token.parse::<SemanticClass>()) else {
            continue;
        };
        by_frame.entry(frame).or_default().push((class, path));
    }
    let mut frames = Vec::with_capacity(by_frame.len());
    for (frame, files) in by_frame {
        let mut rasters = Vec::with_capacity(files.len());
        for (class, path) in files {
            let raster = formats::read_pgm(&path).map_err(|source| WorkflowError::Image { path, source })?;
            rasters.push((class, raster));
        }
        let (w, h) = (rasters[0].1.width, rasters[0].1.height);
        if rasters.iter().any(|(_, r)| r.width != w || r.height != h) {
            return Err(WorkflowError::Invalid(format!("frame {frame}: mask sizes differ")));
        }
        let mut mask = SemanticMask::empty(w, h);
        mask.classes.extend(rasters);
        let cfg = ExtractionConfig {
            seed: config.seed.wrapping_add(frame),
            ..*config
        };
        frames.push(FrameInput {
            frame_id: frame,
            road_index,
            detections: extract_features(&mask, &cfg),
        });
    }
    Ok(frames)
}

/// Everything a run needs, loaded from disk.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub map: SemanticMap,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameInput>,
    pub ground_truth: Option<Vec<(u64, CameraPose)>>,
    pub bootstrap: Vec<CameraPose>,
}

fn load_poses(path: &Path) -> Result<Vec<(u64, CameraPose)>, WorkflowError> {
    let text = read(path)?;
    parsed(path, formats::parse_ground_truth(&text))
}

pub fn load_inputs(manifest: &RunManifest) -> Result<RunInputs, WorkflowError> {
    let map = load_map(&manifest.map)?;
    let intrinsics = match &manifest.intrinsics {
        Some(p) => parsed(p, formats::parse_intrinsics(&read(p)?))?,
        None => Intrinsics::default(),
    };
    let frames = match (&manifest.detections, &manifest.masks) {
        (Some(p), _) => parsed(p, formats::parse_detections(&read(p)?))?,
        (None, Some(dir)) => frames_from_masks(dir, manifest.road_index, &manifest.extraction)?,
        (None, None) => return Err(WorkflowError::Invalid("manifest names neither detections nor masks".into())),
    };
    let ground_truth = manifest.ground_truth.as_deref().map(load_poses).transpose()?;
    let bootstrap = match (&manifest.bootstrap, &ground_truth) {
        (Some(p), _) => load_poses(p)?,
        (None, Some(gt)) => {
            // Bootstrap poses must belong to the first two frames being run.
            let wanted: Vec<u64> = frames.iter().take(2).map(|f| f.frame_id).collect();
            wanted
                .iter()
                .filter_map(|id| gt.iter().find(|(g, _)| g == id).copied())
                .collect()
        }
        (None, None) => Vec::new(),
    };
    Ok(RunInputs {
        map,
        intrinsics,
        frames,
        ground_truth,
        bootstrap: bootstrap.into_iter().map(|(_, p)| p).take(2).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeOutput {
    pub records: Vec<FrameRecord>,
    pub csv: String,
    /// Error summary over the non-bootstrapped frames, when ground truth is
    /// available.
    pub summary: Option<TrajectorySummary>,
}

pub fn localize(manifest: &RunManifest) -> Result<LocalizeOutput, WorkflowError> {
    manifest
        .localizer
        .association
        .validate()
        .map_err(WorkflowError::Invalid)?;
    let inputs = load_inputs(manifest)?;
    let result = run_sequence(
        &inputs.map,
        &inputs.frames,
        &inputs.bootstrap,
        &inputs.intrinsics,
        &manifest.localizer,
    )?;
    let summary = match &inputs.ground_truth {
        Some(gt) => Some(evaluate_against(&result.records, gt)?.1),
        None => None,
    };
    Ok(LocalizeOutput {
        csv: formats::write_results(&result.records),
        records: result.records,
        summary,
    })
}

/// Errors of the non-bootstrapped records against ground truth matched by
/// frame id.
pub fn evaluate_against(
    records: &[FrameRecord],
    ground_truth: &[(u64, CameraPose)],
) -> Result<(Vec<(u64, FrameError)>, TrajectorySummary), WorkflowError> {
    let truth: BTreeMap<u64, CameraPose> = ground_truth.iter().copied().collect();
    let kept: Vec<FrameRecord> = records
        .iter()
        .filter(|r| r.status != FrameStatus::Bootstrapped)
        .cloned()
        .collect();
    let gt = kept
        .iter()
        .map(|r| {
            truth
                .get(&r.frame_id)
                .copied()
                .ok_or_else(|| WorkflowError::Invalid(format!("no ground truth for frame {}", r.frame_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (errors, summary) = evaluate(&kept, &gt)?;
    Ok((kept.iter().map(|r| r.frame_id).zip(errors).collect(), summary))
}

/// Plain-text accuracy report of a results file against ground truth.
pub fn eval_report(results: &Path, ground_truth: &Path) -> Result<String, WorkflowError> {
    let records = parsed(results, formats::parse_results(&read(results)?))?;
    let gt = load_poses(ground_truth)?;
    let (_, s) = evaluate_against(&records, &gt)?;
    let count = |st| records.iter().filter(|r| r.status == st).count();
    let mut out = String::new();
    let _ = writeln!(out, "frames          {}", records.len());
    let _ = writeln!(out, "bootstrapped    {}", count(FrameStatus::Bootstrapped));
    let _ = writeln!(out, "localized       {}", count(FrameStatus::Localized));
    let _ = writeln!(out, "coasted         {}", count(FrameStatus::Coasted));
    let _ = writeln!(out, "evaluated       {}", s.n_frames);
    let _ = writeln!(out, "rms_position_m  {:.4}", s.rms_position);
    let _ = writeln!(out, "mean_position_m {:.4}", s.mean_position);
    let _ = writeln!(out, "max_position_m  {:.4}", s.max_position);
    let _ = writeln!(out, "rms_lateral_m   {:.4}", s.rms_lateral);
    let _ = writeln!(out, "rms_longitud_m  {:.4}", s.rms_longitudinal);
    let _ = writeln!(out, "rms_vertical_m  {:.4}", s.rms_vertical);
    let _ = writeln!(out, "mean_angle_deg  {:.4}", s.mean_angle.to_degrees());
    let _ = writeln!(out, "max_angle_deg   {:.4}", s.max_angle.to_degrees());
    let _ = writeln!(out, "below_0.5m      {:.4}", s.fraction_below_half_meter);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapeRequest {
    pub frame: u64,
    pub dim_a: PoseParam,
    pub dim_b: PoseParam,
    pub half_range_a: f64,
    pub half_range_b: f64,
    pub samples: usize,
}

/// √cost grid around the ground-truth pose of one frame, with the
/// correspondences found at that pose under the re-matching gates.
pub fn landscape(manifest: &RunManifest, req: &LandscapeRequest) -> Result<LandscapeGrid, WorkflowError> {
    let inputs = load_inputs(manifest)?;
    let frame = inputs
        .frames
        .iter()
        .find(|f| f.frame_id == req.frame)
        .ok_or_else(|| WorkflowError::Invalid(format!("frame {} not found", req.frame)))?;
    let center = inputs
        .ground_truth
        .as_ref()
        .and_then(|gt| gt.iter().find(|(id, _)| *id == req.frame))
        .map(|(_, p)| *p)
        .ok_or_else(|| WorkflowError::Invalid(format!("no ground truth for frame {}", req.frame)))?;
    let cfg = &manifest.localizer;
    let rough = RoughPose::new(center.center, center.heading(), frame.road_index);
    let pre = preselect(&inputs.map, &rough, &cfg.preselect);
    let k = &inputs.intrinsics;
    let a = &cfg.association;
    let corr = closest_correspond(&pre, &frame.detections, &center, k, a.d3, a.d4);
    let y_lane = crate::residual::nearest_lane_height(&pre, &center.center);
    let problem = PoseProblem::new(&pre, &frame.detections, &corr, k, cfg.residual, y_lane)
        .map_err(|e| WorkflowError::Invalid(format!("frame {}: {e}", req.frame)))?;
    cost_landscape(
        &problem,
        &center,
        req.dim_a,
        req.dim_b,
        (req.half_range_a, req.half_range_b),
        req.samples,
    )
    .map_err(|e| WorkflowError::Invalid(e.to_string()))
}
