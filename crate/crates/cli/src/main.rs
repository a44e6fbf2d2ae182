use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use semloc::association::RematchPose;
use semloc::solver::PoseParam;
use semloc::synthworld::WorldConfig;
use semloc::workflow::{self, LandscapeRequest, RunManifest};

#[derive(Parser)]
#[command(name = "semloc", version, about = "Monocular localization against a compact semantic map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit landmarks to labeled point clusters and write a map file.
    CompileMap {
        /// Cluster file: `CLUSTER <id> <CLASS> <road>` headers, each followed by `x y z` rows.
        clusters: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Generate a synthetic corridor: map, detections, ground truth, masks.
    Synth(SynthArgs),
    /// Localize every frame of a run and write the result CSV.
    Localize {
        #[arg(long)]
        manifest: PathBuf,
        /// Result CSV; printed to stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare a result CSV against ground truth.
    Eval {
        results: PathBuf,
        ground_truth: PathBuf,
    },
    /// Sample the cost over two pose parameters around a ground-truth pose.
    Landscape {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        frame: u64,
        /// Two pose parameters, e.g. `cz,cx` or `yaw,pitch`.
        #[arg(long, value_delimiter = ',', default_values = ["cz", "cx"])]
        dims: Vec<PoseParam>,
        /// Half ranges (meters or radians) of the two dimensions.
        #[arg(long, value_delimiter = ',', default_values_t = [2.0, 2.0])]
        range: Vec<f64>,
        #[arg(long, default_value_t = 41)]
        samples: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    out: PathBuf,
    /// TOML world description; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gaussian endpoint noise, pixels.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    outlier_rate: Option<f64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    length: Option<f64>,
    #[arg(long)]
    curvature: Option<f64>,
    /// Write masks every N frames; 0 disables.
    #[arg(long, default_value_t = 10)]
    mask_stride: usize,
}

/// Overrides of manifest configuration fields.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d1: Option<f64>,
    #[arg(long)]
    d2: Option<f64>,
    #[arg(long)]
    d3: Option<f64>,
    #[arg(long)]
    d4: Option<f64>,
    #[arg(long)]
    d5: Option<f64>,
    #[arg(long)]
    r1: Option<f64>,
    #[arg(long)]
    r2: Option<f64>,
    #[arg(long)]
    hypothesis_lines: Option<usize>,
    #[arg(long)]
    hypothesis_points: Option<usize>,
    #[arg(long)]
    max_hypotheses: Option<usize>,
    /// Re-match around the initial pose instead of the hypothesis pose.
    #[arg(long)]
    rematch_initial: bool,
    #[arg(long)]
    lambda_n: Option<f64>,
    #[arg(long)]
    camera_height: Option<f64>,
    #[arg(long)]
    preselect_threshold: Option<f64>,
    #[arg(long)]
    lane_near: Option<f64>,
    #[arg(long)]
    lane_far: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    initial_damping: Option<f64>,
    #[arg(long)]
    step_tolerance: Option<f64>,
    #[arg(long)]
    cost_tolerance: Option<f64>,
    #[arg(long)]
    mask_threshold: Option<f64>,
    #[arg(long)]
    min_region_px: Option<usize>,
    #[arg(long)]
    inlier_tol: Option<f64>,
    #[arg(long)]
    ransac_iterations: Option<usize>,
}

fn set<T: Copy>(field: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *field = v;
    }
}

impl Overrides {
    fn apply(&self, m: &mut RunManifest) {
        if let Some(seed) = self.seed {
            m.set_seed(seed);
        }
        let l = &mut m.localizer;
        let a = &mut l.association;
        set(&mut a.d1, self.d1);
        set(&mut a.d2, self.d2);
        set(&mut a.d3, self.d3);
        set(&mut a.d4, self.d4);
        set(&mut a.d5, self.d5);
        set(&mut a.r1, self.r1);
        set(&mut a.r2, self.r2);
        set(&mut a.hypothesis_lines, self.hypothesis_lines);
        set(&mut a.hypothesis_points, self.hypothesis_points);
        set(&mut a.max_hypotheses, self.max_hypotheses);
        if self.rematch_initial {
            a.rematch_around = RematchPose::InitialPose;
        }
        set(&mut l.residual.lambda_n, self.lambda_n);
        set(&mut l.residual.camera_height_m, self.camera_height);
        set(&mut l.preselect.threshold, self.preselect_threshold);
        set(&mut l.preselect.lane_near_m, self.lane_near);
        set(&mut l.preselect.lane_far_m, self.lane_far);
        set(&mut l.solver.max_iterations, self.max_iterations);
        set(&mut l.solver.initial_damping, self.initial_damping);
        set(&mut l.solver.step_tolerance, self.step_tolerance);
        set(&mut l.solver.cost_tolerance, self.cost_tolerance);
        let e = &mut m.extraction;
        set(&mut e.threshold, self.mask_threshold);
        set(&mut e.min_region_px, self.min_region_px);
        set(&mut e.inlier_tol_px, self.inlier_tol);
        set(&mut e.ransac_iterations, self.ransac_iterations);
    }
}

fn load_manifest(path: &Path, overrides: &Overrides) -> Result<RunManifest> {
    let mut m = RunManifest::load(path)?;
    overrides.apply(&mut m);
    Ok(m)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            // A closed pipe (`| head`) is not an error.
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing to stdout"),
            _ => Ok(()),
        },
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<WorldConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => WorldConfig::default(),
    };
    set(&mut cfg.rng_seed, args.seed);
    set(&mut cfg.pixel_noise_px, args.noise);
    set(&mut cfg.outlier_rate, args.outlier_rate);
    set(&mut cfg.dropout_rate, args.dropout_rate);
    set(&mut cfg.corridor_length_m, args.length);
    set(&mut cfg.curvature_per_m, args.curvature);
    let s = workflow::synth(&args.out, &cfg, args.mask_stride)?;
    let report = format!(
        "frames          {}\nline_landmarks  {}\npoint_landmarks {}\nlanes           {}\nmap_bytes       {}\nmask_frames     {}\nseed            {}\n",
        s.frames, s.line_landmarks, s.point_landmarks, s.lanes, s.map_bytes, s.mask_frames, cfg.rng_seed
    );
    emit(None, &report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CompileMap { clusters, out } => {
            let map = workflow::compile_map_file(&clusters, &out)?;
            eprintln!(
                "{} line landmarks, {} point landmarks, {} lanes",
                map.lines.len(),
                map.points.len(),
                map.lanes.len()
            );
        }
        Command::Synth(args) => synth(&args)?,
        Command::Localize {
            manifest,
            out,
            overrides,
        } => {
            let m = load_manifest(&manifest, &overrides)?;
            let result = workflow::localize(&m)?;
            emit(out.as_deref(), &result.csv)?;
            let count = |s| result.records.iter().filter(|r| r.status == s).count();
            use semloc::pipeline::FrameStatus::*;
            eprintln!("seed            {}", m.localizer.association.rng_seed);
            eprintln!("frames          {}", result.records.len());
            eprintln!("localized       {}", count(Localized));
            eprintln!("coasted         {}", count(Coasted));
            if let Some(s) = result.summary {
                eprintln!("rms_position_m  {:.6}", s.rms_position);
                eprintln!("max_position_m  {:.6}", s.max_position);
                eprintln!("mean_angle_deg  {:.6}", s.mean_angle.to_degrees());
                eprintln!("below_0.5m      {:.4}", s.fraction_below_half_meter);
            }
        }
        Command::Eval {
            results,
            ground_truth,
        } => emit(None, &workflow::eval_report(&results, &ground_truth)?)?,
        Command::Landscape {
            manifest,
            frame,
            dims,
            range,
            samples,
            out,
            overrides,
        } => {
            anyhow::ensure!(dims.len() == 2, "--dims takes two pose parameters");
            anyhow::ensure!(range.len() == 2, "--range takes two half ranges");
            let m = load_manifest(&manifest, &overrides)?;
            let req = LandscapeRequest {
                frame,
                dim_a: dims[0],
                dim_b: dims[1],
                half_range_a: range[0],
                half_range_b: range[1],
                samples,
            };
            let grid = workflow::landscape(&m, &req)?;
            emit(out.as_deref(), &grid.to_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
