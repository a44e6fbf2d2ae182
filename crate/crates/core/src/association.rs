//! Simultaneous data association and localization.
//!
//! [`closest_correspond`] pairs every projected landmark with its nearest
//! same-class detection inside a pixel gate. [`associate_and_localize`]
//! draws small hypothesis subsets (4 lines + 1 point by default) from the
//! loosely gated initial matching, solves the pose on each, and accepts the
//! first hypothesis whose pose survives validation, tight re-matching and a
//! final solve on the re-matched set.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{normalize_angle, project_line, project_point, CameraPose, Intrinsics};
use crate::feature_extract::FrameDetections;
use crate::map_model::{PreselectConfig, PreselectedSet};
use crate::residual::{
    line_distance, nearest_lane_height, point_distance, CorrespondenceSet, PoseProblem,
    ResidualConfig,
};
use crate::solver::{solve_pose, SolveResult, SolverConfig};

/// Which pose the tight re-matching step projects the map with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RematchPose {
    /// The pose solved from the hypothesis.
    #[default]
    ValidatedPose,
    /// The initial (predicted) pose.
    InitialPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationConfig {
    /// Initial line gate, pixels.
    pub d1: f64,
    /// Initial point gate, pixels.
    pub d2: f64,
    /// Re-matching line gate, pixels.
    pub d3: f64,
    /// Re-matching point gate, pixels.
    pub d4: f64,
    /// Maximum [`pose_distance`] between a hypothesis pose and the initial pose.
    pub d5: f64,
    /// Maximum √cost of a hypothesis solve.
    pub r1: f64,
    /// Maximum √cost of the final solve per correspondence.
    pub r2: f64,
    pub hypothesis_lines: usize,
    pub hypothesis_points: usize,
    pub max_hypotheses: usize,
    pub rng_seed: u64,
    pub rematch_around: RematchPose,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            d1: 300.0,
            d2: 300.0,
            d3: 10.0,
            d4: 10.0,
            d5: 30.0,
            r1: 200.0,
            r2: 4.0,
            hypothesis_lines: 4,
            hypothesis_points: 1,
            max_hypotheses: 500,
            rng_seed: 0,
            rematch_around: RematchPose::ValidatedPose,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<(), String> {
        let gates = [self.d1, self.d2, self.d3, self.d4, self.d5, self.r1, self.r2];
        if gates.iter().any(|g| !(*g > 0.0)) {
            return Err("association thresholds must be positive".into());
        }
        if self.d3 > self.d1 || self.d4 > self.d2 {
            return Err("re-matching gates must not exceed the initial gates".into());
        }
        if self.hypothesis_lines + self.hypothesis_points == 0 || self.max_hypotheses == 0 {
            return Err("hypothesis size and count must be positive".into());
        }
        Ok(())
    }
}

/// Every tunable of the per-frame localizer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    pub preselect: PreselectConfig,
    pub residual: ResidualConfig,
    pub solver: SolverConfig,
    pub association: AssociationConfig,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssociationError {
    #[error("no hypothesis produced a valid association ({hypotheses_tried} tried)")]
    NoValidAssociation { hypotheses_tried: usize },
    #[error("initial pose is not finite")]
    NonFiniteInit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub solve: SolveResult,
    pub correspondences: CorrespondenceSet,
    /// Size of the loosely gated initial matching.
    pub initial_count: usize,
    pub hypotheses_tried: usize,
}

/// Distance between two poses with positions in meters and angles in
/// degrees.
pub fn pose_distance(a: &CameraPose, b: &CameraPose) -> f64 {
    let dc = (a.center - b.center).norm_squared();
    let da = [a.yaw - b.yaw, a.pitch - b.pitch, a.roll - b.roll]
        .iter()
        .map(|d| normalize_angle(*d).to_degrees().powi(2))
        .sum::<f64>();
    (dc + da).sqrt()
}

/// Nearest same-class detection for every projectable landmark, kept when
/// within the gate. Several landmarks may claim the same detection; ties
/// go to the lowest detection index.
pub fn closest_correspond(
    preselected: &PreselectedSet,
    detections: &FrameDetections,
    pose: &CameraPose,
    k: &Intrinsics,
    gate_line: f64,
    gate_point: f64,
) -> CorrespondenceSet {
    let mut out = CorrespondenceSet::default();
    for (i, landmark) in preselected.lines.iter().enumerate() {
        let Ok(proj) = project_line(landmark, pose, k) else {
            continue;
        };
        let best = detections
            .lines
            .iter()
            .enumerate()
            .filter(|(_, d)| d.semantic == landmark.semantic)
            .filter_map(|(j, d)| line_distance(&proj, d).ok().map(|dist| (j, dist)))
            .fold(None, |acc: Option<(usize, f64)>, (j, dist)| match acc {
                Some((_, best)) if best <= dist => acc,
                _ => Some((j, dist)),
            });
        if let Some((j, dist)) = best {
            if dist <= gate_line {
                out.line_pairs.push((i, j));
            }
        }
    }
    for (i, landmark) in preselected.points.iter().enumerate() {
        let Ok(u) = project_point(&landmark.p, pose, k) else {
            continue;
        };
        let best = detections
            .points
            .iter()
            .enumerate()
            .filter(|(_, d)| d.semantic == landmark.semantic)
            .map(|(j, d)| (j, point_distance(&u, d)))
            .fold(None, |acc: Option<(usize, f64)>, (j, dist)| match acc {
                Some((_, best)) if best <= dist => acc,
                _ => Some((j, dist)),
            });
        if let Some((j, dist)) = best {
            if dist <= gate_point {
                out.point_pairs.push((i, j));
            }
        }
    }
    out
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..=n - (k - cur.len()) {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Hypothesis sizes (lines, points) for an initial matching with `nl` line
/// and `np` point pairs. Scarce kinds are used in full and the other kind
/// tops the hypothesis up to the requested total.
pub fn hypothesis_shape(nl: usize, np: usize, config: &AssociationConfig) -> (usize, usize) {
    let mut kl = config.hypothesis_lines.min(nl);
    let mut kp = config.hypothesis_points.min(np);
    let target = (config.hypothesis_lines + config.hypothesis_points).min(nl + np);
    while kl + kp < target {
        if kl < nl {
            kl += 1;
        } else {
            kp += 1;
        }
    }
    (kl, kp)
}

/// Distinct hypotheses drawn from `c0` in seeded random order.
pub fn draw_hypotheses(c0: &CorrespondenceSet, config: &AssociationConfig) -> Vec<CorrespondenceSet> {
    if c0.len() < 3 {
        return if c0.is_empty() { vec![] } else { vec![c0.clone()] };
    }
    let (nl, np) = (c0.line_pairs.len(), c0.point_pairs.len());
    let (kl, kp) = hypothesis_shape(nl, np, config);
    let total = binomial(nl, kl).saturating_mul(binomial(np, kp));
    let cap = config.max_hypotheses;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    let picks: Vec<(Vec<usize>, Vec<usize>)> = if total <= (4 * cap as u128).max(64) {
        let line_sets = combinations(nl, kl);
        let point_sets = combinations(np, kp);
        let mut all: Vec<(Vec<usize>, Vec<usize>)> = line_sets
            .iter()
            .flat_map(|ls| point_sets.iter().map(move |ps| (ls.clone(), ps.clone())))
            .collect();
        all.shuffle(&mut rng);
        all.truncate(cap);
        all
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(cap);
        while out.len() < cap {
            let mut ls = sample(&mut rng, nl, kl).into_vec();
            let mut ps = sample(&mut rng, np, kp).into_vec();
            ls.sort_unstable();
            ps.sort_unstable();
            if seen.insert((ls.clone(), ps.clone())) {
                out.push((ls, ps));
            }
        }
        out
    };

    picks
        .into_iter()
        .map(|(ls, ps)| CorrespondenceSet {
            line_pairs: ls.iter().map(|&i| c0.line_pairs[i]).collect(),
            point_pairs: ps.iter().map(|&i| c0.point_pairs[i]).collect(),
        })
        .collect()
}

fn solve_on(
    preselected: &PreselectedSet,
    detections: &FrameDetections,
    corr: &CorrespondenceSet,
    k: &Intrinsics,
    config: &LocalizerConfig,
    y_lane: Option<f64>,
    init: &CameraPose,
) -> Option<SolveResult> {
    let problem = PoseProblem::new(preselected, detections, corr, k, config.residual, y_lane).ok()?;
    solve_pose(&problem, init, &config.solver).ok()
}

pub fn associate_and_localize(
    preselected: &PreselectedSet,
    detections: &FrameDetections,
    init: &CameraPose,
    k: &Intrinsics,
    config: &LocalizerConfig,
) -> Result<Localization, AssociationError> {
    if !init.is_finite() {
        return Err(AssociationError::NonFiniteInit);
    }
    let assoc = &config.association;
    let y_lane = nearest_lane_height(preselected, &init.center);
    let c0 = closest_correspond(preselected, detections, init, k, assoc.d1, assoc.d2);
    let hypotheses = draw_hypotheses(&c0, assoc);

    for (tried, hypothesis) in hypotheses.iter().enumerate() {
        let Some(trial) = solve_on(preselected, detections, hypothesis, k, config, y_lane, init)
        else {
            continue;
        };
        if trial.sqrt_cost > assoc.r1 || pose_distance(&trial.pose, init) > assoc.d5 {
            continue;
        }
        let rematch_pose = match assoc.rematch_around {
            RematchPose::ValidatedPose => trial.pose,
            RematchPose::InitialPose => *init,
        };
        let refined = closest_correspond(preselected, detections, &rematch_pose, k, assoc.d3, assoc.d4);
        if refined.is_empty() {
            continue;
        }
        let Some(fin) = solve_on(preselected, detections, &refined, k, config, y_lane, &trial.pose)
        else {
            continue;
        };
        let n = refined.len();
        if fin.sqrt_cost <= assoc.r2 * n as f64 && 2 * n >= c0.len() {
            return Ok(Localization {
                solve: fin,
                correspondences: refined,
                initial_count: c0.len(),
                hypotheses_tried: tried + 1,
            });
        }
    }
    Err(AssociationError::NoValidAssociation {
        hypotheses_tried: hypotheses.len(),
    })
}
