//! Levenberg-Marquardt over the six pose parameters.
//!
//! Each iteration solves `(JᵀJ + μ·diag(JᵀJ)) δ = -Jᵀr`. A step is taken only
//! if it lowers the cost; otherwise μ grows and the step is recomputed.
//! Angles are updated additively and wrapped back into (-π, π].

use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraPose;
use crate::residual::{EndpointForm, PoseProblem, ResidualJacobian};

/// Residual vector and Jacobian as functions of the pose.
pub trait PoseObjective {
    fn residuals(&self, pose: &CameraPose) -> DVector<f64>;
    fn jacobian(&self, pose: &CameraPose) -> ResidualJacobian;

    fn cost(&self, pose: &CameraPose) -> f64 {
        self.residuals(pose).norm_squared()
    }
}

impl PoseObjective for PoseProblem<'_> {
    fn residuals(&self, pose: &CameraPose) -> DVector<f64> {
        PoseProblem::residuals(self, pose)
    }

    fn jacobian(&self, pose: &CameraPose) -> ResidualJacobian {
        PoseProblem::jacobian(self, pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub initial_damping: f64,
    pub damping_up: f64,
    /// Divisor applied to the damping after an accepted step.
    pub damping_down: f64,
    pub max_iterations: usize,
    /// Minimum norm of the (meters, radians) update.
    pub step_tolerance: f64,
    /// Minimum relative cost decrease of an accepted step.
    pub cost_tolerance: f64,
    pub max_damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            max_iterations: 100,
            step_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            max_damping: 1e10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationReason {
    ZeroResidual,
    ZeroGradient,
    StepTolerance,
    CostTolerance,
    MaxDamping,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub pose: CameraPose,
    pub final_cost: f64,
    /// Square root of the final cost.
    pub sqrt_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: TerminationReason,
    /// Cost at the initial pose followed by the cost after each accepted step.
    pub cost_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("objective is not finite at the initial pose")]
    NonFiniteInitialCost,
    #[error("damped normal equations could not be solved at any damping up to the limit")]
    SingularNormalEquations,
}

fn damped_step(a: &Matrix6<f64>, g: &Vector6<f64>, mu: f64) -> Option<Vector6<f64>> {
    let max_diag = a.diagonal().max();
    let floor = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let mut m = *a;
    for i in 0..6 {
        m[(i, i)] += mu * a[(i, i)].max(floor);
    }
    let chol = m.cholesky()?;
    let step = chol.solve(&(-g));
    step.iter().all(|x| x.is_finite()).then_some(step)
}

pub fn solve<O: PoseObjective + ?Sized>(
    objective: &O,
    init: &CameraPose,
    config: &SolverConfig,
) -> Result<SolveResult, SolveError> {
    let mut pose = *init;
    let mut r = objective.residuals(&pose);
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(SolveError::NonFiniteInitialCost);
    }
    let mut history = vec![cost];
    let mut mu = config.initial_damping;
    let mut iterations = 0;
    let mut termination = TerminationReason::MaxIterations;

    'outer: while iterations < config.max_iterations {
        if cost == 0.0 {
            termination = TerminationReason::ZeroResidual;
            break;
        }
        iterations += 1;
        let jac = objective.jacobian(&pose);
        let a: Matrix6<f64> = jac.transpose() * &jac;
        let g: Vector6<f64> = jac.transpose() * &r;
        if g.amax() == 0.0 {
            termination = TerminationReason::ZeroGradient;
            break;
        }
        let mut factorized_once = false;
        loop {
            let Some(step) = damped_step(&a, &g, mu) else {
                mu *= config.damping_up;
                if mu > config.max_damping {
                    if factorized_once {
                        termination = TerminationReason::MaxDamping;
                        break 'outer;
                    }
                    return Err(SolveError::SingularNormalEquations);
                }
                continue;
            };
            factorized_once = true;
            let candidate = CameraPose::from_vector(&(pose.to_vector() + step));
            let r_new = objective.residuals(&candidate);
            let cost_new = r_new.norm_squared();
            if cost_new.is_finite() && cost_new < cost {
                let rel_decrease = (cost - cost_new) / cost;
                pose = candidate;
                r = r_new;
                cost = cost_new;
                history.push(cost);
                mu = (mu / config.damping_down).max(f64::MIN_POSITIVE);
                if step.norm() < config.step_tolerance {
                    termination = TerminationReason::StepTolerance;
                    break 'outer;
                }
                if rel_decrease < config.cost_tolerance {
                    termination = TerminationReason::CostTolerance;
                    break 'outer;
                }
                break;
            }
            if step.norm() < config.step_tolerance {
                termination = TerminationReason::StepTolerance;
                break 'outer;
            }
            mu *= config.damping_up;
            if mu > config.max_damping {
                termination = TerminationReason::MaxDamping;
                break 'outer;
            }
        }
    }

    Ok(SolveResult {
        pose,
        final_cost: cost,
        sqrt_cost: cost.sqrt(),
        iterations,
        converged: termination != TerminationReason::MaxIterations,
        termination,
        cost_history: history,
    })
}

/// Levenberg-Marquardt on `smooth` from `init`, then on `exact` from there.
/// `smooth` should share its minimizers with `exact` on consistent data but
/// be free of kinks. If the polished pose is not better than `init` under
/// the exact cost, a plain exact solve from `init` is returned instead.
pub fn solve_warm_started<E, S>(
    exact: &E,
    smooth: &S,
    init: &CameraPose,
    config: &SolverConfig,
) -> Result<SolveResult, SolveError>
where
    E: PoseObjective + ?Sized,
    S: PoseObjective + ?Sized,
{
    let start_cost = exact.cost(init);
    if !start_cost.is_finite() {
        return Err(SolveError::NonFiniteInitialCost);
    }
    if let Ok(warm) = solve(smooth, init, config) {
        if let Ok(polished) = solve(exact, &warm.pose, config) {
            if polished.final_cost <= start_cost {
                return Ok(polished);
            }
        }
    }
    solve(exact, init, config)
}

/// Pose solve used by the localizer: exact cost, warm-started on the
/// endpoint form of the same problem.
pub fn solve_pose(problem: &PoseProblem<'_>, init: &CameraPose, config: &SolverConfig) -> Result<SolveResult, SolveError> {
    solve_warm_started(problem, &EndpointForm(problem), init, config)
}

impl PoseObjective for EndpointForm<'_, '_> {
    fn residuals(&self, pose: &CameraPose) -> DVector<f64> {
        EndpointForm::residuals(self, pose)
    }

    fn jacobian(&self, pose: &CameraPose) -> ResidualJacobian {
        EndpointForm::jacobian(self, pose)
    }
}

/// Selects one of the six pose parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoseParam {
    Cx,
    Cy,
    Cz,
    Yaw,
    Pitch,
    Roll,
}

impl PoseParam {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PoseParam::Cx => "cx",
            PoseParam::Cy => "cy",
            PoseParam::Cz => "cz",
            PoseParam::Yaw => "yaw",
            PoseParam::Pitch => "pitch",
            PoseParam::Roll => "roll",
        }
    }
}

impl fmt::Display for PoseParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoseParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cx" => Ok(PoseParam::Cx),
            "cy" => Ok(PoseParam::Cy),
            "cz" => Ok(PoseParam::Cz),
            "yaw" => Ok(PoseParam::Yaw),
            "pitch" => Ok(PoseParam::Pitch),
            "roll" => Ok(PoseParam::Roll),
            other => Err(format!(
                "unknown pose parameter `{other}` (expected cx, cy, cz, yaw, pitch or roll)"
            )),
        }
    }
}

/// Offsets `param` of `pose` by `delta` (meters or radians).
pub fn perturb(pose: &CameraPose, param: PoseParam, delta: f64) -> CameraPose {
    let mut v = pose.to_vector();
    v[param.index()] += delta;
    CameraPose::from_vector(&v)
}

/// √cost on a regular grid over two pose parameters, the other four held
/// at `center`. Cells are stored with `b` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub dim_a: PoseParam,
    pub dim_b: PoseParam,
    pub a_offsets: Vec<f64>,
    pub b_offsets: Vec<f64>,
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    pub sqrt_r: Vec<f64>,
}

impl LandscapeGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.sqrt_r[i * self.b_values.len() + j]
    }

    pub fn argmin(&self) -> (usize, usize) {
        let idx = self
            .sqrt_r
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        (idx / self.b_values.len(), idx % self.b_values.len())
    }

    /// Second difference of √cost through the center cell along `a` and `b`
    /// (grid size must be odd for the center to be a cell).
    pub fn center_curvature(&self) -> (f64, f64) {
        let (na, nb) = (self.a_values.len(), self.b_values.len());
        let (ci, cj) = (na / 2, nb / 2);
        let ha = self.a_offsets[ci + 1] - self.a_offsets[ci];
        let hb = self.b_offsets[cj + 1] - self.b_offsets[cj];
        let c = self.at(ci, cj);
        let ka = (self.at(ci + 1, cj) - 2.0 * c + self.at(ci - 1, cj)) / (ha * ha);
        let kb = (self.at(ci, cj + 1) - 2.0 * c + self.at(ci, cj - 1)) / (hb * hb);
        (ka, kb)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("a_value,b_value,sqrtR\n");
        for (i, a) in self.a_values.iter().enumerate() {
            for (j, b) in self.b_values.iter().enumerate() {
                out.push_str(&format!("{a},{b},{}\n", self.at(i, j)));
            }
        }
        out
    }
}

fn offsets(half_range: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| -half_range + 2.0 * half_range * i as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("landscape grid needs at least 2 cells per axis")]
pub struct GridTooSmall;

pub fn cost_landscape<O: PoseObjective + ?Sized>(
    objective: &O,
    center: &CameraPose,
    dim_a: PoseParam,
    dim_b: PoseParam,
    half_ranges: (f64, f64),
    grid_n: usize,
) -> Result<LandscapeGrid, GridTooSmall> {
    if grid_n < 2 {
        return Err(GridTooSmall);
    }
    let a_offsets = offsets(half_ranges.0, grid_n);
    let b_offsets = offsets(half_ranges.1, grid_n);
    let base = center.to_vector();
    let mut sqrt_r = Vec::with_capacity(grid_n * grid_n);
    for da in &a_offsets {
        for db in &b_offsets {
            let pose = perturb(&perturb(center, dim_a, *da), dim_b, *db);
            sqrt_r.push(objective.cost(&pose).sqrt());
        }
    }
    Ok(LandscapeGrid {
        dim_a,
        dim_b,
        a_values: a_offsets.iter().map(|d| base[dim_a.index()] + d).collect(),
        b_values: b_offsets.iter().map(|d| base[dim_b.index()] + d).collect(),
        a_offsets,
        b_offsets,
        sqrt_r,
    })
}
