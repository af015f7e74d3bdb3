//! Receding-horizon planner over a fixed fan of constant-curvature arcs.
//!
//! Each arc is scored by `α·J_geom + (1−α)·J_terrain`. The terrain term is
//! the discounted mean traversal cost `C(u)` of the utilities predicted for
//! the ground under the arc's states, observed from the current pose. The
//! geometric term is a stand-in for an external navigation stack: progress
//! toward the goal plus an obstacle clearance penalty.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::TimedState;
use crate::linalg::Matrix;
use crate::par::{self, ExecMode};
use crate::preference::cost;
use crate::rng::{derive_rng, derive_seed, tag};
use crate::worldsim::{step, RobotState, World};

pub const GOAL_TOLERANCE: f64 = 0.3;
pub const TICKS_PER_PLAN: usize = 5;
pub const DEFAULT_GAMMA: f64 = 0.8;
/// Half of the 0.5 m robot footprint.
pub const DEFAULT_FOOTPRINT: f64 = 0.25;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid arc set: {0}")]
    InvalidArcs(String),
    #[error("invalid objective: {0}")]
    InvalidObjective(String),
    #[error("every arc is infeasible")]
    Blocked,
    #[error("utility model failed: {0}")]
    Utility(String),
    #[error("start pose is outside the world or blocked")]
    BadStart,
}

/// Maps a batch of raw visual descriptors to non-negative utilities.
pub trait UtilityModel: Send + Sync {
    fn utilities(&self, descriptors: &Matrix) -> Result<Vec<f64>, PlanError>;
}

/// Zero utility everywhere; combined with `α = 1` this is the
/// geometric-only planner.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlatUtility;

impl UtilityModel for FlatUtility {
    fn utilities(&self, descriptors: &Matrix) -> Result<Vec<f64>, PlanError> {
        Ok(vec![0.0; descriptors.rows])
    }
}

/// A constant-curvature arc in the robot frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub kappa: f64,
    pub length: f64,
    /// `N + 1` poses evenly spaced by arc length; the first is the origin.
    pub states: Vec<RobotState>,
}

/// Pose after travelling `s` along an arc of curvature `kappa` from the
/// origin, heading along +x.
pub fn arc_point(kappa: f64, s: f64) -> RobotState {
    if kappa.abs() < 1e-12 {
        RobotState::new(s, 0.0, 0.0)
    } else {
        let th = kappa * s;
        RobotState::new(th.sin() / kappa, (1.0 - th.cos()) / kappa, th)
    }
}

impl Arc {
    pub fn new(kappa: f64, length: f64, n_states: usize) -> Result<Self, PlanError> {
        if !(length > 0.0) || n_states == 0 {
            return Err(PlanError::InvalidArcs(format!(
                "length {length}, {n_states} states"
            )));
        }
        let steps = (n_states - 1).max(1) as f64;
        let states = (0..n_states)
            .map(|i| arc_point(kappa, length * i as f64 / steps))
            .collect();
        Ok(Self {
            kappa,
            length,
            states,
        })
    }

    /// The arc's states placed in the world at `pose`.
    pub fn world_states(&self, pose: &RobotState) -> Vec<RobotState> {
        self.states.iter().map(|s| pose.compose(s)).collect()
    }

    pub fn with_length(&self, length: f64) -> Result<Self, PlanError> {
        Self::new(self.kappa, length, self.states.len())
    }
}

/// Odd fan of arcs with curvatures evenly spaced over `[−κ_max, κ_max]`.
pub fn gen_arcs(
    n_arcs: usize,
    kappa_max: f64,
    horizon: f64,
    n_states: usize,
) -> Result<Vec<Arc>, PlanError> {
    if n_arcs < 3 || n_arcs.is_multiple_of(2) {
        return Err(PlanError::InvalidArcs(format!(
            "need an odd count ≥ 3, got {n_arcs}"
        )));
    }
    if !(kappa_max > 0.0) || !(horizon > 0.0) || n_states == 0 {
        return Err(PlanError::InvalidArcs(format!(
            "kappa_max {kappa_max}, horizon {horizon}, {n_states} states"
        )));
    }
    let half = (n_arcs / 2) as f64;
    (0..n_arcs)
        .map(|i| {
            let k = (i as f64 - half) / half * kappa_max;
            Arc::new(if k == 0.0 { 0.0 } else { k }, horizon, n_states)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanObjective {
    pub alpha: f64,
    pub gamma_discount: f64,
    pub goal: [f64; 2],
    pub inflation: f64,
    /// Half-width of the square ground patch under the robot. A state's
    /// utility is the lowest one seen at the patch centre and corners; zero
    /// samples the centre only.
    #[serde(default)]
    pub footprint: f64,
}

impl PlanObjective {
    pub fn new(goal: [f64; 2], alpha: f64) -> Self {
        Self {
            alpha,
            gamma_discount: DEFAULT_GAMMA,
            goal,
            inflation: 0.5,
            footprint: DEFAULT_FOOTPRINT,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PlanError::InvalidObjective(format!(
                "alpha {} outside [0,1]",
                self.alpha
            )));
        }
        if !(self.gamma_discount > 0.0 && self.gamma_discount <= 1.0) {
            return Err(PlanError::InvalidObjective(format!(
                "gamma {} outside (0,1]",
                self.gamma_discount
            )));
        }
        if !(self.footprint >= 0.0 && self.footprint.is_finite()) {
            return Err(PlanError::InvalidObjective(format!(
                "footprint {} must be finite and non-negative",
                self.footprint
            )));
        }
        if !(self.inflation > 0.0) {
            return Err(PlanError::InvalidObjective(format!(
                "inflation {} must be positive",
                self.inflation
            )));
        }
        Ok(())
    }
}

/// `Σ_i γⁱ·C(u_i) / (N+1)` over the utilities of the `N + 1` states.
pub fn terrain_cost(utilities: &[f64], gamma: f64) -> Result<f64, PlanError> {
    let mut w = 1.0;
    let mut total = 0.0;
    for &u in utilities {
        total += w * cost(u).map_err(|e| PlanError::Utility(e.to_string()))?;
        w *= gamma;
    }
    Ok(total / utilities.len().max(1) as f64)
}

/// Distance from a point to the nearest obstacle cell, searched out to
/// `radius`; `None` when nothing is that close.
pub fn obstacle_clearance(world: &World, p: [f64; 2], radius: f64) -> Option<f64> {
    let cfg = world.config();
    if cfg.obstacles.is_empty() {
        return None;
    }
    let s = cfg.cell_size;
    let reach = (radius / s).ceil() as isize + 1;
    let (c0, r0) = world.cell_of(p[0], p[1])?;
    let mut best: Option<f64> = None;
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            let (c, r) = (c0 as isize + dc, r0 as isize + dr);
            if c < 0 || r < 0 || c >= cfg.width as isize || r >= cfg.height as isize {
                continue;
            }
            let (c, r) = (c as usize, r as usize);
            if !world.is_blocked_cell(c, r) {
                continue;
            }
            let (x0, x1) = (c as f64 * s, (c + 1) as f64 * s);
            let (y0, y1) = (r as f64 * s, (r + 1) as f64 * s);
            let dx = (x0 - p[0]).max(0.0).max(p[0] - x1);
            let dy = (y0 - p[1]).max(0.0).max(p[1] - y1);
            let d = dx.hypot(dy);
            if d <= radius && best.is_none_or(|b| d < b) {
                best = Some(d);
            }
        }
    }
    best
}

/// Goal progress `clip(d(end, goal)/d(start, goal), 0, 2)` plus the mean
/// inflation penalty `max(0, 1 − clearance/inflation)`; `+∞` when any state
/// leaves the world or enters an obstacle.
pub fn geometric_cost(
    states: &[RobotState],
    start: [f64; 2],
    objective: &PlanObjective,
    world: &World,
) -> f64 {
    if states.iter().any(|s| world.collides(s.x, s.y)) {
        return f64::INFINITY;
    }
    let end = states.last().map_or(start, |s| s.xy());
    let d0 = crate::linalg::dist(&start, &objective.goal);
    let d1 = crate::linalg::dist(&end, &objective.goal);
    let progress = if d0 > 0.0 {
        (d1 / d0).clamp(0.0, 2.0)
    } else if d1 > 0.0 {
        2.0
    } else {
        0.0
    };
    let penalty: f64 = states
        .iter()
        .map(
            |s| match obstacle_clearance(world, s.xy(), objective.inflation) {
                Some(c) => (1.0 - c / objective.inflation).max(0.0),
                None => 0.0,
            },
        )
        .sum();
    progress + penalty / states.len().max(1) as f64
}

/// `α·J_geom + (1 − α)·J_terrain`, or `+∞` for an infeasible arc.
pub fn combined_cost(alpha: f64, j_geom: f64, j_terrain: f64) -> f64 {
    if j_geom.is_finite() {
        alpha * j_geom + (1.0 - alpha) * j_terrain
    } else {
        f64::INFINITY
    }
}

/// Index of the smallest finite `j`; ties go to smaller `|κ|`, then to the
/// lower index.
pub fn select_arc(j: &[f64], kappas: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..j.len() {
        if !j[i].is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) if j[i] < j[b] || (j[i] == j[b] && kappas[i].abs() < kappas[b].abs()) => {
                Some(i)
            }
            keep => keep,
        };
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcScore {
    pub kappa: f64,
    pub j_geom: f64,
    pub j_terrain: f64,
    pub j: f64,
    pub utilities: Vec<f64>,
    /// States whose utility was borrowed from the nearest observable state.
    pub unobserved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub scores: Vec<ArcScore>,
    pub chosen: usize,
}

/// Fill unobservable entries from the nearest observable index (earlier one
/// on ties). With nothing observable every state gets utility 0.
fn fill_unobserved(u: &[Option<f64>]) -> (Vec<f64>, usize) {
    let missing = u.iter().filter(|v| v.is_none()).count();
    let filled = (0..u.len())
        .map(|i| {
            u[i].or_else(|| {
                (1..u.len()).find_map(|d| {
                    let back = i.checked_sub(d).and_then(|j| u[j]);
                    back.or_else(|| u.get(i + d).copied().flatten())
                })
            })
            .unwrap_or(0.0)
        })
        .collect();
    (filled, missing)
}

/// Score every arc from `pose` and pick the best one.
///
/// Descriptors of all observable states of all arcs go through the utility
/// model as one batch. Sensing noise for arc `a` comes from a stream derived
/// from `(seed, a)`, so the result does not depend on the execution mode.
pub fn plan_step(
    pose: &RobotState,
    arcs: &[Arc],
    objective: &PlanObjective,
    utility: &dyn UtilityModel,
    world: &World,
    seed: u64,
    exec: ExecMode,
) -> Result<PlanResult, PlanError> {
    objective.validate()?;
    if arcs.is_empty() {
        return Err(PlanError::InvalidArcs("no arcs".into()));
    }
    let placed: Vec<Vec<RobotState>> = arcs.iter().map(|a| a.world_states(pose)).collect();
    let offsets: Vec<[f64; 2]> = if objective.footprint > 0.0 {
        let h = objective.footprint;
        vec![[0.0, 0.0], [h, h], [h, -h], [-h, h], [-h, -h]]
    } else {
        vec![[0.0, 0.0]]
    };
    // sensed[a][i][k]: descriptor of footprint point k of state i on arc a
    let sensed: Vec<Vec<Vec<Option<Vec<f64>>>>> = par::map_range(exec, arcs.len(), |a| {
        let mut rng = derive_rng(seed, a as u64);
        placed[a]
            .iter()
            .map(|s| {
                let centre = world.sense_visual(pose, s.xy(), &mut rng).ok();
                let mut points = vec![centre];
                if points[0].is_some() {
                    points.extend(offsets[1..].iter().map(|o| {
                        world
                            .sense_visual(pose, s.transform_point(*o), &mut rng)
                            .ok()
                    }));
                }
                points
            })
            .collect()
    });
    let dv = world.visual_dim();
    let rows: Vec<&[f64]> = sensed
        .iter()
        .flatten()
        .flatten()
        .flatten()
        .map(Vec::as_slice)
        .collect();
    let batch_u = if rows.is_empty() {
        Vec::new()
    } else {
        let m = Matrix::from_vec(rows.len(), dv, rows.concat());
        utility.utilities(&m)?
    };
    if let Some(bad) = batch_u.iter().find(|u| !(**u >= 0.0)) {
        return Err(PlanError::Utility(format!("utility model returned {bad}")));
    }
    let mut at = 0;
    let per_arc: Vec<Vec<Option<f64>>> = sensed
        .iter()
        .map(|arc| {
            arc.iter()
                .map(|points| {
                    let mut lowest: Option<f64> = None;
                    for _ in points.iter().flatten() {
                        let u = batch_u[at];
                        at += 1;
                        lowest = Some(lowest.map_or(u, |l| l.min(u)));
                    }
                    points[0].as_ref().and(lowest)
                })
                .collect()
        })
        .collect();
    let start = pose.xy();
    let scores: Vec<Result<ArcScore, PlanError>> = par::map_range(exec, arcs.len(), |a| {
        let (utilities, unobserved) = fill_unobserved(&per_arc[a]);
        let j_terrain = terrain_cost(&utilities, objective.gamma_discount)?;
        let j_geom = geometric_cost(&placed[a], start, objective, world);
        let j = combined_cost(objective.alpha, j_geom, j_terrain);
        Ok(ArcScore {
            kappa: arcs[a].kappa,
            j_geom,
            j_terrain,
            j,
            utilities,
            unobserved,
        })
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>, _>>()?;
    let j: Vec<f64> = scores.iter().map(|s| s.j).collect();
    let k: Vec<f64> = scores.iter().map(|s| s.kappa).collect();
    let chosen = select_arc(&j, &k).ok_or(PlanError::Blocked)?;
    Ok(PlanResult { scores, chosen })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerLimits {
    pub v_max: f64,
    pub a_max: f64,
    pub dt: f64,
}

impl Default for ControllerLimits {
    fn default() -> Self {
        Self {
            v_max: 1.0,
            a_max: 1.0,
            dt: 0.1,
        }
    }
}

/// Continuous trapezoidal speed profile from `v0` to rest over `length`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedProfile {
    pub v0: f64,
    pub v_peak: f64,
    pub t_accel: f64,
    pub t_cruise: f64,
    pub t_decel: f64,
    pub a_max: f64,
}

impl SpeedProfile {
    pub fn new(length: f64, v0: f64, v_max: f64, a_max: f64) -> Self {
        let v0 = v0.clamp(0.0, v_max);
        // Peak of the triangle that accelerates from v0 and stops at `length`.
        let tri = ((2.0 * a_max * length + v0 * v0) / 2.0).sqrt();
        if tri <= v0 {
            // Too short to speed up: brake all the way (possibly not to rest).
            let t = if v0 > 0.0 {
                (v0 - (v0 * v0 - 2.0 * a_max * length).max(0.0).sqrt()) / a_max
            } else {
                0.0
            };
            return Self {
                v0,
                v_peak: v0,
                t_accel: 0.0,
                t_cruise: 0.0,
                t_decel: t,
                a_max,
            };
        }
        let v_peak = tri.min(v_max);
        let t_accel = (v_peak - v0) / a_max;
        let t_decel = v_peak / a_max;
        let d_ramp = (v0 + v_peak) / 2.0 * t_accel + v_peak / 2.0 * t_decel;
        let t_cruise = ((length - d_ramp) / v_peak).max(0.0);
        Self {
            v0,
            v_peak,
            t_accel,
            t_cruise,
            t_decel,
            a_max,
        }
    }

    pub fn duration(&self) -> f64 {
        self.t_accel + self.t_cruise + self.t_decel
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        if t < 0.0 {
            self.v0
        } else if t < self.t_accel {
            self.v0 + self.a_max * t
        } else if t <= self.t_accel + self.t_cruise {
            self.v_peak
        } else {
            (self.v_peak - self.a_max * (t - self.t_accel - self.t_cruise)).max(0.0)
        }
    }
}

/// Per-tick `(v, ω)` commands following the profile, sampled at the end
/// of each tick, with `ω = κ·v`.
pub fn profile_commands(arc: &Arc, v0: f64, limits: &ControllerLimits) -> Vec<(f64, f64)> {
    let p = SpeedProfile::new(arc.length, v0, limits.v_max, limits.a_max);
    let ticks = (p.duration() / limits.dt).ceil() as usize;
    (1..=ticks)
        .map(|k| {
            let v = p.speed_at(k as f64 * limits.dt).min(limits.v_max);
            (v, arc.kappa * v)
        })
        .collect()
}

/// Trapezoidal commands along an arc, starting from rest.
pub fn time_optimal_controller(arc: &Arc, limits: &ControllerLimits) -> Vec<(f64, f64)> {
    profile_commands(arc, 0.0, limits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcSetConfig {
    pub n_arcs: usize,
    pub kappa_max: f64,
    pub horizon: f64,
    pub n_states: usize,
}

impl Default for ArcSetConfig {
    fn default() -> Self {
        Self {
            n_arcs: 15,
            kappa_max: 1.5,
            horizon: 2.2,
            n_states: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub objective: PlanObjective,
    pub arcs: ArcSetConfig,
    pub limits: ControllerLimits,
    pub ticks_per_plan: usize,
    pub goal_tolerance: f64,
    /// Planning cycles before giving up.
    pub max_steps: usize,
    pub exec: ExecMode,
}

impl EpisodeConfig {
    pub fn new(goal: [f64; 2], alpha: f64) -> Self {
        Self {
            objective: PlanObjective::new(goal, alpha),
            arcs: ArcSetConfig::default(),
            limits: ControllerLimits::default(),
            ticks_per_plan: TICKS_PER_PLAN,
            goal_tolerance: GOAL_TOLERANCE,
            max_steps: 400,
            exec: ExecMode::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    ReachedGoal,
    Blocked,
    Timeout,
}

/// One executed control tick, as written to the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickLog {
    pub t: f64,
    pub pose: RobotState,
    pub v: f64,
    pub omega: f64,
    pub chosen_arc: usize,
    pub arc_j: Vec<Option<f64>>,
    pub terrain_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<TimedState>,
    pub outcome: Outcome,
    /// Planning cycles executed.
    pub steps: usize,
    pub log: Vec<TickLog>,
}

impl Episode {
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(|s| s.pose.xy()).collect()
    }

    pub fn reached_goal(&self) -> bool {
        self.outcome == Outcome::ReachedGoal
    }

    /// One JSON object per tick.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.log {
            out.push_str(&serde_json::to_string(t).expect("tick serializes"));
            out.push('\n');
        }
        out
    }
}

/// 4-connected flood fill over free cells.
pub fn goal_reachable(world: &World, start: [f64; 2], goal: [f64; 2]) -> bool {
    let (Some(s), Some(g)) = (
        world.cell_of(start[0], start[1]),
        world.cell_of(goal[0], goal[1]),
    ) else {
        return false;
    };
    if world.is_blocked_cell(s.0, s.1) || world.is_blocked_cell(g.0, g.1) {
        return false;
    }
    let (w, h) = (world.config().width, world.config().height);
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::from([s]);
    seen[s.1 * w + s.0] = true;
    while let Some((c, r)) = queue.pop_front() {
        if (c, r) == g {
            return true;
        }
        let next = [
            (c.wrapping_sub(1), r),
            (c + 1, r),
            (c, r.wrapping_sub(1)),
            (c, r + 1),
        ];
        for (nc, nr) in next {
            if nc < w && nr < h && !seen[nr * w + nc] && !world.is_blocked_cell(nc, nr) {
                seen[nr * w + nc] = true;
                queue.push_back((nc, nr));
            }
        }
    }
    false
}

/// Receding-horizon loop: plan, execute the first `ticks_per_plan` ticks of
/// the chosen arc, repeat until the goal is within tolerance, every arc is
/// blocked, or `max_steps` plans have run.
///
/// Arcs are shortened to the remaining goal distance so the endpoint can
/// land on the goal.
pub fn run_episode(
    world: &World,
    utility: &dyn UtilityModel,
    cfg: &EpisodeConfig,
    start: RobotState,
    seed: u64,
) -> Result<Episode, PlanError> {
    cfg.objective.validate()?;
    if world.collides(start.x, start.y) {
        return Err(PlanError::BadStart);
    }
    let goal = cfg.objective.goal;
    let base = gen_arcs(
        cfg.arcs.n_arcs,
        cfg.arcs.kappa_max,
        cfg.arcs.horizon,
        cfg.arcs.n_states,
    )?;
    let terrain = |p: &RobotState| world.terrain_at(p.x, p.y).unwrap_or(u32::MAX);
    let mut pose = start;
    let mut v = 0.0;
    let mut t = 0.0;
    let mut states = Vec::new();
    let mut log = Vec::new();
    let finish = |states: Vec<TimedState>, log, outcome, steps| {
        Ok(Episode {
            states,
            outcome,
            steps,
            log,
        })
    };
    let push_state = |states: &mut Vec<TimedState>, pose: RobotState, t: f64, v: f64, w: f64| {
        states.push(TimedState {
            t,
            pose,
            v,
            omega: w,
        });
    };
    if pose.distance_to(goal) <= cfg.goal_tolerance {
        push_state(&mut states, pose, t, 0.0, 0.0);
        return finish(states, log, Outcome::ReachedGoal, 0);
    }
    if !goal_reachable(world, start.xy(), goal) {
        push_state(&mut states, pose, t, 0.0, 0.0);
        return finish(states, log, Outcome::Blocked, 0);
    }
    for plan in 0..cfg.max_steps {
        let remaining = pose.distance_to(goal);
        let arcs: Vec<Arc> = if remaining < cfg.arcs.horizon {
            base.iter()
                .map(|a| a.with_length(remaining))
                .collect::<Result<_, _>>()?
        } else {
            base.clone()
        };
        let plan_seed = derive_seed(seed, tag("plan") ^ plan as u64);
        let result = match plan_step(
            &pose,
            &arcs,
            &cfg.objective,
            utility,
            world,
            plan_seed,
            cfg.exec,
        ) {
            Ok(r) => r,
            Err(PlanError::Blocked) => {
                push_state(&mut states, pose, t, 0.0, 0.0);
                return finish(states, log, Outcome::Blocked, plan);
            }
            Err(e) => return Err(e),
        };
        let arc = &arcs[result.chosen];
        let arc_j: Vec<Option<f64>> = result
            .scores
            .iter()
            .map(|s| s.j.is_finite().then_some(s.j))
            .collect();
        let commands = profile_commands(arc, v, &cfg.limits);
        if commands.is_empty() {
            push_state(&mut states, pose, t, 0.0, 0.0);
            return finish(states, log, Outcome::Blocked, plan + 1);
        }
        for &(cv, cw) in commands.iter().take(cfg.ticks_per_plan) {
            push_state(&mut states, pose, t, cv, cw);
            log.push(TickLog {
                t,
                pose,
                v: cv,
                omega: cw,
                chosen_arc: result.chosen,
                arc_j: arc_j.clone(),
                terrain_id: terrain(&pose),
            });
            let next = step(&pose, cv, cw, cfg.limits.dt).expect("positive dt");
            if world.collides(next.x, next.y) {
                push_state(&mut states, pose, t, 0.0, 0.0);
                return finish(states, log, Outcome::Blocked, plan + 1);
            }
            pose = next;
            v = cv;
            t += cfg.limits.dt;
            if pose.distance_to(goal) <= cfg.goal_tolerance {
                push_state(&mut states, pose, t, 0.0, 0.0);
                return finish(states, log, Outcome::ReachedGoal, plan + 1);
            }
        }
    }
    push_state(&mut states, pose, t, 0.0, 0.0);
    finish(states, log, Outcome::Timeout, cfg.max_steps)
}

/// Wrap an angle difference to `[0, π]`, for tests and reports.
pub fn heading_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}
