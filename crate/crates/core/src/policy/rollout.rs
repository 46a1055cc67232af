//! Closed-loop execution of the three controllers, with an optional single
//! test-time push.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{
    mode_of_manip, mode_of_nav, step_manip, step_nav, EnvSpec, ManipAction, ManipState, ModeMap,
    PickPlace2DEnv, PolygonChainEnv, STEP, V_MAX,
};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::grounding::{FeasibilityMatrix, GroundingModel};
use crate::policy::bc::{act_mode_bc, planar, BCPolicy, ModePolicySet};
use crate::policy::planner::{plan_rrt, PlannerConfig, RrtGoal};
use crate::trajectory::{Trajectory, TrajectoryKind};

/// Learned classifier sampled on a square raster over the workspace, so the
/// planner's many collision checks are table lookups.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedMap {
    pub k: usize,
    pub side: usize,
    cells: Vec<usize>,
}

impl LearnedMap {
    /// Classifies every cell centre of a `side x side` raster. Only
    /// meaningful for nav, whose raw state is the position.
    pub fn rasterize(model: &GroundingModel, side: usize) -> Result<Self> {
        let pts = crate::evalkit::grid_points(side);
        Ok(Self {
            k: model.k,
            side,
            cells: model.classify_batch(&pts)?,
        })
    }
}

impl ModeMap for LearnedMap {
    fn num_modes(&self) -> usize {
        self.k
    }

    fn mode_at(&self, p: Vec2) -> usize {
        let cell = |v: f64| ((v * self.side as f64) as usize).min(self.side - 1);
        self.cells[cell(p.x) * self.side + cell(p.y)]
    }
}

/// Raster side used by the planning controller.
pub const MAP_RESOLUTION: usize = 400;

/// Waypoints recovered from segmented demos: where each mode hands over to
/// the next, and where the task comes to rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningPolicy {
    pub k: usize,
    /// Mean demo position inside mode 2; the free-space planner aims here.
    pub entry: Vec2,
    /// Handover point of mode `m` at index `m - 2`; the last entry is the
    /// resting point of mode `K`.
    pub targets: Vec<Vec2>,
    /// Mean direction of travel across each handover, for modes `2..K`.
    pub crossings: Vec<Vec2>,
    pub planner: PlannerConfig,
}

impl PlanningPolicy {
    /// Handovers and rest point come from the per-mode attractors; the
    /// crossing direction is the mean displacement over handover steps.
    pub fn from_demos(model: &GroundingModel, modes: &ModePolicySet, demos: &[Trajectory], planner: PlannerConfig) -> Result<Self> {
        let k = model.k;
        let mut entry = (Vec2::default(), 0usize);
        let mut cross = vec![Vec2::default(); k];
        for d in demos.iter().filter(|d| d.success) {
            let per_step = model.segment(d)?.per_step;
            for (t, &m) in per_step.iter().enumerate() {
                if m == 2 {
                    entry.0 = entry.0 + planar(&d.states[t]);
                    entry.1 += 1;
                }
                if t > 0 && m == per_step[t - 1] + 1 && m > 2 {
                    cross[m - 2] = cross[m - 2] + (planar(&d.states[t]) - planar(&d.states[t - 1]));
                }
            }
        }
        if entry.1 == 0 {
            return Err(Error::Dataset("no demo state is classified as mode 2".into()));
        }
        Ok(Self {
            k,
            entry: entry.0 * (1.0 / entry.1 as f64),
            targets: modes.attractors[1..].to_vec(),
            crossings: cross[1..k - 1].iter().map(|c| c.unit()).collect(),
            planner,
        })
    }

    fn goal(&self) -> RrtGoal {
        RrtGoal {
            target: self.entry,
            mode: 2,
        }
    }

    /// Descends toward the handover of `mode`, then pushes across it. The
    /// step is halved until it lands in `mode` or `mode + 1` per `map`.
    pub fn mode_step<M: ModeMap + ?Sized>(&self, map: &M, state: Vec2, mode: usize) -> Vec2 {
        let last = mode == self.k;
        let offset = self.targets[mode - 2] - state;
        let mut v = if offset.norm() <= 0.5 * STEP && !last {
            self.crossings[mode - 2] * V_MAX
        } else {
            (offset * (self.planner.potential_gain / STEP)).clamp_norm(V_MAX)
        };
        for _ in 0..20 {
            let m = map.mode_at((state + v * STEP).clamp_unit());
            if m == mode || (!last && m == mode + 1) {
                break;
            }
            v = v * 0.5;
        }
        v
    }
}

/// One displacement at a random step; manipulation may also hold the
/// gripper open for a few steps from that moment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestPerturbation {
    pub magnitude: [f64; 2],
    pub gripper_probability: f64,
    pub gripper_steps: usize,
    /// The push happens at a step drawn uniformly from `1..=horizon`.
    /// Unset means the mean demonstration length.
    pub horizon: Option<usize>,
}

impl Default for TestPerturbation {
    fn default() -> Self {
        Self {
            magnitude: [0.05, 0.2],
            gripper_probability: 0.5,
            gripper_steps: 5,
            horizon: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Bc,
    GlideBc,
    GlidePlanning,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Bc, PolicyKind::GlideBc, PolicyKind::GlidePlanning];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Bc => "BC",
            PolicyKind::GlideBc => "GLiDE+BC",
            PolicyKind::GlidePlanning => "GLiDE+Planning",
        }
    }
}

pub enum Controller<'a> {
    Bc(&'a BCPolicy),
    ModeBc(&'a ModePolicySet, &'a GroundingModel),
    Planning(&'a PlanningPolicy, &'a LearnedMap),
}

impl Controller<'_> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Controller::Bc(_) => PolicyKind::Bc,
            Controller::ModeBc(..) => PolicyKind::GlideBc,
            Controller::Planning(..) => PolicyKind::GlidePlanning,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub success: bool,
    pub steps: usize,
    /// Index of the first state after the push, if one happened.
    pub pushed_at: Option<usize>,
    /// `(t, from, to)` for the first ground-truth transition with negative
    /// feasibility that the agent made on its own.
    pub first_invalid: Option<(usize, usize, usize)>,
}

/// Nav success: the last state is in mode `K` and every consecutive pair of
/// states, except the one spanning the push, is a feasible transition.
pub fn judge_nav(
    env: &PolygonChainEnv,
    f: &FeasibilityMatrix,
    positions: &[Vec2],
    pushed_at: Option<usize>,
) -> (bool, Option<(usize, usize, usize)>) {
    let modes: Vec<usize> = positions.iter().map(|&p| mode_of_nav(env, p)).collect();
    let invalid = (1..modes.len())
        .filter(|&t| Some(t) != pushed_at)
        .find(|&t| f.get(modes[t - 1], modes[t]) < 0.0)
        .map(|t| (t, modes[t - 1], modes[t]));
    let done = modes.last() == Some(&env.k);
    (done && invalid.is_none(), invalid)
}

fn push(rng: &mut ChaCha8Rng, magnitude: [f64; 2]) -> Vec2 {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let r = rng.random_range(magnitude[0]..=magnitude[1]);
    Vec2::new(r * angle.cos(), r * angle.sin())
}

/// Runs `controller` from `start` for at most `max_steps` actions. Nav
/// episodes end on entering mode `K`; manipulation episodes end once the
/// object rests in the goal with the gripper open. A timeout is a failure.
pub fn execute(
    controller: &Controller,
    env: &EnvSpec,
    f: &FeasibilityMatrix,
    start: &[f64],
    max_steps: usize,
    perturbation: Option<&TestPerturbation>,
    seed: u64,
) -> Result<Rollout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let push_step = match perturbation {
        Some(p) => {
            let h = p.horizon.ok_or_else(|| Error::Config("perturbation horizon is unset".into()))?;
            Some(rng.random_range(1..=h.max(1)))
        }
        None => None,
    };
    match env {
        EnvSpec::Nav(e) => execute_nav(controller, e, f, start, max_steps, perturbation, push_step, &mut rng),
        EnvSpec::Manip(e) => execute_manip(controller, e, f, start, max_steps, perturbation, push_step, &mut rng),
    }
}

#[allow(clippy::too_many_arguments)]
fn execute_nav(
    controller: &Controller,
    env: &PolygonChainEnv,
    f: &FeasibilityMatrix,
    start: &[f64],
    max_steps: usize,
    perturbation: Option<&TestPerturbation>,
    push_step: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    if start.len() != 2 {
        return Err(Error::Input(format!("nav state has 2 channels, got {}", start.len())));
    }
    let mut positions = vec![Vec2::new(start[0], start[1])];
    let mut pushed_at = None;
    let mut path: Option<(Vec<Vec2>, usize)> = None;
    let mut replans = 0u64;
    for step in 0..max_steps {
        let s = *positions.last().unwrap();
        if mode_of_nav(env, s) == env.k {
            break;
        }
        if Some(step) == push_step {
            let p = perturbation.unwrap();
            positions.push((s + push(rng, p.magnitude)).clamp_unit());
            pushed_at = Some(positions.len() - 1);
            path = None;
            continue;
        }
        let v = match controller {
            Controller::Bc(policy) => {
                let a = policy.act(&[s.x, s.y])?;
                Vec2::new(a[0], a[1]).clamp_norm(V_MAX)
            }
            Controller::ModeBc(set, model) => {
                let a = act_mode_bc(set, model, &[s.x, s.y])?;
                Vec2::new(a[0], a[1])
            }
            Controller::Planning(plan, map) => {
                let mode = map.mode_at(s);
                if mode == 1 {
                    if path.is_none() {
                        let cfg = PlannerConfig {
                            seed: crate::derive_seed(plan.planner.seed, replans),
                            ..plan.planner.clone()
                        };
                        replans += 1;
                        // an unreachable entry leaves the agent in place until timeout
                        path = plan_rrt(*map, s, plan.goal(), &cfg).ok().map(|p| (p, 1));
                    }
                    follow(&mut path, s)
                } else {
                    path = None;
                    plan.mode_step(*map, s, mode)
                }
            }
        };
        positions.push(step_nav(s, v, STEP));
    }
    let (success, first_invalid) = judge_nav(env, f, &positions, pushed_at);
    let trajectory = crate::demos::nav_trajectory(&env.id(), &positions, TrajectoryKind::Perturbed, success);
    Ok(Rollout {
        steps: positions.len() - 1,
        trajectory,
        success,
        pushed_at,
        first_invalid,
    })
}

/// Velocity toward the next waypoint at full speed, advancing past reached
/// waypoints.
fn follow(path: &mut Option<(Vec<Vec2>, usize)>, s: Vec2) -> Vec2 {
    let Some((pts, next)) = path.as_mut() else {
        return Vec2::default();
    };
    while *next < pts.len() && pts[*next].dist(s) <= 1e-9 {
        *next += 1;
    }
    if *next == pts.len() {
        return Vec2::default();
    }
    ((pts[*next] - s) * (1.0 / STEP)).clamp_norm(V_MAX)
}

#[allow(clippy::too_many_arguments)]
fn execute_manip(
    controller: &Controller,
    env: &PickPlace2DEnv,
    f: &FeasibilityMatrix,
    start: &[f64],
    max_steps: usize,
    perturbation: Option<&TestPerturbation>,
    push_step: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let mut states = vec![ManipState::from_raw(start)?];
    let mut commands = Vec::new();
    let mut pushed_at = None;
    let mut forced_open = 0usize;
    for step in 0..max_steps {
        let s = *states.last().unwrap();
        if env.in_goal(s.object) && !s.holding && !s.gripper {
            break;
        }
        if Some(step) == push_step {
            let p = perturbation.unwrap();
            let mut next = s;
            let d = push(rng, p.magnitude);
            next.ee = (s.ee + d).clamp_unit();
            if s.holding {
                next.object = s.object + (next.ee - s.ee);
            }
            if rng.random_bool(p.gripper_probability) {
                forced_open = p.gripper_steps;
            }
            states.push(next);
            commands.push(ManipAction { velocity: Vec2::default(), gripper: s.gripper });
            pushed_at = Some(states.len() - 1);
            continue;
        }
        let raw = s.to_raw();
        let a = match controller {
            Controller::Bc(policy) => policy.act(&raw)?,
            Controller::ModeBc(set, model) => act_mode_bc(set, model, &raw)?,
            Controller::Planning(..) => {
                return Err(Error::Usage("the planning controller is defined for navigation only".into()))
            }
        };
        if a.len() < 3 {
            return Err(Error::Usage("manipulation policy must emit a gripper channel".into()));
        }
        let mut gripper = a[2] > 0.5;
        if forced_open > 0 {
            forced_open -= 1;
            gripper = false;
        }
        let action = ManipAction {
            velocity: Vec2::new(a[0], a[1]).clamp_norm(V_MAX),
            gripper,
        };
        states.push(step_manip(env, &s, action, STEP));
        commands.push(action);
    }
    let last = states.last().unwrap();
    let success = env.in_goal(last.object) && !last.holding;
    let trajectory = Trajectory {
        env_id: env.id(),
        kind: TrajectoryKind::Perturbed,
        success,
        states: states.iter().map(ManipState::to_raw).collect(),
        actions: commands.iter().map(|a| vec![a.velocity.x, a.velocity.y]).collect(),
        gripper: Some(commands.iter().map(|a| a.gripper as u8).collect()),
    };
    let modes: Vec<usize> = states.iter().map(|s| mode_of_manip(env, s)).collect();
    let first_invalid = (1..modes.len())
        .filter(|&t| Some(t) != pushed_at)
        .find(|&t| f.get(modes[t - 1], modes[t]) < 0.0)
        .map(|t| (t, modes[t - 1], modes[t]));
    Ok(Rollout {
        steps: commands.len(),
        trajectory,
        success,
        pushed_at,
        first_invalid,
    })
}

/// One row per trial: `trial,success,steps,first_invalid`.
pub fn write_rollout_report(path: &Path, rollouts: &[Rollout]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "trial,success,steps,first_invalid")?;
    for (i, r) in rollouts.iter().enumerate() {
        let inv = r
            .first_invalid
            .map_or(String::new(), |(t, a, b)| format!("{a}->{b}@{t}"));
        writeln!(out, "{i},{},{},{inv}", u8::from(r.success), r.steps)?;
    }
    Ok(())
}
