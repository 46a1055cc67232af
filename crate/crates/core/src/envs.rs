//! Ground-truth worlds: a chain of convex polygons to traverse in order, and
//! a planar pick-and-place task. Both expose a mode oracle and a pure
//! stepper.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConvexPolygon, Vec2};
use crate::trajectory::Trajectory;

/// Integration step in workspace units per unit of action.
pub const STEP: f64 = 0.01;
/// Maximum action norm.
pub const V_MAX: f64 = 1.0;
/// Minimum clearance between polygons and the workspace boundary.
pub const WORKSPACE_MARGIN: f64 = 0.02;
/// Minimum clearance between non-consecutive polygons.
const CHAIN_GAP: f64 = 0.03;
const MIN_RADIUS: f64 = 0.08;
const MAX_RADIUS: f64 = 0.18;
const MIN_SHARED_EDGE: f64 = 0.06;

/// Anything that assigns a 1-based mode index to a planar point.
pub trait ModeMap {
    fn num_modes(&self) -> usize;
    fn mode_at(&self, p: Vec2) -> usize;
}

/// Undirected chain adjacency `1-2, 2-3, ..., (K-1)-K`.
pub fn chain_adjacency(k: usize) -> Vec<[usize; 2]> {
    (1..k).map(|i| [i, i + 1]).collect()
}

/// Free space is mode 1; polygon `polygons[j]` is mode `j + 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolygonChainEnv {
    pub seed: u64,
    pub k: usize,
    pub polygons: Vec<ConvexPolygon>,
    pub adjacency: Vec<[usize; 2]>,
}

impl PolygonChainEnv {
    pub fn id(&self) -> String {
        format!("nav-k{}-s{}", self.k, self.seed)
    }

    /// Polygon for mode `mode` (2..=K).
    pub fn polygon(&self, mode: usize) -> &ConvexPolygon {
        &self.polygons[mode - 2]
    }

    /// Index of the edge of `P_mode` shared with `P_{mode+1}`, if any.
    pub fn shared_edge(&self, mode: usize) -> Option<(Vec2, Vec2)> {
        if mode < 2 || mode >= self.k {
            return None;
        }
        let p = self.polygon(mode);
        let q = self.polygon(mode + 1);
        p.edges().find(|&(a, b)| {
            q.edges().any(|(c, d)| c == b && d == a)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.polygons.len() != self.k - 1 {
            return Err(Error::Validation(format!(
                "K={} requires {} polygons, found {}",
                self.k,
                self.k.saturating_sub(1),
                self.polygons.len()
            )));
        }
        for (i, p) in self.polygons.iter().enumerate() {
            if !p.is_convex_ccw() {
                return Err(Error::Validation(format!("polygon {} is not convex ccw", i + 2)));
            }
            let (lo, hi) = p.bounding_box();
            let m = WORKSPACE_MARGIN - 1e-12;
            if lo.x < m || lo.y < m || hi.x > 1.0 - m || hi.y > 1.0 - m {
                return Err(Error::Validation(format!("polygon {} violates the margin", i + 2)));
            }
        }
        for mode in 2..self.k {
            if self.shared_edge(mode).is_none() {
                return Err(Error::Validation(format!(
                    "polygons {mode} and {} share no edge",
                    mode + 1
                )));
            }
        }
        for i in 0..self.polygons.len() {
            for j in i + 2..self.polygons.len() {
                if self.polygons[i].distance_to(&self.polygons[j]) <= 0.0 {
                    return Err(Error::Validation(format!(
                        "polygons {} and {} overlap",
                        i + 2,
                        j + 2
                    )));
                }
            }
        }
        Ok(())
    }
}

impl ModeMap for PolygonChainEnv {
    fn num_modes(&self) -> usize {
        self.k
    }

    fn mode_at(&self, p: Vec2) -> usize {
        mode_of_nav(self, p)
    }
}

fn sample_first_polygon(rng: &mut ChaCha8Rng) -> ConvexPolygon {
    let n = rng.random_range(4..=8);
    let radius = rng.random_range(MIN_RADIUS..=MAX_RADIUS);
    let center = Vec2::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
    let theta0 = rng.random_range(0.0..TAU);
    let vertices = (0..n)
        .map(|i| {
            let jitter: f64 = rng.random_range(-0.3..0.3);
            let theta = theta0 + TAU * (i as f64 + jitter) / n as f64;
            center + Vec2::new(theta.cos(), theta.sin()) * radius
        })
        .collect();
    ConvexPolygon::new(vertices)
}

/// Builds a polygon on the outer side of edge `edge` of `prev`, sharing that
/// edge exactly. All vertices lie on one circle, so the result is convex.
fn sample_attached_polygon(
    prev: &ConvexPolygon,
    edge: usize,
    rng: &mut ChaCha8Rng,
) -> Option<ConvexPolygon> {
    let (a, b) = prev.edge(edge);
    let e = b - a;
    let len = e.norm();
    if len < MIN_SHARED_EDGE {
        return None;
    }
    let half = len / 2.0;
    let lo = MIN_RADIUS.max(half * 1.05);
    if lo >= MAX_RADIUS {
        return None;
    }
    let radius = rng.random_range(lo..MAX_RADIUS);
    let outward = Vec2::new(e.y, -e.x) * (1.0 / len);
    let center = a.lerp(b, 0.5) + outward * (radius * radius - half * half).sqrt();
    let angle = |p: Vec2| (p.y - center.y).atan2(p.x - center.x);
    let theta_a = angle(a);
    let span = (angle(b) - theta_a).rem_euclid(TAU);
    let extra = rng.random_range(2..=6);
    let mut vertices = vec![a];
    for j in 1..=extra {
        let jitter: f64 = rng.random_range(-0.3..0.3);
        let theta = theta_a + span * (j as f64 + jitter) / (extra + 1) as f64;
        vertices.push(center + Vec2::new(theta.cos(), theta.sin()) * radius);
    }
    vertices.push(b);
    Some(ConvexPolygon::new(vertices))
}

fn polygon_acceptable(p: &ConvexPolygon) -> bool {
    if !p.is_convex_ccw() || p.inradius_bound() < 5.0 * STEP {
        return false;
    }
    let (lo, hi) = p.bounding_box();
    let m = WORKSPACE_MARGIN;
    lo.x >= m && lo.y >= m && hi.x <= 1.0 - m && hi.y <= 1.0 - m
}

/// Grows a chain of `k - 1` convex polygons edge by edge.
pub fn generate_polygon_chain(seed: u64, k: usize, max_retries: usize) -> Result<PolygonChainEnv> {
    if !(2..=8).contains(&k) {
        return Err(Error::Input(format!("K must be in [2, 8], got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'attempt: for _ in 0..max_retries.max(1) {
        let first = sample_first_polygon(&mut rng);
        if !polygon_acceptable(&first) {
            continue;
        }
        let mut polygons = vec![first];
        // edge of the newest polygon already shared with its predecessor
        let mut used_edge: Option<usize> = None;
        while polygons.len() < k - 1 {
            let prev = polygons.last().unwrap();
            let mut placed = None;
            for _ in 0..50 {
                let free: Vec<usize> = (0..prev.len()).filter(|&i| Some(i) != used_edge).collect();
                let edge = free[rng.random_range(0..free.len())];
                let Some(candidate) = sample_attached_polygon(prev, edge, &mut rng) else {
                    continue;
                };
                if !polygon_acceptable(&candidate) {
                    continue;
                }
                let n = polygons.len();
                let clear = polygons[..n - 1]
                    .iter()
                    .all(|q| q.distance_to(&candidate) >= CHAIN_GAP);
                if clear {
                    placed = Some(candidate);
                    break;
                }
            }
            match placed {
                Some(p) => {
                    used_edge = Some(p.len() - 1);
                    polygons.push(p);
                }
                None => continue 'attempt,
            }
        }
        let env = PolygonChainEnv {
            seed,
            k,
            polygons,
            adjacency: chain_adjacency(k),
        };
        env.validate()?;
        return Ok(env);
    }
    Err(Error::Generation(format!(
        "no valid polygon chain for seed {seed}, K={k} within {max_retries} retries"
    )))
}

/// Lowest-index polygon containing `p` (boundary included), else free space.
pub fn mode_of_nav(env: &PolygonChainEnv, p: Vec2) -> usize {
    env.polygons
        .iter()
        .position(|poly| poly.contains(p))
        .map_or(1, |i| i + 2)
}

/// Single-integrator step, clamped to the unit workspace.
pub fn step_nav(state: Vec2, action: Vec2, h: f64) -> Vec2 {
    (state + action.clamp_norm(V_MAX) * h).clamp_unit()
}

/// Planar pick-and-place with modes reach (1), holding (2) and placed (3).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PickPlace2DEnv {
    pub seed: u64,
    pub k: usize,
    pub object_start: Vec2,
    pub goal_center: Vec2,
    pub goal_radius: f64,
    pub grasp_radius: f64,
    pub adjacency: Vec<[usize; 2]>,
}

impl Default for PickPlace2DEnv {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 3,
            object_start: Vec2::new(0.3, 0.3),
            goal_center: Vec2::new(0.7, 0.7),
            goal_radius: 0.1,
            grasp_radius: 0.03,
            adjacency: chain_adjacency(3),
        }
    }
}

impl PickPlace2DEnv {
    /// Random object and goal placement, at least 0.35 apart.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        loop {
            let object = Vec2::new(rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
            let goal = Vec2::new(rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
            if object.dist(goal) >= 0.35 {
                return Self {
                    seed,
                    object_start: object,
                    goal_center: goal,
                    ..Self::default()
                };
            }
        }
    }

    pub fn id(&self) -> String {
        format!("manip-s{}", self.seed)
    }

    pub fn in_goal(&self, p: Vec2) -> bool {
        p.dist(self.goal_center) <= self.goal_radius
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |p: Vec2| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y);
        if !inside(self.object_start) || !inside(self.goal_center) {
            return Err(Error::Validation("object and goal must lie in the workspace".into()));
        }
        if self.grasp_radius <= 0.0 || self.goal_radius <= 0.0 {
            return Err(Error::Validation("radii must be positive".into()));
        }
        if self.k != 3 {
            return Err(Error::Validation("pick-and-place has exactly 3 modes".into()));
        }
        Ok(())
    }

    pub fn initial_state(&self, ee: Vec2) -> ManipState {
        ManipState {
            ee,
            gripper: false,
            object: self.object_start,
            holding: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManipState {
    pub ee: Vec2,
    pub gripper: bool,
    pub object: Vec2,
    pub holding: bool,
}

impl ManipState {
    pub const DIM: usize = 6;

    pub fn to_raw(&self) -> Vec<f64> {
        vec![
            self.ee.x,
            self.ee.y,
            f64::from(u8::from(self.gripper)),
            self.object.x,
            self.object.y,
            f64::from(u8::from(self.holding)),
        ]
    }

    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.len() != Self::DIM {
            return Err(Error::Input(format!(
                "manipulation state has {} channels, expected {}",
                raw.len(),
                Self::DIM
            )));
        }
        Ok(Self {
            ee: Vec2::new(raw[0], raw[1]),
            gripper: raw[2] > 0.5,
            object: Vec2::new(raw[3], raw[4]),
            holding: raw[5] > 0.5,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManipAction {
    pub velocity: Vec2,
    pub gripper: bool,
}

/// Gripper latch first (using the pre-move distance), then end-effector
/// motion; a held object follows the end-effector's displacement exactly.
pub fn step_manip(env: &PickPlace2DEnv, state: &ManipState, action: ManipAction, h: f64) -> ManipState {
    let mut next = *state;
    if action.gripper {
        if !state.gripper && state.ee.dist(state.object) <= env.grasp_radius {
            next.holding = true;
        }
    } else {
        next.holding = false;
    }
    next.gripper = action.gripper;
    next.ee = (state.ee + action.velocity.clamp_norm(V_MAX) * h).clamp_unit();
    if next.holding {
        next.object = state.object + (next.ee - state.ee);
    }
    next
}

pub fn mode_of_manip(env: &PickPlace2DEnv, state: &ManipState) -> usize {
    if env.in_goal(state.object) {
        3
    } else if state.holding {
        2
    } else {
        1
    }
}

/// True iff the object rests inside the goal region at the final state.
pub fn task_success_manip(env: &PickPlace2DEnv, trajectory: &Trajectory) -> Result<bool> {
    let last = trajectory
        .states
        .last()
        .ok_or_else(|| Error::Input("empty trajectory".into()))?;
    Ok(env.in_goal(ManipState::from_raw(last)?.object))
}

/// Environment file contents, tagged by kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Nav(PolygonChainEnv),
    Manip(PickPlace2DEnv),
}

impl EnvSpec {
    pub fn id(&self) -> String {
        match self {
            EnvSpec::Nav(e) => e.id(),
            EnvSpec::Manip(e) => e.id(),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            EnvSpec::Nav(e) => e.k,
            EnvSpec::Manip(e) => e.k,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let env: EnvSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        match &env {
            EnvSpec::Nav(e) => e.validate()?,
            EnvSpec::Manip(e) => e.validate()?,
        }
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_k3_shares_one_edge() {
        let env = generate_polygon_chain(7, 3, 200).unwrap();
        assert_eq!(env.polygons.len(), 2);
        let (p, q) = (&env.polygons[0], &env.polygons[1]);
        let shared: Vec<_> = p
            .edges()
            .filter(|&(a, b)| q.edges().any(|(c, d)| c == b && d == a))
            .collect();
        assert_eq!(shared.len(), 1);
        // exactly two vertices in common, bit for bit
        let common = p.vertices.iter().filter(|v| q.vertices.contains(v)).count();
        assert_eq!(common, 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_polygon_chain(7, 3, 200).unwrap();
        let b = generate_polygon_chain(7, 3, 200).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k2_is_a_single_polygon() {
        let env = generate_polygon_chain(7, 2, 200).unwrap();
        assert_eq!(env.polygons.len(), 1);
        assert_eq!(env.adjacency, vec![[1, 2]]);
    }

    #[test]
    fn bad_k_rejected() {
        assert!(matches!(generate_polygon_chain(1, 1, 10), Err(Error::Input(_))));
        assert!(matches!(generate_polygon_chain(1, 9, 10), Err(Error::Input(_))));
    }

    #[test]
    fn exhausted_retries_is_generation_error() {
        let results: Vec<_> = (0..40).map(|s| generate_polygon_chain(s, 8, 1)).collect();
        assert!(results.iter().any(|r| matches!(r, Err(Error::Generation(_)))));
        assert!(results.iter().all(|r| matches!(r, Ok(_) | Err(Error::Generation(_)))));
    }

    #[test]
    fn chain_invariants_hold_for_many_seeds() {
        for seed in 0..100 {
            for k in [3, 5, 8] {
                let env = generate_polygon_chain(seed, k, 500).unwrap();
                env.validate().unwrap();
                for p in &env.polygons {
                    assert!(p.inradius_bound() >= 5.0 * STEP);
                }
                for i in 0..env.polygons.len() {
                    for j in i + 2..env.polygons.len() {
                        assert!(env.polygons[i].distance_to(&env.polygons[j]) > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn nav_oracle_examples() {
        let env = generate_polygon_chain(7, 3, 200).unwrap();
        assert_eq!(mode_of_nav(&env, env.polygons[0].centroid()), 2);
        assert_eq!(mode_of_nav(&env, env.polygons[1].centroid()), 3);
        let corners = [
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(1.0, 1.0),
        ];
        for c in corners {
            assert_eq!(mode_of_nav(&env, c), 1);
        }
        let (a, b) = env.shared_edge(2).unwrap();
        assert_eq!(mode_of_nav(&env, a.lerp(b, 0.5)), 2);
    }

    #[test]
    fn nav_oracle_partitions_grid() {
        let env = generate_polygon_chain(11, 5, 500).unwrap();
        let n = 120;
        for i in 0..n {
            for j in 0..n {
                let p = Vec2::new((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
                let m = mode_of_nav(&env, p);
                let inside: Vec<usize> = (0..env.polygons.len())
                    .filter(|&q| env.polygons[q].contains_strict(p))
                    .map(|q| q + 2)
                    .collect();
                assert!(inside.len() <= 1);
                match inside.first() {
                    Some(&q) => assert_eq!(m, q),
                    None if env.polygons.iter().all(|q| !q.contains(p)) => assert_eq!(m, 1),
                    None => {}
                }
            }
        }
    }

    #[test]
    fn nav_stepping() {
        let s = Vec2::new(0.5, 0.5);
        assert_eq!(step_nav(s, Vec2::default(), STEP), s);
        let n = step_nav(s, Vec2::new(1.0, 0.0), 0.01);
        assert!((n.x - 0.51).abs() < 1e-15 && n.y == 0.5);
        let edge = step_nav(Vec2::new(0.995, 0.2), Vec2::new(1.0, 0.0), 0.01);
        assert_eq!(edge, Vec2::new(1.0, 0.2));
    }

    fn held_env() -> (PickPlace2DEnv, ManipState) {
        let env = PickPlace2DEnv::default();
        let state = ManipState {
            ee: env.object_start,
            gripper: true,
            object: env.object_start,
            holding: true,
        };
        (env, state)
    }

    #[test]
    fn holding_moves_object_rigidly() {
        let (env, s) = held_env();
        let a = ManipAction { velocity: Vec2::new(1.0, 0.0), gripper: true };
        let n = step_manip(&env, &s, a, 0.01);
        assert!(((n.object - s.object) - Vec2::new(0.01, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn free_object_is_static() {
        let env = PickPlace2DEnv::default();
        let s = env.initial_state(Vec2::new(0.8, 0.1));
        let a = ManipAction { velocity: Vec2::new(-0.6, 0.8), gripper: false };
        let n = step_manip(&env, &s, a, 0.01);
        assert_eq!(n.object, s.object);
    }

    #[test]
    fn closing_far_from_object_does_not_grasp() {
        let env = PickPlace2DEnv::default();
        let s = env.initial_state(env.object_start + Vec2::new(2.0 * env.grasp_radius, 0.0));
        let n = step_manip(&env, &s, ManipAction { velocity: Vec2::default(), gripper: true }, 0.01);
        assert!(!n.holding && n.gripper);
        let s = env.initial_state(env.object_start + Vec2::new(0.5 * env.grasp_radius, 0.0));
        let n = step_manip(&env, &s, ManipAction { velocity: Vec2::default(), gripper: true }, 0.01);
        assert!(n.holding);
    }

    #[test]
    fn manip_modes() {
        let (env, mut s) = held_env();
        assert_eq!(mode_of_manip(&env, &s), 2);
        s.holding = false;
        assert_eq!(mode_of_manip(&env, &s), 1);
        s.object = env.goal_center;
        assert_eq!(mode_of_manip(&env, &s), 3);
    }

    #[test]
    fn held_displacement_equals_summed_ee_motion() {
        let env = PickPlace2DEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut s = env.initial_state(env.object_start);
            let start_obj = s.object;
            let mut held_sum = Vec2::default();
            for _ in 0..200 {
                let a = ManipAction {
                    velocity: Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                        .clamp_norm(1.0),
                    gripper: rng.random_bool(0.7),
                };
                let n = step_manip(&env, &s, a, 0.05);
                if n.holding {
                    held_sum = held_sum + (n.ee - s.ee);
                }
                s = n;
            }
            assert!(((s.object - start_obj) - held_sum).norm() < 1e-12);
        }
    }

    #[test]
    fn env_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let nav = EnvSpec::Nav(generate_polygon_chain(3, 5, 200).unwrap());
        let path = dir.path().join("nav.json");
        nav.save(&path).unwrap();
        assert_eq!(EnvSpec::load(&path).unwrap(), nav);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"kind\": \"nav\""));
        let manip = EnvSpec::Manip(PickPlace2DEnv::generate(4));
        manip.save(&path).unwrap();
        assert_eq!(EnvSpec::load(&path).unwrap(), manip);
    }
}
