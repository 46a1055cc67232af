//! RRT through free space and potential-field descent inside convex modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{ModeMap, PolygonChainEnv, STEP, V_MAX};
use crate::error::{Error, Result};
use crate::geometry::{ConvexPolygon, Vec2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub step_size: f64,
    pub goal_bias: f64,
    pub max_iterations: usize,
    pub potential_gain: f64,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            goal_bias: 0.1,
            max_iterations: 4000,
            potential_gain: 1.0,
            seed: 0,
        }
    }
}

/// Target of an RRT query: a point inside `mode`, to be entered directly
/// from free space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RrtGoal {
    pub target: Vec2,
    pub mode: usize,
}

fn samples_along(a: Vec2, b: Vec2) -> impl Iterator<Item = Vec2> {
    let n = ((a.dist(b) / (0.25 * STEP)).ceil() as usize).max(1);
    (0..=n).map(move |i| a.lerp(b, i as f64 / n as f64))
}

fn free_segment<M: ModeMap + ?Sized>(map: &M, a: Vec2, b: Vec2) -> bool {
    samples_along(a, b).all(|p| map.mode_at(p) == 1)
}

/// Free space first, then only `goal.mode` once it has been entered.
fn goal_segment<M: ModeMap + ?Sized>(map: &M, a: Vec2, goal: RrtGoal) -> bool {
    let mut entered = false;
    for p in samples_along(a, goal.target) {
        match map.mode_at(p) {
            1 if !entered => {}
            m if m == goal.mode => entered = true,
            _ => return false,
        }
    }
    entered
}

/// Plans a polyline from `start` through free space (mode 1) into
/// `goal.mode`, ending at `goal.target`. The raw tree path is shortcut
/// greedily.
pub fn plan_rrt<M: ModeMap + ?Sized>(
    map: &M,
    start: Vec2,
    goal: RrtGoal,
    cfg: &PlannerConfig,
) -> Result<Vec<Vec2>> {
    if map.mode_at(start) != 1 {
        return Err(Error::Usage(format!(
            "RRT start {start:?} is in mode {}, expected free space",
            map.mode_at(start)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nodes = vec![start];
    let mut parents = vec![usize::MAX];
    let mut reached = None;
    if goal_segment(map, start, goal) {
        reached = Some(0);
    }
    let mut iterations = 0;
    while reached.is_none() && iterations < cfg.max_iterations {
        iterations += 1;
        let sample = if rng.random_bool(cfg.goal_bias) {
            goal.target
        } else {
            Vec2::new(rng.random(), rng.random())
        };
        let (nearest, _) = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, n.dist(sample)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let from = nodes[nearest];
        let dir = sample - from;
        let new = if dir.norm() > cfg.step_size {
            from + dir.unit() * cfg.step_size
        } else {
            sample
        };
        if new == from || !free_segment(map, from, new) {
            continue;
        }
        nodes.push(new);
        parents.push(nearest);
        if goal_segment(map, new, goal) {
            reached = Some(nodes.len() - 1);
        }
    }
    let Some(last) = reached else {
        return Err(Error::Planning(format!(
            "no path into mode {} after {} iterations",
            goal.mode, cfg.max_iterations
        )));
    };
    let mut path = vec![goal.target];
    let mut i = last;
    while i != usize::MAX {
        path.push(nodes[i]);
        i = parents[i];
    }
    path.reverse();
    Ok(shortcut(map, &path, goal))
}

fn shortcut<M: ModeMap + ?Sized>(map: &M, path: &[Vec2], goal: RrtGoal) -> Vec<Vec2> {
    let last = path.len() - 1;
    let mut out = vec![path[0]];
    let mut i = 0;
    while i < last {
        let mut next = i + 1;
        for j in (i + 1..=last).rev() {
            let ok = if j == last {
                goal_segment(map, path[i], goal)
            } else {
                free_segment(map, path[i], path[j])
            };
            if ok {
                next = j;
                break;
            }
        }
        out.push(path[next]);
        i = next;
    }
    out
}

/// Convex regions for modes `2..=K` together with the point each region
/// descends toward: the crossing into the next mode, or a resting point in
/// the final mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeGeometry {
    pub k: usize,
    pub regions: Vec<ConvexPolygon>,
    pub targets: Vec<Vec2>,
    /// Direction that crosses from mode `k` into `k + 1` at its target.
    pub crossings: Vec<Vec2>,
}

impl ModeGeometry {
    pub fn from_env(env: &PolygonChainEnv) -> Self {
        let mut targets = Vec::new();
        let mut crossings = Vec::new();
        for mode in 2..=env.k {
            match env.shared_edge(mode) {
                Some((a, b)) => {
                    targets.push(a.lerp(b, 0.5));
                    let e = b - a;
                    crossings.push(Vec2::new(e.y, -e.x).unit());
                }
                None => {
                    targets.push(env.polygon(mode).centroid());
                    crossings.push(Vec2::default());
                }
            }
        }
        Self {
            k: env.k,
            regions: env.polygons.clone(),
            targets,
            crossings,
        }
    }

    pub fn region(&self, mode: usize) -> &ConvexPolygon {
        &self.regions[mode - 2]
    }

    pub fn target(&self, mode: usize) -> Vec2 {
        self.targets[mode - 2]
    }

    /// Entry point of the first convex mode, used as the RRT target.
    pub fn entry_goal(&self) -> RrtGoal {
        RrtGoal {
            target: self.target(2),
            mode: 2,
        }
    }
}

impl ModeMap for ModeGeometry {
    fn num_modes(&self) -> usize {
        self.k
    }

    fn mode_at(&self, p: Vec2) -> usize {
        self.regions
            .iter()
            .position(|r| r.contains(p))
            .map_or(1, |i| i + 2)
    }
}

/// Velocity that descends toward the target of `mode` while staying in the
/// region, crossing into `mode + 1` once the target is reached.
pub fn potential_step(geom: &ModeGeometry, state: Vec2, mode: usize, gain: f64) -> Result<Vec2> {
    if mode < 2 || mode > geom.k || !geom.region(mode).contains(state) {
        return Err(Error::Usage(format!("state {state:?} is not inside mode {mode}")));
    }
    let target = geom.target(mode);
    let offset = target - state;
    let last = mode == geom.k;
    let mut v = if offset.norm() <= 0.5 * STEP {
        if last {
            offset * (1.0 / STEP)
        } else {
            geom.crossings[mode - 2] * V_MAX
        }
    } else {
        (offset * (gain / STEP)).clamp_norm(V_MAX)
    };
    // shrink until the step lands in this mode or the next one
    for _ in 0..20 {
        let m = geom.mode_at((state + v * STEP).clamp_unit());
        if m == mode || (!last && m == mode + 1) {
            break;
        }
        v = v * 0.5;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_polygon_chain, mode_of_nav, step_nav};

    #[test]
    fn straight_shot_when_unobstructed() {
        let env = generate_polygon_chain(7, 3, 200).unwrap();
        let geom = ModeGeometry::from_env(&env);
        let goal = geom.entry_goal();
        // a start just outside P_2 across one of its free edges
        let poly = env.polygon(2);
        let (a, b) = env.shared_edge(2).unwrap();
        let i = (0..poly.len()).find(|&i| poly.edge(i) != (a, b)).unwrap();
        let (c, d) = poly.edge(i);
        let e = d - c;
        let start = c.lerp(d, 0.5) + Vec2::new(e.y, -e.x).unit() * 0.02;
        if mode_of_nav(&env, start) == 1 && goal_segment(&env, start, goal) {
            let path = plan_rrt(&env, start, goal, &PlannerConfig::default()).unwrap();
            assert_eq!(path, vec![start, goal.target]);
        }
    }

    #[test]
    fn paths_stay_in_free_space_until_entry() {
        for seed in 0..20 {
            let env = generate_polygon_chain(seed, 5, 500).unwrap();
            let geom = ModeGeometry::from_env(&env);
            let start = [Vec2::new(0.02, 0.02), Vec2::new(0.98, 0.98), Vec2::new(0.02, 0.98)]
                .into_iter()
                .find(|&p| mode_of_nav(&env, p) == 1)
                .unwrap();
            let cfg = PlannerConfig { seed, ..Default::default() };
            let path = plan_rrt(&env, start, geom.entry_goal(), &cfg).unwrap();
            let mut seen = vec![];
            for w in path.windows(2) {
                for p in samples_along(w[0], w[1]) {
                    let m = mode_of_nav(&env, p);
                    if seen.last() != Some(&m) {
                        seen.push(m);
                    }
                }
            }
            assert_eq!(seen, vec![1, 2], "seed {seed}");
        }
    }

    #[test]
    fn rrt_is_deterministic() {
        let env = generate_polygon_chain(4, 4, 500).unwrap();
        let geom = ModeGeometry::from_env(&env);
        let cfg = PlannerConfig { seed: 9, ..Default::default() };
        let start = Vec2::new(0.01, 0.5);
        let a = plan_rrt(&env, start, geom.entry_goal(), &cfg);
        let b = plan_rrt(&env, start, geom.entry_goal(), &cfg);
        assert_eq!(a.ok(), b.ok());
    }

    #[test]
    fn rrt_budget_exhaustion() {
        let env = generate_polygon_chain(4, 4, 500).unwrap();
        let geom = ModeGeometry::from_env(&env);
        // the target lies in mode 3, which a mode-2 goal segment never accepts
        let goal = RrtGoal { target: env.polygon(3).centroid(), mode: 2 };
        let cfg = PlannerConfig { max_iterations: 50, ..Default::default() };
        let start = Vec2::new(0.01, 0.01);
        assert!(geom.mode_at(start) == 1);
        assert!(matches!(plan_rrt(&env, start, goal, &cfg), Err(Error::Planning(_))));
    }

    #[test]
    fn potential_from_centroid_points_at_crossing() {
        let env = generate_polygon_chain(7, 3, 200).unwrap();
        let geom = ModeGeometry::from_env(&env);
        let c = env.polygon(2).centroid();
        let v = potential_step(&geom, c, 2, 1.0).unwrap();
        let want = (geom.target(2) - c).unit();
        assert!((v.unit() - want).norm() < 1e-12);
    }

    #[test]
    fn potential_at_crossing_enters_next_mode() {
        let env = generate_polygon_chain(7, 4, 200).unwrap();
        let geom = ModeGeometry::from_env(&env);
        for mode in 2..4 {
            let at = geom.target(mode);
            assert_eq!(mode_of_nav(&env, at), mode);
            let v = potential_step(&geom, at, mode, 1.0).unwrap();
            assert_eq!(mode_of_nav(&env, step_nav(at, v, STEP)), mode + 1);
        }
    }

    #[test]
    fn potential_outside_mode_is_usage_error() {
        let env = generate_polygon_chain(7, 3, 200).unwrap();
        let geom = ModeGeometry::from_env(&env);
        let r = potential_step(&geom, env.polygon(3).centroid(), 2, 1.0);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn descent_rollouts_never_skip_modes() {
        for seed in 0..30 {
            let env = generate_polygon_chain(seed, 5, 500).unwrap();
            let geom = ModeGeometry::from_env(&env);
            let mut p = env.polygon(2).centroid();
            let mut seq = vec![2];
            for _ in 0..2000 {
                let m = mode_of_nav(&env, p);
                if m == 5 && p.dist(geom.target(5)) < 1e-9 {
                    break;
                }
                let v = potential_step(&geom, p, m, 1.0).unwrap();
                p = step_nav(p, v, STEP);
                let m2 = mode_of_nav(&env, p);
                if m2 != *seq.last().unwrap() {
                    seq.push(m2);
                }
            }
            assert_eq!(seq, vec![2, 3, 4, 5], "seed {seed}");
        }
    }
}
