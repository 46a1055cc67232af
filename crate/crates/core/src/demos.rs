//! Scripted expert demonstrations for both environments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{
    mode_of_manip, mode_of_nav, step_manip, EnvSpec, ManipAction, ManipState, PickPlace2DEnv,
    PolygonChainEnv, STEP,
};
use crate::error::{Error, Result};
use crate::geometry::{resample_polyline, Vec2};
use crate::grounding::reduce_runs;
use crate::policy::planner::{plan_rrt, potential_step, ModeGeometry, PlannerConfig};
use crate::trajectory::{Trajectory, TrajectoryKind};
use crate::derive_seed;

const NAV_ATTEMPTS: u64 = 10;
const MAX_DESCENT_STEPS: usize = 20_000;
const MIN_START_SEPARATION: f64 = 0.05;
const WAYPOINT_JITTER: f64 = 0.05;

/// Nav trajectory through `positions` with actions `(s_{t+1} - s_t) / h`.
pub fn nav_trajectory(env_id: &str, positions: &[Vec2], kind: TrajectoryKind, success: bool) -> Trajectory {
    let states = positions.iter().map(|p| vec![p.x, p.y]).collect();
    let actions = positions
        .windows(2)
        .map(|w| {
            let v = (w[1] - w[0]) * (1.0 / STEP);
            vec![v.x, v.y]
        })
        .collect();
    Trajectory {
        env_id: env_id.to_string(),
        kind,
        success,
        states,
        actions,
        gripper: None,
    }
}

/// Simulates manipulation commands from `start`.
pub fn simulate_manip(
    env: &PickPlace2DEnv,
    start: ManipState,
    commands: &[ManipAction],
    kind: TrajectoryKind,
) -> Trajectory {
    let mut states = vec![start];
    for &a in commands {
        let next = step_manip(env, states.last().unwrap(), a, STEP);
        states.push(next);
    }
    let success = env.in_goal(states.last().unwrap().object);
    Trajectory {
        env_id: env.id(),
        kind,
        success,
        states: states.iter().map(ManipState::to_raw).collect(),
        actions: commands.iter().map(|a| vec![a.velocity.x, a.velocity.y]).collect(),
        gripper: Some(commands.iter().map(|a| a.gripper as u8).collect()),
    }
}

/// Commands that trace `points` at speed at most one step per tick.
fn trace(points: &[Vec2], gripper: bool, out: &mut Vec<ManipAction>) {
    for w in resample_polyline(points, STEP).windows(2) {
        out.push(ManipAction {
            velocity: (w[1] - w[0]) * (1.0 / STEP),
            gripper,
        });
    }
}

fn jitter(rng: &mut ChaCha8Rng, radius: f64) -> Vec2 {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let r = radius * rng.random::<f64>().sqrt();
    Vec2::new(r * angle.cos(), r * angle.sin())
}

fn nav_attempt(env: &PolygonChainEnv, geom: &ModeGeometry, start: Vec2, seed: u64) -> Result<Vec<Vec2>> {
    let cfg = PlannerConfig { seed, ..PlannerConfig::default() };
    let path = plan_rrt(env, start, geom.entry_goal(), &cfg)?;
    let mut positions = resample_polyline(&path, STEP);
    let goal = geom.target(env.k);
    let mut steps = 0;
    loop {
        let s = *positions.last().unwrap();
        if s.dist(goal) <= 1e-9 {
            break;
        }
        if steps == MAX_DESCENT_STEPS {
            return Err(Error::Planning("potential descent did not reach the final mode".into()));
        }
        let mode = mode_of_nav(env, s);
        let v = potential_step(geom, s, mode, cfg.potential_gain)?;
        positions.push((s + v * STEP).clamp_unit());
        steps += 1;
    }
    Ok(positions)
}

/// Expert demo from a free-space start, ending at the resting point of `P_K`.
/// The ground-truth reduced mode sequence is checked to be exactly `1..=K`;
/// failed attempts are retried with derived seeds.
pub fn demo_nav(env: &PolygonChainEnv, start: Vec2, seed: u64) -> Result<Trajectory> {
    if mode_of_nav(env, start) != 1 {
        return Err(Error::Usage(format!("demo start {start:?} is not in free space")));
    }
    let geom = ModeGeometry::from_env(env);
    let want: Vec<usize> = (1..=env.k).collect();
    let mut last_err = None;
    for attempt in 0..NAV_ATTEMPTS {
        match nav_attempt(env, &geom, start, derive_seed(seed, attempt)) {
            Ok(positions) => {
                let modes: Vec<usize> = positions.iter().map(|&p| mode_of_nav(env, p)).collect();
                if reduce_runs(&modes) == want {
                    return Ok(nav_trajectory(&env.id(), &positions, TrajectoryKind::Demo, true));
                }
                last_err = Some(Error::Planning(format!(
                    "demo visited modes {:?}",
                    reduce_runs(&modes)
                )));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap())
}

/// Reach, grasp, transport through a jittered midpoint, release.
pub fn demo_manip(env: &PickPlace2DEnv, start: ManipState, seed: u64) -> Result<Trajectory> {
    if start.holding || start.gripper {
        return Err(Error::Usage("manipulation demo must start with an open, empty gripper".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grasp = start.object + jitter(&mut rng, WAYPOINT_JITTER.min(0.4 * env.grasp_radius));
    let place = env.goal_center + jitter(&mut rng, WAYPOINT_JITTER.min(0.5 * env.goal_radius));
    let via = grasp.lerp(place, 0.5) + jitter(&mut rng, WAYPOINT_JITTER);
    let clamp = |p: Vec2| p.clamp_unit();
    let mut commands = Vec::new();
    trace(&[start.ee, clamp(grasp)], false, &mut commands);
    commands.push(ManipAction { velocity: Vec2::default(), gripper: true });
    trace(&[clamp(grasp), clamp(via), clamp(place)], true, &mut commands);
    commands.push(ManipAction { velocity: Vec2::default(), gripper: false });
    let traj = simulate_manip(env, start, &commands, TrajectoryKind::Demo);
    let modes: Vec<usize> = traj
        .states
        .iter()
        .map(|s| ManipState::from_raw(s).map(|m| mode_of_manip(env, &m)))
        .collect::<Result<_>>()?;
    if !traj.success || reduce_runs(&modes) != [1, 2, 3] {
        return Err(Error::Generation(format!(
            "scripted demo visited modes {:?}",
            reduce_runs(&modes)
        )));
    }
    Ok(traj)
}

fn sample_starts(
    n: usize,
    rng: &mut ChaCha8Rng,
    mut accept: impl FnMut(Vec2) -> bool,
) -> Result<Vec<Vec2>> {
    let mut starts: Vec<Vec2> = Vec::with_capacity(n);
    let mut tries = 0;
    while starts.len() < n {
        tries += 1;
        if tries > 10_000 * n {
            return Err(Error::Generation(format!("could not place {n} separated demo starts")));
        }
        let p = Vec2::new(rng.random_range(0.02..0.98), rng.random_range(0.02..0.98));
        if accept(p) && starts.iter().all(|s| s.dist(p) >= MIN_START_SEPARATION) {
            starts.push(p);
        }
    }
    Ok(starts)
}

/// `n` demos from separated random starts, each with its own derived seed.
pub fn demo_batch(env: &EnvSpec, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n < 1 {
        return Err(Error::Input("demo batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match env {
        EnvSpec::Nav(e) => {
            let starts = sample_starts(n, &mut rng, |p| mode_of_nav(e, p) == 1)?;
            starts
                .iter()
                .enumerate()
                .map(|(i, &s)| demo_nav(e, s, derive_seed(seed, i as u64)))
                .collect()
        }
        EnvSpec::Manip(e) => {
            let starts = sample_starts(n, &mut rng, |p| {
                p.dist(e.object_start) > e.grasp_radius && !e.in_goal(p)
            })?;
            starts
                .iter()
                .enumerate()
                .map(|(i, &s)| demo_manip(e, e.initial_state(s), derive_seed(seed, i as u64)))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_polygon_chain, step_nav};

    fn nav_modes(env: &PolygonChainEnv, t: &Trajectory) -> Vec<usize> {
        t.positions().iter().map(|&p| mode_of_nav(env, p)).collect()
    }

    #[test]
    fn nav_demos_visit_every_mode_in_order() {
        for (seed, k) in [(1, 3), (2, 4), (3, 5)] {
            let env = generate_polygon_chain(seed, k, 200).unwrap();
            let demos = demo_batch(&EnvSpec::Nav(env.clone()), 8, seed).unwrap();
            assert_eq!(demos.len(), 8);
            for d in &demos {
                assert!(d.success && d.kind == TrajectoryKind::Demo);
                assert_eq!(reduce_runs(&nav_modes(&env, d)), (1..=k).collect::<Vec<_>>());
                let last = *d.positions().last().unwrap();
                assert!(env.polygon(k).contains(last));
            }
        }
    }

    #[test]
    fn nav_actions_replay_states() {
        let env = generate_polygon_chain(5, 4, 200).unwrap();
        let d = demo_batch(&EnvSpec::Nav(env), 1, 5).unwrap().remove(0);
        let pos = d.positions();
        for (t, a) in d.actions.iter().enumerate() {
            let next = step_nav(pos[t], Vec2::new(a[0], a[1]), STEP);
            assert!(next.dist(pos[t + 1]) < 1e-12);
            assert!(pos[t].dist(pos[t + 1]) <= STEP + 1e-12);
        }
    }

    #[test]
    fn nav_start_next_to_first_polygon_is_shorter() {
        let env = generate_polygon_chain(11, 3, 200).unwrap();
        let geom = ModeGeometry::from_env(&env);
        let far = [Vec2::new(0.02, 0.02), Vec2::new(0.98, 0.98), Vec2::new(0.02, 0.98), Vec2::new(0.98, 0.02)]
            .into_iter()
            .filter(|&p| mode_of_nav(&env, p) == 1)
            .max_by(|a, b| a.dist(geom.target(2)).total_cmp(&b.dist(geom.target(2))))
            .unwrap();
        // just outside P_2 on the side away from P_3
        let c = env.polygon(2).centroid();
        let near = (1..200)
            .map(|i| c + (c - geom.target(2)).unit() * (i as f64 * 0.005))
            .find(|&p| mode_of_nav(&env, p) == 1)
            .unwrap();
        let a = demo_nav(&env, far, 1).unwrap();
        let b = demo_nav(&env, near, 1).unwrap();
        assert!(b.len() < a.len());
        assert_eq!(reduce_runs(&nav_modes(&env, &b)), vec![1, 2, 3]);
    }

    #[test]
    fn demos_are_deterministic() {
        let env = EnvSpec::Nav(generate_polygon_chain(4, 4, 200).unwrap());
        assert_eq!(demo_batch(&env, 2, 9).unwrap(), demo_batch(&env, 2, 9).unwrap());
        let m = EnvSpec::Manip(PickPlace2DEnv::default());
        assert_eq!(demo_batch(&m, 2, 9).unwrap(), demo_batch(&m, 2, 9).unwrap());
    }

    #[test]
    fn nav_demo_rejects_start_inside_a_polygon() {
        let env = generate_polygon_chain(4, 3, 200).unwrap();
        let inside = env.polygon(2).centroid();
        assert!(matches!(demo_nav(&env, inside, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn manip_demos_succeed() {
        let env = PickPlace2DEnv::default();
        let demos = demo_batch(&EnvSpec::Manip(env.clone()), 20, 3).unwrap();
        assert_eq!(demos.len(), 20);
        assert!(demos.iter().all(|d| d.success));
        for seed in 0..10 {
            let other = PickPlace2DEnv::generate(seed);
            let d = demo_batch(&EnvSpec::Manip(other), 1, seed).unwrap();
            assert!(d[0].success);
        }
    }

    #[test]
    fn manip_start_at_object() {
        let env = PickPlace2DEnv::default();
        let start = env.initial_state(env.object_start + Vec2::new(0.01, 0.0));
        let d = demo_manip(&env, start, 4).unwrap();
        assert!(d.success);
        let mut held = start;
        held.holding = true;
        assert!(matches!(demo_manip(&env, held, 4), Err(Error::Usage(_))));
    }

    #[test]
    fn starts_are_separated() {
        let env = EnvSpec::Nav(generate_polygon_chain(8, 3, 200).unwrap());
        let demos = demo_batch(&env, 10, 8).unwrap();
        let starts: Vec<Vec2> = demos.iter().map(|d| d.positions()[0]).collect();
        for i in 0..starts.len() {
            for j in 0..i {
                assert!(starts[i].dist(starts[j]) >= 0.05);
            }
        }
    }
}
