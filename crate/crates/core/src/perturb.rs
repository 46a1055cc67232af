//! Counterfactual replays of demonstrations, labelled by task success.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demos::{nav_trajectory, simulate_manip};
use crate::derive_seed;
use crate::envs::{mode_of_nav, EnvSpec, ManipAction, ManipState, PickPlace2DEnv, PolygonChainEnv, STEP};
use crate::error::{Error, Result};
use crate::geometry::{resample_polyline, Vec2};
use crate::grounding::{reduce_runs, FeasibilityMatrix};
use crate::trajectory::{Trajectory, TrajectoryKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    /// Replays kept in the dataset, demos excluded.
    pub total_replays: usize,
    /// Detour distance from the replaced segment's midpoint, as fractions of
    /// the workspace diagonal.
    pub detour_range: [f64; 2],
    /// Length range, in steps, of an inverted gripper window.
    pub window_range: [usize; 2],
    /// Probability that a manipulation replay gets an end-effector detour
    /// rather than a gripper toggle.
    pub ee_fraction: f64,
    /// Smallest share of either label among the kept replays.
    pub min_class_fraction: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            total_replays: 500,
            detour_range: [0.05, 0.5],
            window_range: [5, 30],
            ee_fraction: 0.5,
            min_class_fraction: 0.2,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.detour_range;
        let [wlo, whi] = self.window_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) || wlo < 1 || whi < wlo {
            return Err(Error::Config(format!(
                "perturbation ranges must be positive and ordered: {:?} {:?}",
                self.detour_range, self.window_range
            )));
        }
        if !(0.0..=1.0).contains(&self.ee_fraction) || !(0.0..=0.5).contains(&self.min_class_fraction) {
            return Err(Error::Config("ee_fraction must lie in [0, 1] and min_class_fraction in [0, 0.5]".into()));
        }
        if self.total_replays < 1 {
            return Err(Error::Config("total_replays must be >= 1".into()));
        }
        Ok(())
    }
}

/// True iff the ground-truth reduced mode sequence starts in mode 1, ends in
/// mode K, and only makes transitions with zero feasibility cost.
pub fn label_success_nav(env: &PolygonChainEnv, f: &FeasibilityMatrix, traj: &Trajectory) -> bool {
    let modes: Vec<usize> = traj.positions().iter().map(|&p| mode_of_nav(env, p)).collect();
    let reduced = reduce_runs(&modes);
    reduced.first() == Some(&1) && reduced.last() == Some(&env.k) && f.sequence_feasible(&reduced)
}

/// Success label routed per environment: mode sequence for navigation,
/// simulated outcome for manipulation.
pub fn label_success(env: &EnvSpec, f: &FeasibilityMatrix, traj: &Trajectory) -> Result<bool> {
    match env {
        EnvSpec::Nav(e) => Ok(label_success_nav(e, f, traj)),
        EnvSpec::Manip(e) => crate::envs::task_success_manip(e, traj),
    }
}

fn manip_commands(demo: &Trajectory) -> Result<Vec<ManipAction>> {
    let bits = demo
        .gripper
        .as_ref()
        .ok_or_else(|| Error::Usage("gripper perturbation needs a gripper channel".into()))?;
    Ok(demo
        .actions
        .iter()
        .zip(bits)
        .map(|(a, &g)| ManipAction {
            velocity: Vec2::new(a[0], a[1]),
            gripper: g != 0,
        })
        .collect())
}

/// Replaces the segment between states `i` and `j` with straight lines
/// `X -> z -> Y` resampled at the step size, then replays the rest.
pub fn detour(env: &EnvSpec, demo: &Trajectory, i: usize, j: usize, z: Vec2) -> Result<Trajectory> {
    let t_len = demo.states.len();
    if !(i < j && j < t_len) {
        return Err(Error::Input(format!("detour indices {i} < {j} < {t_len} violated")));
    }
    let pos = demo.positions();
    let bridge = resample_polyline(&[pos[i], z, pos[j]], STEP);
    match env {
        EnvSpec::Nav(e) => {
            let mut positions = pos[..i].to_vec();
            positions.extend(&bridge);
            positions.extend(&pos[j + 1..]);
            Ok(nav_trajectory(&e.id(), &positions, TrajectoryKind::Perturbed, demo.success))
        }
        EnvSpec::Manip(e) => {
            let cmds = manip_commands(demo)?;
            let mut out = cmds[..i].to_vec();
            let at_z = bridge
                .iter()
                .position(|p| *p == z)
                .unwrap_or(bridge.len() / 2);
            for (n, w) in bridge.windows(2).enumerate() {
                let gripper = if n < at_z { cmds[i].gripper } else { cmds[j - 1].gripper };
                out.push(ManipAction {
                    velocity: (w[1] - w[0]) * (1.0 / STEP),
                    gripper,
                });
            }
            out.extend(&cmds[j..]);
            Ok(simulate_manip(e, ManipState::from_raw(&demo.states[0])?, &out, TrajectoryKind::Perturbed))
        }
    }
}

/// Inverts the gripper command on steps `t1..t2` and re-simulates.
pub fn toggle_gripper(env: &PickPlace2DEnv, demo: &Trajectory, t1: usize, t2: usize) -> Result<Trajectory> {
    let mut cmds = manip_commands(demo)?;
    if t1 > t2 || t2 > cmds.len() {
        return Err(Error::Input(format!("gripper window {t1}..{t2} outside 0..{}", cmds.len())));
    }
    for c in &mut cmds[t1..t2] {
        c.gripper = !c.gripper;
    }
    Ok(simulate_manip(env, ManipState::from_raw(&demo.states[0])?, &cmds, TrajectoryKind::Perturbed))
}

/// Random detour: `X = s_i`, `Y = s_j` with `i < j`, and `Z` at a random
/// direction and distance from the midpoint of `XY`, inside the workspace.
pub fn perturb_end_effector(env: &EnvSpec, demo: &Trajectory, cfg: &PerturbConfig, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let t_len = demo.states.len();
    if t_len < 3 {
        return Err(Error::Input("end-effector perturbation needs T >= 3".into()));
    }
    let i = rng.random_range(0..t_len - 1);
    let j = rng.random_range(i + 1..t_len);
    let pos = demo.positions();
    let mid = pos[i].lerp(pos[j], 0.5);
    let [lo, hi] = cfg.detour_range;
    let diag = std::f64::consts::SQRT_2;
    let mut z = mid;
    for _ in 0..100 {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let r = if hi > lo { rng.random_range(lo..hi) } else { lo } * diag;
        let cand = mid + Vec2::new(angle.cos(), angle.sin()) * r;
        z = cand;
        if (0.0..=1.0).contains(&cand.x) && (0.0..=1.0).contains(&cand.y) {
            break;
        }
    }
    detour(env, demo, i, j, z.clamp_unit())
}

/// Random gripper toggle over a window whose length lies in `window_range`.
pub fn perturb_gripper(env: &EnvSpec, demo: &Trajectory, cfg: &PerturbConfig, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let EnvSpec::Manip(e) = env else {
        return Err(Error::Usage("gripper perturbation applies to manipulation only".into()));
    };
    let steps = demo.actions.len();
    let [lo, hi] = cfg.window_range;
    let len = rng.random_range(lo..=hi).min(steps);
    let t1 = rng.random_range(0..=steps - len);
    toggle_gripper(e, demo, t1, t1 + len)
}

/// One labelled replay from its own random stream.
pub fn replay(env: &EnvSpec, f: &FeasibilityMatrix, demos: &[Trajectory], cfg: &PerturbConfig, attempt: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, attempt));
    let demo = &demos[rng.random_range(0..demos.len())];
    let use_ee = match env {
        EnvSpec::Nav(_) => true,
        EnvSpec::Manip(_) => rng.random_bool(cfg.ee_fraction),
    };
    let mut t = if use_ee {
        perturb_end_effector(env, demo, cfg, &mut rng)?
    } else {
        perturb_gripper(env, demo, cfg, &mut rng)?
    };
    t.success = label_success(env, f, &t)?;
    Ok(t)
}

/// Demos followed by `total_replays` labelled replays in which each label
/// keeps at least `min_class_fraction` of the replays. Replays that would
/// push one label past its cap are discarded; the attempt budget is ten
/// times the replay count.
pub fn build_dataset(env: &EnvSpec, f: &FeasibilityMatrix, demos: &[Trajectory], cfg: &PerturbConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::Input("perturbation needs at least one demo".into()));
    }
    let n = cfg.total_replays;
    let cap = n - (cfg.min_class_fraction * n as f64).ceil() as usize;
    let budget = 10 * n as u64;
    let mut counts = [0usize; 2];
    let mut out = demos.to_vec();
    let mut attempt = 0;
    while counts[0] + counts[1] < n {
        if attempt == budget {
            return Err(Error::Dataset(format!(
                "could not balance labels within {budget} replays: {} successes, {} failures",
                counts[1], counts[0]
            )));
        }
        let t = replay(env, f, demos, cfg, attempt)?;
        attempt += 1;
        let c = &mut counts[t.success as usize];
        if *c < cap {
            *c += 1;
            out.push(t);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::demo_batch;
    use crate::envs::{chain_adjacency, generate_polygon_chain};
    use crate::grounding::build_feasibility;

    fn nav_setup(seed: u64, k: usize) -> (EnvSpec, PolygonChainEnv, FeasibilityMatrix, Vec<Trajectory>) {
        let env = generate_polygon_chain(seed, k, 200).unwrap();
        let spec = EnvSpec::Nav(env.clone());
        let f = build_feasibility(&chain_adjacency(k), k).unwrap();
        let demos = demo_batch(&spec, 8, seed).unwrap();
        (spec, env, f, demos)
    }

    fn path(points: &[(f64, f64)]) -> Trajectory {
        let p: Vec<Vec2> = points.iter().map(|&(x, y)| Vec2::new(x, y)).collect();
        nav_trajectory("t", &p, TrajectoryKind::Perturbed, false)
    }

    #[test]
    fn labeler_examples() {
        let (_, env, f, _) = nav_setup(7, 3);
        let free = Vec2::new(0.005, 0.005);
        assert_eq!(mode_of_nav(&env, free), 1);
        let p2 = env.polygon(2).centroid();
        let p3 = env.polygon(3).centroid();
        let t = |pts: &[Vec2]| path(&pts.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>());
        assert!(label_success_nav(&env, &f, &t(&[free, p2, p3])));
        assert!(!label_success_nav(&env, &f, &t(&[free, p3])));
        assert!(label_success_nav(&env, &f, &t(&[free, p2, free, p2, p3])));
        assert!(!label_success_nav(&env, &f, &t(&[free, p2])));
    }

    #[test]
    fn demos_label_success() {
        for (seed, k) in [(1, 3), (2, 4), (3, 5)] {
            let (spec, _, f, demos) = nav_setup(seed, k);
            for d in &demos {
                assert!(label_success(&spec, &f, d).unwrap());
            }
        }
        let m = EnvSpec::Manip(PickPlace2DEnv::default());
        let f3 = build_feasibility(&chain_adjacency(3), 3).unwrap();
        for d in demo_batch(&m, 5, 1).unwrap() {
            assert!(label_success(&m, &f3, &d).unwrap());
        }
    }

    #[test]
    fn detour_through_segment_point_keeps_success() {
        let (spec, _, f, demos) = nav_setup(3, 4);
        let d = &demos[0];
        let (i, j) = (5, d.len() - 10);
        let pos = d.positions();
        let z = pos[i].lerp(pos[j], 0.5);
        let t = detour(&spec, d, i, j, z).unwrap();
        assert_eq!(t.states[0], d.states[0]);
        assert_eq!(t.states.last(), d.states.last());
        // straight chord X->Y through a convex chain can still skip a mode,
        // so only a detour along the demo's own path is guaranteed safe
        let j2 = i + 1;
        let z2 = pos[i].lerp(pos[j2], 0.5);
        let t2 = detour(&spec, d, i, j2, z2).unwrap();
        assert!(label_success(&spec, &f, &t2).unwrap());
        for (a, b) in t2.positions().iter().zip(d.positions().iter()) {
            assert!(a.dist(*b) < 1e-12);
        }
    }

    #[test]
    fn escape_from_final_mode_fails() {
        let (spec, env, f, demos) = nav_setup(7, 3);
        let d = &demos[0];
        let pos = d.positions();
        let inside: Vec<usize> = (0..pos.len()).filter(|&t| mode_of_nav(&env, pos[t]) == 3).collect();
        let (i, j) = (inside[0], *inside.last().unwrap());
        // leave P_3 straight into free space away from P_2
        let away = (pos[i] - env.polygon(2).centroid()).unit();
        let z = (0..100)
            .map(|s| pos[i] + away * (0.05 + 0.01 * s as f64))
            .map(Vec2::clamp_unit)
            .find(|&p| mode_of_nav(&env, p) == 1)
            .unwrap();
        let t = detour(&spec, d, i, j.max(i + 1), z).unwrap();
        let modes: Vec<usize> = t.positions().iter().map(|&p| mode_of_nav(&env, p)).collect();
        assert!(reduce_runs(&modes).windows(2).any(|w| w == [3, 1]));
        assert!(!label_success(&spec, &f, &t).unwrap());
    }

    #[test]
    fn endpoints_preserved() {
        let (spec, _, _, demos) = nav_setup(2, 5);
        let cfg = PerturbConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 0..200 {
            let d = &demos[n % demos.len()];
            let t = perturb_end_effector(&spec, d, &cfg, &mut rng).unwrap();
            assert_eq!(t.states[0], d.states[0]);
            assert_eq!(t.states.last(), d.states.last());
            assert_eq!(t.kind, TrajectoryKind::Perturbed);
            t.validate().unwrap();
        }
    }

    #[test]
    fn gripper_toggles() {
        let env = PickPlace2DEnv::default();
        let spec = EnvSpec::Manip(env.clone());
        let d = demo_batch(&spec, 1, 2).unwrap().remove(0);
        // empty window replays the demo
        assert_eq!(toggle_gripper(&env, &d, 10, 10).unwrap().states, d.states);
        assert!(toggle_gripper(&env, &d, 10, 10).unwrap().success);
        // opening mid-transport, far from the goal, drops the object
        let bits = d.gripper.as_ref().unwrap();
        let close = bits.iter().position(|&b| b == 1).unwrap();
        let open = bits.iter().rposition(|&b| b == 1).unwrap();
        let mid = (close + open) / 3;
        let t = toggle_gripper(&env, &d, mid, mid + 20).unwrap();
        assert!(!t.success);
        let nav = EnvSpec::Nav(generate_polygon_chain(1, 3, 200).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            perturb_gripper(&nav, &d, &PerturbConfig::default(), &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let (spec, _, f, demos) = nav_setup(1, 3);
        let cfg = PerturbConfig { total_replays: 200, seed: 3, ..Default::default() };
        let a = build_dataset(&spec, &f, &demos, &cfg).unwrap();
        let b = build_dataset(&spec, &f, &demos, &cfg).unwrap();
        assert_eq!(a, b);
        let replays = &a[demos.len()..];
        assert_eq!(replays.len(), 200);
        let succ = replays.iter().filter(|t| t.success).count();
        assert!((40..=160).contains(&succ), "{succ}");
        for t in replays {
            assert_eq!(t.success, label_success(&spec, &f, t).unwrap());
        }
    }

    #[test]
    fn manip_dataset_has_both_labels() {
        let spec = EnvSpec::Manip(PickPlace2DEnv::default());
        let f = build_feasibility(&chain_adjacency(3), 3).unwrap();
        let demos = demo_batch(&spec, 8, 0).unwrap();
        let cfg = PerturbConfig { total_replays: 100, ..Default::default() };
        let data = build_dataset(&spec, &f, &demos, &cfg).unwrap();
        let succ = data[8..].iter().filter(|t| t.success).count();
        assert!((20..=80).contains(&succ));
    }

    #[test]
    fn vanishing_detours_cannot_balance() {
        // with two modes every endpoint-preserving path is feasible
        let (spec, _, f, demos) = nav_setup(5, 2);
        let cfg = PerturbConfig { total_replays: 50, detour_range: [1e-9, 2e-9], ..Default::default() };
        assert!(matches!(build_dataset(&spec, &f, &demos, &cfg), Err(Error::Dataset(_))));
    }
}
