//! Behavior cloning: one policy over all successes, or one per mode with a
//! pull toward the place where that mode hands over to the next.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::V_MAX;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::grounding::{GroundingModel, Normalizer};
use crate::nnet::{Activation, Adam, DenseNet, Head, ParamGrads};
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("bc epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad bc learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Regressor from raw state to action. Manipulation actions carry the
/// gripper command as a third channel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BCPolicy {
    pub normalizer: Normalizer,
    pub net: DenseNet,
}

impl BCPolicy {
    pub fn action_dim(&self) -> usize {
        self.net.output_width()
    }

    pub fn act(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.normalizer.mean.len() {
            return Err(Error::Input(format!(
                "policy expects {} state channels, got {}",
                self.normalizer.mean.len(),
                raw.len()
            )));
        }
        let mut x = raw.to_vec();
        self.normalizer.apply(&mut x);
        self.net.forward(&x)
    }
}

/// `(state, action)` pairs of one trajectory, the gripper command appended
/// when present.
pub fn bc_samples(traj: &Trajectory) -> Vec<(Vec<f64>, Vec<f64>)> {
    traj.actions
        .iter()
        .enumerate()
        .map(|(t, a)| {
            let mut y = a.clone();
            if let Some(g) = &traj.gripper {
                y.push(f64::from(g[t]));
            }
            (traj.states[t].clone(), y)
        })
        .collect()
}

/// Mean-squared-error regression over shuffled minibatches.
pub fn fit_bc(samples: &[(Vec<f64>, Vec<f64>)], cfg: &BcConfig) -> Result<BCPolicy> {
    cfg.validate()?;
    let Some((x0, y0)) = samples.first() else {
        return Err(Error::Dataset("behavior cloning needs at least one sample".into()));
    };
    let (dx, dy) = (x0.len(), y0.len());
    if samples.iter().any(|(x, y)| x.len() != dx || y.len() != dy) {
        return Err(Error::Input("behavior cloning samples have mixed widths".into()));
    }
    let flat: Vec<f64> = samples.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let normalizer = Normalizer::fit(&flat, dx);
    let inputs: Vec<Vec<f64>> = samples
        .iter()
        .map(|(x, _)| {
            let mut x = x.clone();
            normalizer.apply(&mut x);
            x
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut widths = vec![dx];
    widths.extend(&cfg.hidden);
    widths.push(dy);
    let mut net = DenseNet::new(&widths, Activation::Tanh, Head::Linear, &mut rng)?;
    let mut opt = Adam::new(&net, cfg.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
            let tape = net.forward_batch(&x, chunk.len())?;
            let scale = 2.0 / (chunk.len() * dy) as f64;
            let upstream: Vec<f64> = tape
                .output()
                .chunks(dy)
                .zip(chunk)
                .flat_map(|(out, &i)| {
                    out.iter()
                        .zip(&samples[i].1)
                        .map(|(o, y)| scale * (o - y))
                        .collect::<Vec<_>>()
                })
                .collect();
            let mut grads = ParamGrads::zeros_like(&net);
            net.backward_into(&tape, &upstream, &mut grads)?;
            opt.step(&mut net, &grads, "bc")?;
        }
    }
    Ok(BCPolicy { normalizer, net })
}

/// Mean squared error of `policy` over `samples`.
pub fn bc_mse(policy: &BCPolicy, samples: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in samples {
        for (o, t) in policy.act(x)?.iter().zip(y) {
            sum += (o - t) * (o - t);
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

fn successes(trajs: &[Trajectory]) -> Result<Vec<&Trajectory>> {
    let out: Vec<&Trajectory> = trajs.iter().filter(|t| t.success).collect();
    if out.is_empty() {
        return Err(Error::Dataset("behavior cloning needs at least one success trajectory".into()));
    }
    Ok(out)
}

/// One policy over every step of every success trajectory.
pub fn train_bc(trajs: &[Trajectory], cfg: &BcConfig) -> Result<BCPolicy> {
    let samples: Vec<_> = successes(trajs)?.into_iter().flat_map(bc_samples).collect();
    fit_bc(&samples, cfg)
}

/// Planar position that attractors act on: the agent in nav, the end
/// effector in manipulation. Both sit in the first two state channels.
pub fn planar(raw: &[f64]) -> Vec2 {
    Vec2::new(raw[0], raw[1])
}

/// Per-mode policies for the plan `1 -> ... -> K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModePolicySet {
    pub k: usize,
    pub policies: Vec<BCPolicy>,
    /// Attractor of mode `m` at index `m - 1`.
    pub attractors: Vec<Vec2>,
    pub weight: f64,
    pub threshold: f64,
}

pub const ATTRACTOR_WEIGHT: f64 = 0.5;
pub const ATTRACTOR_THRESHOLD: f64 = 0.05;

/// Mean position of the first state after each `m -> m + 1` step under
/// `per_step` labels, for `m < K`; the mean final position for `m = K`.
pub fn attractors(k: usize, trajs: &[(&Trajectory, Vec<usize>)]) -> Result<Vec<Vec2>> {
    let mut sums = vec![(Vec2::default(), 0usize); k];
    for (traj, modes) in trajs {
        for t in 1..modes.len() {
            let m = modes[t - 1];
            if m < k && modes[t] == m + 1 {
                let p = planar(&traj.states[t]);
                sums[m - 1].0 = sums[m - 1].0 + p;
                sums[m - 1].1 += 1;
            }
        }
        let last = planar(traj.states.last().unwrap());
        sums[k - 1].0 = sums[k - 1].0 + last;
        sums[k - 1].1 += 1;
    }
    sums.iter()
        .enumerate()
        .map(|(i, &(s, n))| match n {
            0 => Err(Error::Dataset(format!(
                "no transition out of mode {} in the demonstrations",
                i + 1
            ))),
            _ => Ok(s * (1.0 / n as f64)),
        })
        .collect()
}

/// Segments success trajectories with `model` and clones one policy per
/// mode from the steps whose state falls in that mode.
pub fn train_mode_bc(model: &GroundingModel, trajs: &[Trajectory], cfg: &BcConfig) -> Result<ModePolicySet> {
    let k = model.k;
    let labelled: Vec<(&Trajectory, Vec<usize>)> = successes(trajs)?
        .into_iter()
        .map(|t| model.segment(t).map(|s| (t, s.per_step)))
        .collect::<Result<_>>()?;
    let mut per_mode: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); k];
    for (traj, modes) in &labelled {
        for (t, sample) in bc_samples(traj).into_iter().enumerate() {
            per_mode[modes[t] - 1].push(sample);
        }
    }
    let policies = per_mode
        .iter()
        .enumerate()
        .map(|(i, samples)| {
            if samples.is_empty() {
                return Err(Error::Dataset(format!("mode {} has no demonstration data", i + 1)));
            }
            fit_bc(samples, &BcConfig { seed: crate::derive_seed(cfg.seed, i as u64), ..cfg.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModePolicySet {
        k,
        policies,
        attractors: attractors(k, &labelled)?,
        weight: ATTRACTOR_WEIGHT,
        threshold: ATTRACTOR_THRESHOLD,
    })
}

/// Blends the mode policy with a unit pull toward the mode's attractor when
/// the agent is farther than the threshold; the velocity is clamped to
/// `V_MAX`. Any further action channels pass through from the policy.
pub fn act_mode_bc(set: &ModePolicySet, model: &GroundingModel, raw: &[f64]) -> Result<Vec<f64>> {
    let (_, mode) = model.classify(raw)?;
    blend(set, mode, raw)
}

fn blend(set: &ModePolicySet, mode: usize, raw: &[f64]) -> Result<Vec<f64>> {
    let mut a = set.policies[mode - 1].act(raw)?;
    let pos = planar(raw);
    let to = set.attractors[mode - 1] - pos;
    let mut v = Vec2::new(a[0], a[1]);
    if to.norm() > set.threshold {
        v = v * (1.0 - set.weight) + to.unit() * (set.weight * V_MAX);
    }
    let v = v.clamp_norm(V_MAX);
    a[0] = v.x;
    a[1] = v.y;
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::nav_trajectory;
    use crate::envs::STEP;
    use crate::grounding::train::init_model;
    use crate::grounding::{build_feasibility, TrainConfig};
    use crate::llmclient::features::{FeatureRegistry, FeatureSpec};
    use crate::trajectory::TrajectoryKind;
    use proptest::prelude::*;

    fn line(from: Vec2, to: Vec2) -> Trajectory {
        let n = (from.dist(to) / STEP).round() as usize;
        let pts: Vec<Vec2> = (0..=n).map(|i| from.lerp(to, i as f64 / n as f64)).collect();
        nav_trajectory("t", &pts, TrajectoryKind::Demo, true)
    }

    #[test]
    fn straight_demo_is_cloned() {
        let demo = line(Vec2::new(0.1, 0.2), Vec2::new(0.8, 0.6));
        let policy = train_bc(&[demo.clone()], &BcConfig { epochs: 400, ..Default::default() }).unwrap();
        assert!(bc_mse(&policy, &bc_samples(&demo)).unwrap() <= 1e-3);
    }

    #[test]
    fn training_is_deterministic_and_needs_successes() {
        let demo = line(Vec2::new(0.1, 0.1), Vec2::new(0.5, 0.9));
        let cfg = BcConfig { epochs: 5, ..Default::default() };
        let a = train_bc(&[demo.clone()], &cfg).unwrap();
        let b = train_bc(&[demo.clone()], &cfg).unwrap();
        assert_eq!(a, b);
        let mut failed = demo;
        failed.success = false;
        assert!(matches!(train_bc(&[failed], &cfg), Err(Error::Dataset(_))));
    }

    fn path(pts: &[(f64, f64)]) -> Trajectory {
        let pts: Vec<Vec2> = pts.iter().map(|&(x, y)| Vec2::new(x, y)).collect();
        nav_trajectory("t", &pts, TrajectoryKind::Demo, true)
    }

    #[test]
    fn attractor_is_the_mean_transition_point() {
        let a = path(&[(0.3, 0.3), (0.35, 0.35), (0.4, 0.4), (0.45, 0.45)]);
        let b = path(&[(0.5, 0.5), (0.6, 0.6), (0.65, 0.65)]);
        let got = attractors(2, &[(&a, vec![1, 1, 2, 2]), (&b, vec![1, 2, 2])]).unwrap();
        assert!(got[0].dist(Vec2::new(0.5, 0.5)) < 1e-12, "{got:?}");
        assert!(got[1].dist(Vec2::new(0.55, 0.55)) < 1e-12);
        let single = attractors(2, &[(&a, vec![1, 1, 2, 2])]).unwrap();
        assert_eq!(single[0], Vec2::new(0.4, 0.4));
        assert!(matches!(attractors(2, &[(&a, vec![1; 4])]), Err(Error::Dataset(_))));
    }

    fn toy_set(weight: f64) -> (ModePolicySet, GroundingModel) {
        let demo = line(Vec2::new(0.2, 0.2), Vec2::new(0.6, 0.2));
        let f = build_feasibility(&[[1, 2]], 2).unwrap();
        let spec = FeatureSpec::new(&FeatureRegistry::nav(), vec!["x".into(), "y".into()]).unwrap();
        let (model, _) = init_model(&[demo.clone()], &f, &spec, &TrainConfig::default()).unwrap();
        let policy = train_bc(&[demo], &BcConfig { epochs: 20, ..Default::default() }).unwrap();
        let set = ModePolicySet {
            k: 2,
            policies: vec![policy.clone(), policy],
            attractors: vec![Vec2::new(0.9, 0.9), Vec2::new(0.9, 0.9)],
            weight,
            threshold: ATTRACTOR_THRESHOLD,
        };
        (set, model)
    }

    #[test]
    fn attractor_term_switches_off_near_the_attractor() {
        let (set, model) = toy_set(0.5);
        let at = [0.9, 0.9];
        let (_, m) = model.classify(&at).unwrap();
        let raw = set.policies[m - 1].act(&at).unwrap();
        let v = Vec2::new(raw[0], raw[1]).clamp_norm(V_MAX);
        let got = act_mode_bc(&set, &model, &at).unwrap();
        assert!(Vec2::new(got[0], got[1]).dist(v) < 1e-12);
        let (plain, _) = toy_set(0.0);
        let far = [0.05, 0.95];
        let a = act_mode_bc(&plain, &model, &far).unwrap();
        let b = plain.policies[model.classify(&far).unwrap().1 - 1].act(&far).unwrap();
        assert!(Vec2::new(a[0], a[1]).dist(Vec2::new(b[0], b[1]).clamp_norm(V_MAX)) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn blended_actions_are_bounded(x in 0.0..1.0f64, y in 0.0..1.0f64) {
            let (set, model) = toy_set(0.5);
            let a = act_mode_bc(&set, &model, &[x, y]).unwrap();
            prop_assert!(Vec2::new(a[0], a[1]).norm() <= V_MAX + 1e-12);
        }

        #[test]
        fn full_pull_points_at_the_attractor(x in 0.0..0.8f64, y in 0.0..0.8f64) {
            let (set, model) = toy_set(1.0);
            let a = act_mode_bc(&set, &model, &[x, y]).unwrap();
            let to = Vec2::new(0.9 - x, 0.9 - y);
            prop_assert!(Vec2::new(a[0], a[1]).dot(to) > 0.0);
        }
    }
}
