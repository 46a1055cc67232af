//! Classification accuracy against ground truth and the clustering baseline.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{mode_of_manip, mode_of_nav, EnvSpec, ManipState, PickPlace2DEnv, PolygonChainEnv};
use crate::error::{Error, Result};
use crate::grounding::{train, FeasibilityMatrix, GroundingModel, TrainConfig};
use crate::llmclient::features::FeatureSpec;
use crate::policy::bc::{BCPolicy, ModePolicySet};
use crate::policy::rollout::{execute, Controller, LearnedMap, PlanningPolicy, PolicyKind, TestPerturbation};
use crate::trajectory::Trajectory;

/// Anything that maps raw states to 1-based modes.
pub trait ModeClassifier {
    fn num_modes(&self) -> usize;
    fn classify_states(&self, raw_states: &[Vec<f64>]) -> Result<Vec<usize>>;
}

impl ModeClassifier for GroundingModel {
    fn num_modes(&self) -> usize {
        self.k
    }

    fn classify_states(&self, raw_states: &[Vec<f64>]) -> Result<Vec<usize>> {
        self.classify_batch(raw_states)
    }
}

/// Row-major `K x K` counts, `[truth - 1][predicted - 1]`.
pub fn confusion(truth: &[usize], predicted: &[usize], k: usize) -> Vec<u64> {
    let mut c = vec![0u64; k * k];
    for (&t, &p) in truth.iter().zip(predicted) {
        c[(t - 1) * k + (p - 1)] += 1;
    }
    c
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Largest agreement over one-to-one assignments of predicted modes to true
/// modes, as a fraction of all samples. Exhaustive over `K!` assignments.
pub fn matched_accuracy(confusion: &[u64], k: usize) -> f64 {
    let total: u64 = confusion.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    loop {
        let agree: u64 = (0..k).map(|t| confusion[t * k + perm[t]]).sum();
        best = best.max(agree);
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best as f64 / total as f64
}

/// Cell centres of a `n x n` grid over the unit square.
pub fn grid_points(n: usize) -> Vec<Vec<f64>> {
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            pts.push(vec![(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64]);
        }
    }
    pts
}

/// Matched accuracy on a `grid x grid` lattice against the polygon oracle.
pub fn accuracy_nav<C: ModeClassifier + ?Sized>(classifier: &C, env: &PolygonChainEnv, grid: usize) -> Result<f64> {
    let pts = grid_points(grid);
    let truth: Vec<usize> = pts
        .iter()
        .map(|p| mode_of_nav(env, crate::geometry::Vec2::new(p[0], p[1])))
        .collect();
    let pred = classifier.classify_states(&pts)?;
    check_range(&pred, env.k)?;
    Ok(matched_accuracy(&confusion(&truth, &pred, env.k), env.k))
}

/// Matched accuracy on every state of `trajs` against the heuristic modes.
pub fn accuracy_manip<C: ModeClassifier + ?Sized>(classifier: &C, env: &PickPlace2DEnv, trajs: &[Trajectory]) -> Result<f64> {
    let states: Vec<Vec<f64>> = trajs.iter().flat_map(|t| t.states.iter().cloned()).collect();
    let truth = states
        .iter()
        .map(|s| ManipState::from_raw(s).map(|m| mode_of_manip(env, &m)))
        .collect::<Result<Vec<_>>>()?;
    let pred = classifier.classify_states(&states)?;
    check_range(&pred, env.k)?;
    Ok(matched_accuracy(&confusion(&truth, &pred, env.k), env.k))
}

fn check_range(pred: &[usize], k: usize) -> Result<()> {
    match pred.iter().find(|&&m| m < 1 || m > k) {
        Some(m) => Err(Error::Validation(format!("classifier returned mode {m} outside 1..={k}"))),
        None => Ok(()),
    }
}

/// Nearest-centre classifier from clustering demo features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansClassifier {
    pub features: FeatureSpec,
    /// Centres in feature space, ordered so index `m - 1` is mode `m`.
    pub centers: Vec<Vec<f64>>,
}

impl KMeansClassifier {
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centers.iter().enumerate() {
            let d = sq_dist(c, x);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1 + 1
    }
}

impl ModeClassifier for KMeansClassifier {
    fn num_modes(&self) -> usize {
        self.centers.len()
    }

    fn classify_states(&self, raw_states: &[Vec<f64>]) -> Result<Vec<usize>> {
        raw_states
            .iter()
            .map(|s| self.features.extract(s).map(|x| self.nearest(&x)))
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances to the nearest centre.
pub fn kmeans_objective(points: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| centers.iter().map(|c| sq_dist(c, p)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// kmeans++ seeding followed by Lloyd iterations until assignments settle.
/// Returns the centres and the objective after each iteration.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut distinct = points.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < k || k == 0 {
        return Err(Error::Input(format!(
            "kmeans needs at least {k} distinct points, got {}",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && r < d {
                pick = i;
                break;
            }
            r -= d;
        }
        centers.push(points[pick].clone());
        for (dist, p) in d2.iter_mut().zip(points) {
            *dist = dist.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let mut best = (f64::INFINITY, 0);
            for (i, c) in centers.iter().enumerate() {
                let d = sq_dist(c, p);
                if d < best.0 {
                    best = (d, i);
                }
            }
            if *a != best.1 {
                *a = best.1;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centers.iter_mut().zip(&sums).zip(&counts) {
            // an emptied cluster keeps its previous centre
            if n > 0 {
                *c = s.iter().map(|v| v / n as f64).collect();
            }
        }
        history.push(kmeans_objective(points, &centers));
        if !changed {
            break;
        }
    }
    Ok((centers, history))
}

/// Clusters the feature vectors of `demos` and orders clusters by the mean
/// normalized time at which demos first visit them.
pub fn kmeans_baseline(demos: &[Trajectory], features: &FeatureSpec, k: usize, seed: u64) -> Result<KMeansClassifier> {
    let per_demo: Vec<Vec<Vec<f64>>> = demos
        .iter()
        .map(|d| d.states.iter().map(|s| features.extract(s)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let points: Vec<Vec<f64>> = per_demo.iter().flatten().cloned().collect();
    let (centers, _) = kmeans(&points, k, seed, 300)?;
    let probe = KMeansClassifier {
        features: features.clone(),
        centers: centers.clone(),
    };
    let mut first_visit = vec![(0.0, 0usize); k];
    for demo in &per_demo {
        let mut seen = vec![false; k];
        for (t, x) in demo.iter().enumerate() {
            let c = probe.nearest(x) - 1;
            if !seen[c] {
                seen[c] = true;
                first_visit[c].0 += t as f64 / demo.len().max(1) as f64;
                first_visit[c].1 += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    let key = |c: usize| {
        let (s, n) = first_visit[c];
        if n == 0 {
            f64::INFINITY
        } else {
            s / n as f64
        }
    };
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    Ok(KMeansClassifier {
        features: features.clone(),
        centers: order.into_iter().map(|c| centers[c].clone()).collect(),
    })
}

/// Variants compared in the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoFailureData,
    NoDynamicsLoss,
    NoPredictionLoss,
    NoFeatureSelection,
    Kmeans,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoFailureData,
        Variant::NoDynamicsLoss,
        Variant::NoPredictionLoss,
        Variant::NoFeatureSelection,
        Variant::Kmeans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFailureData => "no-failure-data",
            Variant::NoDynamicsLoss => "no-dynamics-loss",
            Variant::NoPredictionLoss => "no-prediction-loss",
            Variant::NoFeatureSelection => "no-feature-selection",
            Variant::Kmeans => "kmeans",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Usage(format!("unknown ablation variant {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub env: String,
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
}

/// Grid accuracy for nav, dataset-state accuracy for manipulation.
pub fn accuracy<C: ModeClassifier + ?Sized>(classifier: &C, env: &EnvSpec, dataset: &[Trajectory]) -> Result<f64> {
    match env {
        EnvSpec::Nav(e) => accuracy_nav(classifier, e, NAV_GRID),
        EnvSpec::Manip(e) => accuracy_manip(classifier, e, dataset),
    }
}

/// Side length of the nav evaluation grid.
pub const NAV_GRID: usize = 200;

/// Trains `variant` on `dataset` and scores it. `cfg` is the full method's
/// configuration; each variant removes one ingredient from it.
pub fn run_ablation(
    env: &EnvSpec,
    f: &FeasibilityMatrix,
    demos: &[Trajectory],
    dataset: &[Trajectory],
    features: &FeatureSpec,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<AblationRow> {
    let mut cfg = cfg.clone();
    let mut features = features.clone();
    let mut data: Vec<Trajectory> = dataset.to_vec();
    match variant {
        Variant::Full => {}
        Variant::NoFailureData => {
            data.retain(|t| t.success);
            cfg.weights.fail = 0.0;
        }
        Variant::NoDynamicsLoss => {
            cfg.dynamics = false;
            cfg.weights.dynamics = 0.0;
        }
        Variant::NoPredictionLoss => {
            cfg.weights.succ = 0.0;
            cfg.weights.fail = 0.0;
        }
        Variant::NoFeatureSelection => {
            let registry = features.registry();
            features = FeatureSpec::new(&registry, registry.names())?;
        }
        Variant::Kmeans => {}
    }
    let accuracy = if variant == Variant::Kmeans {
        let clf = kmeans_baseline(demos, &features, f.k(), cfg.seed)?;
        self::accuracy(&clf, env, dataset)?
    } else {
        let (model, _) = train(&data, f, &features, &cfg)?;
        self::accuracy(&model, env, dataset)?
    };
    Ok(AblationRow {
        env: env.id(),
        variant,
        seed: cfg.seed,
        accuracy,
    })
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "env,variant,seed,accuracy")?;
    for r in rows {
        writeln!(out, "{},{},{},{:.6}", r.env, r.variant.name(), r.seed, r.accuracy)?;
    }
    Ok(())
}

/// Trained controllers for one environment. BC-style entries hold one
/// policy per training seed; trials cycle through them.
pub struct PolicyBundle<'a> {
    pub bc: &'a [BCPolicy],
    pub mode_bc: &'a [ModePolicySet],
    pub model: &'a GroundingModel,
    pub planning: Option<(&'a PlanningPolicy, &'a LearnedMap)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableConfig {
    pub trials: usize,
    pub max_steps: usize,
    pub perturbation: TestPerturbation,
    pub seed: u64,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            max_steps: 600,
            perturbation: TestPerturbation::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub env: String,
    pub policy: PolicyKind,
    pub perturbed: bool,
    pub trials: usize,
    pub successes: usize,
}

impl SuccessRow {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

/// Random start for a trial: a free-space point for nav, an open gripper
/// away from the object and goal for manipulation.
pub fn sample_start(env: &EnvSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let p = crate::geometry::Vec2::new(rng.random_range(0.02..0.98), rng.random_range(0.02..0.98));
        match env {
            EnvSpec::Nav(e) if mode_of_nav(e, p) == 1 => return vec![p.x, p.y],
            EnvSpec::Manip(e) if p.dist(e.object_start) > e.grasp_radius && !e.in_goal(p) => {
                return e.initial_state(p).to_raw()
            }
            _ => {}
        }
    }
}

/// Success counts for every controller present in `bundle`, with and
/// without the test-time push. Trial `i` uses the same start and push for every
/// controller.
pub fn success_table(env: &EnvSpec, f: &FeasibilityMatrix, bundle: &PolicyBundle, cfg: &TableConfig) -> Result<Vec<SuccessRow>> {
    if cfg.trials == 0 {
        return Err(Error::Input("success table needs at least one trial".into()));
    }
    if bundle.bc.is_empty() && bundle.mode_bc.is_empty() && bundle.planning.is_none() {
        return Err(Error::Input("success table needs at least one policy".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts: Vec<Vec<f64>> = (0..cfg.trials).map(|_| sample_start(env, &mut rng)).collect();
    let mut rows = Vec::new();
    for kind in PolicyKind::ALL {
        let missing = match kind {
            PolicyKind::Bc => bundle.bc.is_empty(),
            PolicyKind::GlideBc => bundle.mode_bc.is_empty(),
            PolicyKind::GlidePlanning => bundle.planning.is_none(),
        };
        if missing {
            continue;
        }
        for perturbed in [false, true] {
            // Trials are independent; collecting in index order keeps the
            // result identical for any thread count.
            let outcomes = starts
                .par_iter()
                .enumerate()
                .map(|(i, start)| {
                    let controller = match kind {
                        PolicyKind::Bc => Controller::Bc(&bundle.bc[i % bundle.bc.len()]),
                        PolicyKind::GlideBc => Controller::ModeBc(&bundle.mode_bc[i % bundle.mode_bc.len()], bundle.model),
                        PolicyKind::GlidePlanning => {
                            let (plan, map) = bundle.planning.unwrap();
                            Controller::Planning(plan, map)
                        }
                    };
                    let push = perturbed.then_some(&cfg.perturbation);
                    execute(&controller, env, f, start, cfg.max_steps, push, crate::derive_seed(cfg.seed, i as u64))
                        .map(|r| r.success)
                })
                .collect::<Result<Vec<bool>>>()?;
            let successes = outcomes.iter().filter(|&&s| s).count();
            rows.push(SuccessRow {
                env: env.id(),
                policy: kind,
                perturbed,
                trials: cfg.trials,
                successes,
            });
        }
    }
    Ok(rows)
}

/// One row per controller: success without and with the push.
pub fn write_success_csv(path: &Path, rows: &[SuccessRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "env,policy,no_perturb,perturb,trials")?;
    for kind in PolicyKind::ALL {
        let find = |p: bool| rows.iter().find(|r| r.policy == kind && r.perturbed == p);
        if let (Some(a), Some(b)) = (find(false), find(true)) {
            writeln!(out, "{},{},{:.4},{:.4},{}", a.env, kind.name(), a.rate(), b.rate(), a.trials)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::generate_polygon_chain;
    use crate::geometry::Vec2;
    use crate::llmclient::features::FeatureRegistry;

    struct Oracle<'a>(&'a PolygonChainEnv, bool);

    impl ModeClassifier for Oracle<'_> {
        fn num_modes(&self) -> usize {
            self.0.k
        }
        fn classify_states(&self, s: &[Vec<f64>]) -> Result<Vec<usize>> {
            // optionally relabel with a cyclic shift, which matching must undo
            Ok(s.iter()
                .map(|p| {
                    let m = mode_of_nav(self.0, Vec2::new(p[0], p[1]));
                    if self.1 { m % self.0.k + 1 } else { m }
                })
                .collect())
        }
    }

    #[test]
    fn oracle_scores_one_even_when_relabelled() {
        let env = generate_polygon_chain(3, 4, 200).unwrap();
        assert_eq!(accuracy_nav(&Oracle(&env, false), &env, 50).unwrap(), 1.0);
        assert_eq!(accuracy_nav(&Oracle(&env, true), &env, 50).unwrap(), 1.0);
    }

    #[test]
    fn matching_picks_the_best_assignment() {
        // truth rows, predicted columns; best is the anti-diagonal: 9 + 8 = 17 of 20
        let c = [1, 9, 8, 2];
        assert!((matched_accuracy(&c, 2) - 17.0 / 20.0).abs() < 1e-12);
        // constant prediction can only match one class
        let c3 = [5, 0, 0, 5, 0, 0, 5, 0, 0];
        assert!((matched_accuracy(&c3, 3) - 5.0 / 15.0).abs() < 1e-12);
        assert_eq!(matched_accuracy(&[0; 4], 2), 0.0);
    }

    #[test]
    fn grid_has_cell_centres() {
        let g = grid_points(4);
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], vec![0.125, 0.125]);
        assert_eq!(g[15], vec![0.875, 0.875]);
    }

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..40 {
                pts.push(vec![
                    centre[0] + rng.random_range(-0.5..0.5),
                    centre[1] + rng.random_range(-0.5..0.5),
                ]);
                labels.push(c + 1);
            }
        }
        (pts, labels)
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let (pts, labels) = blobs(1);
        let (centers, history) = kmeans(&pts, 3, 7, 100).unwrap();
        let clf = KMeansClassifier {
            features: FeatureSpec::new(&FeatureRegistry::nav(), vec!["x".into(), "y".into()]).unwrap(),
            centers,
        };
        let pred: Vec<usize> = pts.iter().map(|p| clf.nearest(p)).collect();
        assert_eq!(matched_accuracy(&confusion(&labels, &pred, 3), 3), 1.0);
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective rose: {history:?}");
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_rejects_too_few_points() {
        let (pts, _) = blobs(2);
        assert_eq!(kmeans(&pts, 3, 11, 100).unwrap(), kmeans(&pts, 3, 11, 100).unwrap());
        let same = vec![vec![1.0, 1.0]; 10];
        assert!(matches!(kmeans(&same, 2, 0, 10), Err(Error::Input(_))));
    }

    #[test]
    fn out_of_range_predictions_are_rejected() {
        assert!(check_range(&[1, 2, 3], 3).is_ok());
        assert!(check_range(&[0], 3).is_err());
        assert!(check_range(&[4], 3).is_err());
    }
}
