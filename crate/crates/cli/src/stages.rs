//! The pipeline stages, each reading and writing files in one directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use modeground::demos::demo_batch;
use modeground::envs::{generate_polygon_chain, EnvSpec, PickPlace2DEnv};
use modeground::error::{Error, Result};
use modeground::evalkit::{
    accuracy, run_ablation, success_table, write_ablation_csv, write_success_csv, AblationRow, PolicyBundle,
    TableConfig, Variant,
};
use modeground::grounding::{build_feasibility, train, write_train_log, FeasibilityMatrix, GroundingModel};
use modeground::llmclient::features::{FeatureRegistry, FeatureSpec};
use modeground::llmclient::{request_structure, StructureSource, TaskStructure};
use modeground::perturb::build_dataset;
use modeground::policy::bc::{train_bc, train_mode_bc, BCPolicy, BcConfig, ModePolicySet};
use modeground::policy::planner::PlannerConfig;
use modeground::policy::rollout::{LearnedMap, PlanningPolicy, MAP_RESOLUTION};
use modeground::trajectory::{read_jsonl, write_jsonl, Trajectory};
use modeground::derive_seed;

use crate::config::{EnvKind, PipelineConfig};
use crate::viz::render_nav_svg;

/// Retries allowed when growing a polygon chain.
pub const ENV_RETRIES: usize = 500;

pub fn make_env(kind: EnvKind, k: usize, seed: u64) -> Result<EnvSpec> {
    match kind {
        EnvKind::Nav => Ok(EnvSpec::Nav(generate_polygon_chain(seed, k, ENV_RETRIES)?)),
        EnvKind::Manip => Ok(EnvSpec::Manip(PickPlace2DEnv::generate(seed))),
    }
}

/// Feasibility matrix and feature spec implied by a task structure.
pub fn grounding_inputs(env: &EnvSpec, s: &TaskStructure) -> Result<(FeasibilityMatrix, FeatureSpec)> {
    if s.k() != env.k() {
        return Err(Error::Validation(format!(
            "task structure has {} modes but the environment has {}",
            s.k(),
            env.k()
        )));
    }
    let f = build_feasibility(&s.adjacency, s.k())?;
    let spec = FeatureSpec::new(&FeatureRegistry::for_env(env), s.features.clone())?;
    Ok((f, spec))
}

/// Imitation policies for every seed plus the planner, as one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub bc: Vec<BCPolicy>,
    pub mode_bc: Vec<ModePolicySet>,
    pub planning: Option<PlanningPolicy>,
}

impl PolicyFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Trains `seeds` BC and mode-BC policies on the success trajectories of
/// `dataset`; nav also gets the planner.
pub fn train_policies(
    env: &EnvSpec,
    model: &GroundingModel,
    dataset: &[Trajectory],
    bc: &BcConfig,
    seeds: usize,
    seed: u64,
) -> Result<PolicyFile> {
    let mut out = train_plain_bc(dataset, bc, seeds, seed)?;
    add_mode_policies(&mut out, env, model, dataset, bc, seed)?;
    Ok(out)
}

/// Mode-agnostic BC only; the seeds match those [`add_mode_policies`] uses.
pub fn train_plain_bc(dataset: &[Trajectory], bc: &BcConfig, seeds: usize, seed: u64) -> Result<PolicyFile> {
    let bc = (0..seeds)
        .map(|i| train_bc(dataset, &bc_seeded(bc, seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyFile {
        bc,
        mode_bc: Vec::new(),
        planning: None,
    })
}

/// Adds one mode-conditioned policy set per plain BC seed, plus the nav
/// planner. Fails when the model leaves a mode without demonstration data.
pub fn add_mode_policies(
    out: &mut PolicyFile,
    env: &EnvSpec,
    model: &GroundingModel,
    dataset: &[Trajectory],
    bc: &BcConfig,
    seed: u64,
) -> Result<()> {
    let mode_bc = (0..out.bc.len())
        .map(|i| train_mode_bc(model, dataset, &bc_seeded(bc, seed, i)))
        .collect::<Result<Vec<_>>>()?;
    if matches!(env, EnvSpec::Nav(_)) {
        let planner = PlannerConfig {
            seed: derive_seed(seed, 99),
            ..PlannerConfig::default()
        };
        out.planning = Some(PlanningPolicy::from_demos(model, &mode_bc[0], dataset, planner)?);
    }
    out.mode_bc = mode_bc;
    Ok(())
}

fn bc_seeded(bc: &BcConfig, seed: u64, i: usize) -> BcConfig {
    BcConfig {
        seed: derive_seed(seed, 100 + i as u64),
        ..bc.clone()
    }
}

pub fn mean_length(trajs: &[Trajectory]) -> usize {
    let total: usize = trajs.iter().map(|t| t.len()).sum();
    (total as f64 / trajs.len().max(1) as f64).round() as usize
}

/// Success rates for every controller in `policies`.
pub fn evaluate_policies(
    env: &EnvSpec,
    f: &FeasibilityMatrix,
    model: &GroundingModel,
    policies: &PolicyFile,
    demos: &[Trajectory],
    table: &TableConfig,
) -> Result<Vec<modeground::evalkit::SuccessRow>> {
    let mut table = table.clone();
    table.perturbation.horizon.get_or_insert(mean_length(demos));
    let map = match env {
        EnvSpec::Nav(_) => Some(LearnedMap::rasterize(model, MAP_RESOLUTION)?),
        EnvSpec::Manip(_) => None,
    };
    let bundle = PolicyBundle {
        bc: &policies.bc,
        mode_bc: &policies.mode_bc,
        model,
        planning: policies.planning.as_ref().zip(map.as_ref()),
    };
    success_table(env, f, &bundle, &table)
}

/// Where a pipeline run writes its artifacts.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records the stage about to run, so a failed run shows where it
    /// stopped.
    fn enter(&self, stage: &str) -> Result<()> {
        std::fs::write(self.path("STAGE"), format!("{stage}\n"))?;
        Ok(())
    }
}

/// Runs every stage in order. Stage seeds all equal the global seed.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let art = Artifacts { dir: out.to_path_buf() };
    let seed = cfg.seed;

    art.enter("env")?;
    let env = make_env(cfg.env.kind, cfg.env.k, seed)?;
    env.save(&art.path("env.json"))?;

    art.enter("structure")?;
    let registry = FeatureRegistry::for_env(&env);
    let source = StructureSource::Fixture {
        path: cfg.structure.fixture.clone(),
    };
    let structure = request_structure(&cfg.structure.task, &registry, &source)?;
    std::fs::write(art.path("structure.json"), serde_json::to_string_pretty(&structure)?)?;
    let (f, features) = grounding_inputs(&env, &structure)?;

    art.enter("demos")?;
    let demos = demo_batch(&env, cfg.demos, seed)?;
    write_jsonl(&art.path("demos.jsonl"), &demos)?;

    art.enter("perturb")?;
    let perturb = modeground::perturb::PerturbConfig { seed, ..cfg.perturb.clone() };
    let dataset = build_dataset(&env, &f, &demos, &perturb)?;
    write_jsonl(&art.path("dataset.jsonl"), &dataset)?;

    art.enter("train")?;
    let train_cfg = modeground::grounding::TrainConfig { seed, ..cfg.train.clone() };
    let (model, log) = train(&dataset, &f, &features, &train_cfg)?;
    model.save(&art.path("model.json"))?;
    write_train_log(&art.path("train_log.csv"), &log)?;

    art.enter("accuracy")?;
    let mut rows = vec![AblationRow {
        env: env.id(),
        variant: Variant::Full,
        seed,
        accuracy: accuracy(&model, &env, &dataset)?,
    }];
    if let Some(ab) = &cfg.ablation {
        for &v in ab.variants.iter().filter(|&&v| v != Variant::Full) {
            rows.push(run_ablation(&env, &f, &demos, &dataset, &features, &train_cfg, v)?);
        }
    }
    write_ablation_csv(&art.path("accuracy.csv"), &rows)?;

    if let Some(p) = &cfg.policy {
        art.enter("policies")?;
        let policies = train_policies(&env, &model, &dataset, &p.bc, p.seeds, seed)?;
        policies.save(&art.path("policies.json"))?;

        art.enter("success")?;
        let table = TableConfig { seed, ..p.table.clone() };
        let rows = evaluate_policies(&env, &f, &model, &policies, &demos, &table)?;
        write_success_csv(&art.path("success.csv"), &rows)?;
    }

    if let EnvSpec::Nav(e) = &env {
        art.enter("viz")?;
        std::fs::write(art.path("modes.svg"), render_nav_svg(e, &model, Some(&demos), 200)?)?;
    }
    art.enter("done")?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    read_jsonl(path)
}
