//! Command-line driver: one subcommand per pipeline stage plus `pipeline`,
//! which runs them all from a config file.

pub mod config;
pub mod stages;
pub mod viz;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use modeground::demos::demo_batch;
use modeground::envs::EnvSpec;
use modeground::error::{Error, Result};
use modeground::evalkit::{
    accuracy, run_ablation, write_ablation_csv, write_success_csv, AblationRow, TableConfig, Variant,
};
use modeground::grounding::{train, write_train_log, GroundingModel, TrainConfig};
use modeground::llmclient::features::FeatureRegistry;
use modeground::llmclient::{request_structure, StructureSource, TaskStructure};
use modeground::perturb::{build_dataset, PerturbConfig};
use modeground::policy::bc::BcConfig;
use modeground::trajectory::{read_jsonl, write_jsonl};

use config::{EnvKind, PipelineConfig};
use stages::{evaluate_policies, grounding_inputs, make_env, train_policies, PolicyFile};

#[derive(Debug, Parser)]
#[command(name = "modeground", version, about = "Ground task modes in demonstrations")]
pub struct Cli {
    /// Worker threads for rollouts; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an environment file.
    GenEnv {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Number of modes (nav only).
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fetch a task structure from a fixture or the endpoint in
    /// MODEGROUND_LLM_URL.
    Llm {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        task: String,
        /// Canned reply; without it the endpoint is queried.
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scripted demonstrations.
    Demo {
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Demos plus labelled counterfactual replays.
    Perturb {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        /// JSON file with perturbation settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the grounding classifier.
    Train {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// JSON file with training settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train BC and mode-conditioned policies (and the nav planner).
    TrainPolicy {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// JSON file with BC settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mode accuracy of a model, and the success table when policies are
    /// given.
    Eval {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, requires = "demos")]
        policies: Option<PathBuf>,
        /// Demos, whose mean length sets the push horizon.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Accuracy CSV.
        #[arg(long)]
        out: PathBuf,
        /// Success-table CSV, written when policies are given.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Train ablated variants and report their accuracy.
    Ablate {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated variant names; all by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a nav model's mode map as SVG.
    Viz {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from one config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum KindArg {
    Nav,
    Manip,
}

impl From<KindArg> for EnvKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Nav => EnvKind::Nav,
            KindArg::Manip => EnvKind::Manip,
        }
    }
}

/// 2 for filesystem, network, config and argument problems, 1 for
/// everything the data or the algorithms reject.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_environmental() || matches!(err, Error::Usage(_)) {
        2
    } else {
        1
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

fn optional_json<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>, what: &str) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p, what))
}

fn load_env(path: &Path) -> Result<EnvSpec> {
    EnvSpec::load(path)
}

fn load_structure(path: &Path, env: &EnvSpec) -> Result<TaskStructure> {
    let s: TaskStructure = read_json(path, "structure")?;
    s.validate(&FeatureRegistry::for_env(env))?;
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        // Only fails if a pool already exists, which then keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    match cli.command {
        Command::GenEnv { kind, k, seed, out } => {
            if matches!(kind, KindArg::Nav) && !(2..=8).contains(&k) {
                return Err(Error::Usage(format!("--k must be in [2, 8], got {k}")));
            }
            make_env(kind.into(), k, seed)?.save(&out)
        }
        Command::Llm { env, task, fixture, out } => {
            let env = load_env(&env)?;
            let source = match fixture {
                Some(path) => StructureSource::Fixture { path },
                None => StructureSource::from_env()
                    .ok_or_else(|| Error::Config(format!("no --fixture and {} is unset", modeground::llmclient::ENDPOINT_VAR)))?,
            };
            let s = request_structure(&task, &FeatureRegistry::for_env(&env), &source)?;
            write_text(&out, &serde_json::to_string_pretty(&s)?)
        }
        Command::Demo { env, n, seed, out } => {
            let env = load_env(&env)?;
            write_jsonl(&out, &demo_batch(&env, n, seed)?)
        }
        Command::Perturb {
            env,
            structure,
            demos,
            config,
            seed,
            out,
        } => {
            let env = load_env(&env)?;
            let (f, _) = grounding_inputs(&env, &load_structure(&structure, &env)?)?;
            let cfg = PerturbConfig {
                seed,
                ..optional_json(config.as_ref(), "perturbation config")?
            };
            write_jsonl(&out, &build_dataset(&env, &f, &read_jsonl(&demos)?, &cfg)?)
        }
        Command::Train {
            env,
            structure,
            dataset,
            config,
            seed,
            out,
            log,
        } => {
            let env = load_env(&env)?;
            let (f, features) = grounding_inputs(&env, &load_structure(&structure, &env)?)?;
            let cfg = TrainConfig {
                seed,
                ..optional_json(config.as_ref(), "training config")?
            };
            let (model, epochs) = train(&read_jsonl(&dataset)?, &f, &features, &cfg)?;
            model.save(&out)?;
            match log {
                Some(path) => write_train_log(&path, &epochs),
                None => Ok(()),
            }
        }
        Command::TrainPolicy {
            env,
            model,
            dataset,
            config,
            seeds,
            seed,
            out,
        } => {
            let env = load_env(&env)?;
            let model = GroundingModel::load(&model)?;
            let bc: BcConfig = optional_json(config.as_ref(), "BC config")?;
            bc.validate()?;
            if seeds < 1 {
                return Err(Error::Usage("--seeds must be >= 1".into()));
            }
            train_policies(&env, &model, &read_jsonl(&dataset)?, &bc, seeds, seed)?.save(&out)
        }
        Command::Eval {
            env,
            structure,
            model,
            dataset,
            policies,
            demos,
            trials,
            seed,
            out,
            table,
        } => {
            let env = load_env(&env)?;
            let (f, _) = grounding_inputs(&env, &load_structure(&structure, &env)?)?;
            let model = GroundingModel::load(&model)?;
            let dataset = read_jsonl(&dataset)?;
            let row = AblationRow {
                env: env.id(),
                variant: Variant::Full,
                seed,
                accuracy: accuracy(&model, &env, &dataset)?,
            };
            write_ablation_csv(&out, &[row])?;
            if let (Some(p), Some(d)) = (policies, demos) {
                let table_path = table.ok_or_else(|| Error::Usage("--policies needs --table".into()))?;
                let cfg = TableConfig {
                    trials,
                    seed,
                    ..TableConfig::default()
                };
                let rows = evaluate_policies(&env, &f, &model, &PolicyFile::load(&p)?, &read_jsonl(&d)?, &cfg)?;
                write_success_csv(&table_path, &rows)?;
            }
            Ok(())
        }
        Command::Ablate {
            env,
            structure,
            demos,
            dataset,
            config,
            variants,
            seed,
            out,
        } => {
            let env = load_env(&env)?;
            let (f, features) = grounding_inputs(&env, &load_structure(&structure, &env)?)?;
            let cfg = TrainConfig {
                seed,
                ..optional_json(config.as_ref(), "training config")?
            };
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()?
            };
            let demos = read_jsonl(&demos)?;
            let dataset = read_jsonl(&dataset)?;
            let rows = variants
                .into_iter()
                .map(|v| run_ablation(&env, &f, &demos, &dataset, &features, &cfg, v))
                .collect::<Result<Vec<_>>>()?;
            write_ablation_csv(&out, &rows)
        }
        Command::Viz {
            env,
            model,
            demos,
            grid,
            out,
        } => {
            let EnvSpec::Nav(env) = load_env(&env)? else {
                return Err(Error::Usage("viz needs a nav environment; manipulation has no 2D map".into()));
            };
            let model = GroundingModel::load(&model)?;
            let demos = demos.map(|p| read_jsonl(&p)).transpose()?;
            write_text(&out, &viz::render_nav_svg(&env, &model, demos.as_deref(), grid)?)
        }
        Command::Pipeline { config, out } => stages::run_pipeline(&PipelineConfig::load(&config)?, &out),
    }
}
