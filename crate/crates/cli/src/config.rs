//! Pipeline configuration: one JSON file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use modeground::error::{Error, Result};
use modeground::evalkit::{TableConfig, Variant};
use modeground::grounding::TrainConfig;
use modeground::perturb::PerturbConfig;
use modeground::policy::bc::BcConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Nav,
    Manip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    /// Number of modes; ignored for manipulation, which always has 3.
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSection {
    /// Fixture reply, relative to the config file.
    pub fixture: PathBuf,
    pub task: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default)]
    pub bc: BcConfig,
    /// Training seeds for the imitation policies; trials cycle through them.
    #[serde(default = "default_policy_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub table: TableConfig,
}

fn default_policy_seeds() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub env: EnvSection,
    #[serde(default = "default_demos")]
    pub demos: usize,
    #[serde(default)]
    pub perturb: PerturbConfig,
    pub structure: StructureSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Omitted for manipulation, whose success table is not part of the
    /// evaluation.
    #[serde(default)]
    pub policy: Option<PolicySection>,
    #[serde(default)]
    pub ablation: Option<AblationSection>,
}

fn default_demos() -> usize {
    8
}

impl PipelineConfig {
    /// Reads the config and resolves the fixture path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        if cfg.structure.fixture.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.structure.fixture = base.join(&cfg.structure.fixture);
        }
        if !cfg.structure.fixture.is_file() {
            return Err(Error::Config(format!(
                "structure.fixture: no such file {}",
                cfg.structure.fixture.display()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.env.kind == EnvKind::Nav && !(2..=8).contains(&self.env.k) {
            return Err(Error::Config(format!("env.k must be in [2, 8], got {}", self.env.k)));
        }
        if self.demos < 1 {
            return Err(Error::Config("demos must be >= 1".into()));
        }
        self.perturb.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.policy {
            p.bc.validate()?;
            if p.seeds < 1 {
                return Err(Error::Config("policy.seeds must be >= 1".into()));
            }
        }
        Ok(())
    }
}
