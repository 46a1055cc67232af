//! Named state features that a task structure can select from.

use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, ManipState};
use crate::error::{Error, Result};
use crate::geometry::Vec2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Extractor {
    X,
    Y,
    EePosition,
    ObjectPosition,
    EeToObject,
    ObjectToGoal,
    Gripper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDef {
    pub name: &'static str,
    pub description: &'static str,
    pub dim: usize,
    extractor: Extractor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Nav,
    Manip,
}

/// Feature extractors available for one environment family.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRegistry {
    kind: StateKind,
    goal: Vec2,
    features: Vec<FeatureDef>,
}

impl FeatureRegistry {
    pub fn nav() -> Self {
        Self {
            kind: StateKind::Nav,
            goal: Vec2::default(),
            features: vec![
                FeatureDef {
                    name: "x",
                    description: "horizontal position of the agent",
                    dim: 1,
                    extractor: Extractor::X,
                },
                FeatureDef {
                    name: "y",
                    description: "vertical position of the agent",
                    dim: 1,
                    extractor: Extractor::Y,
                },
            ],
        }
    }

    /// Manipulation features; relative features are computed against `goal`.
    pub fn manip(goal: Vec2) -> Self {
        Self {
            kind: StateKind::Manip,
            goal,
            features: vec![
                FeatureDef {
                    name: "ee_position",
                    description: "absolute position of the end-effector",
                    dim: 2,
                    extractor: Extractor::EePosition,
                },
                FeatureDef {
                    name: "object_position",
                    description: "absolute position of the object",
                    dim: 2,
                    extractor: Extractor::ObjectPosition,
                },
                FeatureDef {
                    name: "ee_to_object",
                    description: "offset from the end-effector to the object",
                    dim: 2,
                    extractor: Extractor::EeToObject,
                },
                FeatureDef {
                    name: "object_to_goal",
                    description: "offset from the object to the goal region center",
                    dim: 2,
                    extractor: Extractor::ObjectToGoal,
                },
                FeatureDef {
                    name: "gripper",
                    description: "gripper command bit, 1 when closed",
                    dim: 1,
                    extractor: Extractor::Gripper,
                },
            ],
        }
    }

    pub fn for_env(env: &EnvSpec) -> Self {
        match env {
            EnvSpec::Nav(_) => Self::nav(),
            EnvSpec::Manip(m) => Self::manip(m.goal_center),
        }
    }

    pub fn kind(&self) -> StateKind {
        self.kind
    }

    pub fn goal(&self) -> Vec2 {
        self.goal
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.to_string()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&FeatureDef> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Checks every name and returns the total dimension.
    pub fn validate_selection(&self, selection: &[String]) -> Result<usize> {
        if selection.is_empty() {
            return Err(Error::Validation("empty feature selection".into()));
        }
        selection.iter().try_fold(0, |acc, name| {
            self.get(name)
                .map(|f| acc + f.dim)
                .ok_or_else(|| Error::Validation(format!("unknown feature '{name}'")))
        })
    }

    /// Concatenates the selected features of a raw state, in selection order.
    pub fn extract(&self, selection: &[String], raw: &[f64]) -> Result<Vec<f64>> {
        let expected = match self.kind {
            StateKind::Nav => 2,
            StateKind::Manip => ManipState::DIM,
        };
        if raw.len() < expected {
            return Err(Error::Input(format!(
                "raw state has {} channels, expected {expected}",
                raw.len()
            )));
        }
        let mut out = Vec::with_capacity(selection.len() * 2);
        for name in selection {
            let f = self
                .get(name)
                .ok_or_else(|| Error::Validation(format!("unknown feature '{name}'")))?;
            match f.extractor {
                Extractor::X => out.push(raw[0]),
                Extractor::Y => out.push(raw[1]),
                Extractor::EePosition => out.extend_from_slice(&raw[0..2]),
                Extractor::ObjectPosition => out.extend_from_slice(&raw[3..5]),
                Extractor::EeToObject => out.extend([raw[3] - raw[0], raw[4] - raw[1]]),
                Extractor::ObjectToGoal => out.extend([self.goal.x - raw[3], self.goal.y - raw[4]]),
                Extractor::Gripper => out.push(raw[2]),
            }
        }
        Ok(out)
    }
}

/// A serializable feature selection bound to the registry it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: StateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Vec2>,
    pub names: Vec<String>,
}

impl FeatureSpec {
    pub fn new(registry: &FeatureRegistry, names: Vec<String>) -> Result<Self> {
        registry.validate_selection(&names)?;
        Ok(Self {
            kind: registry.kind(),
            goal: (registry.kind() == StateKind::Manip).then_some(registry.goal()),
            names,
        })
    }

    pub fn registry(&self) -> FeatureRegistry {
        match self.kind {
            StateKind::Nav => FeatureRegistry::nav(),
            StateKind::Manip => FeatureRegistry::manip(self.goal.unwrap_or_default()),
        }
    }

    pub fn dim(&self) -> usize {
        self.registry().validate_selection(&self.names).unwrap_or(0)
    }

    pub fn extract(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.registry().extract(&self.names, raw)
    }

    /// Features of every state, row-major.
    pub fn extract_all(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        let registry = self.registry();
        let mut out = Vec::with_capacity(states.len() * self.dim());
        for s in states {
            out.extend(registry.extract(&self.names, s)?);
        }
        Ok(out)
    }
}
