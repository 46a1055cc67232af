use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::feasibility::{reduce_runs, FeasibilityMatrix};
use crate::llmclient::features::FeatureSpec;
use crate::nnet::DenseNet;
use crate::trajectory::Trajectory;

/// Per-feature affine standardization applied before the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fits mean and inverse standard deviation over row-major `rows`.
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = (rows.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in rows.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for row in rows.chunks(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var
            .iter()
            .map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, rows: &mut [f64]) {
        let dim = self.mean.len();
        for row in rows.chunks_mut(dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) * s;
            }
        }
    }
}

/// Mode classifier plus the optional per-mode dynamics head.
///
/// The dynamics head maps a feature delta `d` to `K` predicted next deltas:
/// `psi(d) = net(d * dynamics_scale) / dynamics_scale`, reshaped to `K` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingModel {
    pub k: usize,
    pub features: FeatureSpec,
    pub normalizer: Normalizer,
    pub classifier: DenseNet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DenseNet>,
    pub dynamics_scale: f64,
    pub feasibility: FeasibilityMatrix,
}

/// A trajectory converted to raw feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTrajectory {
    pub features: Vec<f64>,
    pub len: usize,
    pub dim: usize,
    pub success: bool,
}

impl EncodedTrajectory {
    pub fn encode(spec: &FeatureSpec, traj: &Trajectory) -> Result<Self> {
        Ok(Self {
            features: spec.extract_all(&traj.states)?,
            len: traj.states.len(),
            dim: spec.dim(),
            success: traj.success,
        })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }
}

/// Per-step modes (1-based) and their run-length reduction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub per_step: Vec<usize>,
    pub reduced: Vec<usize>,
}

/// Index of the largest entry, lowest index on ties, as a 1-based mode.
pub fn argmax_mode(belief: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in belief.iter().enumerate() {
        if v > belief[best] {
            best = i;
        }
    }
    best + 1
}

impl GroundingModel {
    pub fn check(&self) -> Result<()> {
        let dim = self.features.dim();
        if self.classifier.input_width() != dim || self.classifier.output_width() != self.k {
            return Err(Error::Validation(format!(
                "classifier is {}->{}, expected {dim}->{}",
                self.classifier.input_width(),
                self.classifier.output_width(),
                self.k
            )));
        }
        if let Some(psi) = &self.dynamics {
            if psi.input_width() != dim || psi.output_width() != self.k * dim {
                return Err(Error::Validation("dynamics head shape mismatch".into()));
            }
        }
        if self.feasibility.k() != self.k || self.normalizer.mean.len() != dim {
            return Err(Error::Validation("model components disagree on K or dims".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.input_width()
    }

    /// Normalized classifier inputs for raw feature rows.
    pub fn classifier_inputs(&self, features: &[f64]) -> Vec<f64> {
        let mut x = features.to_vec();
        self.normalizer.apply(&mut x);
        x
    }

    /// Beliefs for raw feature rows, row-major `rows x K`.
    pub fn beliefs_from_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        let dim = self.feature_dim();
        if !features.len().is_multiple_of(dim) {
            return Err(Error::Input(format!(
                "{} feature values are not a multiple of {dim}",
                features.len()
            )));
        }
        let x = self.classifier_inputs(features);
        let tape = self.classifier.forward_batch(&x, features.len() / dim)?;
        Ok(tape.output().to_vec())
    }

    /// Belief and argmax mode for one raw state.
    pub fn classify(&self, raw_state: &[f64]) -> Result<(Vec<f64>, usize)> {
        let features = self.features.extract(raw_state)?;
        let belief = self.beliefs_from_features(&features)?;
        let mode = argmax_mode(&belief);
        Ok((belief, mode))
    }

    /// Argmax modes for many raw states at once.
    pub fn classify_batch(&self, raw_states: &[Vec<f64>]) -> Result<Vec<usize>> {
        let features = self.features.extract_all(raw_states)?;
        let beliefs = self.beliefs_from_features(&features)?;
        Ok(beliefs.chunks(self.k).map(argmax_mode).collect())
    }

    pub fn segment(&self, traj: &Trajectory) -> Result<Segmentation> {
        let per_step = self.classify_batch(&traj.states)?;
        let reduced = reduce_runs(&per_step);
        Ok(Segmentation { per_step, reduced })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: GroundingModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.check()?;
        Ok(model)
    }
}
