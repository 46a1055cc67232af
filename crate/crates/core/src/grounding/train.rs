use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::feasibility::FeasibilityMatrix;
use crate::grounding::losses::{check_classes, evaluate, LossTerms, LossWeights, ModelGrads};
use crate::grounding::model::{EncodedTrajectory, GroundingModel, Normalizer};
use crate::llmclient::features::FeatureSpec;
use crate::nnet::{Activation, Adam, DenseNet, Head};
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    /// Attach the dynamics head; only meaningful for underactuated tasks.
    pub dynamics: bool,
    /// Leading epochs trained with the failure term switched off, so the
    /// failure signal starts from a feasible ordered segmentation.
    pub fail_warmup_epochs: usize,
    /// Initial output bias of mode 1, the mode every trajectory starts in.
    pub start_mode_bias: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            hidden: vec![64, 64],
            dynamics: false,
            fail_warmup_epochs: 0,
            start_mode_bias: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Mean loss terms over the batches of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub succ: f64,
    pub fail: f64,
    pub boundary: f64,
    pub dynamics: f64,
    pub total: f64,
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,succ,fail,boundary,dynamics,total")?;
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.succ, r.fail, r.boundary, r.dynamics, r.total
        )?;
    }
    Ok(())
}

/// Root-mean-square magnitude of consecutive feature deltas; sets the
/// dynamics head input scale so its inputs are of order one.
fn delta_scale(encoded: &[EncodedTrajectory]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for e in encoded {
        for t in 1..e.len {
            for (a, b) in e.row(t).iter().zip(e.row(t - 1)) {
                sum += (a - b) * (a - b);
                n += 1;
            }
        }
    }
    let rms = (sum / n.max(1) as f64).sqrt();
    if rms > 1e-12 {
        1.0 / rms
    } else {
        1.0
    }
}

/// Builds an untrained model with the normalizer fitted to `dataset`.
pub fn init_model(
    dataset: &[Trajectory],
    f: &FeasibilityMatrix,
    features: &FeatureSpec,
    cfg: &TrainConfig,
) -> Result<(GroundingModel, Vec<EncodedTrajectory>)> {
    let dim = features.dim();
    if dim == 0 {
        return Err(Error::Validation("feature spec selects no known features".into()));
    }
    let encoded = dataset
        .iter()
        .map(|t| EncodedTrajectory::encode(features, t))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = encoded.iter().flat_map(|e| e.features.iter().copied()).collect();
    let k = f.k();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut widths = vec![dim];
    widths.extend(&cfg.hidden);
    widths.push(k);
    let mut classifier = DenseNet::new(&widths, Activation::Tanh, Head::Softmax, &mut rng)?;
    classifier.layers_mut().last_mut().unwrap().biases[0] = cfg.start_mode_bias;
    let dynamics = if cfg.dynamics {
        *widths.last_mut().unwrap() = k * dim;
        Some(DenseNet::new(&widths, Activation::Tanh, Head::Linear, &mut rng)?)
    } else {
        None
    };
    let model = GroundingModel {
        k,
        features: features.clone(),
        normalizer: Normalizer::fit(&all, dim),
        classifier,
        dynamics,
        dynamics_scale: delta_scale(&encoded),
        feasibility: f.clone(),
    };
    Ok((model, encoded))
}

/// Minimizes the weighted objective with Adam over shuffled batches of whole
/// trajectories. Deterministic for a given dataset and config.
pub fn train(
    dataset: &[Trajectory],
    f: &FeasibilityMatrix,
    features: &FeatureSpec,
    cfg: &TrainConfig,
) -> Result<(GroundingModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let (mut model, encoded) = init_model(dataset, f, features, cfg)?;
    let refs: Vec<&EncodedTrajectory> = encoded.iter().collect();
    check_classes(&refs, &cfg.weights)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0fb_a7c4);
    let mut opt_phi = Adam::new(&model.classifier, cfg.learning_rate);
    let mut opt_psi = model
        .dynamics
        .as_ref()
        .map(|psi| Adam::new(psi, cfg.learning_rate));
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let weights = if epoch < cfg.fail_warmup_epochs {
            LossWeights { fail: 0.0, ..cfg.weights }
        } else {
            cfg.weights
        };
        let mut sum = LossTerms::default();
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedTrajectory> = chunk.iter().map(|&i| &encoded[i]).collect();
            let mut grads = ModelGrads::zeros_like(&model);
            let terms = evaluate(&model, &batch, &weights, Some(&mut grads))?;
            if !terms.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {b}: {terms:?}"
                )));
            }
            opt_phi.step(&mut model.classifier, &grads.classifier, "classifier")?;
            if let (Some(opt), Some(psi), Some(g)) =
                (opt_psi.as_mut(), model.dynamics.as_mut(), grads.dynamics.as_ref())
            {
                opt.step(psi, g, "dynamics")?;
            }
            sum.succ += terms.succ;
            sum.fail += terms.fail;
            sum.boundary += terms.boundary;
            sum.dynamics += terms.dynamics;
            sum.total += terms.total;
            batches += 1;
        }
        let n = batches as f64;
        log.push(EpochLog {
            epoch,
            succ: sum.succ / n,
            fail: sum.fail / n,
            boundary: sum.boundary / n,
            dynamics: sum.dynamics / n,
            total: sum.total / n,
        });
    }
    Ok((model, log))
}
