//! Trajectory-success losses over classifier beliefs, with analytic gradients.
//!
//! Belief slices are row-major `T x K`. The model-level entry points run the
//! classifier and dynamics head and backpropagate through both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::feasibility::{transition_score, FeasibilityMatrix};
use crate::grounding::model::{EncodedTrajectory, GroundingModel};
use crate::nnet::{log_sum_exp, softmax_vjp, ParamGrads};
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub succ: f64,
    pub fail: f64,
    pub boundary: f64,
    pub dynamics: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            succ: 1.0,
            fail: 1.0,
            boundary: 1.0,
            dynamics: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.succ, self.fail, self.boundary, self.dynamics];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub succ: f64,
    pub fail: f64,
    pub boundary: f64,
    pub dynamics: f64,
    pub total: f64,
}

/// Parameter gradients for the classifier and, when present, the dynamics head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub classifier: ParamGrads,
    pub dynamics: Option<ParamGrads>,
}

impl ModelGrads {
    pub fn zeros_like(model: &GroundingModel) -> Self {
        Self {
            classifier: ParamGrads::zeros_like(&model.classifier),
            dynamics: model.dynamics.as_ref().map(ParamGrads::zeros_like),
        }
    }
}

/// `sum_t b_t^T F b_{t+1}` over one belief sequence.
pub fn transition_sum(beliefs: &[f64], k: usize, f: &FeasibilityMatrix) -> f64 {
    beliefs
        .chunks(k)
        .zip(beliefs.chunks(k).skip(1))
        .map(|(a, b)| transition_score(a, f, b))
        .sum()
}

/// Adds `coef * d(transition_sum)/d(beliefs)` into `grad`.
fn transition_sum_grad(beliefs: &[f64], k: usize, f: &FeasibilityMatrix, coef: f64, grad: &mut [f64]) {
    let t_len = beliefs.len() / k;
    let mut tmp = vec![0.0; k];
    for t in 0..t_len.saturating_sub(1) {
        let (cur, next) = (&beliefs[t * k..(t + 1) * k], &beliefs[(t + 1) * k..(t + 2) * k]);
        f.apply(next, &mut tmp);
        for (g, v) in grad[t * k..(t + 1) * k].iter_mut().zip(&tmp) {
            *g += coef * v;
        }
        f.apply_transposed(cur, &mut tmp);
        for (g, v) in grad[(t + 1) * k..(t + 2) * k].iter_mut().zip(&tmp) {
            *g += coef * v;
        }
    }
}

fn check_sequences(seqs: &[&[f64]], k: usize, what: &str) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Input(format!("{what} needs at least one trajectory")));
    }
    for s in seqs {
        if s.len() % k != 0 || s.len() < 2 * k {
            return Err(Error::Input(format!(
                "{what}: belief sequence of {} values is not T x {k} with T >= 2",
                s.len()
            )));
        }
    }
    Ok(())
}

/// Success term over belief sequences: minus the mean per-step transition score.
pub fn succ_loss_beliefs(seqs: &[&[f64]], f: &FeasibilityMatrix) -> Result<f64> {
    let k = f.k();
    check_sequences(seqs, k, "success loss")?;
    let sum: f64 = seqs
        .iter()
        .map(|b| transition_sum(b, k, f) / (b.len() / k - 1) as f64)
        .sum();
    Ok(-sum / seqs.len() as f64)
}

/// Failure term over belief sequences: mean of the clipped transition sums.
pub fn fail_loss_beliefs(seqs: &[&[f64]], f: &FeasibilityMatrix) -> Result<f64> {
    let k = f.k();
    check_sequences(seqs, k, "failure loss")?;
    let sum: f64 = seqs.iter().map(|b| transition_sum(b, k, f).max(-1.0)).sum();
    Ok(sum / seqs.len() as f64)
}

/// Mean cross-entropy of first beliefs against mode 1 plus last beliefs against mode K.
pub fn boundary_loss_beliefs(seqs: &[&[f64]], k: usize) -> Result<f64> {
    check_sequences(seqs, k, "boundary loss")?;
    let n = seqs.len() as f64;
    let sum: f64 = seqs
        .iter()
        .map(|b| -b[0].ln() - b[b.len() - 1].ln())
        .sum();
    Ok(sum / n)
}

/// Residual of the belief-weighted per-mode predictions against observed deltas.
///
/// `predictions[t]` holds `K` rows of length `D`; `next_deltas[t]` has length `D`.
pub fn dyn_residual(beliefs: &[f64], k: usize, predictions: &[Vec<f64>], next_deltas: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (t, (pred, target)) in predictions.iter().zip(next_deltas).enumerate() {
        let dim = target.len();
        let b = &beliefs[t * k..(t + 1) * k];
        for d in 0..dim {
            let p: f64 = (0..k).map(|m| b[m] * pred[m * dim + d]).sum();
            total += (p - target[d]).powi(2);
        }
    }
    total
}

#[derive(Clone, Copy)]
struct Counts {
    succ: usize,
    fail: usize,
    all: usize,
}

/// Evaluates the weighted objective on `batch`, accumulating gradients when
/// `grads` is given. Terms whose class is absent from the batch contribute 0.
pub fn evaluate(
    model: &GroundingModel,
    batch: &[&EncodedTrajectory],
    weights: &LossWeights,
    mut grads: Option<&mut ModelGrads>,
) -> Result<LossTerms> {
    let counts = Counts {
        succ: batch.iter().filter(|t| t.success).count(),
        fail: batch.iter().filter(|t| !t.success).count(),
        all: batch.len(),
    };
    let mut terms = LossTerms::default();
    for traj in batch {
        let g = grads.as_deref_mut();
        accumulate_one(model, traj, weights, counts, &mut terms, g)?;
    }
    terms.total = weights.succ * terms.succ
        + weights.fail * terms.fail
        + weights.boundary * terms.boundary
        + if model.dynamics.is_some() {
            weights.dynamics * terms.dynamics
        } else {
            0.0
        };
    Ok(terms)
}

fn accumulate_one(
    model: &GroundingModel,
    traj: &EncodedTrajectory,
    w: &LossWeights,
    counts: Counts,
    terms: &mut LossTerms,
    mut grads: Option<&mut ModelGrads>,
) -> Result<()> {
    let k = model.k;
    let dim = model.feature_dim();
    let t_len = traj.len;
    if traj.dim != dim || t_len < 2 {
        return Err(Error::Input(format!(
            "trajectory with {t_len} steps of {} features does not fit a {dim}-feature model",
            traj.dim
        )));
    }
    let f = &model.feasibility;
    let x = model.classifier_inputs(&traj.features);
    let tape = model.classifier.forward_batch(&x, t_len)?;
    let beliefs = tape.output();
    let want = grads.is_some();
    let mut g_b = vec![0.0; t_len * k];
    let mut g_z = vec![0.0; t_len * k];

    if traj.success {
        let s = transition_sum(beliefs, k, f);
        let denom = ((t_len - 1) * counts.succ) as f64;
        terms.succ -= s / denom;
        if want && w.succ != 0.0 {
            transition_sum_grad(beliefs, k, f, -w.succ / denom, &mut g_b);
        }
    } else {
        let s = transition_sum(beliefs, k, f);
        let n = counts.fail as f64;
        terms.fail += s.max(-1.0) / n;
        // clipped branch has zero gradient
        if want && w.fail != 0.0 && s > -1.0 {
            transition_sum_grad(beliefs, k, f, w.fail / n, &mut g_b);
        }
    }

    let all = counts.all as f64;
    for (row, class) in [(0, 0), (t_len - 1, k - 1)] {
        let z = tape.logits_row(row);
        terms.boundary += (log_sum_exp(z) - z[class]) / all;
        if want && w.boundary != 0.0 {
            let p = tape.output_row(row);
            for (c, gz) in g_z[row * k..(row + 1) * k].iter_mut().enumerate() {
                let target = if c == class { 1.0 } else { 0.0 };
                *gz += w.boundary / all * (p[c] - target);
            }
        }
    }

    if let (Some(psi), true) = (&model.dynamics, t_len >= 3) {
        let rows = t_len - 2;
        let scale = model.dynamics_scale;
        // delta inputs s_t - s_{t-1} for t = 1..T-2, in feature space
        let mut deltas = Vec::with_capacity(rows * dim);
        for t in 1..t_len - 1 {
            let (prev, cur) = (traj.row(t - 1), traj.row(t));
            deltas.extend(cur.iter().zip(prev).map(|(c, p)| (c - p) * scale));
        }
        let psi_tape = psi.forward_batch(&deltas, rows)?;
        let out = psi_tape.output();
        let mut g_out = vec![0.0; out.len()];
        let mut residual = vec![0.0; dim];
        for r in 0..rows {
            let t = r + 1;
            let b = &beliefs[t * k..(t + 1) * k];
            let o = &out[r * k * dim..(r + 1) * k * dim];
            let (cur, next) = (traj.row(t), traj.row(t + 1));
            for d in 0..dim {
                let pred: f64 = (0..k).map(|m| b[m] * o[m * dim + d]).sum::<f64>() / scale;
                residual[d] = pred - (next[d] - cur[d]);
                terms.dynamics += residual[d] * residual[d];
            }
            if want && w.dynamics != 0.0 {
                for m in 0..k {
                    let mut dot = 0.0;
                    for d in 0..dim {
                        dot += residual[d] * o[m * dim + d] / scale;
                        g_out[r * k * dim + m * dim + d] += w.dynamics * 2.0 * b[m] * residual[d] / scale;
                    }
                    g_b[t * k + m] += w.dynamics * 2.0 * dot;
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            if w.dynamics != 0.0 {
                let psi_grads = g
                    .dynamics
                    .as_mut()
                    .ok_or_else(|| Error::Usage("dynamics gradients missing for a dynamics model".into()))?;
                psi.backward_into(&psi_tape, &g_out, psi_grads)?;
            }
        }
    }

    if let Some(g) = grads {
        let mut tmp = vec![0.0; k];
        for t in 0..t_len {
            let row = t * k..(t + 1) * k;
            softmax_vjp(&beliefs[row.clone()], &g_b[row.clone()], &mut tmp);
            for (gz, v) in g_z[row].iter_mut().zip(&tmp) {
                *gz += v;
            }
        }
        model.classifier.backward_logits_into(&tape, &g_z, &mut g.classifier)?;
    }
    Ok(())
}

fn encode_all(model: &GroundingModel, trajs: &[Trajectory]) -> Result<Vec<EncodedTrajectory>> {
    trajs
        .iter()
        .map(|t| EncodedTrajectory::encode(&model.features, t))
        .collect()
}

fn model_beliefs(model: &GroundingModel, e: &EncodedTrajectory) -> Result<Vec<f64>> {
    model.beliefs_from_features(&e.features)
}

/// Success term of `model` over successful trajectories.
pub fn loss_succ(model: &GroundingModel, f: &FeasibilityMatrix, successes: &[Trajectory]) -> Result<f64> {
    let enc = encode_all(model, successes)?;
    let beliefs = enc.iter().map(|e| model_beliefs(model, e)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = beliefs.iter().map(Vec::as_slice).collect();
    succ_loss_beliefs(&refs, f)
}

/// Failure term of `model` over failed trajectories.
pub fn loss_fail(model: &GroundingModel, f: &FeasibilityMatrix, failures: &[Trajectory]) -> Result<f64> {
    let enc = encode_all(model, failures)?;
    let beliefs = enc.iter().map(|e| model_beliefs(model, e)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = beliefs.iter().map(Vec::as_slice).collect();
    fail_loss_beliefs(&refs, f)
}

/// Boundary cross-entropy of `model` over every trajectory, computed from logits.
pub fn loss_boundary(model: &GroundingModel, trajs: &[Trajectory]) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Input("boundary loss needs at least one trajectory".into()));
    }
    let enc = encode_all(model, trajs)?;
    let refs: Vec<&EncodedTrajectory> = enc.iter().collect();
    let w = LossWeights {
        succ: 0.0,
        fail: 0.0,
        boundary: 1.0,
        dynamics: 0.0,
    };
    Ok(evaluate(model, &refs, &w, None)?.boundary)
}

/// Dynamics residual of `model` summed over every trajectory.
pub fn loss_dyn(model: &GroundingModel, trajs: &[Trajectory]) -> Result<f64> {
    if model.dynamics.is_none() {
        return Err(Error::Usage("dynamics loss requires a dynamics head".into()));
    }
    let enc = encode_all(model, trajs)?;
    if let Some(short) = enc.iter().find(|e| e.len < 3) {
        return Err(Error::Input(format!("dynamics loss needs T >= 3, got {}", short.len)));
    }
    let refs: Vec<&EncodedTrajectory> = enc.iter().collect();
    let w = LossWeights {
        succ: 0.0,
        fail: 0.0,
        boundary: 0.0,
        dynamics: 1.0,
    };
    Ok(evaluate(model, &refs, &w, None)?.dynamics)
}

/// Errors when a class with a nonzero weight is missing.
pub fn check_classes(trajs: &[&EncodedTrajectory], weights: &LossWeights) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    if weights.succ != 0.0 && !trajs.iter().any(|t| t.success) {
        return Err(Error::Dataset("dataset has no success trajectories".into()));
    }
    if weights.fail != 0.0 && !trajs.iter().any(|t| !t.success) {
        return Err(Error::Dataset("dataset has no failure trajectories".into()));
    }
    Ok(())
}

/// Weighted objective over a whole dataset; the dynamics term is included
/// when the model carries a dynamics head.
pub fn loss_full(model: &GroundingModel, dataset: &[Trajectory], weights: &LossWeights) -> Result<LossTerms> {
    weights.validate()?;
    let enc = encode_all(model, dataset)?;
    let refs: Vec<&EncodedTrajectory> = enc.iter().collect();
    check_classes(&refs, weights)?;
    evaluate(model, &refs, weights, None)
}

/// [`loss_full`] plus parameter gradients of the weighted total.
pub fn loss_full_with_grads(
    model: &GroundingModel,
    dataset: &[Trajectory],
    weights: &LossWeights,
) -> Result<(LossTerms, ModelGrads)> {
    weights.validate()?;
    let enc = encode_all(model, dataset)?;
    let refs: Vec<&EncodedTrajectory> = enc.iter().collect();
    check_classes(&refs, weights)?;
    let mut grads = ModelGrads::zeros_like(model);
    let terms = evaluate(model, &refs, weights, Some(&mut grads))?;
    Ok((terms, grads))
}
