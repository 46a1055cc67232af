//! Dense feed-forward networks with batched reverse-mode gradients and an
//! Adam optimizer.
//!
//! A forward pass over a batch of rows records a [`GradTape`]; the tape is
//! bound to the parameter generation of the network that produced it, so a
//! tape recorded before an optimizer step is rejected by `backward`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Softmax,
    Linear,
}

/// One affine layer. `weights` is row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DenseNetRepr {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    head: Head,
    layers: Vec<Layer>,
}

/// A multi-layer perceptron.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "DenseNetRepr", into = "DenseNetRepr")]
pub struct DenseNet {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    head: Head,
    layers: Vec<Layer>,
    generation: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths
            && self.activations == other.activations
            && self.head == other.head
            && self.layers == other.layers
    }
}

impl TryFrom<DenseNetRepr> for DenseNet {
    type Error = Error;

    fn try_from(repr: DenseNetRepr) -> Result<Self> {
        let net = DenseNet {
            widths: repr.widths,
            activations: repr.activations,
            head: repr.head,
            layers: repr.layers,
            generation: 0,
        };
        net.validate()?;
        Ok(net)
    }
}

impl From<DenseNet> for DenseNetRepr {
    fn from(net: DenseNet) -> Self {
        DenseNetRepr {
            widths: net.widths,
            activations: net.activations,
            head: net.head,
            layers: net.layers,
        }
    }
}

impl DenseNet {
    /// Builds a network with Glorot-uniform weights and zero biases. Every
    /// hidden layer uses `activation`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, activation, head)?;
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], activation: Activation, head: Head) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Input(format!(
                "layer widths must have at least two positive entries, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activations: vec![activation; widths.len() - 2],
            head,
            layers,
            generation: 0,
        })
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return bad(format!("invalid layer widths {:?}", self.widths));
        }
        if self.activations.len() != self.widths.len() - 2 {
            return bad(format!(
                "expected {} hidden activations, found {}",
                self.widths.len() - 2,
                self.activations.len()
            ));
        }
        if self.layers.len() != self.widths.len() - 1 {
            return bad(format!(
                "expected {} layers, found {}",
                self.widths.len() - 1,
                self.layers.len()
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            if layer.inputs != i
                || layer.outputs != o
                || layer.weights.len() != i * o
                || layer.biases.len() != o
            {
                return bad(format!("layer {l} shape does not match widths {i}->{o}"));
            }
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Visits every parameter in a fixed order (layer, weights then biases).
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        self.generation += 1;
        let mut idx = 0;
        for layer in &mut self.layers {
            for p in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                f(idx, p);
                idx += 1;
            }
        }
    }

    /// Single-row inference.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.activations.pop().unwrap())
    }

    /// Forward pass over `rows` inputs stored row-major in `x`.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<GradTape> {
        let input = self.input_width();
        if x.len() != rows * input {
            return Err(Error::Input(format!(
                "expected {rows} rows of width {input} ({} values), got {}",
                rows * input,
                x.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let a = activations.last().unwrap();
            let mut z = vec![0.0; rows * layer.outputs];
            affine(a, rows, layer, &mut z);
            let out = if l + 1 < self.layers.len() {
                let act = self.activations[l];
                z.iter().map(|&v| act.apply(v)).collect()
            } else {
                match self.head {
                    Head::Linear => z.clone(),
                    Head::Softmax => {
                        let mut p = z.clone();
                        for row in p.chunks_mut(layer.outputs) {
                            softmax_in_place(row);
                        }
                        p
                    }
                }
            };
            pre.push(z);
            activations.push(out);
        }
        Ok(GradTape {
            generation: self.generation,
            widths: self.widths.clone(),
            rows,
            activations,
            pre,
        })
    }

    /// Parameter gradients for an upstream gradient on the head outputs.
    pub fn backward(&self, tape: &GradTape, upstream: &[f64]) -> Result<ParamGrads> {
        let mut grads = ParamGrads::zeros_like(self);
        self.backward_into(tape, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients for an upstream gradient on the head
    /// outputs into `grads`.
    pub fn backward_into(
        &self,
        tape: &GradTape,
        upstream: &[f64],
        grads: &mut ParamGrads,
    ) -> Result<()> {
        self.check_tape(tape, upstream.len())?;
        let k = self.output_width();
        let dz = match self.head {
            Head::Linear => upstream.to_vec(),
            Head::Softmax => {
                let mut dz = vec![0.0; upstream.len()];
                for ((p, g), out) in tape
                    .output()
                    .chunks(k)
                    .zip(upstream.chunks(k))
                    .zip(dz.chunks_mut(k))
                {
                    softmax_vjp(p, g, out);
                }
                dz
            }
        };
        self.backprop(tape, dz, grads)
    }

    /// Accumulates parameter gradients for an upstream gradient taken with
    /// respect to the pre-head logits (bypassing the softmax Jacobian).
    pub fn backward_logits_into(
        &self,
        tape: &GradTape,
        upstream_logits: &[f64],
        grads: &mut ParamGrads,
    ) -> Result<()> {
        self.check_tape(tape, upstream_logits.len())?;
        self.backprop(tape, upstream_logits.to_vec(), grads)
    }

    fn check_tape(&self, tape: &GradTape, upstream_len: usize) -> Result<()> {
        if tape.widths != self.widths {
            return Err(Error::Usage(format!(
                "tape recorded for widths {:?}, network has {:?}",
                tape.widths, self.widths
            )));
        }
        if tape.generation != self.generation {
            return Err(Error::Usage(
                "stale tape: parameters changed after the forward pass".into(),
            ));
        }
        if upstream_len != tape.rows * self.output_width() {
            return Err(Error::Usage(format!(
                "upstream has {upstream_len} values, expected {}",
                tape.rows * self.output_width()
            )));
        }
        Ok(())
    }

    fn backprop(&self, tape: &GradTape, mut dz: Vec<f64>, grads: &mut ParamGrads) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Usage("gradient buffer shape mismatch".into()));
        }
        let rows = tape.rows;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a_in = &tape.activations[l];
            let g = &mut grads.layers[l];
            // dW += dz^T a_in
            gemm(
                layer.outputs,
                rows,
                layer.inputs,
                (&dz, 1, layer.outputs as isize),
                (a_in, layer.inputs as isize, 1),
                &mut g.weights,
                1.0,
            );
            for row in dz.chunks(layer.outputs) {
                for (b, d) in g.biases.iter_mut().zip(row) {
                    *b += d;
                }
            }
            if l == 0 {
                break;
            }
            // da = dz W
            let mut da = vec![0.0; rows * layer.inputs];
            gemm(
                rows,
                layer.outputs,
                layer.inputs,
                (&dz, layer.outputs as isize, 1),
                (&layer.weights, layer.inputs as isize, 1),
                &mut da,
                0.0,
            );
            let act = self.activations[l - 1];
            for ((d, &z), &a) in da.iter_mut().zip(&tape.pre[l - 1]).zip(a_in) {
                *d *= act.derivative(z, a);
            }
            dz = da;
        }
        Ok(())
    }
}

/// `c = beta * c + a * b` for row-major `c` of shape `m x n`; `a` is `m x k`
/// and `b` is `k x n`, each given with explicit (row, column) strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(c.len(), m * n);
    assert!(a.0.len() >= m * k && b.0.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given dimensions and strides, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn affine(a: &[f64], rows: usize, layer: &Layer, z: &mut [f64]) {
    // z = a W^T
    gemm(
        rows,
        layer.inputs,
        layer.outputs,
        (a, layer.inputs as isize, 1),
        (&layer.weights, 1, layer.inputs as isize),
        z,
        0.0,
    );
    for row in z.chunks_mut(layer.outputs) {
        for (v, b) in row.iter_mut().zip(&layer.biases) {
            *v += b;
        }
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Log-sum-exp of a logit row.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Vector-Jacobian product of softmax: `out = p * (g - <g, p>)`.
pub fn softmax_vjp(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o = pi * (gi - dot);
    }
}

/// Values recorded by one batched forward pass.
#[derive(Clone, Debug)]
pub struct GradTape {
    generation: u64,
    widths: Vec<usize>,
    rows: usize,
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl GradTape {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Head outputs, row-major.
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }

    /// Pre-head logits of the final layer, row-major.
    pub fn logits(&self) -> &[f64] {
        self.pre.last().unwrap()
    }

    pub fn output_row(&self, row: usize) -> &[f64] {
        let k = *self.widths.last().unwrap();
        &self.output()[row * k..(row + 1) * k]
    }

    pub fn logits_row(&self, row: usize) -> &[f64] {
        let k = *self.widths.last().unwrap();
        &self.logits()[row * k..(row + 1) * k]
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= factor);
            l.biases.iter_mut().for_each(|b| *b *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }

    /// Path of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(i) = layer.weights.iter().position(|v| !v.is_finite()) {
                return Some(format!("layers[{l}].weights[{i}]"));
            }
            if let Some(i) = layer.biases.iter().position(|v| !v.is_finite()) {
                return Some(format!("layers[{l}].biases[{i}]"));
            }
        }
        None
    }
}

/// Adam optimizer state for one network.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl Adam {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        let zeros = ParamGrads::zeros_like(net).layers;
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `label` names the network in error messages.
    pub fn step(&mut self, net: &mut DenseNet, grads: &ParamGrads, label: &str) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.weights.len() != l.weights.len() || g.biases.len() != l.biases.len())
        {
            return Err(Error::Usage(format!("{label}: gradient shape mismatch")));
        }
        if let Some(path) = grads.first_non_finite() {
            return Err(Error::Training(format!("non-finite gradient at {label}.{path}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (l, layer) in net.layers_mut().iter_mut().enumerate() {
            let g = &grads.layers[l];
            update(
                &mut layer.weights,
                &g.weights,
                &mut self.first[l].weights,
                &mut self.second[l].weights,
            );
            update(
                &mut layer.biases,
                &g.biases,
                &mut self.first[l].biases,
                &mut self.second[l].biases,
            );
        }
        Ok(())
    }
}
