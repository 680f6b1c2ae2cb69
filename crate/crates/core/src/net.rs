//! Feedforward network with hand-written backpropagation.
//!
//! Hidden layers use ReLU, the output layer is linear and produces one logit
//! per class. Output row `i` always belongs to `ClassId(i)`; new classes are
//! appended as fresh rows.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer; `weights` is `out_dim x in_dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.in_dim == 0 {
            out.extend_from_slice(&self.bias);
            return;
        }
        out.extend(
            self.weights
                .chunks_exact(self.in_dim)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }

    fn is_consistent(&self) -> bool {
        self.weights.len() == self.in_dim * self.out_dim && self.bias.len() == self.out_dim
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    layers: Vec<Dense>,
}

/// Activations kept from a forward pass: the input followed by the output of
/// every layer (post-ReLU for hidden layers, raw logits for the last).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Penultimate activations (the input itself for a single-layer net).
    pub fn features(&self) -> &[f64] {
        &self.activations[self.activations.len() - 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Net) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

/// Anything that maps an input to per-class scores. Implemented by live
/// networks and frozen snapshots.
pub trait Scorer {
    fn input_dim(&self) -> usize;
    fn num_outputs(&self) -> usize;
    fn logits(&self, x: &[f64]) -> Vec<f64>;
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.logits(x).into_iter().map(sigmoid).collect()
    }
}

impl Net {
    /// `input -> hidden[0] -> ... -> outputs`, weights drawn from
    /// `N(0, 1/fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], outputs: usize, rng: &mut R) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        let layers = dims.windows(2).map(|w| Dense::random(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let net = Self { layers };
        net.check()?;
        Ok(net)
    }

    fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !l.is_consistent() {
                return Err(Error::InvalidConfig(format!("layer {i} has inconsistent shapes")));
            }
            if !l.all_finite() {
                return Err(Error::InvalidConfig(format!("layer {i} has non-finite parameters")));
            }
            if i > 0 && self.layers[i - 1].out_dim != l.in_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.layers[i - 1].out_dim,
                    actual: l.in_dim,
                });
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.apply(activations.last().unwrap(), &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(out);
        }
        Ok(ForwardCache { activations })
    }

    /// Penultimate-layer activations used as the feature space for herding.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.features().to_vec())
    }

    /// Gradient of the loss with respect to every parameter, given the
    /// gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &[f64]) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        self.backward_accumulate(cache, d_logits, &mut grads);
        grads
    }

    /// Like [`Net::backward`] but adds into an existing gradient buffer.
    pub fn backward_accumulate(&self, cache: &ForwardCache, d_logits: &[f64], grads: &mut Gradients) {
        assert_eq!(d_logits.len(), self.output_dim(), "gradient length must match outputs");
        let mut delta = d_logits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.activations[i];
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += *d;
                if *d != 0.0 {
                    let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (w, x) in row.iter_mut().zip(input) {
                        *w += d * x;
                    }
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // ReLU derivative on the hidden activation feeding this layer.
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// `w <- w - lr * g`. Rejects non-finite gradients without touching the
    /// parameters.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                actual: grads.layers.len(),
            });
        }
        for (i, (l, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            if g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len() {
                return Err(Error::DimensionMismatch {
                    expected: l.weights.len() + l.bias.len(),
                    actual: g.weights.len() + g.bias.len(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { layer: i });
            }
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * d;
            }
            for (b, d) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * d;
            }
        }
        Ok(())
    }

    /// Appends `m_new` output rows drawn from `N(0, 1/fan_in)` with zero
    /// bias. Existing rows and hidden layers are left bit-identical.
    pub fn expand_outputs<R: Rng + ?Sized>(&mut self, m_new: usize, rng: &mut R) {
        if m_new == 0 {
            return;
        }
        let out = self.layers.last_mut().unwrap();
        let fresh = Dense::random(out.in_dim, m_new, rng);
        out.weights.extend_from_slice(&fresh.weights);
        out.bias.extend_from_slice(&fresh.bias);
        out.out_dim += m_new;
    }

    pub fn snapshot(&self, step: usize) -> Snapshot {
        Snapshot {
            net: self.clone(),
            step,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Net = serde_json::from_str(s)?;
        net.check()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&s)
    }

    /// Mutable access to the flat parameter vector, used by finite-difference
    /// checks: calls `f(param)` for every weight and bias in layer order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

impl Gradients {
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }
}

impl Scorer for Net {
    fn input_dim(&self) -> usize {
        Net::input_dim(self)
    }

    fn num_outputs(&self) -> usize {
        self.output_dim()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x)
            .expect("input dimension must match the network")
            .activations
            .pop()
            .unwrap()
    }
}

/// Frozen copy of a network; forward-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    net: Net,
    step: usize,
}

impl Snapshot {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.features(x)
    }
}

impl Scorer for Snapshot {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn num_outputs(&self) -> usize {
        self.net.output_dim()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.net.logits(x)
    }
}
