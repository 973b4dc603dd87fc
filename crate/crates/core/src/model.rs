//! Softmax classifiers with hand-written backpropagation.
//!
//! Parameters live in one flat vector. For the linear model the layout is
//! `[W (c×d), b (c)]`; for the one-hidden-layer MLP it is
//! `[W1 (w×d), b1 (w), W2 (c×w), b2 (c)]`, where the ReLU hidden layer plays the
//! role of the feature extractor and the rows of `W2` are the per-class weights.

use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::util::{argmax, rng_stream};
use crate::{Error, Result};

/// Floor applied to a predicted probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    LinearSoftmax,
    Mlp { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub architecture: Architecture,
    pub d: usize,
    pub c: usize,
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Activations {
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// `-log(max(p_label, 1e-12))`.
pub fn ce_loss(probs: &[f64], label: usize) -> f64 {
    -probs[label].clamp(PROB_FLOOR, 1.0).ln()
}

/// Cross-entropy against a soft target: `-sum_i q_i log(max(p_i, 1e-12))`.
pub fn soft_ce_loss(probs: &[f64], target: &[f64]) -> f64 {
    probs
        .iter()
        .zip(target)
        .filter(|(_, q)| **q != 0.0)
        .map(|(p, q)| -q * p.clamp(PROB_FLOOR, 1.0).ln())
        .sum()
}

impl Model {
    /// Weights and biases drawn from `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(architecture: Architecture, d: usize, c: usize, seed: u64) -> Result<Self> {
        if d == 0 || c < 2 {
            return Err(Error::param(format!("model needs d >= 1 and c >= 2, got d = {d}, c = {c}")));
        }
        if let Architecture::Mlp { width: 0 } = architecture {
            return Err(Error::param("hidden width must be positive"));
        }
        let mut rng = rng_stream(seed, 4);
        let mut params = Vec::new();
        let mut layer = |fan_in: usize, fan_out: usize, params: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_out * (fan_in + 1) {
                params.push(rng.random_range(-bound..=bound));
            }
        };
        match architecture {
            Architecture::LinearSoftmax => layer(d, c, &mut params),
            Architecture::Mlp { width } => {
                layer(d, width, &mut params);
                layer(width, c, &mut params);
            }
        }
        Ok(Model { architecture, d, c, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Forward pass into `act`; `act.probs` holds the class probabilities.
    pub fn forward_into(&self, x: &[f64], act: &mut Activations) {
        debug_assert_eq!(x.len(), self.d);
        let (d, c) = (self.d, self.c);
        act.probs.clear();
        act.probs.resize(c, 0.0);
        match self.architecture {
            Architecture::LinearSoftmax => {
                let (w, b) = self.params.split_at(c * d);
                for k in 0..c {
                    act.probs[k] = b[k] + dot(&w[k * d..(k + 1) * d], x);
                }
            }
            Architecture::Mlp { width } => {
                let (w1, rest) = self.params.split_at(width * d);
                let (b1, rest) = rest.split_at(width);
                let (w2, b2) = rest.split_at(c * width);
                act.hidden.clear();
                act.hidden.extend((0..width).map(|h| (b1[h] + dot(&w1[h * d..(h + 1) * d], x)).max(0.0)));
                for k in 0..c {
                    act.probs[k] = b2[k] + dot(&w2[k * width..(k + 1) * width], &act.hidden);
                }
            }
        }
        softmax_in_place(&mut act.probs);
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut act = Activations::default();
        self.forward_into(x, &mut act);
        act.probs
    }

    /// The induced classifier: argmax of the softmax output.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba(x))
    }

    /// Adds `d(objective)/d(params)` to `grad`, given the gradient of the
    /// objective with respect to the logits and the cached activations of `x`.
    pub fn accumulate_grad(&self, x: &[f64], act: &Activations, dlogits: &[f64], grad: &mut [f64]) {
        let (d, c) = (self.d, self.c);
        match self.architecture {
            Architecture::LinearSoftmax => {
                let (gw, gb) = grad.split_at_mut(c * d);
                for k in 0..c {
                    let g = dlogits[k];
                    gb[k] += g;
                    axpy(g, x, &mut gw[k * d..(k + 1) * d]);
                }
            }
            Architecture::Mlp { width } => {
                let w2 = &self.params[width * d + width..width * d + width + c * width];
                let (gw1, rest) = grad.split_at_mut(width * d);
                let (gb1, rest) = rest.split_at_mut(width);
                let (gw2, gb2) = rest.split_at_mut(c * width);
                for k in 0..c {
                    gb2[k] += dlogits[k];
                    axpy(dlogits[k], &act.hidden, &mut gw2[k * width..(k + 1) * width]);
                }
                for h in 0..width {
                    if act.hidden[h] <= 0.0 {
                        continue;
                    }
                    let g: f64 = (0..c).map(|k| dlogits[k] * w2[k * width + h]).sum();
                    gb1[h] += g;
                    axpy(g, x, &mut gw1[h * d..(h + 1) * d]);
                }
            }
        }
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let model: Model = serde_json::from_reader(input)?;
        let expected = match model.architecture {
            Architecture::LinearSoftmax => model.c * (model.d + 1),
            Architecture::Mlp { width } => width * (model.d + 1) + model.c * (width + 1),
        };
        if model.params.len() != expected {
            return Err(Error::param(format!(
                "checkpoint has {} parameters, architecture needs {expected}",
                model.params.len()
            )));
        }
        Ok(model)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Logit gradient of the soft-target cross-entropy (valid for any target that
/// sums to one): `p - q`.
pub fn soft_ce_dlogits(probs: &[f64], target: &[f64], out: &mut [f64]) {
    for ((o, p), q) in out.iter_mut().zip(probs).zip(target) {
        *o = p - q;
    }
}

/// Logit gradient of `||q - p||^2`: `2 p_j ((p_j - q_j) - sum_i (p_i - q_i) p_i)`.
pub fn squared_error_dlogits(probs: &[f64], target: &[f64], out: &mut [f64]) {
    let s: f64 = probs.iter().zip(target).map(|(p, q)| (p - q) * p).sum();
    for ((o, p), q) in out.iter_mut().zip(probs).zip(target) {
        *o = 2.0 * p * ((p - q) - s);
    }
}
