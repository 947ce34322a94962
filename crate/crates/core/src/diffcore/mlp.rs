//! MLP parameters and forward passes, taped and plain.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{NodeId, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// One dense layer: row-major `out_dim x in_dim` weights plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Full parameter set of an MLP classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// He-uniform weights, zero biases. Hidden layers use ReLU, the last
    /// layer is linear (softmax is applied by the loss).
    pub fn new_mlp(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::input("an MLP needs at least input and output sizes"));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::input("layer sizes must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for k in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(Layer {
                weights,
                bias: vec![0.0; fan_out],
                in_dim: fan_in,
                out_dim: fan_out,
                activation: if k + 1 == sizes.len() - 1 { Activation::Identity } else { Activation::Relu },
            });
        }
        Ok(ModelParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Checks the invariants: chained dimensions and finite entries.
    pub fn validate(&self) -> Result<()> {
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::input(format!("layer {k} has inconsistent shapes")));
            }
            if k > 0 && self.layers[k - 1].out_dim != l.in_dim {
                return Err(Error::input(format!("layer {k} input does not chain with layer {}", k - 1)));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::input(format!("layer {k} contains non-finite entries")));
            }
        }
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// Tape node ids of registered parameters, one `(weights, bias)` pair per layer.
#[derive(Debug, Clone)]
pub struct TapeParams {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl TapeParams {
    /// Registers every parameter tensor of `params` on the tape.
    pub fn register(tape: &mut Tape, params: &ModelParams) -> TapeParams {
        let layers = params
            .layers
            .iter()
            .map(|l| (tape.param(l.weights.clone()), tape.param(l.bias.clone())))
            .collect();
        TapeParams { layers }
    }

    /// Collects the parameter gradients of a backward pass into
    /// layer-aligned `(weights, bias)` buffers.
    pub fn gradients(&self, params: &ModelParams, grads: &super::tape::Gradients) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .zip(&params.layers)
            .map(|(&(wid, bid), l)| (grads.get(wid, l.weights.len()), grads.get(bid, l.bias.len())))
            .collect()
    }
}

/// Plain forward pass. Mirrors the taped version operation for operation so
/// both produce bitwise-identical logits.
pub fn mlp_forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::input(format!(
            "input length {} does not match first layer input {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut h = x.to_vec();
    for l in &params.layers {
        let mut out = vec![0.0; l.out_dim];
        for r in 0..l.out_dim {
            let mut acc = 0.0;
            let row = &l.weights[r * l.in_dim..(r + 1) * l.in_dim];
            for c in 0..l.in_dim {
                acc += row[c] * h[c];
            }
            out[r] = acc + l.bias[r];
        }
        if l.activation == Activation::Relu {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        h = out;
    }
    Ok(h)
}

/// Forward pass recorded on a tape; returns the logits node.
pub fn mlp_forward_taped(tape: &mut Tape, tp: &TapeParams, params: &ModelParams, x: &[f64]) -> Result<NodeId> {
    if x.len() != params.input_dim() {
        return Err(Error::input(format!(
            "input length {} does not match first layer input {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut h = tape.constant(x.to_vec());
    for (l, &(wid, bid)) in params.layers.iter().zip(&tp.layers) {
        let z = tape.matvec(wid, h, l.out_dim, l.in_dim)?;
        let zb = tape.add(z, bid)?;
        h = match l.activation {
            Activation::Relu => tape.relu(zb),
            Activation::Identity => zb,
        };
    }
    Ok(h)
}

fn one_hot_index(target: &[f64]) -> Result<usize> {
    let mut idx = None;
    for (i, &t) in target.iter().enumerate() {
        if t == 1.0 {
            if idx.is_some() {
                return Err(Error::input("target has more than one hot entry"));
            }
            idx = Some(i);
        } else if t != 0.0 {
            return Err(Error::input("target entries must be 0 or 1"));
        }
    }
    idx.ok_or_else(|| Error::input("target has no hot entry"))
}

/// Cross-entropy of logits against a one-hot target, log-sum-exp shifted.
pub fn softmax_ce(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::input("logits and target length mismatch"));
    }
    let idx = one_hot_index(target)?;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[idx])
}

/// Taped cross-entropy: `-log_softmax(logits)[target]`.
pub fn softmax_ce_taped(tape: &mut Tape, logits: NodeId, target: &[f64]) -> Result<NodeId> {
    if tape.value(logits).len() != target.len() {
        return Err(Error::input("logits and target length mismatch"));
    }
    let idx = one_hot_index(target)?;
    let lsm = tape.log_softmax(logits);
    let picked = tape.index(lsm, idx)?;
    Ok(tape.affine(picked, -1.0, 0.0))
}
