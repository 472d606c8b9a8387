//! Small dense feed-forward network with hand-written backpropagation.
//!
//! Hidden layers use ReLU. The output head is either a ReLU clamp (the neural
//! urn: nonnegative ball masses, squared-error loss) or a softmax (distilled
//! policy, cross-entropy loss).
//!
//! Weights are stored row-major, one row per output unit.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic line of the text model format.
pub const MODEL_FORMAT: &str = "apa-mlp 1";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    ReluNonneg,
    /// `ln(1 + e^z)`: nonnegative like the ReLU head but never flat.
    Softplus,
    Softmax,
}

impl HeadKind {
    fn name(self) -> &'static str {
        match self {
            HeadKind::ReluNonneg => "relu_nonneg",
            HeadKind::Softplus => "softplus",
            HeadKind::Softmax => "softmax",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu_nonneg" => Ok(HeadKind::ReluNonneg),
            "softplus" => Ok(HeadKind::Softplus),
            "softmax" => Ok(HeadKind::Softmax),
            other => Err(Error::Format(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().copied());
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs)) {
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    head: HeadKind,
}

/// Parameter gradients, shaped like the [`Mlp`] they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut v = Vec::new();
    for l in layers {
        v.extend_from_slice(&l.weights);
        v.extend_from_slice(&l.bias);
    }
    v
}

/// Activations kept from a forward pass for backpropagation.
struct Trace {
    /// `acts[0]` is the input; `acts[k]` the post-activation of layer `k-1`.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of the output layer.
    logits: Vec<f64>,
    output: Vec<f64>,
}

impl Mlp {
    /// He-initialized network; `sizes` = `[input, hidden…, output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head: HeadKind, rng: &mut R) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::invalid("need an input, at least one hidden layer and an output"));
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut layer = Dense::zeros(fan_in, fan_out);
                for v in &mut layer.weights {
                    *v = normal.sample(rng);
                }
                layer
            })
            .collect();
        Ok(Mlp { layers, head })
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least two layers").outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// Copy of `self` with parameters replaced from a flat vector (layout of [`Mlp::flat_params`]).
    pub fn with_flat_params(&self, flat: &[f64]) -> Result<Mlp> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut at = 0;
        for l in &mut out.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(out)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        let (last, hidden) = self.layers.split_last().expect("at least two layers");
        let mut buf = Vec::new();
        for layer in hidden {
            layer.affine(acts.last().expect("input present"), &mut buf);
            acts.push(buf.iter().map(|&z| z.max(0.0)).collect());
        }
        let mut logits = Vec::new();
        last.affine(acts.last().expect("input present"), &mut logits);
        let output = match self.head {
            HeadKind::ReluNonneg => logits.iter().map(|&z| z.max(0.0)).collect(),
            HeadKind::Softplus => logits.iter().map(|&z| softplus(z)).collect(),
            HeadKind::Softmax => softmax(&logits),
        };
        Trace { acts, logits, output }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).output)
    }

    /// Loss value and exact parameter gradient at `(x, target)`.
    ///
    /// Squared error is `‖f(x) − target‖²` and pairs with the ReLU head;
    /// cross-entropy is `−Σ target·log softmax(z)` and pairs with the softmax head.
    pub fn grad_loss(&self, x: &[f64], target: &[f64], loss: LossKind) -> Result<(f64, Gradients)> {
        self.check_input(x)?;
        if target.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: target.len(),
            });
        }
        let tr = self.trace(x);
        let (value, mut delta) = match (self.head, loss) {
            (HeadKind::ReluNonneg, LossKind::SquaredError) => {
                let mut value = 0.0;
                let delta = tr
                    .output
                    .iter()
                    .zip(target)
                    .zip(&tr.logits)
                    .map(|((y, t), z)| {
                        let r = y - t;
                        value += r * r;
                        if *z > 0.0 {
                            2.0 * r
                        } else {
                            0.0
                        }
                    })
                    .collect::<Vec<_>>();
                (value, delta)
            }
            (HeadKind::Softplus, LossKind::SquaredError) => {
                let mut value = 0.0;
                let delta = tr
                    .output
                    .iter()
                    .zip(target)
                    .zip(&tr.logits)
                    .map(|((y, t), z)| {
                        let r = y - t;
                        value += r * r;
                        2.0 * r * sigmoid(*z)
                    })
                    .collect::<Vec<_>>();
                (value, delta)
            }
            (HeadKind::Softmax, LossKind::CrossEntropy) => {
                let lse = log_sum_exp(&tr.logits);
                let mass: f64 = target.iter().sum();
                let value = target
                    .iter()
                    .zip(&tr.logits)
                    .map(|(t, z)| if *t == 0.0 { 0.0 } else { t * (lse - z) })
                    .sum();
                let delta = tr
                    .output
                    .iter()
                    .zip(target)
                    .map(|(p, t)| p * mass - t)
                    .collect();
                (value, delta)
            }
            (HeadKind::ReluNonneg | HeadKind::Softplus, LossKind::CrossEntropy) => {
                return Err(Error::HeadLossMismatch("cross-entropy needs the softmax head"))
            }
            (HeadKind::Softmax, LossKind::SquaredError) => {
                return Err(Error::HeadLossMismatch("squared error needs a nonnegative head"))
            }
        };

        let mut grads = Gradients {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        };
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &tr.acts[k];
            let g = &mut grads.layers[k];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] = d;
                if d == 0.0 {
                    continue;
                }
                for (gw, &a) in g.weights[o * layer.inputs..(o + 1) * layer.inputs]
                    .iter_mut()
                    .zip(input)
                {
                    *gw = d * a;
                }
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev
                    .iter_mut()
                    .zip(&layer.weights[o * layer.inputs..(o + 1) * layer.inputs])
                {
                    *p += d * w;
                }
            }
            // ReLU derivative of the hidden layer feeding this one
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok((value, grads))
    }

    /// `θ ← θ − lr · g`, in place.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid("learning rate must be finite and nonnegative"));
        }
        if !grads.is_finite() {
            return Err(Error::Diverged("gradient"));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: grads.layers.len(),
            });
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * d;
            }
            for (b, d) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * d;
            }
        }
        if !self.is_finite() {
            return Err(Error::Diverged("parameters"));
        }
        Ok(())
    }

    /// One gradient step on a single example; returns the pre-step loss.
    pub fn train_step(&mut self, x: &[f64], target: &[f64], loss: LossKind, lr: f64) -> Result<f64> {
        let (value, grads) = self.grad_loss(x, target, loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged("loss"));
        }
        self.apply_sgd(&grads, lr)?;
        Ok(value)
    }

    /// Writes the text model format: magic line, head, layer sizes, then per
    /// layer one line per weight row followed by one bias line.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MODEL_FORMAT}")?;
        writeln!(w, "head {}", self.head)?;
        let sizes: Vec<String> = self.sizes().iter().map(usize::to_string).collect();
        writeln!(w, "layers {}", sizes.join(" "))?;
        for l in &self.layers {
            for row in l.weights.chunks_exact(l.inputs) {
                writeln!(w, "{}", join_floats(row))?;
            }
            writeln!(w, "{}", join_floats(&l.bias))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Mlp> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Format(format!("unexpected end of model file, expected {what}")))
        };
        let magic = next("magic line")?;
        if magic.trim() != MODEL_FORMAT {
            return Err(Error::Format(format!("unsupported model format {magic:?}")));
        }
        let head_line = next("head")?;
        let head = head_line
            .strip_prefix("head ")
            .ok_or_else(|| Error::Format("missing head line".into()))?
            .trim()
            .parse::<HeadKind>()?;
        let sizes_line = next("layer sizes")?;
        let sizes = sizes_line
            .strip_prefix("layers ")
            .ok_or_else(|| Error::Format("missing layers line".into()))?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if sizes.len() < 3 || sizes.contains(&0) {
            return Err(Error::Format(format!("bad layer sizes {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let mut layer = Dense::zeros(w[0], w[1]);
            for o in 0..w[1] {
                let row = parse_floats(&next("weight row")?, w[0])?;
                layer.weights[o * w[0]..(o + 1) * w[0]].copy_from_slice(&row);
            }
            layer.bias = parse_floats(&next("bias row")?, w[1])?;
            layers.push(layer);
        }
        let mlp = Mlp { layers, head };
        if !mlp.is_finite() {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(mlp)
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

fn parse_floats(line: &str, expected: usize) -> Result<Vec<f64>> {
    let v = line
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != expected {
        return Err(Error::Format(format!("expected {expected} values, got {}", v.len())));
    }
    Ok(v)
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Out-of-place form of [`Mlp::apply_sgd`].
pub fn sgd_step(params: &Mlp, grads: &Gradients, lr: f64) -> Result<Mlp> {
    let mut next = params.clone();
    next.apply_sgd(grads, lr)?;
    Ok(next)
}
