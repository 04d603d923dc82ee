//! Fixed layer vocabulary with hand-derived reverse-mode gradients.
//!
//! Networks are flat sequences of [`LayerSpec`]s. Parameters live in a
//! [`ModelParams`] map keyed `w{i}` / `b{i}` by layer index, which keeps
//! checkpoints and gradient maps aligned with their owning spec sequence.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::rng::Rng;

pub const DEFAULT_DROPOUT_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Affine { fan_in: usize, fan_out: usize },
    Relu,
    Sigmoid,
    Softmax,
    Dropout { rate: f64 },
}

impl LayerSpec {
    pub fn affine(fan_in: usize, fan_out: usize) -> Self {
        LayerSpec::Affine { fan_in, fan_out }
    }

    pub fn dropout() -> Self {
        LayerSpec::Dropout {
            rate: DEFAULT_DROPOUT_RATE,
        }
    }
}

/// Checks fan chaining and returns (input dim, output dim) when the chain
/// contains at least one affine layer.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<(Option<usize>, Option<usize>)> {
    let mut in_dim = None;
    let mut cur = None;
    for (i, spec) in specs.iter().enumerate() {
        match *spec {
            LayerSpec::Affine { fan_in, fan_out } => {
                if fan_in == 0 || fan_out == 0 {
                    return Err(Error::structure(format!("layer {i}: zero fan extent")));
                }
                if let Some(c) = cur {
                    if fan_in != c {
                        return Err(Error::structure(format!(
                            "layer {i}: fan_in {fan_in} does not chain from previous fan_out {c}"
                        )));
                    }
                } else {
                    in_dim = Some(fan_in);
                }
                cur = Some(fan_out);
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::argument(format!("layer {i}: dropout rate {rate}")));
                }
            }
            _ => {}
        }
    }
    Ok((in_dim, cur))
}

/// Named weight arrays for one spec sequence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelParams {
    entries: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(!self.entries.contains_key(&name), "duplicate param {name}");
        self.entries.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Zero-filled map with the same names and shapes.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = ModelParams::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        out
    }

    /// `self += scale * other`, entrywise by name.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for (name, t) in self.entries.iter_mut() {
            let o = other.get(name).expect("param name mismatch in axpy");
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.entries.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|t| t.is_finite())
    }
}

/// He/Glorot initialization keyed off the activation each affine layer feeds.
///
/// An affine layer followed (ignoring dropout) by a relu gets He scaling
/// `sqrt(2 / fan_in)`; every other affine gets Glorot `sqrt(2 / (fan_in +
/// fan_out))`. Biases start at zero.
pub fn init_params(specs: &[LayerSpec], rng: &mut Rng) -> Result<ModelParams> {
    validate_specs(specs)?;
    let mut params = ModelParams::new();
    for (i, spec) in specs.iter().enumerate() {
        if let LayerSpec::Affine { fan_in, fan_out } = *spec {
            let feeds_relu = specs[i + 1..]
                .iter()
                .find(|s| !matches!(s, LayerSpec::Dropout { .. }))
                .map(|s| matches!(s, LayerSpec::Relu))
                .unwrap_or(false);
            let std = if feeds_relu {
                (2.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / (fan_in + fan_out) as f64).sqrt()
            };
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.normal_scaled(0.0, std))
                .collect();
            params.insert(format!("w{i}"), Tensor::new(vec![fan_out, fan_in], data)?);
            params.insert(format!("b{i}"), Tensor::zeros(vec![fan_out]));
        }
    }
    Ok(params)
}

/// Every intermediate activation of one forward pass, plus the dropout masks
/// needed to replay it in backward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[i + 1]` is layer `i`'s output.
    pub activations: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has at least the input")
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Runs the layer chain on `x`, recording every activation.
///
/// Dropout is inverted (survivors scaled by `1/(1-rate)`) and active only when
/// `training` is true, in which case `rng` must be supplied. The inference
/// path is deterministic and rng-free.
pub fn forward(
    params: &ModelParams,
    specs: &[LayerSpec],
    x: &[f64],
    training: bool,
    mut rng: Option<&mut Rng>,
) -> Result<ForwardTrace> {
    let mut activations = Vec::with_capacity(specs.len() + 1);
    let mut masks = Vec::with_capacity(specs.len());
    activations.push(x.to_vec());
    for (i, spec) in specs.iter().enumerate() {
        let input = activations.last().unwrap();
        let mut mask = None;
        let out = match *spec {
            LayerSpec::Affine { fan_in, fan_out: _ } => {
                if input.len() != fan_in {
                    return Err(Error::structure(format!(
                        "layer {i}: input length {} != fan_in {fan_in}",
                        input.len()
                    )));
                }
                let w = params
                    .get(&format!("w{i}"))
                    .ok_or_else(|| Error::structure(format!("missing param w{i}")))?;
                let b = params
                    .get(&format!("b{i}"))
                    .ok_or_else(|| Error::structure(format!("missing param b{i}")))?;
                let mut y = w.matvec(input);
                for (yi, bi) in y.iter_mut().zip(b.data()) {
                    *yi += bi;
                }
                y
            }
            LayerSpec::Relu => input.iter().map(|v| v.max(0.0)).collect(),
            LayerSpec::Sigmoid => input.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            LayerSpec::Softmax => softmax(input),
            LayerSpec::Dropout { rate } => {
                if training {
                    let rng = rng.as_deref_mut().ok_or_else(|| {
                        Error::structure("dropout in training mode requires an rng")
                    })?;
                    let keep = 1.0 - rate;
                    let m: Vec<f64> = input
                        .iter()
                        .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let out = input.iter().zip(&m).map(|(v, mi)| v * mi).collect();
                    mask = Some(m);
                    out
                } else {
                    input.clone()
                }
            }
        };
        masks.push(mask);
        activations.push(out);
    }
    Ok(ForwardTrace { activations, masks })
}

/// Propagates `out_grad` (dL/d output) back through the chain.
///
/// Returns parameter gradients shaped like `params` and the gradient with
/// respect to the input vector.
pub fn backward(
    params: &ModelParams,
    specs: &[LayerSpec],
    trace: &ForwardTrace,
    out_grad: &[f64],
) -> Result<(ModelParams, Vec<f64>)> {
    let mut grads = params.zeros_like();
    let mut g = out_grad.to_vec();
    for (i, spec) in specs.iter().enumerate().rev() {
        let input = &trace.activations[i];
        let output = &trace.activations[i + 1];
        g = match *spec {
            LayerSpec::Affine { fan_in, fan_out } => {
                if g.len() != fan_out {
                    return Err(Error::structure(format!(
                        "layer {i}: upstream grad length {} != fan_out {fan_out}",
                        g.len()
                    )));
                }
                let w = params.get(&format!("w{i}")).unwrap();
                {
                    let gw = grads.get_mut(&format!("w{i}")).unwrap().data_mut();
                    for r in 0..fan_out {
                        let row = &mut gw[r * fan_in..(r + 1) * fan_in];
                        let gr = g[r];
                        for (cell, xi) in row.iter_mut().zip(input) {
                            *cell += gr * xi;
                        }
                    }
                }
                {
                    let gb = grads.get_mut(&format!("b{i}")).unwrap().data_mut();
                    for (cell, gi) in gb.iter_mut().zip(&g) {
                        *cell += gi;
                    }
                }
                w.matvec_t(&g)
            }
            LayerSpec::Relu => input
                .iter()
                .zip(&g)
                .map(|(x, gi)| if *x > 0.0 { *gi } else { 0.0 })
                .collect(),
            LayerSpec::Sigmoid => output
                .iter()
                .zip(&g)
                .map(|(s, gi)| gi * s * (1.0 - s))
                .collect(),
            LayerSpec::Softmax => {
                let dot: f64 = g.iter().zip(output).map(|(gi, s)| gi * s).sum();
                output.iter().zip(&g).map(|(s, gi)| s * (gi - dot)).collect()
            }
            LayerSpec::Dropout { .. } => match &trace.masks[i] {
                Some(m) => g.iter().zip(m).map(|(gi, mi)| gi * mi).collect(),
                None => g,
            },
        };
    }
    Ok((grads, g))
}

/// Loss specifications supported by [`loss_and_grad`].
#[derive(Debug, Clone)]
pub enum Loss<'a> {
    /// `-log p[label]`; requires a trailing softmax layer.
    CrossEntropy { label: usize },
    /// `-sum_j q_j log p_j` against a soft target; requires a trailing softmax.
    SoftCrossEntropy { target: &'a [f64] },
    /// `||output - target||^2`.
    SquaredError { target: &'a [f64] },
}

const LOG_FLOOR: f64 = 1e-300;

pub fn loss_value(output: &[f64], loss: &Loss) -> f64 {
    match loss {
        Loss::CrossEntropy { label } => -output[*label].max(LOG_FLOOR).ln(),
        Loss::SoftCrossEntropy { target } => -target
            .iter()
            .zip(output)
            .map(|(q, p)| q * p.max(LOG_FLOOR).ln())
            .sum::<f64>(),
        Loss::SquaredError { target } => output
            .iter()
            .zip(*target)
            .map(|(o, t)| (o - t) * (o - t))
            .sum(),
    }
}

/// dL/d output.
pub fn loss_grad(output: &[f64], loss: &Loss) -> Vec<f64> {
    match loss {
        Loss::CrossEntropy { label } => {
            let mut g = vec![0.0; output.len()];
            g[*label] = -1.0 / output[*label].max(LOG_FLOOR);
            g
        }
        Loss::SoftCrossEntropy { target } => target
            .iter()
            .zip(output)
            .map(|(q, p)| -q / p.max(LOG_FLOOR))
            .collect(),
        Loss::SquaredError { target } => output
            .iter()
            .zip(*target)
            .map(|(o, t)| 2.0 * (o - t))
            .collect(),
    }
}

fn check_loss_pairing(specs: &[LayerSpec], loss: &Loss) -> Result<()> {
    let needs_softmax = matches!(loss, Loss::CrossEntropy { .. } | Loss::SoftCrossEntropy { .. });
    if needs_softmax && !matches!(specs.last(), Some(LayerSpec::Softmax)) {
        return Err(Error::structure(
            "cross-entropy losses require a trailing softmax layer",
        ));
    }
    Ok(())
}

/// Full forward + backward pass: returns the loss value, parameter gradients,
/// and the gradient with respect to the input vector.
pub fn loss_and_grad(
    params: &ModelParams,
    specs: &[LayerSpec],
    x: &[f64],
    loss: &Loss,
    training: bool,
    rng: Option<&mut Rng>,
) -> Result<(f64, ModelParams, Vec<f64>)> {
    check_loss_pairing(specs, loss)?;
    let trace = forward(params, specs, x, training, rng)?;
    let value = loss_value(trace.output(), loss);
    let out_grad = loss_grad(trace.output(), loss);
    let (grads, input_grad) = backward(params, specs, &trace, &out_grad)?;
    Ok((value, grads, input_grad))
}
