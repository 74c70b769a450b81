//! Minimal feed-forward network: parameter layout, initialisation, forward
//! pass, analytic backward pass and the checkpoint byte format.
//!
//! Parameters are one flat `f64` vector. For the language-model task the
//! embedding table (`vocab_size x embedding_dim`) comes first. Then, for each
//! dense layer in order, the row-major weight matrix `(out_dim, in_dim)`
//! followed by the bias vector. Gradients share the same layout.
//!
//! Hidden layers use ReLU; the last layer is linear and produces logits.

mod arch;
pub mod codec;

use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::matrix::Matrix;
use crate::{seed, Error, Result};

pub use arch::{Activation, Architecture, Fingerprint, LayerSlice, Task};
pub use codec::{deserialize_params, serialize_params, PayloadDtype};

/// Flat parameter vector tied to the architecture it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    arch: Arc<Architecture>,
    values: Vec<f64>,
}

impl Parameters {
    pub fn new(arch: impl Into<Arc<Architecture>>, values: Vec<f64>) -> Result<Self> {
        let arch = arch.into();
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} parameter values, architecture needs {expected}",
                values.len()
            )));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: impl Into<Arc<Architecture>>) -> Self {
        let arch = arch.into();
        let n = arch.param_count();
        Self { arch, values: vec![0.0; n] }
    }

    /// Zeros with the same architecture as `self`.
    pub fn zeros_like(&self) -> Self {
        Self { arch: Arc::clone(&self.arch), values: vec![0.0; self.values.len()] }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn shared_architecture(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.arch.fingerprint()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_architecture(&self, other: &Parameters) -> bool {
        Arc::ptr_eq(&self.arch, &other.arch) || *self.arch == *other.arch
    }

    /// Weights of dense layer `layer`, row-major `(out_dim, in_dim)`.
    pub fn layer_weights(&self, layer: usize) -> &[f64] {
        &self.values[self.arch.layers()[layer].weights.clone()]
    }

    pub fn layer_biases(&self, layer: usize) -> &[f64] {
        &self.values[self.arch.layers()[layer].biases.clone()]
    }

    pub fn max_abs_diff(&self, other: &Parameters) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Model inputs for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    /// `[B x input_dim]` real features.
    Dense(Matrix),
    /// `[B x window]` token ids, row-major.
    Tokens { window: usize, ids: Vec<u32> },
}

/// A mini-batch of inputs with one label (class or next-token id) per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Inputs,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Inputs, labels: Vec<usize>) -> Result<Self> {
        let rows = match &inputs {
            Inputs::Dense(m) => m.rows(),
            Inputs::Tokens { window, ids } => {
                if *window == 0 || ids.len() % window != 0 {
                    return Err(Error::DimensionMismatch(format!(
                        "{} token ids do not split into windows of {window}",
                        ids.len()
                    )));
                }
                ids.len() / window
            }
        };
        if rows == 0 {
            return Err(Error::DimensionMismatch("empty batch".into()));
        }
        if rows != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows} input rows but {} labels",
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn dense(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        Self::new(Inputs::Dense(inputs), labels)
    }

    pub fn tokens(window: usize, ids: Vec<u32>, labels: Vec<usize>) -> Result<Self> {
        Self::new(Inputs::Tokens { window, ids }, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Inputs {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Row-wise concatenation; all batches must carry the same input kind.
    pub fn concat(batches: &[Batch]) -> Result<Batch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::DimensionMismatch("no batches to concatenate".into()))?;
        let labels = batches.iter().flat_map(|b| b.labels.iter().copied()).collect();
        let inputs = match &first.inputs {
            Inputs::Dense(m) => {
                let cols = m.cols();
                let mut data = Vec::new();
                for b in batches {
                    match &b.inputs {
                        Inputs::Dense(m) if m.cols() == cols => data.extend_from_slice(m.as_slice()),
                        _ => return Err(Error::DimensionMismatch("mixed batch inputs".into())),
                    }
                }
                Inputs::Dense(Matrix::from_vec(data.len() / cols.max(1), cols, data)?)
            }
            Inputs::Tokens { window, .. } => {
                let mut all = Vec::new();
                for b in batches {
                    match &b.inputs {
                        Inputs::Tokens { window: w, ids } if w == window => all.extend_from_slice(ids),
                        _ => return Err(Error::DimensionMismatch("mixed batch inputs".into())),
                    }
                }
                Inputs::Tokens { window: *window, ids: all }
            }
        };
        Batch::new(inputs, labels)
    }
}

/// He-style initialisation: hidden weights `N(0, 2/fan_in)`, output weights
/// `N(0, 1/fan_in)`, embeddings `N(0, 1)`, biases zero.
pub fn init_params(arch: impl Into<Arc<Architecture>>, seed: u64) -> Parameters {
    let arch = arch.into();
    let mut params = Parameters::zeros(Arc::clone(&arch));
    let mut rng = seed::rng(seed::derive(seed, "init", 0));
    if let Some(range) = arch.embedding() {
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        for v in &mut params.values[range] {
            *v = normal.sample(&mut rng);
        }
    }
    let n_layers = arch.layers().len();
    for (l, layer) in arch.layers().iter().enumerate() {
        let gain = if l + 1 == n_layers { 1.0 } else { 2.0 };
        let std = (gain / layer.in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        for v in &mut params.values[layer.weights.clone()] {
            *v = normal.sample(&mut rng);
        }
    }
    params
}

/// Intermediate values of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch_size: usize,
    /// Input to each dense layer; `layer_inputs[0]` is the (embedded) model input.
    layer_inputs: Vec<Vec<f64>>,
    logits: Matrix,
}

impl Tape {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn into_logits(self) -> Matrix {
        self.logits
    }
}

fn check_inputs(arch: &Architecture, batch: &Batch) -> Result<()> {
    match (arch.task(), batch.inputs()) {
        (Task::Classification, Inputs::Dense(m)) => {
            if m.cols() != arch.input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "batch has {} features, model expects {}",
                    m.cols(),
                    arch.input_dim()
                )));
            }
        }
        (Task::LmFixedContext { context_window, vocab_size, .. }, Inputs::Tokens { window, ids }) => {
            if *window != context_window {
                return Err(Error::DimensionMismatch(format!(
                    "batch window {window}, model context window {context_window}"
                )));
            }
            if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::DimensionMismatch(format!(
                    "token id {bad} outside vocabulary of {vocab_size}"
                )));
            }
        }
        _ => return Err(Error::DimensionMismatch("batch input kind does not match model task".into())),
    }
    Ok(())
}

fn embed(params: &Parameters, batch: &Batch) -> Vec<f64> {
    match batch.inputs() {
        Inputs::Dense(m) => m.as_slice().to_vec(),
        Inputs::Tokens { ids, .. } => {
            let dim = match params.arch.task() {
                Task::LmFixedContext { embedding_dim, .. } => embedding_dim,
                Task::Classification => unreachable!("checked by check_inputs"),
            };
            let table = &params.values[params.arch.embedding().expect("lm has embeddings")];
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &t in ids {
                let t = t as usize;
                out.extend_from_slice(&table[t * dim..(t + 1) * dim]);
            }
            out
        }
    }
}

/// `out[r, o] = sum_i w[o, i] * x[r, i] + b[o]`, summing `i` in ascending order.
fn dense(x: &[f64], rows: usize, layer: &LayerSlice, values: &[f64], relu: bool) -> Vec<f64> {
    let (n_in, n_out) = (layer.in_dim, layer.out_dim);
    let w = &values[layer.weights.clone()];
    let b = &values[layer.biases.clone()];
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let or = &mut out[r * n_out..(r + 1) * n_out];
        for (o, slot) in or.iter_mut().enumerate() {
            let wo = &w[o * n_in..(o + 1) * n_in];
            let mut acc = 0.0;
            for (wi, xi) in wo.iter().zip(xr) {
                acc += wi * xi;
            }
            let z = acc + b[o];
            *slot = if relu && z <= 0.0 { 0.0 } else { z };
        }
    }
    out
}

pub fn forward_with_tape(params: &Parameters, batch: &Batch) -> Result<Tape> {
    let arch = &*params.arch;
    check_inputs(arch, batch)?;
    let rows = batch.len();
    let layers = arch.layers();
    let mut layer_inputs = Vec::with_capacity(layers.len());
    let mut x = embed(params, batch);
    for (l, layer) in layers.iter().enumerate() {
        let relu = l + 1 < layers.len();
        let y = dense(&x, rows, layer, &params.values, relu);
        layer_inputs.push(std::mem::replace(&mut x, y));
    }
    let logits = Matrix::from_vec(rows, arch.output_dim(), x)?;
    Ok(Tape { batch_size: rows, layer_inputs, logits })
}

/// Logits `[B x K]`.
pub fn forward(params: &Parameters, batch: &Batch) -> Result<Matrix> {
    forward_with_tape(params, batch).map(Tape::into_logits)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Class probabilities `[B x K]`.
pub fn predict_proba(params: &Parameters, batch: &Batch) -> Result<Matrix> {
    forward(params, batch).map(|z| softmax(&z))
}

/// Gradient of the loss with respect to every parameter, given the gradient
/// of the same loss with respect to the logits. The loss is whatever produced
/// `dloss_dlogits`; batch averaging is expected to be folded into it already.
pub fn backward(params: &Parameters, batch: &Batch, dloss_dlogits: &Matrix) -> Result<Parameters> {
    let tape = forward_with_tape(params, batch)?;
    backward_with_tape(params, batch, &tape, dloss_dlogits)
}

pub fn backward_with_tape(
    params: &Parameters,
    batch: &Batch,
    tape: &Tape,
    dloss_dlogits: &Matrix,
) -> Result<Parameters> {
    let arch = &*params.arch;
    let rows = tape.batch_size;
    if dloss_dlogits.shape() != (rows, arch.output_dim()) {
        return Err(Error::DimensionMismatch(format!(
            "logit gradient is {}x{}, expected {rows}x{}",
            dloss_dlogits.rows(),
            dloss_dlogits.cols(),
            arch.output_dim()
        )));
    }
    let mut grad = params.zeros_like();
    let layers = arch.layers();
    let mut delta = dloss_dlogits.as_slice().to_vec();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let (n_in, n_out) = (layer.in_dim, layer.out_dim);
        let x = &tape.layer_inputs[l];
        {
            let gw = &mut grad.values[layer.weights.clone()];
            for r in 0..rows {
                let xr = &x[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    let d = delta[r * n_out + o];
                    let row = &mut gw[o * n_in..(o + 1) * n_in];
                    for (g, xi) in row.iter_mut().zip(xr) {
                        *g += d * xi;
                    }
                }
            }
        }
        {
            let gb = &mut grad.values[layer.biases.clone()];
            for r in 0..rows {
                for (g, d) in gb.iter_mut().zip(&delta[r * n_out..(r + 1) * n_out]) {
                    *g += d;
                }
            }
        }
        let needs_input_grad = l > 0 || arch.embedding().is_some();
        if !needs_input_grad {
            break;
        }
        let w = &params.values[layer.weights.clone()];
        let mut dx = vec![0.0; rows * n_in];
        for r in 0..rows {
            let dxr = &mut dx[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let d = delta[r * n_out + o];
                for (g, wi) in dxr.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *g += d * wi;
                }
            }
            if l > 0 {
                // layer input is a ReLU output: zero where the unit was inactive
                for (g, xi) in dxr.iter_mut().zip(&x[r * n_in..(r + 1) * n_in]) {
                    if *xi <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
        delta = dx;
    }
    if let (Some(range), Inputs::Tokens { ids, .. }) = (arch.embedding(), batch.inputs()) {
        let dim = range.len() / arch.vocab_size().expect("lm vocab");
        let table = &mut grad.values[range];
        for (pos, &t) in ids.iter().enumerate() {
            let t = t as usize;
            let src = &delta[pos * dim..(pos + 1) * dim];
            for (g, d) in table[t * dim..(t + 1) * dim].iter_mut().zip(src) {
                *g += d;
            }
        }
    }
    Ok(grad)
}
