//! Minimal dense-network engine.
//!
//! A [`DenseNet`] is an ordered stack of [`LayerSpec`]s with analytic
//! backpropagation for every layer kind. Networks run in one of two modes:
//! [`Mode::Train`] normalizes batch-norm layers with batch statistics and
//! updates their running averages, [`Mode::Infer`] uses the running averages
//! and never mutates the network.

pub mod check;
pub(crate) mod io;
mod loss;
mod train;

use std::fmt;

use rand::Rng;

pub use io::{read_dense_net, write_dense_net};
pub use loss::{entropy, loss_ce, loss_grad, loss_kl, Loss, EPS_LOG};
pub use train::{fit, Batch, TrainConfig};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    FullyConnected { in_dim: usize, out_dim: usize },
    Relu,
    BatchNorm { dim: usize },
    Softmax,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::FullyConnected { in_dim, out_dim } => in_dim * out_dim + out_dim,
            LayerSpec::BatchNorm { dim } => 2 * dim,
            LayerSpec::Relu | LayerSpec::Softmax => 0,
        }
    }

    /// Output width given the width flowing in.
    fn output_dim(&self, input_dim: usize) -> usize {
        match *self {
            LayerSpec::FullyConnected { out_dim, .. } => out_dim,
            LayerSpec::BatchNorm { dim } => dim,
            LayerSpec::Relu | LayerSpec::Softmax => input_dim,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::FullyConnected { in_dim, out_dim } => write!(f, "FC {in_dim} {out_dim}"),
            LayerSpec::Relu => f.write_str("RELU"),
            LayerSpec::BatchNorm { dim } => write!(f, "BN {dim}"),
            LayerSpec::Softmax => f.write_str("SOFTMAX"),
        }
    }
}

/// Space-separated token form of a layer stack, e.g. `FC 257 16 RELU BN 16 FC 16 10 SOFTMAX`.
pub fn spec_tokens(spec: &[LayerSpec]) -> String {
    spec.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses the token form produced by [`spec_tokens`].
pub fn parse_spec_tokens(text: &str) -> Result<Vec<LayerSpec>> {
    let mut tokens = text.split_whitespace();
    let mut spec = Vec::new();
    let dim = |tokens: &mut std::str::SplitWhitespace<'_>, what: &str| -> Result<usize> {
        let tok = tokens
            .next()
            .ok_or_else(|| Error::Validation(format!("missing {what} in layer spec")))?;
        tok.parse::<usize>()
            .map_err(|_| Error::Validation(format!("bad {what} `{tok}` in layer spec")))
    };
    while let Some(tok) = tokens.next() {
        let layer = match tok {
            "FC" => LayerSpec::FullyConnected {
                in_dim: dim(&mut tokens, "FC input width")?,
                out_dim: dim(&mut tokens, "FC output width")?,
            },
            "RELU" => LayerSpec::Relu,
            "BN" => LayerSpec::BatchNorm {
                dim: dim(&mut tokens, "BN width")?,
            },
            "SOFTMAX" => LayerSpec::Softmax,
            other => return Err(Error::Validation(format!("unknown layer token `{other}`"))),
        };
        spec.push(layer);
    }
    Ok(spec)
}

/// Closed-form trainable parameter count. Batch-norm running statistics are not counted.
pub fn param_count(spec: &[LayerSpec]) -> usize {
    spec.iter().map(LayerSpec::param_count).sum()
}

/// Checks dimension chaining and softmax placement; returns the input width.
pub fn validate_spec(spec: &[LayerSpec]) -> Result<usize> {
    let input_dim = match spec.iter().find_map(|l| match *l {
        LayerSpec::FullyConnected { in_dim, .. } => Some(in_dim),
        LayerSpec::BatchNorm { dim } => Some(dim),
        _ => None,
    }) {
        Some(d) => d,
        None => return Err(Error::Validation("layer stack has no sized layer".into())),
    };
    let mut width = input_dim;
    for (i, layer) in spec.iter().enumerate() {
        match *layer {
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                if in_dim != width {
                    return Err(Error::shape(format!(
                        "layer {i} expects width {in_dim} but receives {width}"
                    )));
                }
                if in_dim == 0 || out_dim == 0 {
                    return Err(Error::shape(format!("layer {i} has a zero dimension")));
                }
            }
            LayerSpec::BatchNorm { dim } => {
                if dim != width {
                    return Err(Error::shape(format!(
                        "layer {i} expects width {dim} but receives {width}"
                    )));
                }
            }
            LayerSpec::Softmax if i + 1 != spec.len() => {
                return Err(Error::Validation(format!(
                    "softmax at layer {i} is not the final layer"
                )));
            }
            _ => {}
        }
        width = layer.output_dim(width);
    }
    Ok(input_dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Trainable tensors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    /// `weights` is `out_dim x in_dim`, row-major.
    Dense {
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Norm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
    },
}

impl LayerParams {
    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            LayerParams::None => Vec::new(),
            LayerParams::Dense { weights, bias } => vec![weights, bias],
            LayerParams::Norm { gamma, beta } => vec![gamma, beta],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            LayerParams::None => Vec::new(),
            LayerParams::Dense { weights, bias } => vec![weights, bias],
            LayerParams::Norm { gamma, beta } => vec![gamma, beta],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// Per-layer activations recorded by a training forward pass.
#[derive(Debug, Clone)]
enum LayerCache {
    Dense {
        input: Matrix,
    },
    Relu {
        input: Matrix,
    },
    Norm {
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax {
        output: Matrix,
    },
}

/// Activations recorded by [`DenseNet::forward`], consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    mode: Mode,
    caches: Vec<LayerCache>,
}

/// Gradients laid out exactly like the network's [`LayerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        let layers = net
            .params
            .iter()
            .map(|p| match p {
                LayerParams::None => LayerParams::None,
                LayerParams::Dense { weights, bias } => LayerParams::Dense {
                    weights: vec![0.0; weights.len()],
                    bias: vec![0.0; bias.len()],
                },
                LayerParams::Norm { gamma, beta } => LayerParams::Norm {
                    gamma: vec![0.0; gamma.len()],
                    beta: vec![0.0; beta.len()],
                },
            })
            .collect();
        Gradients { layers }
    }

    /// All gradient entries in parameter order.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.tensors()
                    .into_iter()
                    .flatten()
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    spec: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    bn_state: Vec<Option<BnState>>,
    mode: Mode,
    input_dim: usize,
    generation: u64,
}

/// Networks are equal when their layers, parameters, batch-norm state and
/// mode agree; the internal tape generation counter is ignored.
impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.params == other.params
            && self.bn_state == other.bn_state
            && self.mode == other.mode
    }
}

impl DenseNet {
    /// Builds a network with weights uniform in `[-s, s]`, `s = init_scale / sqrt(in_dim)`,
    /// zero biases, unit BN scale and zero BN shift.
    pub fn new(
        spec: Vec<LayerSpec>,
        init_scale: f64,
        bn_momentum: f64,
        bn_epsilon: f64,
        seed: u64,
    ) -> Result<Self> {
        let input_dim = validate_spec(&spec)?;
        if init_scale.is_nan() || init_scale <= 0.0 {
            return Err(Error::range("weight init scale must be positive"));
        }
        let mut rng = seeded(seed);
        let mut params = Vec::with_capacity(spec.len());
        let mut bn_state = Vec::with_capacity(spec.len());
        for layer in &spec {
            match *layer {
                LayerSpec::FullyConnected { in_dim, out_dim } => {
                    let s = init_scale / (in_dim as f64).sqrt();
                    let weights = (0..in_dim * out_dim)
                        .map(|_| rng.random_range(-s..=s))
                        .collect();
                    params.push(LayerParams::Dense {
                        weights,
                        bias: vec![0.0; out_dim],
                    });
                    bn_state.push(None);
                }
                LayerSpec::BatchNorm { dim } => {
                    params.push(LayerParams::Norm {
                        gamma: vec![1.0; dim],
                        beta: vec![0.0; dim],
                    });
                    bn_state.push(Some(BnState {
                        running_mean: vec![0.0; dim],
                        running_var: vec![1.0; dim],
                        epsilon: bn_epsilon,
                        momentum: bn_momentum,
                    }));
                }
                LayerSpec::Relu | LayerSpec::Softmax => {
                    params.push(LayerParams::None);
                    bn_state.push(None);
                }
            }
        }
        Ok(Self {
            spec,
            params,
            bn_state,
            mode: Mode::Train,
            input_dim,
            generation: 0,
        })
    }

    /// Assembles a network from explicit parts, validating every tensor length.
    pub fn from_parts(
        spec: Vec<LayerSpec>,
        params: Vec<LayerParams>,
        bn_state: Vec<Option<BnState>>,
    ) -> Result<Self> {
        let input_dim = validate_spec(&spec)?;
        if params.len() != spec.len() || bn_state.len() != spec.len() {
            return Err(Error::shape("parameter list does not match layer stack"));
        }
        for (i, ((layer, p), bn)) in spec.iter().zip(&params).zip(&bn_state).enumerate() {
            let ok = match (*layer, p, bn) {
                (
                    LayerSpec::FullyConnected { in_dim, out_dim },
                    LayerParams::Dense { weights, bias },
                    None,
                ) => weights.len() == in_dim * out_dim && bias.len() == out_dim,
                (LayerSpec::BatchNorm { dim }, LayerParams::Norm { gamma, beta }, Some(s)) => {
                    gamma.len() == dim
                        && beta.len() == dim
                        && s.running_mean.len() == dim
                        && s.running_var.len() == dim
                }
                (LayerSpec::Relu | LayerSpec::Softmax, LayerParams::None, None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::shape(format!(
                    "parameters of layer {i} do not fit `{layer}`"
                )));
            }
        }
        Ok(Self {
            spec,
            params,
            bn_state,
            mode: Mode::Infer,
            input_dim,
            generation: 0,
        })
    }

    pub fn spec(&self) -> &[LayerSpec] {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    /// Mutable access to the trainable tensors. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        self.generation += 1;
        &mut self.params
    }

    pub fn bn_state(&self) -> &[Option<BnState>] {
        &self.bn_state
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec
            .iter()
            .fold(self.input_dim, |w, l| l.output_dim(w))
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.spec)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.spec
            .iter()
            .any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }

    /// All trainable values in layer order (weights, bias, gamma, beta).
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|l| {
                l.tensors()
                    .into_iter()
                    .flatten()
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Forward pass in the network's current mode.
    ///
    /// In `Train` mode the returned tape feeds [`DenseNet::backward`] and batch-norm
    /// running statistics move towards the batch statistics. In `Infer` mode the
    /// network is left untouched.
    pub fn forward(&mut self, inputs: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(inputs)?;
        if self.mode == Mode::Train && self.has_batch_norm() && inputs.rows() < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm needs at least 2 samples in train mode, got {}",
                inputs.rows()
            )));
        }
        let mode = self.mode;
        let mut caches = Vec::with_capacity(self.spec.len());
        let mut x = inputs.clone();
        for i in 0..self.spec.len() {
            let (y, cache) = self.layer_forward(i, x, mode)?;
            caches.push(cache);
            x = y;
        }
        Ok((
            x,
            Tape {
                generation: self.generation,
                mode,
                caches,
            },
        ))
    }

    /// Inference-mode forward pass through the whole stack, regardless of the current mode.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.predict_prefix(inputs, self.spec.len())
    }

    /// Inference-mode forward pass through the first `layers` layers.
    pub fn predict_prefix(&self, inputs: &Matrix, layers: usize) -> Result<Matrix> {
        self.check_input(inputs)?;
        if layers > self.spec.len() {
            return Err(Error::shape(format!(
                "network has {} layers, asked for {layers}",
                self.spec.len()
            )));
        }
        let mut x = inputs.clone();
        for i in 0..layers {
            x = self.infer_layer(i, x);
        }
        Ok(x)
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim {
            return Err(Error::shape(format!(
                "network expects input width {} but got {}",
                self.input_dim,
                inputs.cols()
            )));
        }
        Ok(())
    }

    fn infer_layer(&self, i: usize, x: Matrix) -> Matrix {
        match (&self.spec[i], &self.params[i]) {
            (LayerSpec::FullyConnected { .. }, LayerParams::Dense { weights, bias }) => {
                dense_forward(&x, weights, bias)
            }
            (LayerSpec::Relu, _) => relu(x),
            (LayerSpec::BatchNorm { .. }, LayerParams::Norm { gamma, beta }) => {
                let state = self.bn_state[i].as_ref().expect("bn layer has state");
                let inv_std: Vec<f64> = state
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + state.epsilon).sqrt())
                    .collect();
                let mut y = x;
                for r in 0..y.rows() {
                    for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                        *v = (*v - state.running_mean[j]) * inv_std[j] * gamma[j] + beta[j];
                    }
                }
                y
            }
            (LayerSpec::Softmax, _) => softmax_rows(x),
            _ => unreachable!("layer params always match their spec"),
        }
    }

    fn layer_forward(&mut self, i: usize, x: Matrix, mode: Mode) -> Result<(Matrix, LayerCache)> {
        let out = match (&self.spec[i], &self.params[i]) {
            (LayerSpec::FullyConnected { .. }, LayerParams::Dense { weights, bias }) => {
                let y = dense_forward(&x, weights, bias);
                (y, LayerCache::Dense { input: x })
            }
            (LayerSpec::Relu, _) => {
                let y = relu(x.clone());
                (y, LayerCache::Relu { input: x })
            }
            (LayerSpec::BatchNorm { dim }, LayerParams::Norm { gamma, beta }) => {
                let dim = *dim;
                let state = self.bn_state[i].as_mut().expect("bn layer has state");
                let (mean, var) = match mode {
                    Mode::Train => {
                        let (mean, var) = column_moments(&x);
                        let m = state.momentum;
                        for j in 0..dim {
                            state.running_mean[j] = m * state.running_mean[j] + (1.0 - m) * mean[j];
                            state.running_var[j] = m * state.running_var[j] + (1.0 - m) * var[j];
                        }
                        (mean, var)
                    }
                    Mode::Infer => (state.running_mean.clone(), state.running_var.clone()),
                };
                let inv_std: Vec<f64> = var
                    .iter()
                    .map(|v| 1.0 / (v + state.epsilon).sqrt())
                    .collect();
                let mut normalized = x;
                for r in 0..normalized.rows() {
                    for (j, v) in normalized.row_mut(r).iter_mut().enumerate() {
                        *v = (*v - mean[j]) * inv_std[j];
                    }
                }
                let mut y = normalized.clone();
                for r in 0..y.rows() {
                    for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                        *v = *v * gamma[j] + beta[j];
                    }
                }
                (
                    y,
                    LayerCache::Norm {
                        normalized,
                        inv_std,
                    },
                )
            }
            (LayerSpec::Softmax, _) => {
                let y = softmax_rows(x);
                (y.clone(), LayerCache::Softmax { output: y })
            }
            _ => unreachable!("layer params always match their spec"),
        };
        Ok(out)
    }

    /// Backpropagates `output_grad` (the loss gradient at the network output)
    /// and returns the gradient of every trainable parameter.
    pub fn backward(&self, tape: &Tape, output_grad: &Matrix) -> Result<Gradients> {
        self.check_tape(tape)?;
        self.backward_from(tape, self.spec.len(), output_grad.clone())
    }

    /// Backpropagation seeded directly at the logits of a trailing softmax, using
    /// the fused softmax + cross-entropy (or KL) gradient `(pred - target) / batch`.
    pub fn backward_fused(&self, tape: &Tape, targets: &Matrix) -> Result<Gradients> {
        self.check_tape(tape)?;
        let last = self.spec.len() - 1;
        let LayerCache::Softmax { output } = &tape.caches[last] else {
            return Err(Error::Unsupported(
                "fused gradient needs a trailing softmax layer".into(),
            ));
        };
        if output.rows() != targets.rows() || output.cols() != targets.cols() {
            return Err(Error::shape(format!(
                "targets are {}x{} but predictions are {}x{}",
                targets.rows(),
                targets.cols(),
                output.rows(),
                output.cols()
            )));
        }
        let b = output.rows() as f64;
        let grad: Vec<f64> = output
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(p, t)| (p - t) / b)
            .collect();
        let grad = Matrix::from_vec(output.rows(), output.cols(), grad)?;
        self.backward_from(tape, last, grad)
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.generation != self.generation {
            return Err(Error::State(
                "tape was recorded before the parameters last changed".into(),
            ));
        }
        if tape.caches.len() != self.spec.len() {
            return Err(Error::State("tape does not belong to this network".into()));
        }
        if tape.mode != Mode::Train {
            return Err(Error::State("tape was recorded in infer mode".into()));
        }
        Ok(())
    }

    /// Runs the backward pass through layers `[0, upto)` starting from `grad`.
    fn backward_from(&self, tape: &Tape, upto: usize, mut grad: Matrix) -> Result<Gradients> {
        let expected_cols = self.spec[..upto]
            .iter()
            .fold(self.input_dim, |w, l| l.output_dim(w));
        let batch = match tape.caches.first() {
            Some(LayerCache::Dense { input }) | Some(LayerCache::Relu { input }) => input.rows(),
            Some(LayerCache::Norm { normalized, .. }) => normalized.rows(),
            Some(LayerCache::Softmax { output }) => output.rows(),
            None => 0,
        };
        if grad.cols() != expected_cols || grad.rows() != batch {
            return Err(Error::shape(format!(
                "output gradient is {}x{} but expected {batch}x{expected_cols}",
                grad.rows(),
                grad.cols()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        for i in (0..upto).rev() {
            grad = match (&tape.caches[i], &self.params[i], &mut grads.layers[i]) {
                (
                    LayerCache::Dense { input },
                    LayerParams::Dense { weights, .. },
                    LayerParams::Dense {
                        weights: gw,
                        bias: gb,
                    },
                ) => {
                    let in_dim = input.cols();
                    let out_dim = grad.cols();
                    let mut grad_in = Matrix::zeros(input.rows(), in_dim);
                    for r in 0..input.rows() {
                        let x = input.row(r);
                        let g = grad.row(r);
                        for o in 0..out_dim {
                            gb[o] += g[o];
                            let w_row = &weights[o * in_dim..(o + 1) * in_dim];
                            let gw_row = &mut gw[o * in_dim..(o + 1) * in_dim];
                            for k in 0..in_dim {
                                gw_row[k] += g[o] * x[k];
                            }
                            let gi = grad_in.row_mut(r);
                            for k in 0..in_dim {
                                gi[k] += g[o] * w_row[k];
                            }
                        }
                    }
                    grad_in
                }
                (LayerCache::Relu { input }, _, _) => {
                    for (g, x) in grad.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if *x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    grad
                }
                (
                    LayerCache::Norm {
                        normalized,
                        inv_std,
                    },
                    LayerParams::Norm { gamma, .. },
                    LayerParams::Norm {
                        gamma: gg,
                        beta: gbeta,
                    },
                ) => {
                    let n = normalized.rows();
                    let dim = normalized.cols();
                    let nf = n as f64;
                    let mut sum_dxhat = vec![0.0; dim];
                    let mut sum_dxhat_xhat = vec![0.0; dim];
                    for r in 0..n {
                        let g = grad.row(r);
                        let xh = normalized.row(r);
                        for j in 0..dim {
                            gg[j] += g[j] * xh[j];
                            gbeta[j] += g[j];
                            let dxhat = g[j] * gamma[j];
                            sum_dxhat[j] += dxhat;
                            sum_dxhat_xhat[j] += dxhat * xh[j];
                        }
                    }
                    let mut grad_in = Matrix::zeros(n, dim);
                    for r in 0..n {
                        let g = grad.row(r);
                        let xh = normalized.row(r);
                        let gi = grad_in.row_mut(r);
                        for j in 0..dim {
                            let dxhat = g[j] * gamma[j];
                            gi[j] = inv_std[j] / nf
                                * (nf * dxhat - sum_dxhat[j] - xh[j] * sum_dxhat_xhat[j]);
                        }
                    }
                    grad_in
                }
                (LayerCache::Softmax { output }, _, _) => {
                    let mut grad_in = Matrix::zeros(output.rows(), output.cols());
                    for r in 0..output.rows() {
                        let p = output.row(r);
                        let g = grad.row(r);
                        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                        for (j, gi) in grad_in.row_mut(r).iter_mut().enumerate() {
                            *gi = p[j] * (g[j] - dot);
                        }
                    }
                    grad_in
                }
                _ => return Err(Error::State("tape does not match layer kinds".into())),
            };
        }
        Ok(grads)
    }

    /// Plain gradient descent: `theta -= learning_rate * grad`. Batch-norm running
    /// statistics are untouched.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if grads.layers.len() != self.params.len() {
            return Err(Error::shape("gradients do not match the layer stack"));
        }
        for (i, (p, g)) in self.params.iter().zip(&grads.layers).enumerate() {
            let pt = p.tensors();
            let gt = g.tensors();
            if pt.len() != gt.len() || pt.iter().zip(&gt).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::shape(format!("gradient of layer {i} is misaligned")));
            }
        }
        for (p, g) in self.params.iter_mut().zip(&grads.layers) {
            for (pt, gt) in p.tensors_mut().into_iter().zip(g.tensors()) {
                for (v, d) in pt.iter_mut().zip(gt) {
                    *v -= learning_rate * d;
                }
            }
        }
        self.generation += 1;
        Ok(())
    }
}

fn dense_forward(x: &Matrix, weights: &[f64], bias: &[f64]) -> Matrix {
    let in_dim = x.cols();
    let out_dim = bias.len();
    let mut y = Matrix::zeros(x.rows(), out_dim);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for o in 0..out_dim {
            let w = &weights[o * in_dim..(o + 1) * in_dim];
            yr[o] = bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    y
}

fn relu(mut x: Matrix) -> Matrix {
    for v in x.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    x
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(mut x: Matrix) -> Matrix {
    for r in 0..x.rows() {
        let row = x.row_mut(r);
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
    x
}

/// Per-column mean and biased variance.
fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc(in_dim: usize, out_dim: usize) -> LayerSpec {
        LayerSpec::FullyConnected { in_dim, out_dim }
    }

    fn net_with(spec: Vec<LayerSpec>, params: Vec<LayerParams>) -> DenseNet {
        let bn = vec![None; spec.len()];
        DenseNet::from_parts(spec, params, bn).unwrap()
    }

    #[test]
    fn zero_weights_then_softmax_is_uniform() {
        let mut net = net_with(
            vec![fc(2, 3), LayerSpec::Softmax],
            vec![
                LayerParams::Dense {
                    weights: vec![0.0; 6],
                    bias: vec![0.0; 3],
                },
                LayerParams::None,
            ],
        );
        let x = Matrix::from_rows(&[[1.5, -2.0], [0.0, 7.0]]).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        for row in y.iter_rows() {
            for v in row {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = relu(Matrix::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap());
        assert_eq!(y.row(0), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let net = net_with(
            vec![fc(2, 2)],
            vec![LayerParams::Dense {
                weights: vec![1.0, 0.0, 0.0, 1.0],
                bias: vec![0.0; 2],
            }],
        );
        let y = net
            .predict(&Matrix::from_rows(&[[0.3, -0.7]]).unwrap())
            .unwrap();
        assert_eq!(y.row(0), &[0.3, -0.7]);
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let net = DenseNet::new(vec![fc(3, 2)], 1.0, 0.9, 1e-5, 0).unwrap();
        let err = net.predict(&Matrix::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn single_sample_batch_norm_in_train_mode_is_rejected() {
        let mut net = DenseNet::new(
            vec![fc(2, 3), LayerSpec::BatchNorm { dim: 3 }],
            1.0,
            0.9,
            1e-5,
            0,
        )
        .unwrap();
        let err = net.forward(&Matrix::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)));
        net.set_mode(Mode::Infer);
        assert!(net.forward(&Matrix::zeros(1, 2)).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let mut net =
            DenseNet::new(vec![LayerSpec::BatchNorm { dim: 1 }], 1.0, 0.9, 1e-5, 0).unwrap();
        let x = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        net.forward(&x).unwrap();
        let state = net.bn_state()[0].as_ref().unwrap();
        // batch mean 2, biased variance 1
        assert!((state.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((state.running_var[0] - (0.9 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(validate_spec(&[fc(2, 3), fc(4, 1)]).is_err());
        assert!(validate_spec(&[fc(2, 3), LayerSpec::Softmax, LayerSpec::Relu]).is_err());
        assert_eq!(
            validate_spec(&[fc(2, 3), LayerSpec::Relu, LayerSpec::BatchNorm { dim: 3 }]).unwrap(),
            2
        );
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count(&[fc(2, 3)]), 9);
        assert_eq!(param_count(&[]), 0);
        let knet = [
            fc(257, 16),
            LayerSpec::Relu,
            LayerSpec::BatchNorm { dim: 16 },
            fc(16, 10),
            LayerSpec::Softmax,
        ];
        assert_eq!(param_count(&knet), 4_112 + 16 + 32 + 170);
    }

    #[test]
    fn spec_tokens_round_trip() {
        let spec = vec![
            fc(257, 16),
            LayerSpec::Relu,
            LayerSpec::BatchNorm { dim: 16 },
            fc(16, 10),
            LayerSpec::Softmax,
        ];
        let text = spec_tokens(&spec);
        assert_eq!(text, "FC 257 16 RELU BN 16 FC 16 10 SOFTMAX");
        assert_eq!(parse_spec_tokens(&text).unwrap(), spec);
    }

    #[test]
    fn sgd_arithmetic_and_zero_step() {
        let mut net = net_with(
            vec![fc(1, 1)],
            vec![LayerParams::Dense {
                weights: vec![1.0],
                bias: vec![0.0],
            }],
        );
        let grads = Gradients {
            layers: vec![LayerParams::Dense {
                weights: vec![0.5],
                bias: vec![0.0],
            }],
        };
        let before = net.clone();
        net.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(net.flat_params(), before.flat_params());
        net.sgd_step(&grads, 0.1).unwrap();
        assert!((net.flat_params()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn misaligned_gradients_are_rejected() {
        let mut net = DenseNet::new(vec![fc(2, 2)], 1.0, 0.9, 1e-5, 0).unwrap();
        let grads = Gradients {
            layers: vec![LayerParams::Dense {
                weights: vec![0.0; 3],
                bias: vec![0.0; 2],
            }],
        };
        assert!(matches!(net.sgd_step(&grads, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = DenseNet::new(vec![fc(2, 2), LayerSpec::Softmax], 1.0, 0.9, 1e-5, 3).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.4]]).unwrap();
        let (_, tape) = net.forward(&x).unwrap();
        let grads = Gradients::zeros_like(&net);
        net.sgd_step(&grads, 0.1).unwrap();
        let err = net.backward(&tape, &Matrix::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let mut net = DenseNet::new(
            vec![
                fc(3, 4),
                LayerSpec::Relu,
                LayerSpec::BatchNorm { dim: 4 },
                fc(4, 2),
                LayerSpec::Softmax,
            ],
            1.0,
            0.9,
            1e-5,
            5,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [0.3, -0.4, 0.9], [1.0, 0.0, -1.0]]).unwrap();
        let (_, tape) = net.forward(&x).unwrap();
        let g = net.backward(&tape, &Matrix::zeros(3, 2)).unwrap();
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fused_gradient_vanishes_when_prediction_equals_target() {
        let mut net = DenseNet::new(vec![fc(2, 3), LayerSpec::Softmax], 1.0, 0.9, 1e-5, 9).unwrap();
        let x = Matrix::from_rows(&[[0.5, -0.5], [0.2, 0.1]]).unwrap();
        let (pred, tape) = net.forward(&x).unwrap();
        let g = net.backward_fused(&tape, &pred).unwrap();
        assert!(g.flat().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn infer_mode_forward_leaves_net_untouched() {
        let mut net = DenseNet::new(
            vec![
                fc(2, 3),
                LayerSpec::BatchNorm { dim: 3 },
                LayerSpec::Softmax,
            ],
            1.0,
            0.9,
            1e-5,
            1,
        )
        .unwrap();
        net.set_mode(Mode::Infer);
        let before = net.clone();
        let x = Matrix::from_rows(&[[0.5, -0.5], [0.2, 0.1]]).unwrap();
        let (a, _) = net.forward(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(net, before);
        assert_eq!(a, b);
    }
}
