//! Minimal feed-forward engine: dense layers, 1-D batch normalization, ReLU
//! and softmax cross-entropy, with hand-written backpropagation.
//!
//! Parameters live in one flat, ordered list of named tensors
//! ([`ModelState::params`]); layers refer to them by index. That layout makes
//! averaging, distances and serialization a walk over `params`.

mod flops;
mod optim;

pub use flops::{count_flops, FlopsReport};
pub use optim::{sgd_step, train, train_span, OptimizerState};

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pruning::Mask;
use crate::seeding::rng;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Layer widths, input first and class count last.
    pub sizes: Vec<usize>,
    /// Insert a batch-norm layer after every hidden dense layer.
    pub batch_norm: bool,
}

impl ArchSpec {
    pub fn new(sizes: Vec<usize>, batch_norm: bool) -> Result<Self> {
        let arch = ArchSpec { sizes, batch_norm };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 {
            return Err(Error::Config(format!(
                "architecture needs an input and an output size, got {:?}",
                self.sizes
            )));
        }
        if self.sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("layer sizes must be >= 1, got {:?}", self.sizes)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Only dense weights are ever pruned.
    pub prunable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        name: String,
        in_dim: usize,
        out_dim: usize,
        weight: usize,
        bias: usize,
    },
    BatchNorm {
        name: String,
        dim: usize,
        gamma: usize,
        beta: usize,
        running_mean: usize,
        running_var: usize,
    },
    Relu {
        name: String,
    },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Dense { name, .. } | Layer::BatchNorm { name, .. } | Layer::Relu { name } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: ArchSpec,
    pub layers: Vec<Layer>,
    pub params: Vec<Param>,
    pub seed: u64,
    /// Set when parameters changed without a matching update of the batch-norm
    /// running statistics (e.g. after averaging).
    pub bn_stale: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Builds the layer graph with zeroed parameters.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<ModelState> {
    arch.validate()?;
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let push = |params: &mut Vec<Param>, name: String, kind, shape: Vec<usize>, fill: f32| {
        let len = shape.iter().product();
        params.push(Param {
            name,
            kind,
            shape,
            data: vec![fill; len],
            prunable: kind == ParamKind::Weight,
        });
        params.len() - 1
    };
    let hidden = arch.sizes.len() - 2;
    for (i, pair) in arch.sizes.windows(2).enumerate() {
        let (in_dim, out_dim) = (pair[0], pair[1]);
        let name = format!("fc{i}");
        let weight = push(&mut params, format!("{name}.weight"), ParamKind::Weight, vec![out_dim, in_dim], 0.0);
        let bias = push(&mut params, format!("{name}.bias"), ParamKind::Bias, vec![out_dim], 0.0);
        layers.push(Layer::Dense { name, in_dim, out_dim, weight, bias });
        if i < hidden {
            if arch.batch_norm {
                let name = format!("bn{i}");
                let gamma = push(&mut params, format!("{name}.gamma"), ParamKind::BnGamma, vec![out_dim], 1.0);
                let beta = push(&mut params, format!("{name}.beta"), ParamKind::BnBeta, vec![out_dim], 0.0);
                let running_mean =
                    push(&mut params, format!("{name}.running_mean"), ParamKind::BnRunningMean, vec![out_dim], 0.0);
                let running_var =
                    push(&mut params, format!("{name}.running_var"), ParamKind::BnRunningVar, vec![out_dim], 1.0);
                layers.push(Layer::BatchNorm { name, dim: out_dim, gamma, beta, running_mean, running_var });
            }
            layers.push(Layer::Relu { name: format!("relu{i}") });
        }
    }
    Ok(ModelState { arch: arch.clone(), layers, params, seed, bn_stale: false })
}

/// Fan-in scaled uniform initialization, `U(-b, b)` with `b = sqrt(6 / fan_in)`.
/// Biases start at zero, batch-norm at the identity with mean 0 and variance 1.
pub fn init_model(arch: &ArchSpec, seed: u64) -> Result<ModelState> {
    let mut model = build_model(arch, seed)?;
    let mut rng = rng(seed);
    for p in model.params.iter_mut().filter(|p| p.kind == ParamKind::Weight) {
        let bound = (6.0 / p.shape[1] as f32).sqrt();
        for w in &mut p.data {
            *w = rng.gen_range(-bound..bound);
        }
    }
    Ok(model)
}

/// Per-batch statistics observed by one batch-norm layer in train mode.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub layer: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
}

enum Cache {
    Dense { input: Vec<f32> },
    Norm { xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Relu { active: Vec<bool> },
}

pub(crate) struct Forward {
    pub logits: Vec<f32>,
    pub bn_stats: Vec<BnBatchStats>,
    caches: Vec<Cache>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Aligned with `ModelState::params`; empty for running statistics.
    pub tensors: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Gradients {
            tensors: model
                .params
                .iter()
                .map(|p| if p.kind.is_trainable() { vec![0.0; p.data.len()] } else { Vec::new() })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub loss: f32,
    pub grads: Gradients,
    pub logits: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f32,
    pub loss: f32,
}

impl ModelState {
    pub fn input_dim(&self) -> usize {
        self.arch.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.arch.sizes.last().expect("validated architecture")
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm { .. }))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Indices into `params` of the prunable tensors, in model order.
    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].prunable).collect()
    }

    pub fn prunable_count(&self) -> usize {
        self.params.iter().filter(|p| p.prunable).map(|p| p.data.len()).sum()
    }

    /// Number of trainable scalars (weights, biases, batch-norm affine).
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind.is_trainable()).map(|p| p.data.len()).sum()
    }

    /// Fraction of exact zeros among prunable coordinates.
    pub fn sparsity(&self) -> f64 {
        let total = self.prunable_count();
        if total == 0 {
            return 0.0;
        }
        let zeros: usize = self
            .params
            .iter()
            .filter(|p| p.prunable)
            .map(|p| p.data.iter().filter(|&&w| w == 0.0).count())
            .sum();
        zeros as f64 / total as f64
    }

    /// Same architecture and tensor layout.
    pub fn same_layout(&self, other: &ModelState) -> bool {
        self.arch == other.arch
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.kind == b.kind)
    }

    fn check_batch(&self, inputs: &[f32], labels: Option<&[u32]>, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if inputs.len() != n * self.input_dim() {
            return Err(Error::Shape(format!(
                "batch of {n} samples has {} values, model expects input dim {}",
                inputs.len(),
                self.input_dim()
            )));
        }
        if let Some(labels) = labels {
            if labels.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
            }
            if let Some(bad) = labels.iter().find(|&&l| l as usize >= self.num_classes()) {
                return Err(Error::Data(format!("label {bad} out of range for {} classes", self.num_classes())));
            }
        }
        Ok(())
    }

    pub(crate) fn forward(&self, inputs: &[f32], n: usize, mode: Mode, keep_caches: bool) -> Result<Forward> {
        self.check_batch(inputs, None, n)?;
        let mut act = inputs.to_vec();
        let mut caches = Vec::new();
        let mut bn_stats = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { in_dim, out_dim, weight, bias, .. } => {
                    let w = &self.params[*weight].data;
                    let b = &self.params[*bias].data;
                    let mut out = vec![0.0f32; n * out_dim];
                    for s in 0..n {
                        let x = &act[s * in_dim..(s + 1) * in_dim];
                        for o in 0..*out_dim {
                            let row = &w[o * in_dim..(o + 1) * in_dim];
                            let mut acc = f64::from(b[o]);
                            for (&wi, &xi) in row.iter().zip(x) {
                                acc += f64::from(wi) * f64::from(xi);
                            }
                            out[s * out_dim + o] = acc as f32;
                        }
                    }
                    if keep_caches {
                        caches.push(Cache::Dense { input: std::mem::take(&mut act) });
                    }
                    act = out;
                }
                Layer::BatchNorm { dim, gamma, beta, running_mean, running_var, .. } => {
                    let dim = *dim;
                    let gamma = &self.params[*gamma].data;
                    let beta = &self.params[*beta].data;
                    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
                        Mode::Train => {
                            let mut mean = vec![0.0f64; dim];
                            for row in act.chunks(dim) {
                                for (m, &x) in mean.iter_mut().zip(row) {
                                    *m += f64::from(x);
                                }
                            }
                            mean.iter_mut().for_each(|m| *m /= n as f64);
                            let mut var = vec![0.0f64; dim];
                            for row in act.chunks(dim) {
                                for ((v, &x), m) in var.iter_mut().zip(row).zip(&mean) {
                                    *v += (f64::from(x) - m).powi(2);
                                }
                            }
                            var.iter_mut().for_each(|v| *v /= n as f64);
                            bn_stats.push(BnBatchStats { layer: li, count: n, mean: mean.clone(), var: var.clone() });
                            (mean, var)
                        }
                        Mode::Eval => (
                            self.params[*running_mean].data.iter().map(|&v| f64::from(v)).collect(),
                            self.params[*running_var].data.iter().map(|&v| f64::from(v)).collect(),
                        ),
                    };
                    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + f64::from(BN_EPS)).sqrt()).collect();
                    let mut xhat = vec![0.0f64; act.len()];
                    for (s, row) in act.chunks_mut(dim).enumerate() {
                        for j in 0..dim {
                            let h = (f64::from(row[j]) - mean[j]) * inv_std[j];
                            xhat[s * dim + j] = h;
                            row[j] = (f64::from(gamma[j]) * h + f64::from(beta[j])) as f32;
                        }
                    }
                    if keep_caches {
                        caches.push(Cache::Norm { xhat, inv_std, batch_stats: mode == Mode::Train });
                    }
                }
                Layer::Relu { .. } => {
                    let active: Vec<bool> = act.iter().map(|&x| x > 0.0).collect();
                    for (x, &a) in act.iter_mut().zip(&active) {
                        if !a {
                            *x = 0.0;
                        }
                    }
                    if keep_caches {
                        caches.push(Cache::Relu { active });
                    }
                }
            }
            if act.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { layer: layer.name().to_string() });
            }
        }
        Ok(Forward { logits: act, bn_stats, caches })
    }

    /// Backpropagation. Deltas and reductions are carried in f64 and rounded
    /// once into the f32 gradients.
    fn backward(&self, fwd: &Forward, dlogits: Vec<f64>, n: usize) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        let mut delta = dlogits;
        for (layer, cache) in self.layers.iter().zip(&fwd.caches).rev() {
            match (layer, cache) {
                (Layer::Dense { in_dim, out_dim, weight, bias, .. }, Cache::Dense { input }) => {
                    let (in_dim, out_dim) = (*in_dim, *out_dim);
                    let w = &self.params[*weight].data;
                    let mut gw = vec![0.0f64; in_dim * out_dim];
                    let mut gb = vec![0.0f64; out_dim];
                    let mut dx = vec![0.0f64; n * in_dim];
                    for s in 0..n {
                        let x = &input[s * in_dim..(s + 1) * in_dim];
                        let dxs = &mut dx[s * in_dim..(s + 1) * in_dim];
                        for o in 0..out_dim {
                            let d = delta[s * out_dim + o];
                            if d == 0.0 {
                                continue;
                            }
                            gb[o] += d;
                            let row = o * in_dim..(o + 1) * in_dim;
                            for ((g, &xi), (dxi, &wi)) in gw[row.clone()].iter_mut().zip(x).zip(dxs.iter_mut().zip(&w[row])) {
                                *g += d * f64::from(xi);
                                *dxi += d * f64::from(wi);
                            }
                        }
                    }
                    grads.tensors[*weight] = gw.iter().map(|&v| v as f32).collect();
                    grads.tensors[*bias] = gb.iter().map(|&v| v as f32).collect();
                    delta = dx;
                }
                (Layer::BatchNorm { dim, gamma, beta, .. }, Cache::Norm { xhat, inv_std, batch_stats }) => {
                    let dim = *dim;
                    let g = &self.params[*gamma].data;
                    let mut dgamma = vec![0.0f64; dim];
                    let mut dbeta = vec![0.0f64; dim];
                    for (drow, hrow) in delta.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            dgamma[j] += drow[j] * hrow[j];
                            dbeta[j] += drow[j];
                        }
                    }
                    let mut dx = vec![0.0f64; delta.len()];
                    if *batch_stats {
                        // dx = inv_std / N * (N * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                        let nf = n as f64;
                        for j in 0..dim {
                            let scale = f64::from(g[j]) * inv_std[j] / nf;
                            for s in 0..n {
                                let k = s * dim + j;
                                dx[k] = scale * (nf * delta[k] - dbeta[j] - xhat[k] * dgamma[j]);
                            }
                        }
                    } else {
                        for (k, d) in delta.iter().enumerate() {
                            let j = k % dim;
                            dx[k] = d * f64::from(g[j]) * inv_std[j];
                        }
                    }
                    grads.tensors[*gamma] = dgamma.iter().map(|&v| v as f32).collect();
                    grads.tensors[*beta] = dbeta.iter().map(|&v| v as f32).collect();
                    delta = dx;
                }
                (Layer::Relu { .. }, Cache::Relu { active }) => {
                    for (d, &a) in delta.iter_mut().zip(active) {
                        if !a {
                            *d = 0.0;
                        }
                    }
                }
                _ => unreachable!("cache kinds follow layer kinds"),
            }
        }
        grads
    }

    /// Folds one train-mode batch's statistics into the running estimates.
    pub(crate) fn update_running_stats(&mut self, stats: &[BnBatchStats]) {
        for st in stats {
            if let Layer::BatchNorm { running_mean, running_var, .. } = self.layers[st.layer] {
                let unbias = if st.count > 1 { st.count as f64 / (st.count - 1) as f64 } else { 1.0 };
                let rm = &mut self.params[running_mean].data;
                for (r, &m) in rm.iter_mut().zip(&st.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m as f32;
                }
                let rv = &mut self.params[running_var].data;
                for (r, &v) in rv.iter_mut().zip(&st.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (v * unbias) as f32;
                }
            }
        }
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&self, inputs: &[f32], n: usize) -> Result<Vec<f32>> {
        Ok(self.forward(inputs, n, Mode::Eval, false)?.logits)
    }
}

/// Mean softmax cross-entropy and its gradient for one batch.
///
/// Gradients of masked-out weight coordinates are zeroed. In train mode
/// batch-norm normalizes with batch statistics and the running estimates are
/// updated; in eval mode the running estimates are used and left untouched.
pub fn loss_and_grad(
    model: &mut ModelState,
    mask: &Mask,
    inputs: &[f32],
    labels: &[u32],
    mode: Mode,
) -> Result<LossAndGrad> {
    let n = labels.len();
    model.check_batch(inputs, Some(labels), n)?;
    mask.check_congruent(model)?;
    let fwd = model.forward(inputs, n, mode, true)?;
    let c = model.num_classes();
    let mut loss = 0.0f64;
    let mut dlogits = vec![0.0f64; n * c];
    for (s, row) in fwd.logits.chunks(c).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(f64::from(l)));
        let sum: f64 = row.iter().map(|&l| (f64::from(l) - max).exp()).sum();
        let lse = max + sum.ln();
        let y = labels[s] as usize;
        loss += lse - f64::from(row[y]);
        for (j, &l) in row.iter().enumerate() {
            let p = (f64::from(l) - lse).exp();
            let target = if j == y { 1.0 } else { 0.0 };
            dlogits[s * c + j] = (p - target) / n as f64;
        }
    }
    let loss = (loss / n as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite { layer: "softmax_cross_entropy".into() });
    }
    let mut grads = model.backward(&fwd, dlogits, n);
    mask.zero_masked(&mut grads.tensors);
    if mode == Mode::Train {
        model.update_running_stats(&fwd.bn_stats);
    }
    Ok(LossAndGrad { loss, grads, logits: fwd.logits })
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn predict(model: &ModelState, data: &Dataset) -> Result<Vec<u32>> {
    let c = model.num_classes();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let (x, _) = data.gather(chunk);
        let logits = model.logits(&x, chunk.len())?;
        preds.extend(logits.chunks(c).map(|r| argmax(r) as u32));
    }
    Ok(preds)
}

pub fn evaluate(model: &ModelState, data: &Dataset) -> Result<EvalMetrics> {
    evaluate_batched(model, data, EVAL_CHUNK)
}

/// Eval-mode accuracy and mean loss, processing `batch_size` samples at a time.
pub fn evaluate_batched(model: &ModelState, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let c = model.num_classes();
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(batch_size) {
        let (x, y) = data.gather(chunk);
        let logits = model.logits(&x, chunk.len())?;
        for (row, &label) in logits.chunks(c).zip(&y) {
            if argmax(row) == label as usize {
                correct += 1;
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(f64::from(l)));
            let lse = max + row.iter().map(|&l| (f64::from(l) - max).exp()).sum::<f64>().ln();
            loss += lse - f64::from(row[label as usize]);
        }
    }
    Ok(EvalMetrics {
        accuracy: (correct as f64 / data.len() as f64) as f32,
        loss: (loss / data.len() as f64) as f32,
    })
}
