//! Independent reference computations used by the integration and acceptance
//! tests. Everything here is written against the public parameter layout only
//! and evaluates in f64.

#![allow(dead_code)]

use sparsesoup::data::Dataset;
use sparsesoup::nn::{init_model, loss_and_grad, ArchSpec, Mode, ModelState, ParamKind};
use sparsesoup::pruning::Mask;

const EPS_BN: f64 = 1e-5;

pub struct Reference {
    pub loss: f64,
    /// Inputs seen by each batch-norm layer, `[n, dim]` row-major.
    pub bn_inputs: Vec<Vec<f64>>,
    /// Sign of every ReLU input, in evaluation order.
    pub relu_active: Vec<bool>,
}

fn index(model: &ModelState, name: &str) -> usize {
    model.params.iter().position(|p| p.name == name).unwrap_or_else(|| panic!("no parameter {name}"))
}

/// Straight-line forward pass of the MLP described by `model.arch`, reading
/// parameter values from `p` (aligned with `model.params`).
pub fn reference_forward(model: &ModelState, p: &[Vec<f64>], x: &[f32], labels: &[u32], train: bool) -> Reference {
    let sizes = &model.arch.sizes;
    let n = labels.len();
    let mut h: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let mut bn_inputs = Vec::new();
    let mut relu_active = Vec::new();
    for i in 0..sizes.len() - 1 {
        let (din, dout) = (sizes[i], sizes[i + 1]);
        let w = &p[index(model, &format!("fc{i}.weight"))];
        let b = &p[index(model, &format!("fc{i}.bias"))];
        let mut z = vec![0.0; n * dout];
        for s in 0..n {
            for o in 0..dout {
                z[s * dout + o] = b[o] + (0..din).map(|j| w[o * din + j] * h[s * din + j]).sum::<f64>();
            }
        }
        if i + 2 < sizes.len() {
            if model.arch.batch_norm {
                bn_inputs.push(z.clone());
                let gamma = &p[index(model, &format!("bn{i}.gamma"))];
                let beta = &p[index(model, &format!("bn{i}.beta"))];
                let rm = &p[index(model, &format!("bn{i}.running_mean"))];
                let rv = &p[index(model, &format!("bn{i}.running_var"))];
                for o in 0..dout {
                    let (mean, var) = if train {
                        let mean = (0..n).map(|s| z[s * dout + o]).sum::<f64>() / n as f64;
                        let var = (0..n).map(|s| (z[s * dout + o] - mean).powi(2)).sum::<f64>() / n as f64;
                        (mean, var)
                    } else {
                        (rm[o], rv[o])
                    };
                    for s in 0..n {
                        let v = &mut z[s * dout + o];
                        *v = gamma[o] * (*v - mean) / (var + EPS_BN).sqrt() + beta[o];
                    }
                }
            }
            for v in &mut z {
                relu_active.push(*v > 0.0);
                *v = v.max(0.0);
            }
        }
        h = z;
    }
    let c = *sizes.last().unwrap();
    let loss = (0..n)
        .map(|s| {
            let row = &h[s * c..(s + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[labels[s] as usize]
        })
        .sum::<f64>()
        / n as f64;
    Reference { loss, bn_inputs, relu_active }
}

pub fn params_f64(model: &ModelState) -> Vec<Vec<f64>> {
    model.params.iter().map(|p| p.data.iter().map(|&v| f64::from(v)).collect()).collect()
}

/// Random small MLP for gradient checks: 2 to 5 inputs, one or two hidden
/// layers of 3 to 6 units, 2 to 4 classes, batch norm unless `seed % 4 == 3`,
/// and a batch of 8 samples.
pub fn random_net(seed: u64) -> (ModelState, Vec<f32>, Vec<u32>) {
    let pick = |c: u64, lo: usize, hi: usize| lo + (uniform(seed, c, 0.0, (hi - lo + 1) as f64) as usize);
    let input = pick(1, 2, 5);
    let mut sizes = vec![input];
    for layer in 0..pick(2, 1, 2) {
        sizes.push(pick(10 + layer as u64, 3, 6));
    }
    let classes = pick(3, 2, 4);
    sizes.push(classes);
    let arch = ArchSpec::new(sizes, seed % 4 != 3).unwrap();
    let mut model = init_model(&arch, seed).unwrap();
    jitter(&mut model, seed);
    let n = 8;
    let x: Vec<f32> = (0..n * input).map(|i| uniform(seed, 100 + i as u64, -2.0, 2.0) as f32).collect();
    let y: Vec<u32> = (0..n).map(|i| uniform(seed, 1000 + i as u64, 0.0, classes as f64) as u32).collect();
    (model, x, y)
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flips a ReLU, where the loss is not
    /// differentiable at the scale of the step.
    pub skipped: usize,
}

/// Relative-error denominator floor: gradients smaller than this are compared
/// in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares analytic gradients with the five-point central difference of the
/// f64 reference loss at step `eps`, over every trainable coordinate.
pub fn grad_check(model: &ModelState, x: &[f32], labels: &[u32], mode: Mode, eps: f64) -> GradCheck {
    let mut scratch = model.clone();
    let analytic = loss_and_grad(&mut scratch, &Mask::full(model), x, labels, mode).unwrap().grads;
    let train = mode == Mode::Train;
    let base = params_f64(model);
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for (pi, param) in model.params.iter().enumerate() {
        if !param.kind.is_trainable() {
            continue;
        }
        for j in 0..param.data.len() {
            let at = |offset: f64| {
                let mut p = base.clone();
                p[pi][j] += offset;
                reference_forward(model, &p, x, labels, train)
            };
            let (p1, m1, p2, m2) = (at(eps), at(-eps), at(2.0 * eps), at(-2.0 * eps));
            if m2.relu_active != p2.relu_active || m1.relu_active != p1.relu_active {
                out.skipped += 1;
                continue;
            }
            let numeric = (8.0 * (p1.loss - m1.loss) - (p2.loss - m2.loss)) / (12.0 * eps);
            let a = f64::from(analytic.tensors[pi][j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            out.max_rel_error = out.max_rel_error.max(rel);
            out.checked += 1;
        }
    }
    out
}

/// Single-pass (Welford) mean and unbiased variance of every batch-norm input
/// over a train-mode pass in canonical batch order.
pub fn streaming_bn_moments(model: &ModelState, data: &Dataset, batch_size: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let p = params_f64(model);
    let dims: Vec<usize> = model.arch.sizes[1..model.arch.sizes.len() - 1].to_vec();
    let mut acc: Vec<(f64, Vec<f64>, Vec<f64>)> = dims.iter().map(|&d| (0.0, vec![0.0; d], vec![0.0; d])).collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, y) = data.gather(chunk);
        let r = reference_forward(model, &p, &x, &y, true);
        for (layer, inputs) in r.bn_inputs.iter().enumerate() {
            let d = dims[layer];
            let (count, mean, m2) = &mut acc[layer];
            for row in inputs.chunks(d) {
                *count += 1.0;
                for (o, &v) in row.iter().enumerate() {
                    let delta = v - mean[o];
                    mean[o] += delta / *count;
                    m2[o] += delta * (v - mean[o]);
                }
            }
        }
    }
    acc.into_iter()
        .map(|(count, mean, m2)| {
            let var = m2.iter().map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 }).collect();
            (mean, var)
        })
        .collect()
}

/// Running statistics currently stored in `model`, per batch-norm layer.
pub fn stored_bn_stats(model: &ModelState) -> Vec<(Vec<f32>, Vec<f32>)> {
    let means = model.params.iter().filter(|p| p.kind == ParamKind::BnRunningMean);
    let vars = model.params.iter().filter(|p| p.kind == ParamKind::BnRunningVar);
    means.zip(vars).map(|(m, v)| (m.data.clone(), v.data.clone())).collect()
}

/// FLOPs of one inference by hand: two per weight of every dense layer.
pub fn hand_flops(arch: &ArchSpec) -> u64 {
    arch.sizes.windows(2).map(|w| 2 * (w[0] * w[1]) as u64).sum()
}

/// Deterministic uniform draw in `[lo, hi)` from a counter.
pub fn uniform(seed: u64, counter: u64, lo: f64, hi: f64) -> f64 {
    let bits = sparsesoup::seeding::mix64(seed ^ sparsesoup::seeding::mix64(counter));
    lo + (hi - lo) * (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Randomizes biases and batch-norm affines so gradient checks exercise
/// non-trivial values.
pub fn jitter(model: &mut ModelState, seed: u64) {
    let mut counter = 0u64;
    for p in &mut model.params {
        let (lo, hi) = match p.kind {
            ParamKind::Bias | ParamKind::BnBeta => (-0.5, 0.5),
            ParamKind::BnGamma => (0.5, 1.5),
            _ => continue,
        };
        for v in &mut p.data {
            counter += 1;
            *v = uniform(seed, counter, lo, hi) as f32;
        }
    }
}

/// Blob data split into train / val / test (60 / 20 / 20).
pub fn blob_run_data(classes: u32, per_class: u32, spread: f32, seed: u64) -> sparsesoup::orchestrator::RunData {
    let all = sparsesoup::data::gen_blobs(classes, 2, per_class, spread, seed, None).unwrap();
    let (rest, test) = sparsesoup::data::split_train_val(&all, 0.2, seed).unwrap();
    let (train, val) = sparsesoup::data::split_train_val(&rest, 0.25, seed ^ 1).unwrap();
    sparsesoup::orchestrator::RunData { train, val, test }
}

/// A randomized soup candidate set: a briefly trained parent, pruned to 50%,
/// and `2 + seed % 4` children retrained from it with varied seeds and rates.
pub fn candidate_set(seed: u64) -> (Vec<ModelState>, sparsesoup::orchestrator::RunData) {
    use sparsesoup::nn::{init_model, train, OptimizerState};
    use sparsesoup::pruning::{apply_mask, magnitude_mask};
    use sparsesoup::schedules::ConstantLr;

    let data = blob_run_data(3 + (seed % 3) as u32, 40, 1.2, seed);
    let arch = ArchSpec::new(vec![2, 12, 12, data.train.num_classes], true).unwrap();
    let mut parent = init_model(&arch, seed).unwrap();
    let full = Mask::full(&parent);
    let mut opt = OptimizerState::new(&parent, 0.9, 0.0);
    train(&mut parent, &full, &mut opt, &data.train, &ConstantLr(0.05), 3, 16, seed).unwrap();
    let mask = magnitude_mask(&parent, 0.5, &full).unwrap();
    apply_mask(&mut parent, &mask).unwrap();
    let m = 2 + (seed % 4) as usize;
    let children = (0..m as u64)
        .map(|i| {
            let mut child = parent.clone();
            let mut opt = OptimizerState::new(&child, 0.9, 1e-4);
            let lr = uniform(seed, 7000 + i, 0.01, 0.2) as f32;
            train(&mut child, &mask, &mut opt, &data.train, &ConstantLr(lr), 2, 16, seed * 100 + i).unwrap();
            child
        })
        .collect();
    (children, data)
}
