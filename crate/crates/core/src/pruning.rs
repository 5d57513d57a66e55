//! Pruning masks and how they are chosen.
//!
//! Only dense weights are prunable; biases and batch-norm parameters are never
//! masked. Unstructured pruning ranks every prunable weight of the model in one
//! global list; structured pruning removes whole output rows layer by layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelState;

/// Keep-pattern for one prunable tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskTensor {
    /// Index into `ModelState::params`.
    pub param: usize,
    pub name: String,
    /// `[rows, cols]` of the weight.
    pub shape: Vec<usize>,
    /// `true` = trainable, `false` = pruned.
    pub keep: Vec<bool>,
}

impl MaskTensor {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub tensors: Vec<MaskTensor>,
    kept: usize,
    total: usize,
}

impl Mask {
    /// Nothing pruned.
    pub fn full(model: &ModelState) -> Mask {
        let tensors = model
            .prunable_indices()
            .into_iter()
            .map(|i| {
                let p = &model.params[i];
                MaskTensor { param: i, name: p.name.clone(), shape: p.shape.clone(), keep: vec![true; p.data.len()] }
            })
            .collect();
        let mut mask = Mask { tensors, kept: 0, total: 0 };
        mask.recount();
        mask
    }

    /// Mask whose pruned set is the set of exact zeros in the model's weights.
    pub fn from_zeros(model: &ModelState) -> Mask {
        let mut mask = Mask::full(model);
        for t in &mut mask.tensors {
            for (k, &w) in t.keep.iter_mut().zip(&model.params[t.param].data) {
                *k = w != 0.0;
            }
        }
        mask.recount();
        mask
    }

    pub fn from_tensors(tensors: Vec<MaskTensor>) -> Mask {
        let mut mask = Mask { tensors, kept: 0, total: 0 };
        mask.recount();
        mask
    }

    /// Refreshes the cached counts after editing `tensors` directly.
    pub fn recount(&mut self) {
        self.kept = self.tensors.iter().map(MaskTensor::kept).sum();
        self.total = self.tensors.iter().map(|t| t.keep.len()).sum();
    }

    pub fn kept(&self) -> usize {
        self.kept
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn pruned(&self) -> usize {
        self.total - self.kept
    }

    /// Fraction of prunable coordinates that are masked.
    pub fn sparsity(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.pruned() as f64 / self.total as f64
        }
    }

    pub fn tensor_for(&self, param: usize) -> Option<&MaskTensor> {
        self.tensors.iter().find(|t| t.param == param)
    }

    /// Every coordinate pruned in `self` is also pruned in `other`.
    pub fn is_subset_of_pruned(&self, other: &Mask) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.keep.len() == b.keep.len() && a.keep.iter().zip(&b.keep).all(|(&ka, &kb)| ka || !kb))
    }

    pub fn check_congruent(&self, model: &ModelState) -> Result<()> {
        let prunable = model.prunable_indices();
        if prunable.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "mask has {} tensors, model has {} prunable tensors",
                self.tensors.len(),
                prunable.len()
            )));
        }
        for (t, &i) in self.tensors.iter().zip(&prunable) {
            let p = &model.params[i];
            if t.param != i || t.name != p.name || t.keep.len() != p.data.len() {
                return Err(Error::Shape(format!("mask tensor `{}` does not match parameter `{}`", t.name, p.name)));
            }
        }
        Ok(())
    }

    /// Zeroes masked coordinates in a parameter-aligned tensor list
    /// (gradients, momentum buffers). Empty entries are skipped.
    pub(crate) fn zero_masked(&self, tensors: &mut [Vec<f32>]) {
        for t in &self.tensors {
            let buf = &mut tensors[t.param];
            if buf.is_empty() {
                continue;
            }
            for (v, &k) in buf.iter_mut().zip(&t.keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }

    pub(crate) fn zero_masked_params(&self, model: &mut ModelState) {
        for t in &self.tensors {
            for (w, &k) in model.params[t.param].data.iter_mut().zip(&t.keep) {
                if !k {
                    *w = 0.0;
                }
            }
        }
    }
}

/// Number of coordinates pruned at sparsity `s` out of `total`.
///
/// `floor(s * total)`, with a 1e-9 guard so sparsities produced by
/// floating-point arithmetic (e.g. 0.95 * 2000) land on the intended integer.
pub fn pruned_count(sparsity: f64, total: usize) -> usize {
    ((sparsity * total as f64) + 1e-9).floor().min(total as f64) as usize
}

/// Cumulative sparsity after each of `phases` equal-rate pruning phases:
/// `s_k = 1 - (1 - target)^(k / phases)`.
pub fn phase_sparsities(target: f64, phases: u32) -> Result<Vec<f64>> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Sparsity(format!("target sparsity must lie in (0, 1), got {target}")));
    }
    if phases == 0 {
        return Err(Error::Sparsity("at least one phase is required".into()));
    }
    let k_total = f64::from(phases);
    Ok((1..=phases)
        .map(|k| if k == phases { target } else { 1.0 - (1.0 - target).powf(f64::from(k) / k_total) })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub target: f64,
    pub phases: u32,
    pub cumulative: Vec<f64>,
}

impl SparsityPlan {
    pub fn new(target: f64, phases: u32) -> Result<Self> {
        Ok(SparsityPlan { target, phases, cumulative: phase_sparsities(target, phases)? })
    }
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Sparsity(format!("sparsity must lie in [0, 1], got {s}")));
    }
    Ok(())
}

/// Global unstructured magnitude pruning.
///
/// Masks exactly `pruned_count(sparsity, total)` prunable weights: everything
/// already pruned in `prev`, then the smallest `|w|` over all prunable tensors
/// jointly. Ties are broken by tensor order, then flat index.
pub fn magnitude_mask(model: &ModelState, sparsity: f64, prev: &Mask) -> Result<Mask> {
    check_sparsity(sparsity)?;
    prev.check_congruent(model)?;
    let count = pruned_count(sparsity, prev.total());
    if count < prev.pruned() {
        return Err(Error::Sparsity(format!(
            "requested sparsity {sparsity} prunes {count} weights but {} are already pruned",
            prev.pruned()
        )));
    }
    let mut ranked: Vec<(bool, f32, usize, usize)> = Vec::with_capacity(prev.total());
    for (ti, t) in prev.tensors.iter().enumerate() {
        let w = &model.params[t.param].data;
        for (j, (&k, &v)) in t.keep.iter().zip(w).enumerate() {
            ranked.push((k, v.abs(), ti, j));
        }
    }
    let order = |a: &(bool, f32, usize, usize), b: &(bool, f32, usize, usize)| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    };
    if count > 0 && count < ranked.len() {
        ranked.select_nth_unstable_by(count - 1, order);
    }
    let mut mask = prev.clone();
    for &(_, _, ti, j) in ranked.iter().take(count) {
        mask.tensors[ti].keep[j] = false;
    }
    mask.recount();
    debug_assert_eq!(mask.pruned(), count);
    Ok(mask)
}

/// Structured pruning of output rows by L2 norm, each layer independently.
///
/// In every prunable dense layer except the output layer, the
/// `floor(sparsity * rows)` rows with the smallest norm are masked; ties go to
/// the lower row index. The output layer's rows are the classes and stay.
pub fn filter_mask(model: &ModelState, sparsity: f64) -> Result<Mask> {
    filter_mask_from(model, sparsity, &Mask::full(model))
}

/// [`filter_mask`] that keeps every row already fully pruned in `prev` pruned.
pub fn filter_mask_from(model: &ModelState, sparsity: f64, prev: &Mask) -> Result<Mask> {
    check_sparsity(sparsity)?;
    if sparsity >= 1.0 {
        return Err(Error::Sparsity("structured sparsity must be < 1".into()));
    }
    prev.check_congruent(model)?;
    let mut mask = prev.clone();
    let last = mask.tensors.len().saturating_sub(1);
    for (ti, t) in mask.tensors.iter_mut().enumerate() {
        if ti == last {
            continue;
        }
        let (rows, cols) = (t.shape[0], t.shape[1]);
        if rows == 0 {
            return Err(Error::Shape(format!("`{}` has no rows", t.name)));
        }
        let w = &model.params[t.param].data;
        let count = pruned_count(sparsity, rows);
        let mut ranked: Vec<(bool, f64, usize)> = (0..rows)
            .map(|r| {
                let row_pruned = t.keep[r * cols..(r + 1) * cols].iter().all(|&k| !k);
                let norm = w[r * cols..(r + 1) * cols].iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                (!row_pruned, norm, r)
            })
            .collect();
        let already = ranked.iter().filter(|r| !r.0).count();
        if count < already {
            return Err(Error::Sparsity(format!(
                "`{}`: {already} rows already pruned, sparsity {sparsity} asks for {count}",
                t.name
            )));
        }
        ranked.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, _, r) in ranked.iter().take(count) {
            t.keep[r * cols..(r + 1) * cols].iter_mut().for_each(|k| *k = false);
        }
    }
    mask.recount();
    Ok(mask)
}

/// Sets masked coordinates to exactly 0.0.
pub fn apply_mask(model: &mut ModelState, mask: &Mask) -> Result<()> {
    mask.check_congruent(model)?;
    mask.zero_masked_params(model);
    Ok(())
}

/// Anything with a sparsity: a mask (masked fraction) or a model (fraction of
/// exact zeros among prunable coordinates).
pub trait Sparsity {
    fn sparsity_of(&self) -> f64;
}

impl Sparsity for Mask {
    fn sparsity_of(&self) -> f64 {
        self.sparsity()
    }
}

impl Sparsity for ModelState {
    fn sparsity_of(&self) -> f64 {
        self.sparsity()
    }
}

pub fn sparsity_of(x: &impl Sparsity) -> f64 {
    x.sparsity_of()
}

/// Epochs at which the `events` prune events of a gradual schedule fire,
/// uniformly spaced over `(0, last_epoch]`: event `j` at
/// `ceil(j * last_epoch / events)`. With `last_epoch = 0` every event fires
/// at epoch 0.
pub fn gmp_event_epochs(last_epoch: u32, events: u32) -> Result<Vec<u32>> {
    if events == 0 {
        return Err(Error::Config("gradual pruning needs at least one prune event".into()));
    }
    Ok((1..=events)
        .map(|j| (u64::from(j) * u64::from(last_epoch)).div_ceil(u64::from(events)) as u32)
        .collect())
}

/// Cumulative sparsity in force at `step` of a gradual pruning run whose
/// `num_prune_events` events are spaced uniformly over `(0, total_steps]`.
///
/// After event `j` the target is `s_final * (1 - (1 - j / events)^3)`; before
/// the first event it is 0.
pub fn gmp_target_at(step: u32, total_steps: u32, s_final: f64, num_prune_events: u32) -> Result<f64> {
    if num_prune_events == 0 {
        return Err(Error::Config("gradual pruning needs at least one prune event".into()));
    }
    if step > total_steps {
        return Err(Error::Schedule(format!("step {step} outside 0..={total_steps}")));
    }
    check_sparsity(s_final)?;
    let events = gmp_event_epochs(total_steps, num_prune_events)?;
    let j = events.iter().filter(|&&e| e <= step).count() as u32;
    Ok(gmp_level(j, num_prune_events, s_final))
}

/// Cubic ramp value after `j` of `events` prune events.
pub fn gmp_level(j: u32, events: u32, s_final: f64) -> f64 {
    if j >= events {
        return s_final;
    }
    let remaining = 1.0 - f64::from(j) / f64::from(events);
    s_final * (1.0 - remaining.powi(3))
}
