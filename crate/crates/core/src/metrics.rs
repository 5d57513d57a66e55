//! Robustness and fairness metrics: accuracy under input corruptions and
//! per-subgroup / per-class recall.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{corrupt, CorruptionKind, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::nn::{evaluate, predict, ModelState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Recall of each subgroup id present in the data.
    pub group_recall: BTreeMap<u32, f32>,
    /// Recall of each class; classes without samples are omitted.
    pub class_recall: BTreeMap<u32, f32>,
    /// Mean of the per-class recalls.
    pub balanced_accuracy: f32,
}

fn recall_map(keys: impl Iterator<Item = u32>, hits: impl Iterator<Item = bool>) -> BTreeMap<u32, f32> {
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (k, hit) in keys.zip(hits) {
        let e = counts.entry(k).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    counts.into_iter().map(|(k, (c, n))| (k, c as f32 / n as f32)).collect()
}

/// Recall within each subgroup and each class.
pub fn subgroup_recall(model: &ModelState, data: &Dataset) -> Result<RecallReport> {
    let groups = data
        .subgroup
        .as_ref()
        .ok_or_else(|| Error::Data(format!("dataset `{}` has no subgroup labels", data.name)))?;
    let preds = predict(model, data)?;
    let hits: Vec<bool> = preds.iter().zip(&data.labels).map(|(p, y)| p == y).collect();
    let group_recall = recall_map(groups.iter().copied(), hits.iter().copied());
    let class_recall = recall_map(data.labels.iter().copied(), hits.iter().copied());
    let balanced_accuracy = class_recall.values().sum::<f32>() / class_recall.len() as f32;
    Ok(RecallReport { group_recall, class_recall, balanced_accuracy })
}

/// Every corruption kind at every severity from 1 to 5.
pub fn corruption_grid(kinds: &[CorruptionKind]) -> Result<Vec<CorruptionSpec>> {
    kinds
        .iter()
        .flat_map(|&k| (1..=5).map(move |s| CorruptionSpec::new(k, s)))
        .collect()
}

/// Mean accuracy over corrupted copies of `clean`, one per spec.
///
/// The mean is taken over specs sorted by (kind, severity), so the result does
/// not depend on the order in which they are listed.
pub fn ood_accuracy(model: &ModelState, clean: &Dataset, specs: &[CorruptionSpec]) -> Result<f32> {
    if specs.is_empty() {
        return Err(Error::Config("OOD accuracy needs at least one corruption".into()));
    }
    let mut accs = specs
        .iter()
        .map(|spec| Ok((spec.kind, spec.severity, evaluate(model, &corrupt(clean, spec))?.accuracy)))
        .collect::<Result<Vec<_>>>()?;
    accs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let total: f64 = accs.iter().map(|a| f64::from(a.2)).sum();
    Ok((total / accs.len() as f64) as f32)
}
