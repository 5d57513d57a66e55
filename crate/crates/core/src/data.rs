//! Synthetic classification data: Gaussian blobs with optional minority
//! subgroups, stratified splits, corruption transforms and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub num_classes: usize,
    /// Row-major `[n, dim]`.
    pub inputs: Vec<f32>,
    pub labels: Vec<u32>,
    pub subgroup: Option<Vec<u32>>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        num_classes: usize,
        inputs: Vec<f32>,
        labels: Vec<u32>,
        subgroup: Option<Vec<u32>>,
        seed: u64,
    ) -> Result<Self> {
        let data = Dataset {
            name: name.into(),
            dim,
            num_classes,
            inputs,
            labels,
            subgroup,
            seed,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::Data(format!("dataset `{}` is empty", self.name)));
        }
        if self.dim == 0 || self.inputs.len() != n * self.dim {
            return Err(Error::Data(format!(
                "dataset `{}`: {} input values for {n} samples of dim {}",
                self.name,
                self.inputs.len(),
                self.dim
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::Data(format!(
                "dataset `{}`: label {bad} out of range for {} classes",
                self.name, self.num_classes
            )));
        }
        if self.inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("dataset `{}` has non-finite inputs", self.name)));
        }
        if let Some(groups) = &self.subgroup {
            if groups.len() != n {
                return Err(Error::Data(format!(
                    "dataset `{}`: {} subgroup labels for {n} samples",
                    self.name,
                    groups.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the listed samples, in the given order, into contiguous buffers.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<u32>) {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        let (inputs, labels) = self.gather(indices);
        Dataset {
            name: name.into(),
            dim: self.dim,
            num_classes: self.num_classes,
            inputs,
            labels,
            subgroup: self
                .subgroup
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i]).collect()),
            seed: self.seed,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Loads a dataset from CSV. The header lists the feature columns first,
    /// then `label`, then optionally `subgroup`.
    pub fn from_csv(path: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let label_col = headers
            .iter()
            .position(|h| h == "label")
            .ok_or_else(|| Error::Data(format!("{}: missing `label` column", path.display())))?;
        let subgroup_col = headers.iter().position(|h| h == "subgroup");
        let expected_tail = 1 + usize::from(subgroup_col.is_some());
        if label_col == 0 || label_col + expected_tail != headers.len() {
            return Err(Error::Data(format!(
                "{}: expected feature columns, then `label`, then optional `subgroup`",
                path.display()
            )));
        }
        if let Some(s) = subgroup_col {
            if s != label_col + 1 {
                return Err(Error::Data(format!("{}: `subgroup` must follow `label`", path.display())));
            }
        }
        let dim = label_col;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let parse_err = |col: &str| Error::Data(format!("{}: row {}: bad `{col}`", path.display(), line + 1));
            for (j, field) in record.iter().take(dim).enumerate() {
                let v: f32 = field.trim().parse().map_err(|_| parse_err(&headers[j]))?;
                inputs.push(v);
            }
            labels.push(record[label_col].trim().parse::<u32>().map_err(|_| parse_err("label"))?);
            if let Some(s) = subgroup_col {
                groups.push(record[s].trim().parse::<u32>().map_err(|_| parse_err("subgroup"))?);
            }
        }
        let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let name = path
            .file_stem()
            .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
        Dataset::new(
            name,
            dim,
            num_classes,
            inputs,
            labels,
            subgroup_col.map(|_| groups),
            seed,
        )
    }
}

/// Generates `num_classes` Gaussian clusters in `dim` dimensions.
///
/// Class means are drawn uniformly from `[-4, 4]^dim`; points are the mean
/// plus isotropic noise of standard deviation `spread`. With
/// `subgroup_skew = Some(p)`, `round(p * n_per_class)` points of every class
/// form a minority subgroup (id 1) centred on a class-specific offset of the
/// mean; everything else is subgroup 0.
pub fn gen_blobs(
    num_classes: u32,
    dim: u32,
    n_per_class: u32,
    spread: f32,
    seed: u64,
    subgroup_skew: Option<f32>,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config("gen_blobs needs at least 2 classes".into()));
    }
    if dim == 0 || n_per_class == 0 {
        return Err(Error::Config("gen_blobs needs dim >= 1 and n_per_class >= 1".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("spread must be finite and >= 0, got {spread}")));
    }
    if let Some(p) = subgroup_skew {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("subgroup_skew must lie in [0, 1], got {p}")));
        }
    }
    let (k, d, per) = (num_classes as usize, dim as usize, n_per_class as usize);
    let mut rng = rng(derive_seed(seed, &[0xB10B]));
    let means: Vec<Vec<f32>> = (0..k)
        .map(|_| (0..d).map(|_| rng.gen_range(-4.0f32..4.0)).collect())
        .collect();
    let offsets: Vec<Vec<f32>> = (0..k)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
            v.into_iter().map(|x| 1.5 * x / norm).collect()
        })
        .collect();
    let minority = subgroup_skew.map(|p| (p * per as f32).round() as usize);

    let mut inputs = Vec::with_capacity(k * per * d);
    let mut labels = Vec::with_capacity(k * per);
    let mut groups = Vec::with_capacity(k * per);
    for c in 0..k {
        for i in 0..per {
            let in_minority = minority.is_some_and(|m| i >= per - m);
            for j in 0..d {
                let noise: f32 = StandardNormal.sample(&mut rng);
                let centre = means[c][j] + if in_minority { offsets[c][j] } else { 0.0 };
                inputs.push(centre + spread * noise);
            }
            labels.push(c as u32);
            groups.push(u32::from(in_minority));
        }
    }
    Dataset::new(
        format!("blobs-c{k}-d{d}-n{per}"),
        d,
        k,
        inputs,
        labels,
        minority.map(|_| groups),
        seed,
    )
}

/// Stratified split into `(train, val)`.
///
/// The validation size is `round(val_fraction * n)`, apportioned across classes
/// by largest remainder so every class keeps its proportion within one sample.
/// Both halves keep the original sample order.
pub fn split_train_val(data: &Dataset, val_fraction: f32, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() == 1) {
        return Err(Error::Data(format!(
            "class {c} has {} sample(s); stratified split needs at least 2",
            members.len()
        )));
    }

    let frac = f64::from(val_fraction);
    let n = data.len();
    let target_total = (frac * n as f64).round() as usize;
    let mut quota: Vec<usize> = by_class
        .iter()
        .map(|m| (frac * m.len() as f64).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    order.sort_by(|&a, &b| {
        let ra = frac * by_class[a].len() as f64 - quota[a] as f64;
        let rb = frac * by_class[b].len() as f64 - quota[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = target_total.saturating_sub(quota.iter().sum());
    for &c in &order {
        if remaining == 0 {
            break;
        }
        quota[c] += 1;
        remaining -= 1;
    }

    let mut rng = rng(derive_seed(seed, &[0x5EED_5B17]));
    let mut val_idx = Vec::with_capacity(target_total);
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let take = quota[c].clamp(1, members.len() - 1);
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        val_idx.extend_from_slice(&shuffled[..take]);
    }
    val_idx.sort_unstable();
    let mut is_val = vec![false; n];
    for &i in &val_idx {
        is_val[i] = true;
    }
    let train_idx: Vec<usize> = (0..n).filter(|&i| !is_val[i]).collect();
    Ok((
        data.subset(&train_idx, format!("{}-train", data.name)),
        data.subset(&val_idx, format!("{}-val", data.name)),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    UniformNoise,
    FeatureDropout,
    AffineShift,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::UniformNoise,
        CorruptionKind::FeatureDropout,
        CorruptionKind::AffineShift,
    ];

    fn stream_id(self) -> u64 {
        match self {
            CorruptionKind::GaussianNoise => 1,
            CorruptionKind::UniformNoise => 2,
            CorruptionKind::FeatureDropout => 3,
            CorruptionKind::AffineShift => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5
    pub severity: u8,
    /// Global multiplier on the corruption strength; 1.0 for the standard family.
    pub magnitude: f32,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        Self::with_magnitude(kind, severity, 1.0)
    }

    pub fn with_magnitude(kind: CorruptionKind, severity: u8, magnitude: f32) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("corruption severity must be in 1..=5, got {severity}")));
        }
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(Error::Config(format!("corruption magnitude must be >= 0, got {magnitude}")));
        }
        Ok(CorruptionSpec { kind, severity, magnitude })
    }

    /// Dimensionless strength, linear in severity.
    pub fn level(&self) -> f32 {
        f32::from(self.severity) * self.magnitude
    }
}

/// Applies a corruption to every input; labels and subgroups are untouched.
///
/// Noise scales are relative to the pooled standard deviation of the inputs:
/// gaussian noise has std `0.2 * level * ref`, uniform noise the same std,
/// feature dropout zeroes each value with probability `min(1, 0.1 * level)`,
/// and the affine shift rescales by `1 + 0.05 * level` and translates every
/// feature by `0.1 * level * ref` in a fixed random direction.
pub fn corrupt(data: &Dataset, spec: &CorruptionSpec) -> Dataset {
    let level = spec.level();
    let reference = pooled_std(&data.inputs).max(1e-6);
    let mut rng = rng(derive_seed(data.seed, &[0xC0FF, spec.kind.stream_id(), u64::from(spec.severity)]));
    let mut inputs = data.inputs.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = 0.2 * level * reference;
            for x in &mut inputs {
                let z: f32 = StandardNormal.sample(&mut rng);
                *x += sigma * z;
            }
        }
        CorruptionKind::UniformNoise => {
            let half_width = 0.2 * level * reference * 3f32.sqrt();
            for x in &mut inputs {
                let u: f32 = rng.gen_range(-1.0f32..=1.0);
                *x += half_width * u;
            }
        }
        CorruptionKind::FeatureDropout => {
            let p = (0.1 * level).min(1.0);
            for x in &mut inputs {
                if rng.gen::<f32>() < p {
                    *x = 0.0;
                }
            }
        }
        CorruptionKind::AffineShift => {
            let scale = 1.0 + 0.05 * level;
            let shift: Vec<f32> = (0..data.dim)
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 } * 0.1 * level * reference)
                .collect();
            for row in inputs.chunks_mut(data.dim) {
                for (x, s) in row.iter_mut().zip(&shift) {
                    *x = *x * scale + s;
                }
            }
        }
    }
    Dataset {
        name: format!("{}-{:?}-s{}", data.name, spec.kind, spec.severity),
        inputs,
        ..data.clone()
    }
}

fn pooled_std(values: &[f32]) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = values.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() as f32
}

/// Batch index lists over `n` samples. `fixed_order` yields `0..n` in order,
/// otherwise a permutation drawn from `seed`. The last partial batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, fixed_order: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if !fixed_order {
        order.shuffle(&mut rng(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches(data: &Dataset, batch_size: usize, seed: u64, fixed_order: bool) -> Result<Vec<Vec<usize>>> {
    batch_indices(data.len(), batch_size, seed, fixed_order)
}
