//! Experiment configuration, read from TOML. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparsesoup::data::{gen_blobs, split_train_val, CorruptionKind, CorruptionSpec, Dataset};
use sparsesoup::merging::MergeMethod;
use sparsesoup::metrics::corruption_grid;
use sparsesoup::nn::ArchSpec;
use sparsesoup::orchestrator::{
    DstConfig, DstMethod, Method, PhasePlan, PretrainConfig, PruningKind, ReplicaSpec, RetrainSettings, RunData,
};
use sparsesoup::pruning::SparsityPlan;
use sparsesoup::schedules::{LrCurve, RetrainVariant};
use sparsesoup::seeding::derive_seed;

/// Stream id for replica seeds derived from a run seed.
const REPLICA_STREAM: u64 = 0x5EED_50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output directory; not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Replica worker threads; not part of the config hash.
    #[serde(default = "one")]
    pub parallel: usize,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub pretrain: PretrainSpec,
    pub prune: PruneSpec,
    #[serde(default)]
    pub soup: SoupSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<DstSpec>,
    #[serde(default)]
    pub ood: OodSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// CSV file to load instead of generating blobs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default = "three")]
    pub classes: u32,
    #[serde(default = "two")]
    pub dim: u32,
    #[serde(default = "hundred")]
    pub per_class: u32,
    #[serde(default = "unit")]
    pub spread: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup_skew: Option<f32>,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of all samples held out for testing.
    #[serde(default = "fifth")]
    pub test_fraction: f32,
    /// Fraction of the remainder held out for validation.
    #[serde(default = "fifth")]
    pub val_fraction: f32,
}

fn two() -> u32 {
    2
}
fn three() -> u32 {
    3
}
fn hundred() -> u32 {
    100
}
fn unit() -> f32 {
    1.0
}
fn fifth() -> f32 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub sizes: Vec<usize>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub epochs: u32,
    pub lr: LrCurve,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default = "momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
}

fn batch() -> usize {
    64
}
fn momentum() -> f32 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    pub target: f64,
    pub phases: u32,
    /// Epochs per phase (`k`).
    pub retrain_epochs: u32,
    #[serde(default = "allr")]
    pub schedule: RetrainVariant,
    #[serde(default)]
    pub structured: bool,
}

fn allr() -> RetrainVariant {
    RetrainVariant::Allr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoupSpec {
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default = "uniform")]
    pub merge: MergeMethod,
    /// Per-replica overrides, each of length `m` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decays: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_lrs: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrain_epochs: Option<Vec<u32>>,
}

fn uniform() -> MergeMethod {
    MergeMethod::Uniform
}

impl Default for SoupSpec {
    fn default() -> Self {
        SoupSpec { m: 1, merge: MergeMethod::Uniform, weight_decays: None, initial_lrs: None, retrain_epochs: None }
    }
}

/// Pruning during training (BIMP, GMP, DPF).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DstSpec {
    pub epochs: u32,
    pub lr: LrCurve,
    pub events: u32,
    #[serde(default)]
    pub prune_end_epoch: u32,
    #[serde(default)]
    pub pretrain_epochs: u32,
    #[serde(default)]
    pub sms: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSpec {
    /// Corruption kinds, each evaluated at severities 1 to 5.
    #[serde(default)]
    pub kinds: Vec<CorruptionKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// One-phase soups at each sparsity.
    #[serde(default)]
    pub sparsities: Vec<f64>,
    /// One-phase soups at the prune target with each retraining length.
    #[serde(default)]
    pub retrain_epochs: Vec<u32>,
    /// Replica axes whose candidates are souped pairwise.
    #[serde(default)]
    pub hparams: Vec<HparamAxis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HparamAxis {
    pub axis: Axis,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Seed,
    WeightDecay,
    InitialLr,
    RetrainEpochs,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Seed => "seed",
            Axis::WeightDecay => "weight_decay",
            Axis::InitialLr => "initial_lr",
            Axis::RetrainEpochs => "retrain_epochs",
        }
    }
}

/// A configuration that failed to load or validate.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: sparsesoup::Error| invalid(e.to_string());
        if self.seeds.is_empty() {
            return Err(invalid("`seeds` must not be empty"));
        }
        if self.parallel == 0 {
            return Err(invalid("`parallel` must be >= 1"));
        }
        self.arch().map_err(wrap)?;
        SparsityPlan::new(self.prune.target, self.prune.phases).map_err(wrap)?;
        if self.prune.retrain_epochs == 0 {
            return Err(invalid("`prune.retrain_epochs` must be >= 1"));
        }
        if self.pretrain.epochs == 0 && self.dst.is_none() {
            return Err(invalid("`pretrain.epochs` must be >= 1"));
        }
        if self.soup.m == 0 {
            return Err(invalid("`soup.m` must be >= 1"));
        }
        let m = self.soup.m;
        let lens = [
            self.soup.weight_decays.as_ref().map(Vec::len),
            self.soup.initial_lrs.as_ref().map(Vec::len),
            self.soup.retrain_epochs.as_ref().map(Vec::len),
        ];
        if lens.iter().flatten().any(|&l| l != m) {
            return Err(invalid(format!("per-replica lists in [soup] must have m = {m} entries")));
        }
        if matches!(self.method, Method::Bimp | Method::Gmp | Method::Dpf) && self.dst.is_none() {
            return Err(invalid(format!("method `{}` needs a [dst] table", self.method)));
        }
        if self.method == Method::ImpReprune && m < 2 {
            return Err(invalid("imp_reprune needs soup.m >= 2"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.hparams.iter().any(|a| a.values.len() < 2) {
                return Err(invalid("every sweep axis needs at least two values"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with the output directory and thread
    /// count cleared, truncated to 64 bits.
    pub fn hash(&self) -> u64 {
        let mut canon = self.clone();
        canon.out = None;
        canon.parallel = 1;
        let json = serde_json::to_vec(&canon).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn arch(&self) -> sparsesoup::Result<ArchSpec> {
        ArchSpec::new(self.model.sizes.clone(), self.model.batch_norm)
    }

    pub fn data(&self) -> sparsesoup::Result<RunData> {
        let d = &self.dataset;
        let all = match &d.csv {
            Some(path) => Dataset::from_csv(path, d.seed)?,
            None => gen_blobs(d.classes, d.dim, d.per_class, d.spread, d.seed, d.subgroup_skew)?,
        };
        let (rest, test) = split_train_val(&all, d.test_fraction, derive_seed(d.seed, &[1]))?;
        let (train, val) = split_train_val(&rest, d.val_fraction, derive_seed(d.seed, &[2]))?;
        Ok(RunData { train, val, test })
    }

    pub fn pretrain_config(&self, seed: u64) -> sparsesoup::Result<PretrainConfig> {
        Ok(PretrainConfig {
            arch: self.arch()?,
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr.clone(),
            batch_size: self.pretrain.batch_size,
            momentum: self.pretrain.momentum,
            weight_decay: self.pretrain.weight_decay,
            seed,
        })
    }

    pub fn ood_specs(&self) -> sparsesoup::Result<Vec<CorruptionSpec>> {
        corruption_grid(&self.ood.kinds)
    }

    pub fn settings(&self, parallel: usize) -> sparsesoup::Result<RetrainSettings> {
        Ok(RetrainSettings {
            original: self.pretrain_config(0)?.schedule()?,
            variant: self.prune.schedule,
            retrain_epochs: self.prune.retrain_epochs,
            batch_size: self.pretrain.batch_size,
            momentum: self.pretrain.momentum,
            weight_decay: self.pretrain.weight_decay,
            parallel,
            ood: self.ood_specs()?,
        })
    }

    pub fn pruning_kind(&self) -> PruningKind {
        if self.prune.structured {
            PruningKind::StructuredRow
        } else {
            PruningKind::UnstructuredGlobal
        }
    }

    /// Base seed of the replicas of run `seed`.
    pub fn replica_base(seed: u64) -> u64 {
        derive_seed(seed, &[REPLICA_STREAM])
    }

    /// Seed-varied replicas with the per-replica overrides of `[soup]` applied.
    pub fn phase_plan(&self, plan: SparsityPlan, seed: u64, s: &RetrainSettings) -> PhasePlan {
        let mut pp = PhasePlan::seed_varied(plan, self.soup.m, Self::replica_base(seed), s, self.soup.merge);
        pp.pruning = self.pruning_kind();
        for phase in &mut pp.replicas {
            for (i, r) in phase.iter_mut().enumerate() {
                self.override_replica(r, i);
            }
        }
        pp
    }

    fn override_replica(&self, r: &mut ReplicaSpec, i: usize) {
        if let Some(v) = &self.soup.weight_decays {
            r.weight_decay = v[i];
        }
        if let Some(v) = &self.soup.initial_lrs {
            r.initial_lr = Some(v[i]);
        }
        if let Some(v) = &self.soup.retrain_epochs {
            r.retrain_epochs = v[i];
        }
    }

    pub fn dst_config(&self, method: Method, seed: u64, parallel: usize) -> sparsesoup::Result<DstConfig> {
        let dst = self
            .dst
            .as_ref()
            .ok_or_else(|| sparsesoup::Error::Config(format!("method `{method}` needs a [dst] table")))?;
        let method = match method {
            Method::Bimp => DstMethod::Bimp,
            Method::Gmp => DstMethod::Gmp,
            Method::Dpf => DstMethod::Dpf,
            m => return Err(sparsesoup::Error::Config(format!("`{m}` is not a pruning-during-training method"))),
        };
        Ok(DstConfig {
            method,
            arch: self.arch()?,
            seed,
            epochs: dst.epochs,
            lr: dst.lr.clone(),
            batch_size: self.pretrain.batch_size,
            momentum: self.pretrain.momentum,
            weight_decay: self.pretrain.weight_decay,
            target: self.prune.target,
            events: dst.events,
            prune_end_epoch: dst.prune_end_epoch,
            pretrain_epochs: dst.pretrain_epochs,
            variant: self.prune.schedule,
            sms: dst.sms,
            m: self.soup.m,
            merge: self.soup.merge,
            parallel,
            ood: self.ood_specs()?,
        })
    }
}
