//! End-to-end methods: pretraining, iterative magnitude pruning and its
//! budget-matched variants, sparse model soups, and pruning during training
//! (BIMP, GMP, DPF) with the optional soup extension.
//!
//! Replicas inside a phase are trained on a dedicated thread pool. Each
//! replica is a pure function of its parent and seed and results are collected
//! in replica order, so the thread count never changes the outcome.

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::merging::{
    linear_combine, merge, pairwise_l2, recompute_bn, reprune_to, MergeData, MergeMethod, MergeReport, PairwiseL2,
    SoupRecipe,
};
use crate::metrics::{ood_accuracy, subgroup_recall, RecallReport};
use crate::nn::{
    count_flops, evaluate, init_model, loss_and_grad, sgd_step, train, train_span, ArchSpec, Mode, ModelState,
    OptimizerState,
};
use crate::pruning::{apply_mask, filter_mask_from, gmp_event_epochs, gmp_level, magnitude_mask, Mask, SparsityPlan};
use crate::schedules::{relative_drop, LrCurve, LrSchedule, OriginalSchedule, RetrainSchedule, RetrainVariant};
use crate::seeding::{derive_seed, epoch_seed, replica_seed};

/// The three splits every method works with. Batch-norm statistics are always
/// estimated on `train`; greedy selection and the ALLR drop use `val`.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sms,
    Imp,
    ImpMx,
    ImpMphases,
    ImpReprune,
    Bimp,
    Gmp,
    Dpf,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Sms,
        Method::Imp,
        Method::ImpMx,
        Method::ImpMphases,
        Method::ImpReprune,
        Method::Bimp,
        Method::Gmp,
        Method::Dpf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sms => "sms",
            Method::Imp => "imp",
            Method::ImpMx => "imp_mx",
            Method::ImpMphases => "imp_mphases",
            Method::ImpReprune => "imp_reprune",
            Method::Bimp => "bimp",
            Method::Gmp => "gmp",
            Method::Dpf => "dpf",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningKind {
    UnstructuredGlobal,
    StructuredRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpVariant {
    Standard,
    MTimes,
    MPhases,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub arch: ArchSpec,
    pub epochs: u32,
    pub lr: LrCurve,
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn schedule(&self) -> Result<OriginalSchedule> {
        OriginalSchedule::new(self.lr.clone(), self.epochs)
    }
}

/// Dense training from a fresh initialization, followed by a batch-norm
/// recomputation. With zero epochs the initialized model is returned as is.
pub fn pretrain(cfg: &PretrainConfig, train_data: &Dataset) -> Result<ModelState> {
    let mut model = init_model(&cfg.arch, cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok(model);
    }
    let schedule = cfg.schedule()?;
    let mask = Mask::full(&model);
    let mut opt = OptimizerState::new(&model, cfg.momentum, cfg.weight_decay);
    train(&mut model, &mask, &mut opt, train_data, &schedule, cfg.epochs, cfg.batch_size, cfg.seed)?;
    recompute_bn(&mut model, train_data, cfg.batch_size)?;
    Ok(model)
}

/// Settings shared by every retraining in a prune-retrain run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainSettings {
    /// The schedule the dense model was trained with.
    pub original: OriginalSchedule,
    pub variant: RetrainVariant,
    /// Epochs per phase (`k`).
    pub retrain_epochs: u32,
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Worker threads for replica training.
    pub parallel: usize,
    /// Corruptions for the OOD accuracy of each phase output; empty skips it.
    pub ood: Vec<CorruptionSpec>,
}

/// Hyperparameters of one soup candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSpec {
    pub seed: u64,
    pub weight_decay: f32,
    pub retrain_epochs: u32,
    /// Overrides the run's retraining schedule.
    pub schedule: Option<RetrainVariant>,
    /// Overrides the schedule's initial learning rate.
    pub initial_lr: Option<f32>,
}

impl ReplicaSpec {
    /// A replica that differs from the run defaults only in its seed.
    pub fn seed_only(seed: u64, settings: &RetrainSettings) -> Self {
        ReplicaSpec {
            seed,
            weight_decay: settings.weight_decay,
            retrain_epochs: settings.retrain_epochs,
            schedule: None,
            initial_lr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub plan: SparsityPlan,
    /// Replicas of each phase; phases may use different `m`.
    pub replicas: Vec<Vec<ReplicaSpec>>,
    pub merge: MergeMethod,
    pub pruning: PruningKind,
}

impl PhasePlan {
    /// `m` seed-varied replicas per phase; replica `i` of phase `k` (0-based)
    /// uses `replica_seed(base_seed, k, i)`.
    pub fn seed_varied(plan: SparsityPlan, m: usize, base_seed: u64, settings: &RetrainSettings, merge: MergeMethod) -> Self {
        let replicas = (0..plan.phases as u64)
            .map(|k| (0..m as u64).map(|i| ReplicaSpec::seed_only(replica_seed(base_seed, k, i), settings)).collect())
            .collect();
        PhasePlan { plan, replicas, merge, pruning: PruningKind::UnstructuredGlobal }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas.len() != self.plan.cumulative.len() {
            return Err(Error::Config(format!(
                "{} replica lists for {} phases",
                self.replicas.len(),
                self.plan.cumulative.len()
            )));
        }
        if self.replicas.iter().any(Vec::is_empty) {
            return Err(Error::Config("every phase needs at least one replica".into()));
        }
        if self.replicas.iter().flatten().any(|r| r.retrain_epochs == 0) {
            return Err(Error::Config("replicas need at least one retraining epoch".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub replica: usize,
    pub seed: u64,
    pub val_acc: f32,
    pub test_acc: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub val_acc: f32,
    pub test_acc: f32,
    pub ood_acc: Option<f32>,
    pub recall: Option<RecallReport>,
    pub sparsity: f64,
    pub speedup: f64,
}

/// Validation accuracy around a prune step, both with batch-norm recomputed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    pub val_before: f32,
    pub val_after: f32,
    pub drop: f32,
}

#[derive(Clone, Debug)]
pub struct PhaseRecord {
    /// 1-based.
    pub phase: usize,
    pub target_sparsity: f64,
    pub mask: Mask,
    /// Zero set of each retrained replica's prunable weights.
    pub replica_zero_sets: Vec<Mask>,
    pub candidates: Vec<CandidateRecord>,
    pub output: ModelMetrics,
    pub merge: Option<(SoupRecipe, MergeReport)>,
    pub l2: Option<PairwiseL2>,
    pub prune: Option<PruneStep>,
    /// Retraining epochs of each replica in this phase.
    pub retrain_epochs: Vec<u32>,
    /// The model the phase hands on, batch-norm recomputed.
    pub model: ModelState,
}

impl PhaseRecord {
    /// Candidate with the highest test accuracy; ties go to the lowest replica.
    pub fn best_candidate(&self) -> &CandidateRecord {
        self.candidates
            .iter()
            .reduce(|best, c| if c.test_acc > best.test_acc { c } else { best })
            .expect("a phase has at least one candidate")
    }

    pub fn mean_candidate(&self) -> (f32, f32) {
        let n = self.candidates.len() as f64;
        let val = self.candidates.iter().map(|c| f64::from(c.val_acc)).sum::<f64>() / n;
        let test = self.candidates.iter().map(|c| f64::from(c.test_acc)).sum::<f64>() / n;
        (val as f32, test as f32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepruneReport {
    pub pre_average_sparsities: Vec<f64>,
    pub post_average_sparsity: f64,
    pub post_reprune_sparsity: f64,
    pub masks_identical: bool,
}

#[derive(Clone, Debug)]
pub struct DpfReport {
    /// Per segment after an event: masked coordinates whose dense value
    /// changed during the segment.
    pub masked_changed: Vec<usize>,
    /// Per event: coordinates whose keep flag differs from the previous mask.
    pub mask_flips: Vec<usize>,
    /// Final dense parameters.
    pub dense: ModelState,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub method: Method,
    pub phases: Vec<PhaseRecord>,
    pub total_retrain_epochs: u64,
    pub reprune: Option<RepruneReport>,
    pub dpf: Option<DpfReport>,
    /// Independent runs that fed an averaged result (IMP-RePrune).
    pub sub_runs: Vec<RunRecord>,
}

impl RunRecord {
    pub fn final_model(&self) -> &ModelState {
        &self.phases.last().expect("a run has at least one phase").model
    }
}

/// Worker pool for replica training.
pub fn thread_pool(parallel: usize) -> Result<ThreadPool> {
    if parallel == 0 {
        return Err(Error::Config("parallel must be >= 1".into()));
    }
    ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {parallel} worker threads: {e}")))
}

fn measure(model: &ModelState, mask: &Mask, ood: &[CorruptionSpec], data: &RunData) -> Result<ModelMetrics> {
    let recall = match data.test.subgroup {
        Some(_) => Some(subgroup_recall(model, &data.test)?),
        None => None,
    };
    Ok(ModelMetrics {
        val_acc: evaluate(model, &data.val)?.accuracy,
        test_acc: evaluate(model, &data.test)?.accuracy,
        ood_acc: if ood.is_empty() { None } else { Some(ood_accuracy(model, &data.test, ood)?) },
        recall,
        sparsity: model.sparsity(),
        speedup: count_flops(model, mask)?.speedup_f64(),
    })
}

fn prune(model: &ModelState, target: f64, prev: &Mask, kind: PruningKind) -> Result<Mask> {
    match kind {
        PruningKind::UnstructuredGlobal => magnitude_mask(model, target, prev),
        PruningKind::StructuredRow => filter_mask_from(model, target, prev),
    }
}

struct Trained {
    model: ModelState,
    record: CandidateRecord,
}

fn retrain_replica(
    pruned: &ModelState,
    mask: &Mask,
    index: usize,
    spec: &ReplicaSpec,
    drop: f32,
    s: &RetrainSettings,
    data: &RunData,
) -> Result<Trained> {
    let variant = spec.schedule.unwrap_or(s.variant);
    let mut schedule = RetrainSchedule::new(variant, s.original.clone(), spec.retrain_epochs)?.with_drop(drop)?;
    if let Some(lr) = spec.initial_lr {
        schedule = schedule.with_initial_lr(lr)?;
    }
    let mut model = pruned.clone();
    let mut opt = OptimizerState::new(&model, s.momentum, spec.weight_decay);
    train(&mut model, mask, &mut opt, &data.train, &schedule, spec.retrain_epochs, s.batch_size, spec.seed)?;
    recompute_bn(&mut model, &data.train, s.batch_size)?;
    let record = CandidateRecord {
        replica: index,
        seed: spec.seed,
        val_acc: evaluate(&model, &data.val)?.accuracy,
        test_acc: evaluate(&model, &data.test)?.accuracy,
    };
    Ok(Trained { model, record })
}

/// Recomputes batch-norm statistics of `model`, prunes it to `target` on top
/// of `prev` and recomputes them again for the pruned model. Returns the
/// pruned model, its mask and the validation accuracy across the prune.
pub fn prune_step(
    model: &ModelState,
    target: f64,
    prev: &Mask,
    kind: PruningKind,
    s: &RetrainSettings,
    data: &RunData,
) -> Result<(ModelState, Mask, PruneStep)> {
    let mut current = model.clone();
    recompute_bn(&mut current, &data.train, s.batch_size)?;
    let val_before = evaluate(&current, &data.val)?.accuracy;
    let mask = prune(&current, target, prev, kind)?;
    apply_mask(&mut current, &mask)?;
    recompute_bn(&mut current, &data.train, s.batch_size)?;
    let val_after = evaluate(&current, &data.val)?.accuracy;
    Ok((current, mask, PruneStep { val_before, val_after, drop: relative_drop(val_before, val_after) }))
}

/// Retrains one candidate per spec from the shared pruned model on `pool`,
/// each followed by a batch-norm recomputation. Results are in spec order.
pub fn retrain_candidates(
    pruned: &ModelState,
    mask: &Mask,
    replicas: &[ReplicaSpec],
    drop: f32,
    s: &RetrainSettings,
    data: &RunData,
    pool: &ThreadPool,
) -> Result<Vec<(ModelState, CandidateRecord)>> {
    pool.install(|| {
        replicas
            .par_iter()
            .enumerate()
            .map(|(i, spec)| {
                retrain_replica(pruned, mask, i, spec, drop, s, data)
                    .map(|t| (t.model, t.record))
                    .map_err(|e| Error::Replica { phase: 0, replica: i, source: Box::new(e) })
            })
            .collect()
    })
}

struct Phase<'a> {
    target: f64,
    replicas: &'a [ReplicaSpec],
}

/// Prune-retrain cycles. With `merge = None` each phase must have a single
/// replica whose retrained model is handed on directly (IMP); otherwise the
/// replicas are merged (SMS).
fn run_phases(
    start: &ModelState,
    phases: &[Phase<'_>],
    merge_method: Option<MergeMethod>,
    pruning: PruningKind,
    s: &RetrainSettings,
    data: &RunData,
    pool: &ThreadPool,
) -> Result<Vec<PhaseRecord>> {
    let mut current = start.clone();
    let mut mask = Mask::from_zeros(start);
    let mut records = Vec::with_capacity(phases.len());
    for (k, phase) in phases.iter().enumerate() {
        let (pruned, next, step) = prune_step(&current, phase.target, &mask, pruning, s, data)?;
        mask = next;
        let trained = retrain_candidates(&pruned, &mask, phase.replicas, step.drop, s, data, pool)
            .map_err(|e| match e {
                Error::Replica { replica, source, .. } => Error::Replica { phase: k + 1, replica, source },
                e => e,
            })?;
        let (models, candidates): (Vec<ModelState>, Vec<CandidateRecord>) = trained.into_iter().unzip();

        let (output, merged) = match merge_method {
            Some(method) => {
                let ctx = MergeData { bn_data: &data.train, val_data: &data.val, batch_size: s.batch_size };
                let (soup, recipe, report) = pool.install(|| merge(&models, method, &ctx))?;
                (soup, Some((recipe, report)))
            }
            None => {
                if models.len() != 1 {
                    return Err(Error::Config("unmerged phases take exactly one replica".into()));
                }
                (models[0].clone(), None)
            }
        };
        records.push(PhaseRecord {
            phase: k + 1,
            target_sparsity: phase.target,
            replica_zero_sets: models.iter().map(Mask::from_zeros).collect(),
            candidates,
            output: measure(&output, &mask, &s.ood, data)?,
            merge: merged,
            l2: if models.len() >= 2 { Some(pairwise_l2(&models)?) } else { None },
            prune: Some(step),
            retrain_epochs: phase.replicas.iter().map(|r| r.retrain_epochs).collect(),
            mask: mask.clone(),
            model: output.clone(),
        });
        current = output;
    }
    Ok(records)
}

fn total_epochs(records: &[PhaseRecord]) -> u64 {
    records.iter().flat_map(|p| &p.retrain_epochs).map(|&e| u64::from(e)).sum()
}

/// Sparse model soups: every phase prunes the previous soup, retrains its
/// replicas from the shared pruned model and merges them.
pub fn sms_run(pretrained: &ModelState, plan: &PhasePlan, s: &RetrainSettings, data: &RunData) -> Result<(ModelState, RunRecord)> {
    plan.validate()?;
    let pool = thread_pool(s.parallel)?;
    let phases: Vec<Phase<'_>> = plan
        .plan
        .cumulative
        .iter()
        .zip(&plan.replicas)
        .map(|(&target, replicas)| Phase { target, replicas })
        .collect();
    let records = run_phases(pretrained, &phases, Some(plan.merge), plan.pruning, s, data, &pool)?;
    let record = RunRecord {
        method: Method::Sms,
        total_retrain_epochs: total_epochs(&records),
        phases: records,
        reprune: None,
        dpf: None,
        sub_runs: Vec::new(),
    };
    Ok((record.final_model().clone(), record))
}

/// Iterative magnitude pruning, one model throughout.
///
/// * `Standard`: the plan's phases, `k` epochs each.
/// * `MTimes`: the plan's phases, one schedule stretched over `m * k` epochs.
/// * `MPhases`: `m * K` phases of `k` epochs towards the same target.
///
/// Phase `j` (0-based) trains with `replica_seed(base_seed, j, 0)`, the seed of
/// replica 0 in a seed-varied soup plan.
#[allow(clippy::too_many_arguments)]
pub fn imp_run(
    pretrained: &ModelState,
    plan: &SparsityPlan,
    variant: ImpVariant,
    m: u32,
    pruning: PruningKind,
    s: &RetrainSettings,
    data: &RunData,
    base_seed: u64,
) -> Result<(ModelState, RunRecord)> {
    if m == 0 {
        return Err(Error::Config("m must be >= 1".into()));
    }
    let (targets, epochs, method) = match variant {
        ImpVariant::Standard => (plan.cumulative.clone(), s.retrain_epochs, Method::Imp),
        ImpVariant::MTimes => (plan.cumulative.clone(), m * s.retrain_epochs, Method::ImpMx),
        ImpVariant::MPhases => (SparsityPlan::new(plan.target, m * plan.phases)?.cumulative, s.retrain_epochs, Method::ImpMphases),
    };
    let specs: Vec<[ReplicaSpec; 1]> = (0..targets.len() as u64)
        .map(|j| {
            let mut spec = ReplicaSpec::seed_only(replica_seed(base_seed, j, 0), s);
            spec.retrain_epochs = epochs;
            [spec]
        })
        .collect();
    let phases: Vec<Phase<'_>> = targets.iter().zip(&specs).map(|(&target, r)| Phase { target, replicas: r }).collect();
    let pool = thread_pool(s.parallel)?;
    let records = run_phases(pretrained, &phases, None, pruning, s, data, &pool)?;
    let record = RunRecord {
        method,
        total_retrain_epochs: total_epochs(&records),
        phases: records,
        reprune: None,
        dpf: None,
        sub_runs: Vec::new(),
    };
    Ok((record.final_model().clone(), record))
}

/// `m` independent IMP runs (base seeds `derive_seed(base_seed, [i])`),
/// uniformly averaged once at the end, re-pruned to the target and
/// batch-norm recomputed.
#[allow(clippy::too_many_arguments)]
pub fn imp_reprune_run(
    pretrained: &ModelState,
    plan: &SparsityPlan,
    m: usize,
    pruning: PruningKind,
    s: &RetrainSettings,
    data: &RunData,
    base_seed: u64,
) -> Result<(ModelState, RunRecord)> {
    if m < 2 {
        return Err(Error::Config("IMP-RePrune needs m >= 2".into()));
    }
    let pool = thread_pool(s.parallel)?;
    let inner = RetrainSettings { parallel: 1, ..s.clone() };
    let sub_runs: Vec<RunRecord> = pool.install(|| {
        (0..m as u64)
            .into_par_iter()
            .map(|i| {
                imp_run(pretrained, plan, ImpVariant::Standard, 1, pruning, &inner, data, derive_seed(base_seed, &[i]))
                    .map(|(_, r)| r)
                    .map_err(|e| Error::Replica { phase: plan.phases as usize, replica: i as usize, source: Box::new(e) })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let finals: Vec<ModelState> = sub_runs.iter().map(|r| r.final_model().clone()).collect();
    let average = linear_combine(&finals, &vec![1.0 / m as f64; m])?;
    let (mut model, mask) = reprune_to(&average, plan.target)?;
    recompute_bn(&mut model, &data.train, s.batch_size)?;

    let zero_sets: Vec<Mask> = finals.iter().map(Mask::from_zeros).collect();
    let reprune = RepruneReport {
        pre_average_sparsities: finals.iter().map(ModelState::sparsity).collect(),
        post_average_sparsity: average.sparsity(),
        post_reprune_sparsity: model.sparsity(),
        masks_identical: zero_sets.windows(2).all(|w| w[0] == w[1]),
    };
    let candidates = sub_runs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let last = r.phases.last().expect("IMP has phases");
            CandidateRecord {
                replica: i,
                seed: derive_seed(base_seed, &[i as u64]),
                val_acc: last.output.val_acc,
                test_acc: last.output.test_acc,
            }
        })
        .collect();
    let phase = PhaseRecord {
        phase: plan.phases as usize,
        target_sparsity: plan.target,
        replica_zero_sets: zero_sets,
        candidates,
        output: measure(&model, &mask, &s.ood, data)?,
        merge: None,
        l2: Some(pairwise_l2(&finals)?),
        prune: None,
        retrain_epochs: Vec::new(),
        mask,
        model: model.clone(),
    };
    let record = RunRecord {
        method: Method::ImpReprune,
        total_retrain_epochs: sub_runs.iter().map(|r| r.total_retrain_epochs).sum(),
        phases: vec![phase],
        reprune: Some(reprune),
        dpf: None,
        sub_runs,
    };
    Ok((model, record))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DstMethod {
    Bimp,
    Gmp,
    Dpf,
}

/// Pruning during training from a fresh initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DstConfig {
    pub method: DstMethod,
    pub arch: ArchSpec,
    pub seed: u64,
    /// Whole training budget.
    pub epochs: u32,
    /// Learning-rate curve over the whole budget (over the dense segment for BIMP).
    pub lr: LrCurve,
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub target: f64,
    /// Prune events (GMP, DPF) or IMP cycles (BIMP).
    pub events: u32,
    /// Epoch of the last prune event (GMP, DPF); 0 prunes once before training.
    pub prune_end_epoch: u32,
    /// Dense epochs before the first cycle (BIMP).
    pub pretrain_epochs: u32,
    /// Retraining schedule inside BIMP cycles.
    pub variant: RetrainVariant,
    pub sms: bool,
    pub m: usize,
    pub merge: MergeMethod,
    pub parallel: usize,
    pub ood: Vec<CorruptionSpec>,
}

pub fn dst_run(cfg: &DstConfig, data: &RunData) -> Result<(ModelState, RunRecord)> {
    if cfg.sms && cfg.m == 0 {
        return Err(Error::Config("m must be >= 1".into()));
    }
    match cfg.method {
        DstMethod::Bimp => bimp_run(cfg, data),
        DstMethod::Gmp | DstMethod::Dpf => gradual_run(cfg, data),
    }
}

fn bimp_run(cfg: &DstConfig, data: &RunData) -> Result<(ModelState, RunRecord)> {
    if cfg.pretrain_epochs == 0 || cfg.events == 0 || cfg.pretrain_epochs >= cfg.epochs {
        return Err(Error::Config("BIMP needs 0 < pretrain_epochs < epochs and at least one cycle".into()));
    }
    let cycle = (cfg.epochs - cfg.pretrain_epochs) / cfg.events;
    if cycle == 0 {
        return Err(Error::Config("BIMP budget leaves no epochs per cycle".into()));
    }
    let pre = PretrainConfig {
        arch: cfg.arch.clone(),
        epochs: cfg.pretrain_epochs,
        lr: cfg.lr.clone(),
        batch_size: cfg.batch_size,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
    };
    let dense = pretrain(&pre, &data.train)?;
    let settings = RetrainSettings {
        original: pre.schedule()?,
        variant: cfg.variant,
        retrain_epochs: cycle,
        batch_size: cfg.batch_size,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        parallel: cfg.parallel,
        ood: cfg.ood.clone(),
    };
    let plan = SparsityPlan::new(cfg.target, cfg.events)?;
    let base = derive_seed(cfg.seed, &[0xB1]);
    let (model, mut record) = if cfg.sms {
        sms_run(&dense, &PhasePlan::seed_varied(plan, cfg.m, base, &settings, cfg.merge), &settings, data)?
    } else {
        imp_run(&dense, &plan, ImpVariant::Standard, 1, PruningKind::UnstructuredGlobal, &settings, data, base)?
    };
    record.method = Method::Bimp;
    Ok((model, record))
}

/// DPF training: forward and backward through the masked weights, update
/// applied to the dense copy. Running statistics observed by the masked model
/// are carried over to the dense one.
#[allow(clippy::too_many_arguments)]
fn dpf_span(
    dense: &mut ModelState,
    mask: &Mask,
    opt: &mut OptimizerState,
    data: &Dataset,
    schedule: &dyn LrSchedule,
    first_epoch: u32,
    epochs: u32,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let full = Mask::full(dense);
    let steps_per_epoch = data.len().div_ceil(batch_size.max(1)) as u64;
    for epoch in first_epoch..first_epoch + epochs {
        let order = batch_indices(data.len(), batch_size, epoch_seed(seed, u64::from(epoch)), false)?;
        for (b, idx) in order.iter().enumerate() {
            let lr = schedule.lr_at(u64::from(epoch) * steps_per_epoch + b as u64, steps_per_epoch)?;
            let (x, y) = data.gather(idx);
            let mut masked = dense.clone();
            apply_mask(&mut masked, mask)?;
            let out = loss_and_grad(&mut masked, &full, &x, &y, Mode::Train)?;
            copy_running_stats(&masked, dense);
            sgd_step(dense, opt, &out.grads, lr, &full)?;
        }
    }
    Ok(())
}

fn copy_running_stats(from: &ModelState, to: &mut ModelState) {
    for (dst, src) in to.params.iter_mut().zip(&from.params) {
        if !dst.kind.is_trainable() {
            dst.data.clone_from(&src.data);
        }
    }
}

/// The model that is evaluated: DPF masks its dense copy, GMP already is masked.
fn effective(model: &ModelState, mask: &Mask) -> Result<ModelState> {
    let mut out = model.clone();
    apply_mask(&mut out, mask)?;
    Ok(out)
}

struct Trajectory {
    model: ModelState,
    opt: OptimizerState,
}

fn average_buffers(opts: &[&OptimizerState]) -> OptimizerState {
    let mut out = opts[0].clone();
    let n = opts.len() as f64;
    for (pi, buf) in out.buffers.iter_mut().enumerate() {
        for (j, v) in buf.iter_mut().enumerate() {
            *v = (opts.iter().map(|o| f64::from(o.buffers[pi][j])).sum::<f64>() / n) as f32;
        }
    }
    out
}

fn gradual_run(cfg: &DstConfig, data: &RunData) -> Result<(ModelState, RunRecord)> {
    let dpf = cfg.method == DstMethod::Dpf;
    if cfg.prune_end_epoch > cfg.epochs {
        return Err(Error::Config(format!(
            "prune_end_epoch {} exceeds the {}-epoch budget",
            cfg.prune_end_epoch, cfg.epochs
        )));
    }
    let schedule = OriginalSchedule::new(cfg.lr.clone(), cfg.epochs)?;
    let events = gmp_event_epochs(cfg.prune_end_epoch, cfg.events)?;
    let pool = thread_pool(cfg.parallel)?;
    let bs = cfg.batch_size;

    let span = |t: &mut Trajectory, mask: &Mask, first: u32, epochs: u32, seed: u64| -> Result<()> {
        if dpf {
            dpf_span(&mut t.model, mask, &mut t.opt, &data.train, &schedule, first, epochs, bs, seed)
        } else {
            train_span(&mut t.model, mask, &mut t.opt, &data.train, &schedule, first, epochs, bs, seed)
        }
    };
    let evaluated = |model: &ModelState, mask: &Mask| -> Result<ModelState> {
        let mut out = effective(model, mask)?;
        recompute_bn(&mut out, &data.train, bs)?;
        Ok(out)
    };

    let model = init_model(&cfg.arch, cfg.seed)?;
    let opt = OptimizerState::new(&model, cfg.momentum, cfg.weight_decay);
    let mut traj = Trajectory { model, opt };
    let mut mask = Mask::full(&traj.model);
    span(&mut traj, &mask, 0, events[0], cfg.seed)?;

    let mut phases = Vec::with_capacity(events.len());
    let mut masked_changed = Vec::new();
    let mut mask_flips = Vec::new();
    for (j, &start) in events.iter().enumerate() {
        let level = gmp_level(j as u32 + 1, cfg.events, cfg.target);
        let prev = mask.clone();
        mask = if dpf {
            magnitude_mask(&traj.model, level, &Mask::full(&traj.model))?
        } else {
            magnitude_mask(&traj.model, level, &mask)?
        };
        mask_flips.push(
            prev.tensors
                .iter()
                .zip(&mask.tensors)
                .map(|(a, b)| a.keep.iter().zip(&b.keep).filter(|(x, y)| x != y).count())
                .sum(),
        );
        if !dpf {
            apply_mask(&mut traj.model, &mask)?;
        }
        let end = events.get(j + 1).copied().unwrap_or(cfg.epochs);
        let before = traj.model.clone();

        let mut candidates = Vec::new();
        let mut merged = None;
        let mut l2 = None;
        let mut zero_sets = Vec::new();
        if cfg.sms && end > start {
            let forks: Vec<Trajectory> = pool.install(|| {
                (0..cfg.m as u64)
                    .into_par_iter()
                    .map(|i| {
                        let mut t = Trajectory { model: traj.model.clone(), opt: traj.opt.clone() };
                        span(&mut t, &mask, start, end - start, replica_seed(cfg.seed, j as u64 + 1, i))
                            .map(|()| t)
                            .map_err(|e| Error::Replica { phase: j + 1, replica: i as usize, source: Box::new(e) })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let evals: Vec<ModelState> =
                pool.install(|| forks.par_iter().map(|t| evaluated(&t.model, &mask)).collect::<Result<Vec<_>>>())?;
            for (i, e) in evals.iter().enumerate() {
                candidates.push(CandidateRecord {
                    replica: i,
                    seed: replica_seed(cfg.seed, j as u64 + 1, i as u64),
                    val_acc: evaluate(e, &data.val)?.accuracy,
                    test_acc: evaluate(e, &data.test)?.accuracy,
                });
            }
            zero_sets = evals.iter().map(Mask::from_zeros).collect();
            let models: Vec<ModelState> = forks.iter().map(|t| t.model.clone()).collect();
            if models.len() >= 2 {
                l2 = Some(pairwise_l2(&models)?);
            }
            let opts: Vec<&OptimizerState> = forks.iter().map(|t| &t.opt).collect();
            let opt = average_buffers(&opts);
            let model = if dpf {
                // Dense copies are averaged; their masked form supplies the
                // batch-norm statistics.
                let mut dense = linear_combine(&models, &vec![1.0 / models.len() as f64; models.len()])?;
                copy_running_stats(&evaluated(&dense, &mask)?, &mut dense);
                dense.bn_stale = false;
                dense
            } else {
                let ctx = MergeData { bn_data: &data.train, val_data: &data.val, batch_size: bs };
                let (soup, recipe, report) = pool.install(|| merge(&models, cfg.merge, &ctx))?;
                merged = Some((recipe, report));
                soup
            };
            traj = Trajectory { model, opt };
        } else {
            span(&mut traj, &mask, start, end - start, cfg.seed)?;
        }
        if dpf {
            masked_changed.push(
                mask.tensors
                    .iter()
                    .map(|t| {
                        let (a, b) = (&before.params[t.param].data, &traj.model.params[t.param].data);
                        t.keep.iter().enumerate().filter(|&(i, &k)| !k && a[i] != b[i]).count()
                    })
                    .sum(),
            );
        }

        let output = evaluated(&traj.model, &mask)?;
        let metrics = measure(&output, &mask, &cfg.ood, data)?;
        if candidates.is_empty() {
            candidates.push(CandidateRecord { replica: 0, seed: cfg.seed, val_acc: metrics.val_acc, test_acc: metrics.test_acc });
            zero_sets.push(Mask::from_zeros(&output));
        }
        phases.push(PhaseRecord {
            phase: j + 1,
            target_sparsity: level,
            mask: mask.clone(),
            replica_zero_sets: zero_sets,
            candidates,
            output: metrics,
            merge: merged,
            l2,
            prune: None,
            retrain_epochs: vec![end - start; if cfg.sms { cfg.m } else { 1 }],
            model: output,
        });
    }
    let record = RunRecord {
        method: if dpf { Method::Dpf } else { Method::Gmp },
        total_retrain_epochs: total_epochs(&phases),
        phases,
        reprune: None,
        dpf: dpf.then(|| DpfReport { masked_changed, mask_flips, dense: traj.model.clone() }),
        sub_runs: Vec::new(),
    };
    Ok((record.final_model().clone(), record))
}
