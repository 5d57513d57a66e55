//! Runs configured methods and turns their records into CSV rows, JSON
//! summaries and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sparsesoup::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, MERGED};
use sparsesoup::merging::{MergeReport, PairwiseL2, SoupRecipe};
use sparsesoup::nn::ModelState;
use sparsesoup::orchestrator::{
    dst_run, imp_reprune_run, imp_run, pretrain, sms_run, CandidateRecord, ImpVariant, Method, ModelMetrics, PruneStep,
    RepruneReport, RunData, RunRecord,
};
use sparsesoup::pruning::{Mask, SparsityPlan};

use crate::config::ExperimentConfig;

/// Caps a requested thread count by `SPARSESOUP_THREADS` when it is set.
pub fn effective_parallel(requested: usize) -> usize {
    let cap = std::env::var("SPARSESOUP_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok());
    match cap {
        Some(c) if c >= 1 => requested.min(c),
        _ => requested,
    }
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub run_id: String,
    pub method: String,
    pub phase: usize,
    pub sparsity: f64,
    pub m: usize,
    /// Replica index, `soup` (the phase output), `best` or `mean` candidate.
    pub entry: String,
    pub val_acc: f32,
    pub test_acc: f32,
    pub ood_acc: Option<f32>,
    pub speedup: f64,
    pub l2_mean: Option<f64>,
    pub l2_max: Option<f64>,
    pub seed: u64,
    pub timestamp: u64,
}

pub const COLUMNS: [&str; 14] = [
    "run_id", "method", "phase", "sparsity", "m", "entry", "val_acc", "test_acc", "ood_acc", "speedup", "l2_mean",
    "l2_max", "seed", "timestamp",
];

/// Number of replicas (or the budget multiplier) a method runs with.
pub fn effective_m(cfg: &ExperimentConfig, method: Method) -> usize {
    match method {
        Method::Imp => 1,
        Method::Bimp | Method::Gmp | Method::Dpf if !cfg.dst.as_ref().is_some_and(|d| d.sms) => 1,
        _ => cfg.soup.m,
    }
}

pub fn run_id(cfg: &ExperimentConfig, method: Method, seed: u64) -> String {
    format!("{method}-s{seed}-{:016x}", cfg.hash())
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn rows(record: &RunRecord, run_id: &str, m: usize, seed: u64, timestamp: u64) -> Vec<Row> {
    let mut out = Vec::new();
    for p in &record.phases {
        let o = &p.output;
        let row = |entry: String, val_acc: f32, test_acc: f32| Row {
            run_id: run_id.to_string(),
            method: record.method.to_string(),
            phase: p.phase,
            sparsity: o.sparsity,
            m,
            entry,
            val_acc,
            test_acc,
            ood_acc: None,
            speedup: o.speedup,
            l2_mean: None,
            l2_max: None,
            seed,
            timestamp,
        };
        for c in &p.candidates {
            out.push(row(c.replica.to_string(), c.val_acc, c.test_acc));
        }
        let mut soup = row("soup".into(), o.val_acc, o.test_acc);
        soup.ood_acc = o.ood_acc;
        soup.l2_mean = p.l2.map(|l| l.mean);
        soup.l2_max = p.l2.map(|l| l.max);
        out.push(soup);
        let best = p.best_candidate();
        out.push(row("best".into(), best.val_acc, best.test_acc));
        let (val, test) = p.mean_candidate();
        out.push(row("mean".into(), val, test));
    }
    out
}

pub fn write_rows(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    anyhow::ensure!(header == COLUMNS, "{}: unexpected columns {header:?}", path.display());
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Per-phase JSON summary of a run, without model weights.
#[derive(Clone, Debug, Serialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub target_sparsity: f64,
    pub candidates: Vec<CandidateRecord>,
    pub output: ModelMetrics,
    pub recipe: Option<SoupRecipe>,
    pub merge: Option<MergeReport>,
    pub l2: Option<PairwiseL2>,
    pub prune: Option<PruneStep>,
    pub retrain_epochs: Vec<u32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub total_retrain_epochs: u64,
    pub phases: Vec<PhaseSummary>,
    pub reprune: Option<RepruneReport>,
    pub dpf_masked_changed: Option<Vec<usize>>,
}

pub fn summary(cfg: &ExperimentConfig, record: &RunRecord, run_id: &str, seed: u64) -> RunSummary {
    RunSummary {
        run_id: run_id.to_string(),
        method: record.method,
        seed,
        config_hash: format!("{:016x}", cfg.hash()),
        total_retrain_epochs: record.total_retrain_epochs,
        phases: record
            .phases
            .iter()
            .map(|p| PhaseSummary {
                phase: p.phase,
                target_sparsity: p.target_sparsity,
                candidates: p.candidates.clone(),
                output: p.output.clone(),
                recipe: p.merge.as_ref().map(|m| m.0.clone()),
                merge: p.merge.as_ref().map(|m| m.1.clone()),
                l2: p.l2,
                prune: p.prune,
                retrain_epochs: p.retrain_epochs.clone(),
            })
            .collect(),
        reprune: record.reprune.clone(),
        dpf_masked_changed: record.dpf.as_ref().map(|d| d.masked_changed.clone()),
    }
}

/// The dense starting point of a prune-retrain run: loaded from `checkpoint`
/// or pretrained with `seed`.
pub fn pretrained(cfg: &ExperimentConfig, seed: u64, data: &RunData, checkpoint: Option<&Path>) -> Result<ModelState> {
    match checkpoint {
        Some(path) => {
            let (model, _, _) =
                load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
            anyhow::ensure!(
                model.arch == cfg.arch()?,
                "checkpoint {} has architecture {:?}, config expects {:?}",
                path.display(),
                model.arch.sizes,
                cfg.model.sizes
            );
            Ok(model)
        }
        None => Ok(pretrain(&cfg.pretrain_config(seed)?, &data.train)?),
    }
}

fn needs_pretrained(method: Method) -> bool {
    !matches!(method, Method::Bimp | Method::Gmp | Method::Dpf)
}

/// Runs `method` for one seed.
pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    dense: Option<&ModelState>,
    data: &RunData,
    parallel: usize,
) -> Result<RunRecord> {
    let s = cfg.settings(parallel)?;
    let plan = SparsityPlan::new(cfg.prune.target, cfg.prune.phases)?;
    let base = ExperimentConfig::replica_base(seed);
    let m = cfg.soup.m;
    let kind = cfg.pruning_kind();
    let dense = || dense.context("this method starts from a pretrained model");
    let (_, record) = match method {
        Method::Sms => sms_run(dense()?, &cfg.phase_plan(plan, seed, &s), &s, data)?,
        Method::Imp => imp_run(dense()?, &plan, ImpVariant::Standard, 1, kind, &s, data, base)?,
        Method::ImpMx => imp_run(dense()?, &plan, ImpVariant::MTimes, m as u32, kind, &s, data, base)?,
        Method::ImpMphases => imp_run(dense()?, &plan, ImpVariant::MPhases, m as u32, kind, &s, data, base)?,
        Method::ImpReprune => imp_reprune_run(dense()?, &plan, m, kind, &s, data, base)?,
        Method::Bimp | Method::Gmp | Method::Dpf => dst_run(&cfg.dst_config(method, seed, parallel)?, data)?,
    };
    Ok(record)
}

/// Options of the `run` subcommand after flag resolution.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub parallel: usize,
    pub checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(out: &Path, method: Method, seed: u64, phase: usize) -> PathBuf {
    out.join("checkpoints").join(format!("{method}-s{seed}-p{phase}.ckpt"))
}

/// Runs every seed, then writes `results.csv`, one JSON summary per seed and
/// one checkpoint per phase output.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<Row>> {
    let data = cfg.data()?;
    fs::create_dir_all(opts.out.join("checkpoints"))
        .with_context(|| format!("cannot create {}", opts.out.display()))?;
    let mut all = Vec::new();
    for &seed in &opts.seeds {
        let dense = if needs_pretrained(opts.method) {
            Some(pretrained(cfg, seed, &data, opts.checkpoint.as_deref())?)
        } else {
            None
        };
        let record = run_method(cfg, opts.method, seed, dense.as_ref(), &data, opts.parallel)
            .with_context(|| format!("{} with seed {seed} failed", opts.method))?;
        let id = run_id(cfg, opts.method, seed);
        write_checkpoints(cfg, &record, &opts.out, seed)?;
        let json = serde_json::to_string_pretty(&summary(cfg, &record, &id, seed))?;
        fs::write(opts.out.join(format!("record-{}-s{seed}.json", opts.method)), json)?;
        all.extend(rows(&record, &id, effective_m(cfg, opts.method), seed, now()));
    }
    write_rows(&opts.out.join("results.csv"), &all)?;
    Ok(all)
}

fn write_checkpoints(cfg: &ExperimentConfig, record: &RunRecord, out: &Path, seed: u64) -> Result<()> {
    for p in &record.phases {
        let merged = p.merge.is_some() || record.reprune.is_some();
        let meta = CheckpointMeta {
            config_hash: cfg.hash(),
            phase: p.phase as u32,
            replica: if merged { MERGED } else { 0 },
            seed,
        };
        save_checkpoint(&p.model, &p.mask, &meta, checkpoint_path(out, record.method, seed, p.phase))?;
    }
    if let Some(dpf) = &record.dpf {
        let meta = CheckpointMeta { config_hash: cfg.hash(), phase: record.phases.len() as u32, replica: 0, seed };
        let path = out.join("checkpoints").join(format!("{}-s{seed}-dense.ckpt", record.method));
        save_checkpoint(&dpf.dense, &Mask::full(&dpf.dense), &meta, path)?;
    }
    Ok(())
}
