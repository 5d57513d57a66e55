//! Grids around a single prune-retrain phase: soup gain across sparsities and
//! retraining lengths, and pairwise soups of candidates that differ along one
//! hyperparameter.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sparsesoup::merging::{uniform_soup, MergeData};
use sparsesoup::nn::{evaluate, ModelState};
use sparsesoup::orchestrator::{prune_step, retrain_candidates, sms_run, thread_pool, ReplicaSpec, RunData};
use sparsesoup::pruning::{Mask, SparsityPlan};
use sparsesoup::seeding::replica_seed;

use crate::config::{Axis, ExperimentConfig, HparamAxis};
use crate::experiment::pretrained;

/// One soup compared with its candidates at a grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// `sparsity` or `retrain_epochs`.
    pub grid: String,
    pub value: f64,
    pub seed: u64,
    pub m: usize,
    pub soup_test: f32,
    pub best_test: f32,
    pub mean_test: f32,
    pub gain_over_best: f32,
}

/// The uniform soup of candidates `i` and `j` along one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub axis: String,
    pub seed: u64,
    pub i: usize,
    pub j: usize,
    pub value_i: f64,
    pub value_j: f64,
    pub max_individual_test: f32,
    pub soup_test: f32,
}

fn one_phase(cfg: &ExperimentConfig, dense: &ModelState, data: &RunData, seed: u64, target: f64, epochs: u32, parallel: usize) -> Result<GridRow> {
    let mut s = cfg.settings(parallel)?;
    s.retrain_epochs = epochs;
    let mut plan = cfg.phase_plan(SparsityPlan::new(target, 1)?, seed, &s);
    if cfg.soup.retrain_epochs.is_none() {
        plan.replicas.iter_mut().flatten().for_each(|r| r.retrain_epochs = epochs);
    }
    let (_, record) = sms_run(dense, &plan, &s, data)?;
    let p = &record.phases[0];
    let best = p.best_candidate().test_acc;
    Ok(GridRow {
        grid: String::new(),
        value: 0.0,
        seed,
        m: cfg.soup.m,
        soup_test: p.output.test_acc,
        best_test: best,
        mean_test: p.mean_candidate().1,
        gain_over_best: p.output.test_acc - best,
    })
}

fn axis_replicas(cfg: &ExperimentConfig, axis: &HparamAxis, seed: u64, epochs: u32) -> Vec<ReplicaSpec> {
    let base = ExperimentConfig::replica_base(seed);
    axis.values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut r = ReplicaSpec {
                seed: replica_seed(base, 0, 0),
                weight_decay: cfg.pretrain.weight_decay,
                retrain_epochs: epochs,
                schedule: None,
                initial_lr: None,
            };
            match axis.axis {
                Axis::Seed => r.seed = replica_seed(base, 0, i as u64) ^ v as u64,
                Axis::WeightDecay => r.weight_decay = v as f32,
                Axis::InitialLr => r.initial_lr = Some(v as f32),
                Axis::RetrainEpochs => r.retrain_epochs = v as u32,
            }
            r
        })
        .collect()
}

/// `C(n, 2)` rows for an axis with `n` values.
pub fn pair_rows(cfg: &ExperimentConfig, dense: &ModelState, data: &RunData, seed: u64, axis: &HparamAxis, parallel: usize) -> Result<Vec<PairRow>> {
    let s = cfg.settings(parallel)?;
    let pool = thread_pool(parallel)?;
    let (pruned, mask, step) = prune_step(dense, cfg.prune.target, &Mask::from_zeros(dense), cfg.pruning_kind(), &s, data)?;
    let specs = axis_replicas(cfg, axis, seed, cfg.prune.retrain_epochs);
    let trained = retrain_candidates(&pruned, &mask, &specs, step.drop, &s, data, &pool)?;
    let ctx = MergeData { bn_data: &data.train, val_data: &data.val, batch_size: s.batch_size };
    let mut out = Vec::new();
    for i in 0..trained.len() {
        for j in i + 1..trained.len() {
            let pair = [trained[i].0.clone(), trained[j].0.clone()];
            let (soup, _) = pool.install(|| uniform_soup(&pair, &ctx))?;
            out.push(PairRow {
                axis: axis.axis.as_str().to_string(),
                seed,
                i,
                j,
                value_i: axis.values[i],
                value_j: axis.values[j],
                max_individual_test: trained[i].1.test_acc.max(trained[j].1.test_acc),
                soup_test: evaluate(&soup, &data.test)?.accuracy,
            });
        }
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every configured grid for every seed and writes `sweep_grid.csv` and
/// `sweep_pairs.csv` under `out`.
pub fn run_sweep(cfg: &ExperimentConfig, seeds: &[u64], out: &Path, parallel: usize) -> Result<(Vec<GridRow>, Vec<PairRow>)> {
    let sweep = cfg.sweep.as_ref().context("config has no [sweep] table")?;
    let data = cfg.data()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut grid = Vec::new();
    let mut pairs = Vec::new();
    for &seed in seeds {
        let dense = pretrained(cfg, seed, &data, None)?;
        for &s in &sweep.sparsities {
            let mut row = one_phase(cfg, &dense, &data, seed, s, cfg.prune.retrain_epochs, parallel)?;
            row.grid = "sparsity".into();
            row.value = s;
            grid.push(row);
        }
        for &e in &sweep.retrain_epochs {
            let mut row = one_phase(cfg, &dense, &data, seed, cfg.prune.target, e, parallel)?;
            row.grid = "retrain_epochs".into();
            row.value = f64::from(e);
            grid.push(row);
        }
        for axis in &sweep.hparams {
            pairs.extend(pair_rows(cfg, &dense, &data, seed, axis, parallel)?);
        }
    }
    write_csv(&out.join("sweep_grid.csv"), &grid)?;
    write_csv(&out.join("sweep_pairs.csv"), &pairs)?;
    Ok((grid, pairs))
}
