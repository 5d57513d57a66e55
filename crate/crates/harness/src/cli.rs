use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sparsesoup::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use sparsesoup::metrics::{ood_accuracy, subgroup_recall};
use sparsesoup::nn::{count_flops, evaluate};
use sparsesoup::orchestrator::Method;
use sparsesoup::pruning::Mask;

use crate::config::{ConfigError, ExperimentConfig};
use crate::experiment::{effective_parallel, pretrained, run_experiment, RunOptions};
use crate::report::{render, write_report};
use crate::sweep::run_sweep;

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "sparsesoup", version, about = "Sparse model soups and pruning baselines on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the dense model and save it as a checkpoint.
    Pretrain(Common),
    /// Run the configured method and write results.csv, summaries and checkpoints.
    Run(RunArgs),
    /// Evaluate a checkpoint on the configured test split.
    Eval(EvalArgs),
    /// Run the [sweep] grids.
    Sweep(Common),
    /// Aggregate results.csv into report.csv.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the configured method.
    #[arg(long)]
    method: Option<String>,
    /// Start from this dense checkpoint instead of pretraining.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding results.csv.
    #[arg(long)]
    out: PathBuf,
}

struct Resolved {
    cfg: ExperimentConfig,
    seeds: Vec<u64>,
    out: PathBuf,
    parallel: usize,
}

fn resolve(c: &Common) -> Result<Resolved> {
    let cfg = ExperimentConfig::load(&c.config)?;
    let seeds = c.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let out = c.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs"));
    let parallel = c.parallel.unwrap_or(cfg.parallel);
    if parallel == 0 {
        return Err(ConfigError("--parallel must be >= 1".into()).into());
    }
    Ok(Resolved { parallel: effective_parallel(parallel), cfg, seeds, out })
}

fn cmd_pretrain(c: &Common) -> Result<()> {
    let r = resolve(c)?;
    let data = r.cfg.data()?;
    std::fs::create_dir_all(&r.out).with_context(|| format!("cannot create {}", r.out.display()))?;
    for seed in r.seeds {
        let model = pretrained(&r.cfg, seed, &data, None)?;
        let meta = CheckpointMeta { config_hash: r.cfg.hash(), phase: 0, replica: 0, seed };
        let path = r.out.join(format!("pretrained-s{seed}.ckpt"));
        save_checkpoint(&model, &Mask::full(&model), &meta, &path)?;
        let acc = evaluate(&model, &data.test)?.accuracy;
        println!("{}: test accuracy {:.4}", path.display(), acc);
    }
    Ok(())
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let r = resolve(&a.common)?;
    let method = match &a.method {
        Some(m) => m.parse::<Method>().map_err(|e| ConfigError(e.to_string()))?,
        None => r.cfg.method,
    };
    let opts = RunOptions { method, seeds: r.seeds, out: r.out.clone(), parallel: r.parallel, checkpoint: a.checkpoint.clone() };
    let rows = run_experiment(&r.cfg, &opts)?;
    for row in rows.iter().filter(|row| row.entry == "soup") {
        println!(
            "{} phase {} sparsity {:.4} val {:.4} test {:.4} speedup {:.2}",
            row.run_id, row.phase, row.sparsity, row.val_acc, row.test_acc, row.speedup
        );
    }
    println!("wrote {}", r.out.join("results.csv").display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let data = cfg.data()?;
    let (model, mask, meta) =
        load_checkpoint(&a.checkpoint).with_context(|| format!("cannot load {}", a.checkpoint.display()))?;
    let ood = cfg.ood_specs()?;
    let json = serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "meta": meta,
        "val_acc": evaluate(&model, &data.val)?.accuracy,
        "test_acc": evaluate(&model, &data.test)?.accuracy,
        "ood_acc": if ood.is_empty() { None } else { Some(ood_accuracy(&model, &data.test, &ood)?) },
        "recall": if data.test.subgroup.is_some() { Some(subgroup_recall(&model, &data.test)?) } else { None },
        "sparsity": model.sparsity(),
        "speedup": count_flops(&model, &mask)?.speedup_f64(),
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

fn cmd_sweep(c: &Common) -> Result<()> {
    let r = resolve(c)?;
    if r.cfg.sweep.is_none() {
        return Err(ConfigError("config has no [sweep] table".into()).into());
    }
    let (grid, pairs) = run_sweep(&r.cfg, &r.seeds, &r.out, r.parallel)?;
    println!("{} grid rows, {} pair rows in {}", grid.len(), pairs.len(), r.out.display());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let report = write_report(&a.out)?;
    print!("{}", render(&report));
    println!("wrote {}", a.out.join("report.csv").display());
    Ok(())
}

/// Exit code for a failed command: configuration problems map to 1,
/// everything else to 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>() || matches!(e.downcast_ref::<sparsesoup::Error>(), Some(sparsesoup::Error::Config(_)))
    });
    if config {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Pretrain(c) => cmd_pretrain(c),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

