//! `ssb` command line: `gen-data`, `train`, `eval`, `ablate`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{run_ablation_with, Grid};
use crate::artifacts::{emit_run_artifacts, summary_csv, write_atomic, SUMMARY_FILE};
use crate::config::{parse_seeds, RunConfig};
use crate::data::{generate_openset, load_csv_dataset, write_csv_dataset, OpenSetDataset};
use crate::error::{Error, Result};
use crate::eval::Evaluator;
use crate::trainer::{data_fingerprint, load_checkpoint, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.cfg";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Parser)]
#[command(name = "ssb", version, about = "Open-set semi-supervised training on dense features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` config file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed (also the data seed unless `data_seed` is set)
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output CSV file
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train one model and write metrics.jsonl, summary.csv, curves.svg
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// CSV dataset instead of generated data
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
        /// Also checkpoint every N iterations (the final state is always saved)
        #[arg(long, value_name = "N")]
        checkpoint_every: Option<u64>,
        /// Continue from a checkpoint; its stored config wins over --config
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Stop after this iteration, leaving a checkpoint to resume from
        #[arg(long, value_name = "ITER")]
        stop_at: Option<u64>,
    },
    /// Score a trained checkpoint on a dataset's test split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written by `train`
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        /// CSV dataset instead of generated data
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
        /// Directory for eval.json (stdout only when absent)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run a variant grid over several seeds
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// CSV dataset shared by every seed instead of generated data
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
        /// `table1`, `table3`, `table5` or `key:v1|v2;key2:v3|v4`
        #[arg(long)]
        grid: Option<String>,
        /// `0,1,2` or `0..5`
        #[arg(long)]
        seeds: Option<String>,
    },
}

/// A failure and the exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn runtime(e: Error) -> Failure {
    let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
    Failure {
        code,
        message: e.to_string(),
    }
}

fn load_config(args: &ConfigArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v).map_err(usage)?;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, data: Option<&Path>, seed: u64) -> Result<OpenSetDataset> {
    match data {
        Some(p) => load_csv_dataset(p),
        None => generate_openset(&cfg.generator_for(seed)),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_data(cfg: &ConfigArgs, out: &Path) -> std::result::Result<(), Failure> {
    let rc = load_config(cfg)?;
    let ds = dataset(&rc, None, rc.train.seed).map_err(runtime)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir).map_err(runtime)?;
    }
    write_csv_dataset(&ds, out).map_err(runtime)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn train(
    cfg: &ConfigArgs,
    out: &Path,
    data: Option<&Path>,
    checkpoint_every: Option<u64>,
    resume: Option<&Path>,
    stop_at: Option<u64>,
) -> std::result::Result<(), Failure> {
    let mut rc = load_config(cfg)?;
    if checkpoint_every == Some(0) || stop_at == Some(0) {
        return Err(usage("--checkpoint-every and --stop-at must be positive"));
    }
    let state = match resume {
        Some(p) => {
            let state = load_checkpoint(p).map_err(runtime)?;
            rc.train = state.config.clone();
            Some(state)
        }
        None => None,
    };
    let ds = dataset(&rc, data, rc.train.seed).map_err(runtime)?;
    create_dir(out).map_err(runtime)?;
    let mut trainer = match state {
        Some(s) => Trainer::resume(ds.training_view(), s),
        None => Trainer::new(ds.training_view(), &rc.train),
    }
    .map_err(runtime)?;
    let mut evaluator = Evaluator::for_config(&ds, &rc.train);
    let ckpt = out.join(CHECKPOINT_FILE);
    let chunk = checkpoint_every.unwrap_or(u64::MAX);
    let end = stop_at.unwrap_or(u64::MAX);
    while !trainer.is_done() && trainer.iteration() < end {
        let stop = trainer.iteration().saturating_add(chunk).min(end);
        trainer.run_until(stop, &mut evaluator).map_err(runtime)?;
        trainer.save_checkpoint(&ckpt).map_err(runtime)?;
    }
    if !trainer.is_done() {
        println!("stopped at iteration {}; checkpoint {}", trainer.iteration(), ckpt.display());
        return Ok(());
    }
    write_atomic(&out.join(CONFIG_FILE), rc.to_text().as_bytes()).map_err(runtime)?;
    let seed = rc.train.seed;
    let metrics = trainer.finish().metrics;
    emit_run_artifacts(out, "train", seed, &metrics).map_err(runtime)?;
    if let Some(r) = metrics.last() {
        println!("{}", serde_json::to_string(r).expect("metrics serialize"));
    }
    Ok(())
}

fn eval(cfg: &ConfigArgs, model: &Path, data: Option<&Path>, out: Option<&Path>) -> std::result::Result<(), Failure> {
    let rc = load_config(cfg)?;
    let state = load_checkpoint(model).map_err(runtime)?;
    let seed = cfg.seed.unwrap_or(state.config.seed);
    let ds = dataset(&rc, data, seed).map_err(runtime)?;
    if state.model.input_dim() != ds.training_view().dim() || state.model.n_classes() != ds.n_classes() {
        return Err(runtime(Error::config("checkpoint does not fit this dataset")));
    }
    if data_fingerprint(&ds.training_view()) != state.data_fingerprint {
        eprintln!("note: evaluating on data other than the training set");
    }
    let evaluator = Evaluator::for_config(&ds, &state.config);
    let (accuracy, det) = evaluator.report(&state.model).map_err(runtime)?;
    let json = serde_json::json!({
        "iteration": state.iteration,
        "ood_score": state.config.ood_score.to_string(),
        "accuracy": accuracy,
        "auroc_seen": det.auroc_seen,
        "auroc_unseen": det.auroc_unseen,
        "auroc_avg": det.auroc_avg,
    });
    let text = format!("{json}\n");
    if let Some(dir) = out {
        create_dir(dir).map_err(runtime)?;
        write_atomic(&dir.join(EVAL_FILE), text.as_bytes()).map_err(runtime)?;
    }
    print!("{text}");
    Ok(())
}

/// Directory-safe name for a variant.
fn cell_dir(variant: &str) -> String {
    variant
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn ablate(
    cfg: &ConfigArgs,
    out: &Path,
    data: Option<&Path>,
    grid: Option<&str>,
    seeds: Option<&str>,
) -> std::result::Result<(), Failure> {
    let rc = load_config(cfg)?;
    let grid: Grid = match grid {
        Some(g) => g.parse().map_err(usage)?,
        None => rc.grid.clone().ok_or_else(|| usage("ablate needs a grid (--grid or `grid =` in the config)"))?,
    };
    let seeds = match seeds {
        Some(s) => parse_seeds(s).map_err(usage)?,
        None => rc.seeds.clone().unwrap_or_else(|| vec![rc.train.seed]),
    };
    let variants = grid.variants(&rc.train).map_err(usage)?;
    for v in &variants {
        v.config.validate().map_err(usage)?;
    }
    create_dir(out).map_err(runtime)?;
    let shared = match data {
        Some(p) => Some(load_csv_dataset(p).map_err(runtime)?),
        None => None,
    };
    let mut write_err = None;
    let report = run_ablation_with(
        &variants,
        &seeds,
        |seed| match &shared {
            Some(ds) => Ok(ds.clone()),
            None => generate_openset(&rc.generator_for(seed)),
        },
        |cell| {
            let status = match &cell.outcome {
                Ok(m) => {
                    let dir = out.join("cells").join(cell_dir(&cell.variant)).join(format!("seed_{}", cell.seed));
                    if let Err(e) = emit_run_artifacts(&dir, &cell.variant, cell.seed, m) {
                        write_err.get_or_insert(e);
                    }
                    "ok".to_string()
                }
                Err(e) => format!("failed: {e}"),
            };
            eprintln!("[seed {}] {}: {status}", cell.seed, cell.variant);
        },
    )
    .map_err(runtime)?;
    if let Some(e) = write_err {
        return Err(runtime(e));
    }
    write_atomic(&out.join(ABLATION_FILE), report.to_csv().as_bytes()).map_err(runtime)?;
    write_atomic(&out.join(SUMMARY_FILE), summary_csv(&report.summary_rows()).as_bytes()).map_err(runtime)?;
    write_atomic(&out.join(CONFIG_FILE), rc.to_text().as_bytes()).map_err(runtime)?;
    print!("{}", report.to_csv());
    let failed = report.cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        return Err(Failure {
            code: 1,
            message: format!("{failed} of {} cells failed", report.cells.len()),
        });
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command, returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData { cfg, out } => gen_data(cfg, out),
        Command::Train {
            cfg,
            out,
            data,
            checkpoint_every,
            resume,
            stop_at,
        } => train(cfg, out, data.as_deref(), *checkpoint_every, resume.as_deref(), *stop_at),
        Command::Eval { cfg, model, data, out } => eval(cfg, model, data.as_deref(), out.as_deref()),
        Command::Ablate {
            cfg,
            out,
            data,
            grid,
            seeds,
        } => ablate(cfg, out, data.as_deref(), grid.as_deref(), seeds.as_deref()),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
