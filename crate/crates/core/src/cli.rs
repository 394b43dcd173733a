//! Command-line front end: `train`, `search`, `flops`, `eval`, `transfer`.
//!
//! Every command validates its config fully before computing, writes
//! deterministic artifacts (reruns with the same config and seed overwrite
//! byte-identically; wall-clock time lives only in the manifest), and exits
//! 0 on success, 2 on a config error, 1 on a runtime failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::network::{flops, FlopsReport, NetworkSpec, PrecisionAssignment};
use crate::search::{
    random_assignment, run_search, transfer_assignment, SearchError, SearchTrace,
};
use crate::seed::derive;
use crate::train::{evaluate_with_smoothing, train_model, Split, TrainError};

#[derive(Parser)]
#[command(name = "b2nn", version, about = "budgeted binarization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one (network, assignment) pair; writes a checkpoint and a
    /// per-epoch metrics CSV.
    Train(ConfigArgs),
    /// Run the configured layer search; writes the trace and curve CSVs.
    Search(ConfigArgs),
    /// Per-layer FLOPs table for a config or a checkpoint.
    Flops(FlopsArgs),
    /// Evaluate a checkpoint on a data split from a config.
    Eval(EvalArgs),
    /// Re-train a searched assignment on another dataset and compare it
    /// against direct search and a random baseline.
    Transfer(TransferArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread cap for candidate evaluation; results are identical
    /// for every value.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config supplying the data section (and smoothing for the loss).
    #[arg(long)]
    config: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    /// Search trace (JSON) whose assignment is transferred.
    #[arg(long)]
    trace: PathBuf,
    /// Target experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fmt_impl!();
}

macro_rules! fmt_impl {
    () => {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            match self {
                Self::Config(e) => write!(f, "config error: {e}"),
                Self::Runtime(msg) => write!(f, "{msg}"),
            }
        }
    };
}
use fmt_impl;

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<crate::network::NetworkError> for CliError {
    fn from(e: crate::network::NetworkError) -> Self {
        Self::Runtime(e.to_string())
    }
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Search(args) => cmd_search(args),
        Command::Flops(args) => cmd_flops(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Transfer(args) => cmd_transfer(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::from_path(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    Ok(config)
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_artifact(dir: &Path, name: &str, contents: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunManifest {
    config_hash: String,
    seed: u64,
    tool_version: String,
    wall_clock_seconds: f64,
    artifacts: Vec<String>,
}

fn write_manifest(
    dir: &Path,
    name: &str,
    config_hash: String,
    seed: u64,
    started: Instant,
    artifacts: Vec<String>,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        config_hash,
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        artifacts,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_artifact(dir, name, format!("{json}\n").as_bytes())
}

fn with_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, CliError> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: ConfigArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let config = load_config(&args.config, args.seed, args.out)?;
    let net = config.build_network()?;
    let assignment = config.build_assignment(&net)?;
    let bundle = config.data.load(config.data_seed())?;
    check_classes(&net, bundle.train.num_classes)?;
    let train_cfg = config.effective_train();

    let outcome = train_model(&net, &assignment, &bundle, &train_cfg)?;

    let mut metrics = String::from("epoch,lr,train_loss,val_loss,val_acc\n");
    for row in &outcome.epoch_rows {
        let _ = writeln!(
            metrics,
            "{},{},{},{},{}",
            row.epoch,
            fmt_f64(row.lr),
            fmt_f64(row.train_loss),
            fmt_f64(row.val_loss),
            fmt_f64(row.val_acc)
        );
    }

    ensure_out_dir(&config.output_dir)?;
    let ckpt = checkpoint::encode(&net, &assignment, &outcome.weights);
    write_artifact(&config.output_dir, "checkpoint.b2nn", &ckpt)?;
    write_artifact(&config.output_dir, "metrics.csv", metrics.as_bytes())?;
    write_manifest(
        &config.output_dir,
        "manifest_train.json",
        config.hash(),
        config.seed,
        started,
        vec!["checkpoint.b2nn".into(), "metrics.csv".into()],
    )?;
    println!(
        "trained {} epochs: val_loss={} val_acc={}",
        outcome.epoch_rows.len(),
        fmt_f64(outcome.val_result.loss),
        fmt_f64(outcome.val_result.accuracy)
    );
    Ok(())
}

fn check_classes(net: &NetworkSpec, data_classes: usize) -> Result<(), CliError> {
    if net.num_classes != data_classes {
        return Err(CliError::Runtime(format!(
            "network has {} classes but data has {}",
            net.num_classes, data_classes
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

fn cmd_search(args: ConfigArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let config = load_config(&args.config, args.seed, args.out)?;
    let Some(search_cfg) = config.effective_search() else {
        return Err(ConfigError::invalid("search", "section required for the search command").into());
    };
    let net = config.build_network()?;
    let bundle = config.data.load(config.data_seed())?;
    check_classes(&net, bundle.train.num_classes)?;

    let trace = with_pool(args.threads, || run_search(&net, &bundle, &search_cfg))??;

    ensure_out_dir(&config.output_dir)?;
    let seed = config.seed;
    let trace_name = format!("search_trace_seed{seed}.json");
    let steps_name = format!("search_steps_seed{seed}.csv");
    let curve_name = format!("curve_seed{seed}.csv");
    let trace_json = serde_json::to_string_pretty(&trace).expect("trace serializes");
    write_artifact(&config.output_dir, &trace_name, format!("{trace_json}\n").as_bytes())?;
    write_artifact(&config.output_dir, &steps_name, trace.to_csv().as_bytes())?;
    write_artifact(&config.output_dir, &curve_name, trace.curve_csv().as_bytes())?;
    write_manifest(
        &config.output_dir,
        &format!("manifest_search_seed{seed}.json"),
        config.hash(),
        seed,
        started,
        vec![trace_name, steps_name, curve_name],
    )?;

    let selected: Vec<String> = trace
        .final_assignment
        .indices()
        .map(|i| i.to_string())
        .collect();
    println!(
        "search ({:?}) selected layers [{}]: remaining={} acc={}",
        trace.mode,
        selected.join(","),
        fmt_f64(flops(&net, &trace.final_assignment).remaining_fraction),
        fmt_f64(trace.final_eval.accuracy)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

fn flops_table(report: &FlopsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8}{:>16}{:>20}", "layer", "fp_flops", "effective_flops");
    for row in &report.per_layer {
        let _ = writeln!(
            out,
            "{:<8}{:>16}{:>20}",
            row.index,
            fmt_f64(row.fp_flops),
            fmt_f64(row.effective_flops)
        );
    }
    let _ = writeln!(
        out,
        "{:<8}{:>16}{:>20}",
        "total",
        fmt_f64(report.total_fp),
        fmt_f64(report.total_effective)
    );
    let _ = writeln!(out, "remaining: {:.2}%", report.remaining_fraction * 100.0);
    out
}

fn flops_csv(report: &FlopsReport) -> String {
    let mut out = String::from("index,fp_flops,effective_flops\n");
    for row in &report.per_layer {
        let _ = writeln!(
            out,
            "{},{},{}",
            row.index,
            fmt_f64(row.fp_flops),
            fmt_f64(row.effective_flops)
        );
    }
    out
}

fn cmd_flops(args: FlopsArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (net, assignment, out_dir, hash, seed) = match (&args.config, &args.checkpoint) {
        (Some(path), None) => {
            let config = load_config(path, args.seed, args.out.clone())?;
            let net = config.build_network()?;
            let assignment = config.build_assignment(&net)?;
            (net, assignment, config.output_dir.clone(), config.hash(), config.seed)
        }
        (None, Some(path)) => {
            let (net, assignment, _) = checkpoint::load(path)?;
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
            (net, assignment, out, String::new(), args.seed.unwrap_or(0))
        }
        _ => unreachable!("clap enforces exactly one source"),
    };
    let report = flops(&net, &assignment);
    print!("{}", flops_table(&report));
    ensure_out_dir(&out_dir)?;
    write_artifact(&out_dir, "flops.csv", flops_csv(&report).as_bytes())?;
    write_manifest(
        &out_dir,
        "manifest_flops.json",
        hash,
        seed,
        started,
        vec!["flops.csv".into()],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let config = load_config(&args.config, args.seed, args.out)?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => {
            return Err(ConfigError::invalid(
                "split",
                format!("expected train|val|test, got {other}"),
            )
            .into())
        }
    };
    let (net, assignment, weights) = checkpoint::load(&args.checkpoint)?;
    let bundle = config.data.load(config.data_seed())?;
    check_classes(&net, bundle.train.num_classes)?;

    let result = evaluate_with_smoothing(
        &net,
        &assignment,
        &weights,
        bundle.split(split),
        config.train.label_smoothing,
    )?;

    ensure_out_dir(&config.output_dir)?;
    let csv = format!(
        "split,loss,accuracy\n{},{},{}\n",
        args.split,
        fmt_f64(result.loss),
        fmt_f64(result.accuracy)
    );
    write_artifact(&config.output_dir, "eval.csv", csv.as_bytes())?;
    write_manifest(
        &config.output_dir,
        "manifest_eval.json",
        config.hash(),
        config.seed,
        started,
        vec!["eval.csv".into()],
    )?;
    println!(
        "eval split={} loss={} accuracy={}",
        args.split,
        fmt_f64(result.loss),
        fmt_f64(result.accuracy)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// transfer
// ---------------------------------------------------------------------------

fn cmd_transfer(args: TransferArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let config = load_config(&args.config, args.seed, args.out)?;
    let trace_text = std::fs::read_to_string(&args.trace)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", args.trace.display())))?;
    let trace: SearchTrace = serde_json::from_str(&trace_text)
        .map_err(|e| CliError::Runtime(format!("{}: corrupt trace: {e}", args.trace.display())))?;

    let bundle = config.data.load(config.data_seed())?;
    let final_cfg = config
        .effective_search()
        .map(|s| s.final_cfg)
        .unwrap_or_else(|| config.effective_train());

    // columns on the target dataset: direct search, random baseline, transfer
    let target_net = if bundle.train.num_classes != trace.network.num_classes {
        trace.network.with_num_classes(bundle.train.num_classes)
    } else {
        trace.network.clone()
    };

    let transferred = with_pool(args.threads, || {
        transfer_assignment(&trace, &bundle, &final_cfg)
    })??;

    let random_seed = derive(config.seed, "transfer.random");
    let random_pick = random_assignment(&target_net, trace.budget_fraction, random_seed)?;
    let random_outcome = train_model(&target_net, &random_pick, &bundle, &final_cfg)?;
    let random_eval = evaluate_with_smoothing(
        &target_net,
        &random_pick,
        &random_outcome.weights,
        bundle.report_split(),
        0.0,
    )?;

    let direct = match config.effective_search() {
        Some(search_cfg) => {
            let direct_trace =
                with_pool(args.threads, || run_search(&target_net, &bundle, &search_cfg))??;
            Some(direct_trace.final_eval.accuracy)
        }
        None => None,
    };

    let remaining = flops(&target_net, &trace.final_assignment).remaining_fraction * 100.0;
    let csv = format!(
        "remaining_flops_pct,mixbin_shrink,random,transferred\n{:.2},{},{},{}\n",
        remaining,
        direct.map(fmt_f64).unwrap_or_default(),
        fmt_f64(random_eval.accuracy),
        fmt_f64(transferred.accuracy)
    );

    ensure_out_dir(&config.output_dir)?;
    let seed = config.seed;
    let csv_name = format!("comparison_seed{seed}.csv");
    write_artifact(&config.output_dir, &csv_name, csv.as_bytes())?;
    write_manifest(
        &config.output_dir,
        &format!("manifest_transfer_seed{seed}.json"),
        config.hash(),
        seed,
        started,
        vec![csv_name],
    )?;
    println!(
        "transfer at {:.2}% remaining: transferred_acc={} random_acc={}{}",
        remaining,
        fmt_f64(transferred.accuracy),
        fmt_f64(random_eval.accuracy),
        direct
            .map(|d| format!(" direct_acc={}", fmt_f64(d)))
            .unwrap_or_default()
    );
    Ok(())
}
