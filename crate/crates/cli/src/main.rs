//! `gridflow`: generate power-flow data, train the decoupled denoisers, sample
//! with or without constraint guidance, and evaluate the results.

mod commands;
mod config;
mod error;
mod manifest;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridflow_core::diffusion::GuidanceMode;

use crate::commands::{execute, Command};
use crate::config::{NamedPath, RunConfig};
use crate::error::{CliError, ErrorKind};
use crate::manifest::{sha256_hex, Manifest, MANIFEST_FORMAT};

#[derive(Parser, Debug)]
#[command(name = "gridflow", version, about = "Constrained diffusion for AC power-flow data")]
struct Cli {
    /// TOML run config, or a manifest written by an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap; outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve power flows for sampled loads and write a dataset CSV.
    GenData(GenArgs),
    /// Train the two denoisers on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Draw records from a checkpoint, guided when lambda > 0.
    Sample(SampleArgs),
    /// W1 distance, per-bus mismatch report and histograms.
    Eval(EvalArgs),
    /// Warm-start predictor trained per source, scored on one test set.
    Downstream(DownstreamArgs),
    /// Re-run the command recorded in a manifest and check outputs match.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Seed; falls back to the config, then GRIDFLOW_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "T")]
    t_max: Option<usize>,
    #[arg(long)]
    beta_1: Option<f64>,
    #[arg(long = "beta-T")]
    beta_t: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mode: Option<GuidanceMode>,
    /// Guide on the balance equations only.
    #[arg(long)]
    no_inequalities: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    real: Option<PathBuf>,
    #[arg(long)]
    syn: Option<PathBuf>,
    /// Needed for the mismatch report and histograms.
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct DownstreamArgs {
    #[arg(long)]
    case: Option<PathBuf>,
    /// Training source as NAME=PATH; repeat for each source.
    #[arg(long = "train")]
    train: Vec<NamedPath>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn load_config(path: &PathBuf) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::file(path, e))?;
    if table.get("format").and_then(|v| v.as_str()) == Some(MANIFEST_FORMAT) {
        return Manifest::from_toml(&text)
            .map(|m| m.config)
            .map_err(|e| CliError::file(path, e));
    }
    toml::from_str(&text).map_err(|e| CliError::file(path, e))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn apply_common(cfg: &mut RunConfig, c: Common) {
    set_opt(&mut cfg.seed, c.seed);
    set(&mut cfg.out_dir, c.out_dir);
}

/// Flags win over the config file.
fn merge(cmd: Cmd, cfg: &mut RunConfig) -> Command {
    match cmd {
        Cmd::GenData(a) => {
            set_opt(&mut cfg.case, a.case);
            set(&mut cfg.n, a.n);
            set_opt(&mut cfg.out, a.out);
            apply_common(cfg, a.common);
            Command::GenData
        }
        Cmd::Train(a) => {
            set_opt(&mut cfg.case, a.case);
            set_opt(&mut cfg.data, a.data);
            set_opt(&mut cfg.out, a.out);
            set(&mut cfg.train.steps, a.steps);
            set(&mut cfg.train.batch_size, a.batch_size);
            set_opt(&mut cfg.train.hidden, a.hidden);
            set(&mut cfg.train.adam.lr, a.lr);
            set(&mut cfg.train.schedule.t_max, a.t_max);
            set(&mut cfg.train.schedule.beta_1, a.beta_1);
            set(&mut cfg.train.schedule.beta_t, a.beta_t);
            apply_common(cfg, a.common);
            Command::Train
        }
        Cmd::Sample(a) => {
            set_opt(&mut cfg.checkpoint, a.checkpoint);
            set(&mut cfg.n, a.n);
            set_opt(&mut cfg.out, a.out);
            set_opt(&mut cfg.guidance.lambda, a.lambda);
            set(&mut cfg.guidance.mode, a.mode);
            if a.no_inequalities {
                cfg.guidance.include_inequalities = false;
            }
            apply_common(cfg, a.common);
            Command::Sample
        }
        Cmd::Eval(a) => {
            set_opt(&mut cfg.real, a.real);
            set_opt(&mut cfg.syn, a.syn);
            set_opt(&mut cfg.case, a.case);
            set(&mut cfg.bins, a.bins);
            apply_common(cfg, a.common);
            Command::Eval
        }
        Cmd::Downstream(a) => {
            set_opt(&mut cfg.case, a.case);
            if !a.train.is_empty() {
                cfg.train_sets = a.train;
            }
            set_opt(&mut cfg.test, a.test);
            set(&mut cfg.predictor.steps, a.steps);
            apply_common(cfg, a.common);
            Command::Downstream
        }
        Cmd::Rerun(_) => unreachable!("handled before merging"),
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("GRIDFLOW_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("GRIDFLOW_SEED is not an unsigned integer: {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn rerun(args: RerunArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.manifest).map_err(|e| CliError::file(&args.manifest, e))?;
    let recorded = Manifest::from_toml(&text).map_err(|e| CliError::file(&args.manifest, e))?;
    let cmd = Command::from_name(&recorded.command).ok_or_else(|| {
        CliError::file(&args.manifest, format!("unknown command {:?}", recorded.command))
    })?;
    for (path, hash) in &recorded.inputs {
        let p = PathBuf::from(path);
        let bytes = fs::read(&p).map_err(|e| CliError::file(&p, e))?;
        if &sha256_hex(&bytes) != hash {
            return Err(CliError::file(&p, "input changed since the manifest was written"));
        }
    }
    let mut cfg = recorded.config.clone();
    set(&mut cfg.out_dir, args.out_dir);
    let fresh = execute(cmd, cfg)?;
    let differing: Vec<&String> = recorded
        .outputs
        .iter()
        .filter(|(k, v)| fresh.outputs.get(*k) != Some(*v))
        .map(|(k, _)| k)
        .collect();
    if !differing.is_empty() || fresh.outputs.len() != recorded.outputs.len() {
        return Err(CliError::new(
            ErrorKind::Reproducibility,
            format!("outputs differ from the manifest: {differing:?}"),
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    if let Cmd::Rerun(args) = cli.cmd {
        return rerun(args);
    }
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let cmd = merge(cli.cmd, &mut cfg);
    if cfg.seed.is_none() {
        cfg.seed = Some(env_seed()?.unwrap_or(0));
    }
    execute(cmd, cfg).map(|_| ())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::usage(msg).to_line());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.code as u8)
        }
    }
}
