//! The `netml` command line: argument parsing, configuration merging and the
//! subcommands, exposed as a library so tests can drive them in-process.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use netml_core::mthl::MthlConfig;

use crate::args::{Cli, Command};
use crate::commands::*;
use crate::config::RunConfig;
use crate::error::{CliError, EXIT_OK, EXIT_USAGE};

pub const DEFAULT_RATIO: [u32; 3] = [8, 1, 1];

fn need<T>(v: Option<T>, what: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("{what} is required (flag or config)")))
}

fn pick(flag: Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    need(flag.or_else(|| cfg.clone()), what)
}

fn pick_many(flag: Vec<PathBuf>, cfg: &[PathBuf]) -> Vec<PathBuf> {
    if flag.is_empty() {
        cfg.to_vec()
    } else {
        flag
    }
}

/// Runs one parsed invocation.
pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let threads = cli.threads.or(cfg.threads).unwrap_or(1);
    if threads == 0 {
        return Err(CliError::Usage("threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| run_command(cli.command, &cfg))
}

fn run_command(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    let paths = &cfg.paths;
    match command {
        Command::Extract(a) => {
            let mut flow = cfg.flow_config();
            if let Some(t) = a.idle_timeout {
                flow.idle_timeout_seconds = t;
            }
            if let Some(c) = a.packet_cap {
                flow.per_direction_packet_cap = c;
            }
            if flow.per_direction_packet_cap == 0 || !(flow.idle_timeout_seconds > 0.0) {
                return Err(CliError::Usage("packet cap and idle timeout must be positive".into()));
            }
            let captures = pick_many(a.captures, &paths.captures);
            let out = pick(a.out, &paths.out, "--out")?;
            let s = cmd_extract(&ExtractOptions { captures, out, flow })?;
            log::info!("{} flows from {} capture(s)", s.total.counts.flows, s.files.len());
        }
        Command::Prepare(a) => {
            cmd_prepare(&PrepareOptions {
                records: non_empty(pick_many(a.records, &paths.records), "--records")?,
                manifest: pick(a.manifest, &paths.manifest, "--manifest")?,
                seed: need(a.seed.or(cfg.seed), "--seed")?,
                salt: need(a.salt.or_else(|| cfg.prepare.salt.clone()), "--salt")?,
                ratio: cfg.prepare.ratio.unwrap_or(DEFAULT_RATIO),
                out: pick(a.out, &paths.out, "--out")?,
            })?;
        }
        Command::Train(a) => {
            let seed = need(a.seed.or(cfg.seed), "--seed")?;
            let mut train_cfg = cfg.train_config(seed);
            if let Some(e) = a.epochs {
                train_cfg.epochs = e;
            }
            if let Some(b) = a.batch_size {
                train_cfg.batch_size = b;
            }
            if let Some(lr) = a.lr {
                train_cfg.lr = lr;
            }
            let level = a.level.or_else(|| match a.model {
                ModelKind::Knn => cfg.knn.level.clone(),
                _ => cfg.mlp.level.clone(),
            });
            cmd_train(&TrainOptions {
                train: pick(a.train, &paths.train, "--train")?,
                model: a.model,
                out: pick(a.out, &paths.out, "--out")?,
                train_cfg,
                mthl: cfg.mthl.clone().unwrap_or_else(MthlConfig::default),
                mlp_hidden: a.hidden.or_else(|| cfg.mlp.hidden.clone()).unwrap_or_else(|| vec![128, 64]),
                level: level.unwrap_or_else(|| "mid".into()),
                k: a.k.or(cfg.knn.k).unwrap_or(netml_core::baselines::DEFAULT_K),
            })?;
        }
        Command::Evaluate(a) => {
            let report = cmd_evaluate(&EvaluateOptions {
                checkpoints: pick_many(a.checkpoints, &paths.checkpoints),
                eval: pick(a.eval, &paths.eval, "--eval")?,
                labels: a.labels.or_else(|| paths.labels.clone()),
                out: pick(a.out, &paths.out, "--out")?,
                datasets: if a.datasets.is_empty() { cfg.datasets.clone() } else { a.datasets },
                train_ref: a.train_ref.or_else(|| paths.train.clone()),
            })?;
            log::info!("{} scenario rows", report.scenarios.len());
        }
        Command::Predict(a) => {
            let n = cmd_predict(&PredictOptions {
                checkpoint: need(a.checkpoint.or_else(|| paths.checkpoints.first().cloned()), "--checkpoint")?,
                input: pick(a.input, &paths.eval, "--input")?,
                out: pick(a.out, &paths.out, "--out")?,
                train_ref: a.train_ref.or_else(|| paths.train.clone()),
            })?;
            log::info!("{n} predictions");
        }
        Command::Stats(a) => {
            let table = cmd_stats(&StatsOptions {
                records: non_empty(pick_many(a.records, &paths.records), "--records")?,
                labels: a.labels.or_else(|| paths.labels.clone()),
                level: a.level.map(Into::into),
            })?;
            match a.out {
                Some(p) => io::write_text(&p, &table)?,
                None => print!("{table}"),
            }
        }
        Command::Gradcheck(a) => {
            if a.seeds == 0 {
                return Err(CliError::Usage("--seeds must be at least 1".into()));
            }
            let (table, ok) = cmd_gradcheck(a.seeds)?;
            print!("{table}");
            if let Some(p) = a.out {
                io::write_text(&p, &table)?;
            }
            if !ok {
                return Err(CliError::Numeric("a layer exceeded the gradient-check tolerance".into()));
            }
        }
    }
    Ok(())
}

fn non_empty(v: Vec<PathBuf>, what: &str) -> Result<Vec<PathBuf>, CliError> {
    if v.is_empty() {
        Err(CliError::Usage(format!("{what} is required (flag or config)")))
    } else {
        Ok(v)
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    // repeated in-process runs keep the first logger
    let _ = env_logger::Builder::new().filter_level(level).parse_env("NETML_LOG").target(env_logger::Target::Stderr).try_init();
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("netml: {e}");
            e.exit_code()
        }
    }
}
