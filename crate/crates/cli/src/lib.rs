//! Command-line driver for low-rank training experiments.
//!
//! Every run writes its outputs plus a `manifest.json` into `--out`. The
//! manifest is written last, including on failure.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::RunContext;
use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const SEED_ENV: &str = "INRANK_LAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "inrank-lab", version, about = "Incremental low-rank learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare simulated deep-linear dynamics with the closed-form mode curves.
    TheoryVerify(RunArgs),
    /// Greedy low-rank learning on a planted matrix target.
    GlrlDemo(RunArgs),
    /// Train a dense or InRank-factorized network.
    Train(RunArgs),
    /// Train and record the singular spectrum of each layer's cumulative update.
    SpectrumTrace(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TheoryVerify(_) => "theory-verify",
            Command::GlrlDemo(_) => "glrl-demo",
            Command::Train(_) => "train",
            Command::SpectrumTrace(_) => "spectrum-trace",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::TheoryVerify(a)
            | Command::GlrlDemo(a)
            | Command::Train(a)
            | Command::SpectrumTrace(a) => a,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON experiment configuration. Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Master seed; overrides the environment and the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write SVG plots of the spectrum history.
    #[arg(long)]
    pub plot: bool,
    /// Override a config key, e.g. `--set optim.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_path: Option<String>,
    config_digest: String,
    overrides: Vec<String>,
    seed: Option<u64>,
    seed_source: &'static str,
    started_at: String,
    finished_at: String,
    status: &'static str,
    exit_code: i32,
    message: Option<String>,
    final_ranks: Vec<usize>,
    outputs: Vec<String>,
}

/// sha256 over the config bytes followed by each override, NUL-separated.
pub fn config_digest(bytes: &[u8], overrides: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    for o in overrides {
        h.update([0u8]);
        h.update(o.as_bytes());
    }
    hex::encode(h.finalize())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Parses `args` (including the program name) and runs the command.
/// `env_seed` is the raw value of [`SEED_ENV`], if set. Returns the exit code.
pub fn run_cli<I, T>(args: I, env_seed: Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started_at = now();
    let command = cli.command.name();
    let args = cli.command.args();

    let bytes = match &args.config {
        Some(p) => match std::fs::read(p) {
            Ok(b) => Some(b),
            Err(e) => {
                let err = CliError::Io(format!("{}: {e}", p.display()));
                eprintln!("error: {err}");
                return err.exit_code();
            }
        },
        None => None,
    };
    let digest = config_digest(bytes.as_deref().unwrap_or(b""), &args.overrides);

    if let Err(e) = std::fs::create_dir_all(&args.out) {
        let err = CliError::Io(format!("{}: {e}", args.out.display()));
        eprintln!("error: {err}");
        return err.exit_code();
    }

    let mut manifest = Manifest {
        tool: "inrank-lab",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_path: args.config.as_ref().map(|p| p.display().to_string()),
        config_digest: digest,
        overrides: args.overrides.clone(),
        seed: None,
        seed_source: "config",
        started_at,
        finished_at: String::new(),
        status: "ok",
        exit_code: 0,
        message: None,
        final_ranks: Vec::new(),
        outputs: Vec::new(),
    };
    let mut ctx = RunContext {
        out: args.out.clone(),
        plot: args.plot,
        seed: 0,
        base_dir: args
            .config
            .as_deref()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default(),
        outputs: Vec::new(),
        final_ranks: Vec::new(),
    };

    let result = prepare(args, bytes.as_deref(), env_seed, &mut manifest)
        .and_then(|cfg| {
            ctx.seed = manifest.seed.unwrap_or(cfg.seed);
            match &cli.command {
                Command::TheoryVerify(_) => commands::run_theory(&cfg, &mut ctx),
                Command::GlrlDemo(_) => commands::run_glrl(&cfg, &mut ctx),
                Command::Train(_) => commands::run_training(&cfg, &mut ctx, false),
                Command::SpectrumTrace(_) => commands::run_training(&cfg, &mut ctx, true),
            }
        });

    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            manifest.status = e.status();
            manifest.message = Some(e.to_string());
            e.exit_code()
        }
    };
    manifest.exit_code = code;
    manifest.final_ranks = ctx.final_ranks;
    manifest.outputs = ctx.outputs;
    manifest.finished_at = now();
    if let Err(e) = report::write_json(&manifest, &args.out.join("manifest.json")) {
        eprintln!("error: {e}");
        return if code == 0 { e.exit_code() } else { code };
    }
    code
}

/// Loads the config and resolves the seed: flag, then environment, then config.
fn prepare(
    args: &RunArgs,
    bytes: Option<&[u8]>,
    env_seed: Option<String>,
    manifest: &mut Manifest,
) -> Result<ExperimentConfig, CliError> {
    let cfg = config::load(bytes.unwrap_or(b""), &args.overrides)?;
    let (seed, source) = if let Some(s) = args.seed {
        (s, "flag")
    } else if let Some(raw) = env_seed {
        let s = raw.trim().parse::<u64>().map_err(|_| {
            CliError::Config(format!("{SEED_ENV}: expected an unsigned integer, got {raw:?}"))
        })?;
        (s, "env")
    } else {
        (cfg.seed, "config")
    };
    manifest.seed = Some(seed);
    manifest.seed_source = source;
    Ok(cfg)
}
