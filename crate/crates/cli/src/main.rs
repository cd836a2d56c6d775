//! `dprm`: train, decode, run experiments and inspect oracle tables and
//! estimator snapshots.
//!
//! Exit status is 0 on success, 1 when an experiment's hard checks fail and
//! 2 on usage, configuration or IO errors.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dprm_core::checkpoint::{decode_samples, train_run, Checkpoint, DecodedSample, RunConfig, TargetSpec};
use dprm_core::controllers::{BucketSnapshot, BucketTable};
use dprm_core::denoiser::Telemetry;
use dprm_core::experiments::{self, ExperimentConfig, ExperimentError};
use dprm_core::oracle::{dump_tables, DumpPositions, DumpTokens, OracleDump};
use dprm_core::targets::TerminalReward;
use dprm_core::{PhaseBin, ARTIFACT_VERSION};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(name = "dprm", version, about = "Reward-guided token ordering laboratory")]
struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory, created if absent.
    #[arg(long, env = "DPRM_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser and write a checkpoint and telemetry.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Decode sequences from a checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Gate on bucket readiness only.
        #[arg(long)]
        force_full_gate: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run a named experiment.
    Experiment {
        name: String,
        /// JSON object of experiment parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Dump harmonic tables and tilted kernels of a small target.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Inspect or merge estimator snapshots.
    #[command(subcommand)]
    Snapshot(SnapshotCommand),
}

#[derive(Subcommand)]
enum SnapshotCommand {
    /// Print per-cell counts and estimates as JSON.
    Inspect { path: PathBuf },
    /// Merge snapshots (or checkpoints) with identical shape.
    Merge {
        #[arg(required = true, num_args = 2..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Configuration of the `oracle` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct OracleConfig {
    target: TargetSpec,
    reward: TerminalReward,
    beta: f64,
    #[serde(default)]
    prompt: usize,
    #[serde(default)]
    positions: DumpPositions,
    #[serde(default)]
    tokens: DumpTokens,
}

/// Estimator file written by `train` and `snapshot merge`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SnapshotFile {
    version: String,
    config_hash: String,
    seed: u64,
    snapshot: BucketSnapshot,
}

#[derive(Serialize)]
struct DecodeFile<'a> {
    version: &'a str,
    config_hash: &'a str,
    checkpoint_seed: u64,
    seed: u64,
    force_full_gate: bool,
    samples: &'a [DecodedSample],
}

#[derive(Serialize)]
struct OracleFile<'a> {
    version: &'a str,
    config_hash: String,
    seed: u64,
    config: &'a OracleConfig,
    #[serde(flatten)]
    dump: OracleDump,
}

/// Error that maps to exit status 1 rather than 2.
#[derive(Debug)]
struct ChecksFailed(String);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ChecksFailed>().is_some() => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out.out),
        Command::Decode {
            checkpoint,
            seed,
            samples,
            force_full_gate,
            out,
        } => cmd_decode(&checkpoint, seed, samples, force_full_gate, &out.out),
        Command::Experiment { name, config, seed, out } => cmd_experiment(&name, config.as_deref(), seed, &out.out),
        Command::Oracle { config, seed, out } => cmd_oracle(&config, seed, &out.out),
        Command::Snapshot(SnapshotCommand::Inspect { path }) => cmd_snapshot_inspect(&path),
        Command::Snapshot(SnapshotCommand::Merge { inputs, out }) => cmd_snapshot_merge(&inputs, &out),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn telemetry_csv(t: &Telemetry, hash: &str, seed: u64) -> Result<Vec<u8>> {
    let bins = t.steps.iter().map(|r| r.selected_bins.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["config_hash", "seed", "version", "step", "loss", "masked_positions"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..bins).map(|b| format!("bin_{b}")));
    w.write_record(&header)?;
    for r in &t.steps {
        let mut row = vec![
            hash.to_string(),
            seed.to_string(),
            ARTIFACT_VERSION.to_string(),
            r.step.to_string(),
            r.loss.to_string(),
            r.masked_positions.to_string(),
        ];
        row.extend((0..bins).map(|b| r.selected_bins.get(b).copied().unwrap_or(0).to_string()));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

fn cmd_train(config: &Path, seed: u64, out: &Path) -> Result<()> {
    let cfg: RunConfig = read_json(config)?;
    ensure_dir(out)?;
    let (ckpt, telemetry) = train_run(&cfg, seed)?;
    let ckpt_path = out.join("checkpoint.json");
    ckpt.save(&ckpt_path)?;
    write_file(&out.join("telemetry.csv"), telemetry_csv(&telemetry, &ckpt.config_hash, seed)?)?;
    if let Some(snapshot) = &ckpt.snapshot {
        let file = SnapshotFile {
            version: ARTIFACT_VERSION.to_string(),
            config_hash: ckpt.config_hash.clone(),
            seed,
            snapshot: snapshot.clone(),
        };
        write_json(&out.join("snapshot.json"), &file)?;
    }
    say!("{}", ckpt_path.display());
    Ok(())
}

fn trace_csv(samples: &[DecodedSample], hash: &str, seed: u64) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config_hash",
        "seed",
        "version",
        "sample",
        "stream",
        "step",
        "stage",
        "phase",
        "budget",
        "rank",
        "position",
        "token",
        "psi",
        "bin",
        "eta",
        "r_hat",
        "score",
        "selected",
    ])?;
    for s in samples {
        for (step, d) in s.trace.iter().enumerate() {
            let prefix = [
                hash.to_string(),
                seed.to_string(),
                ARTIFACT_VERSION.to_string(),
                s.sample.to_string(),
                s.stream.to_string(),
                step.to_string(),
                d.stage.to_string(),
                d.phase.to_string(),
                d.budget.to_string(),
            ];
            for (rank, r) in d.records.iter().enumerate() {
                let mut row = prefix.to_vec();
                row.extend([
                    rank.to_string(),
                    r.position.to_string(),
                    r.token.to_string(),
                    r.psi.to_string(),
                    r.bin.to_string(),
                    r.eta.to_string(),
                    r.r_hat.to_string(),
                    r.score.to_string(),
                    (d.selected.contains(&r.position) as u8).to_string(),
                ]);
                w.write_record(&row)?;
            }
        }
    }
    Ok(w.into_inner()?)
}

fn cmd_decode(checkpoint: &Path, seed: u64, samples: usize, force_full: bool, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    ensure_dir(out)?;
    let decoded = decode_samples(&ckpt, samples, seed, force_full)?;
    let file = DecodeFile {
        version: ARTIFACT_VERSION,
        config_hash: &ckpt.config_hash,
        checkpoint_seed: ckpt.seed,
        seed,
        force_full_gate: force_full,
        samples: &decoded,
    };
    write_json(&out.join("decoded.json"), &file)?;
    write_file(&out.join("trace.csv"), trace_csv(&decoded, &ckpt.config_hash, seed)?)?;
    for s in &decoded {
        say!("{}\t{:?}\t{}", s.sample, s.response, s.reward);
    }
    Ok(())
}

fn cmd_experiment(name: &str, config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let params: serde_json::Value = match config {
        Some(p) => read_json(p)?,
        None => serde_json::Value::Null,
    };
    let cfg = ExperimentConfig {
        name: name.to_string(),
        seed,
        params,
    };
    let report = match experiments::run(&cfg) {
        Ok(r) => r,
        Err(e @ ExperimentError::Unknown { .. }) => bail!(e),
        Err(e) => return Err(e).with_context(|| format!("experiment {name} failed")),
    };
    ensure_dir(out)?;
    let (json, csv) = experiments::write_report(&report, out)?;
    for c in &report.checks {
        say!(
            "{} {}{}: measured {} bound {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            if c.hard { "" } else { " (soft)" },
            c.measured,
            c.bound
        );
    }
    say!("{}\n{}", json.display(), csv.display());
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.failed_checks().into_iter().map(|c| c.name.as_str()).collect();
        Err(ChecksFailed(format!("{name}: hard checks failed: {}", failed.join(", "))).into())
    }
}

fn cmd_oracle(config: &Path, seed: u64, out: &Path) -> Result<()> {
    let cfg: OracleConfig = read_json(config)?;
    let target = cfg.target.build(seed)?;
    cfg.reward.validate(target.vocab(), target.response_len())?;
    let dump = dump_tables(&target, &cfg.reward, cfg.prompt, cfg.beta, cfg.positions, cfg.tokens)?;
    ensure_dir(out)?;
    let path = out.join("oracle.json");
    let file = OracleFile {
        version: ARTIFACT_VERSION,
        config_hash: experiments::config_hash(&cfg),
        seed,
        config: &cfg,
        dump,
    };
    write_json(&path, &file)?;
    say!("{}", path.display());
    Ok(())
}

/// Accepts snapshot files and checkpoints.
fn load_snapshot(path: &Path) -> Result<SnapshotFile> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("model").is_some() {
        let ckpt = Checkpoint::load(path)?;
        let snapshot = ckpt
            .snapshot
            .with_context(|| format!("{} has no estimator snapshot", path.display()))?;
        return Ok(SnapshotFile {
            version: ckpt.version,
            config_hash: ckpt.config_hash,
            seed: ckpt.seed,
            snapshot,
        });
    }
    serde_json::from_value(value).with_context(|| format!("cannot parse {}", path.display()))
}

#[derive(Serialize)]
struct CellSummary {
    phase: usize,
    bin: usize,
    n: u64,
    tau_hat: f64,
    r_hat: f64,
}

fn cmd_snapshot_inspect(path: &Path) -> Result<()> {
    let file = load_snapshot(path)?;
    let table = BucketTable::from_snapshot(&file.snapshot)?;
    let mut cells = Vec::new();
    for phase in 0..table.phases() {
        for bin in 0..table.bins() {
            let e = table.estimate(PhaseBin { phase, bin });
            cells.push(CellSummary {
                phase,
                bin,
                n: e.n,
                tau_hat: e.tau_hat,
                r_hat: e.r_hat,
            });
        }
    }
    let summary = serde_json::json!({
        "version": file.version,
        "config_hash": file.config_hash,
        "seed": file.seed,
        "phases": table.phases(),
        "bins": table.bins(),
        "beta": table.beta(),
        "gate": table.gate_params(),
        "total_count": table.total_count(),
        "cells": cells,
    });
    say!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_snapshot_merge(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let files: Vec<SnapshotFile> = inputs.iter().map(|p| load_snapshot(p)).collect::<Result<_>>()?;
    let mut table = BucketTable::from_snapshot(&files[0].snapshot)?;
    for (f, p) in files.iter().zip(inputs).skip(1) {
        let other = BucketTable::from_snapshot(&f.snapshot)?;
        table
            .merge(&other)
            .with_context(|| format!("cannot merge {}", p.display()))?;
    }
    let mut hasher = Sha256::new();
    for f in &files {
        hasher.update(f.config_hash.as_bytes());
    }
    let merged = SnapshotFile {
        version: ARTIFACT_VERSION.to_string(),
        config_hash: hex::encode(hasher.finalize()),
        seed: files[0].seed,
        snapshot: table.to_snapshot(),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_json(out, &merged)?;
    say!("{}", out.display());
    Ok(())
}
