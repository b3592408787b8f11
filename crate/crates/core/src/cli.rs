//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure (aborted run, failed self-check),
//! 2 bad invocation or configuration.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Arm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::orchestrator::{run_arms, write_metrics_csv, ArmRun, Environment};
use crate::population::generate_population;
use crate::predictor::write_history_csv;
use crate::resources::write_usage_csv;
use crate::splitnn::Checkpoint;
use crate::verify::{self, Suite};

/// Default output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "CRSFL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "crsfl", version, about = "Resource-aware clustered split-federated learning simulator")]
#[command(after_help = "Any config leaf can be overridden with --section.key=value, e.g. --selector.ga.population=30")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one arm or all four and write per-round metrics.
    Run(RunArgs),
    /// Run the built-in numerical self-checks.
    Verify {
        #[arg(value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print the generated device population as JSON.
    DumpPopulation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// cen, sl, csfl, crsfl or all.
    #[arg(long)]
    arm: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory (default: $CRSFL_OUT_DIR, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from this initial-weights checkpoint instead of a fresh init.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gradients,
    Selector,
    Splitequiv,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub arms: Vec<Arm>,
    pub config: ExperimentConfig,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<PathBuf>,
}

/// Splits `--section.key=value` overrides from the arguments clap parses.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let is_override = |a: &str| {
        a.strip_prefix("--")
            .and_then(|rest| rest.split_once('='))
            .is_some_and(|(key, _)| key.contains('.'))
    };
    let (mut rest, mut overrides) = (Vec::new(), Vec::new());
    for a in args {
        if is_override(&a) {
            overrides.push(a);
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

/// Entry point; returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let (args, overrides) = split_overrides(args);
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Run(run) => cmd_run(run, &overrides),
        Command::Verify { suite, seed } => cmd_verify(suite, seed),
        Command::DumpPopulation { config, seed, out } => cmd_dump(config, seed, out, &overrides),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> std::result::Result<ExperimentConfig, Failure> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            let cfg: ExperimentConfig =
                serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            cfg
        }
        None => ExperimentConfig::default(),
    };
    base.with_overrides(overrides).map_err(usage)
}

fn parse_arms(arg: Option<&str>, cfg: &ExperimentConfig) -> Result<Vec<Arm>> {
    match arg {
        None => Ok(vec![cfg.run.arm]),
        Some("all") => Ok(Arm::ALL.to_vec()),
        Some(name) => Ok(vec![name.parse()?]),
    }
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Short content hash of the effective config and arm list.
pub fn run_id(config: &ExperimentConfig, arms: &[Arm]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    for a in arms {
        h.update(a.name().as_bytes());
    }
    Ok(h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect())
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

fn cmd_run(args: RunArgs, overrides: &[String]) -> std::result::Result<i32, Failure> {
    let mut flags: Vec<String> = overrides.to_vec();
    if let Some(r) = args.rounds {
        flags.push(format!("run.rounds={r}"));
    }
    if let Some(s) = args.seed {
        flags.push(format!("run.seed={s}"));
    }
    let mut cfg = load_config(args.config.as_deref(), &flags)?;
    let arms = parse_arms(args.arm.as_deref(), &cfg).map_err(usage)?;
    if arms.len() == 1 {
        cfg.run.arm = arms[0];
    }
    if args.threads == 0 {
        return Err(Failure::Usage("--threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let out = args.out.unwrap_or_else(default_out_dir);
    let started = now_ms();

    let env = match &args.init {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Failure::Usage(e.to_string()))?;
            let model = ckpt.into_model().map_err(usage)?;
            let population = generate_population(cfg.run.seed, &cfg.population).map_err(usage)?;
            Environment::with_model(&cfg, population, model)
        }
        None => Environment::build(&cfg),
    };
    let env = env.map_err(|e| match e {
        Error::Config(_) => usage(e),
        other => runtime(other),
    })?;
    let runs = pool.install(|| run_arms(&env, &arms)).map_err(runtime)?;

    let outputs = write_outputs(&out, &env, &runs).map_err(runtime)?;
    let manifest = RunManifest {
        run_id: run_id(&cfg, &arms).map_err(runtime)?,
        seed: cfg.run.seed,
        arms: arms.clone(),
        config: cfg,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        outputs,
    };
    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).map_err(|e| runtime(e.into()))?)
        .map_err(|e| runtime(e.into()))?;

    let stdout = io::stdout();
    let mut w = stdout.lock();
    for r in &runs {
        if let Some(last) = r.metrics.last() {
            let drops: usize = r.metrics.iter().map(|m| m.dropped).sum();
            let traffic: f64 = r.metrics.iter().map(|m| m.traffic_mb).sum();
            let _ = writeln!(
                w,
                "{:<6} rounds {:>3}  accuracy {:.4}  loss {:.4}  dropped {:>4}  traffic {:.1} MB",
                r.arm, last.round, last.accuracy, last.loss, drops, traffic
            );
        }
    }
    let _ = writeln!(w, "wrote {}", manifest_path.display());
    Ok(0)
}

fn write_outputs(out: &Path, env: &Environment, runs: &[ArmRun]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let ckpt = out.join("initial_model.json");
    fs::write(&ckpt, serde_json::to_string(&Checkpoint::from_model(&env.initial))?)?;
    written.push(ckpt);
    for r in runs {
        let path = out.join(format!("{}.csv", r.arm));
        write_metrics_csv(io::BufWriter::new(fs::File::create(&path)?), &r.metrics)?;
        written.push(path);
        if !r.usage.is_empty() {
            let path = out.join(format!("{}_usage.csv", r.arm));
            write_usage_csv(io::BufWriter::new(fs::File::create(&path)?), &r.usage)?;
            written.push(path);
        }
        if !r.history.is_empty() {
            let path = out.join(format!("{}_history.csv", r.arm));
            write_history_csv(io::BufWriter::new(fs::File::create(&path)?), &r.history)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn cmd_verify(suite: SuiteArg, seed: u64) -> std::result::Result<i32, Failure> {
    let suites: Vec<Suite> = match suite {
        SuiteArg::Gradients => vec![Suite::Gradients],
        SuiteArg::Selector => vec![Suite::Selector],
        SuiteArg::Splitequiv => vec![Suite::SplitEquiv],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let mut ok = true;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    for s in suites {
        let report = verify::run(s, seed).map_err(runtime)?;
        let _ = write!(w, "{report}");
        ok &= report.passed;
    }
    Ok(if ok { 0 } else { 1 })
}

fn cmd_dump(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    overrides: &[String],
) -> std::result::Result<i32, Failure> {
    let mut flags = overrides.to_vec();
    if let Some(s) = seed {
        flags.push(format!("run.seed={s}"));
    }
    let cfg = load_config(config.as_deref(), &flags)?;
    let pop = generate_population(cfg.run.seed, &cfg.population).map_err(usage)?;
    let text = serde_json::to_string_pretty(&pop.dump()).map_err(|e| runtime(e.into()))?;
    match out {
        Some(p) => fs::write(&p, text + "\n").map_err(|e| runtime(e.into()))?,
        None => {
            let _ = writeln!(io::stdout().lock(), "{text}");
        }
    }
    Ok(0)
}
