use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use asgd_core::assumptions::convexity_report;
use asgd_core::averaged_sgd::run_stream_with;
use asgd_core::config::Config;
use asgd_core::datagen::{freeze, write_csv};
use asgd_core::harness::{rate_experiment, write_moments_csv};
use asgd_core::oracle::{empirical_truth, ground_truth, OracleResult};
use asgd_core::rng::{self, Domain};
use asgd_core::{Error, Vector};
use clap::{Parser, Subcommand};
use serde::Serialize;
use tempfile::NamedTempFile;

#[derive(Parser)]
#[command(name = "asgd", version, about = "Averaged stochastic gradient estimators and rate experiments")]
struct Cli {
    /// Worker threads for Monte Carlo loops (ASGD_THREADS takes precedence).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stream samples through one estimator and write the final (Z_n, Z̄_n).
    Estimate {
        config: PathBuf,
        /// Number of samples (defaults to experiment.n_max).
        #[arg(long)]
        n: Option<u64>,
        /// Defaults to experiment.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the replicate experiment and write report.json and moments.csv.
    Rates {
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Solve the empirical problem on a frozen oracle dataset.
    Oracle {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe strong convexity, the Taylor remainder and gradient moments.
    Check {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Freeze a dataset from the configured distribution as CSV.
    Gen {
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Estimate { .. } => "estimate",
            Command::Rates { .. } => "rates",
            Command::Oracle { .. } => "oracle",
            Command::Check { .. } => "check",
            Command::Gen { .. } => "gen",
        }
    }

    fn config_path(&self) -> &Path {
        match self {
            Command::Estimate { config, .. }
            | Command::Rates { config, .. }
            | Command::Oracle { config, .. }
            | Command::Check { config, .. }
            | Command::Gen { config, .. } => config,
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    command: &'a str,
    args: Vec<String>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    version: &'static str,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    config_hash: &'a str,
    seed: u64,
    n: u64,
    z: Vector,
    z_bar: Vector,
}

#[derive(Serialize)]
struct OracleOutput<'a> {
    config_hash: &'a str,
    seed: u64,
    n_oracle: usize,
    #[serde(flatten)]
    result: OracleResult,
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::GroundTruthUnavailable(_) => 2,
        Error::NonFiniteIterate { .. } | Error::TooManyFailures { .. } => 3,
        Error::NoConvergence { .. } => 4,
        _ => 1,
    }
}

/// Staged output: written to a temp file beside its destination, renamed on commit.
struct Staged {
    file: NamedTempFile,
    dest: PathBuf,
}

fn stage(dest: &Path, write: impl FnOnce(&mut dyn Write) -> asgd_core::Result<()>) -> asgd_core::Result<Staged> {
    let dir = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut file = NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(file.as_file_mut());
        write(&mut w)?;
        w.flush()?;
    }
    Ok(Staged { file, dest: dest.to_path_buf() })
}

fn stage_json<T: Serialize>(dest: &Path, value: &T) -> asgd_core::Result<Staged> {
    stage(dest, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn commit(staged: Vec<Staged>) -> asgd_core::Result<Vec<String>> {
    staged
        .into_iter()
        .map(|s| {
            s.file.persist(&s.dest).map_err(|e| Error::Io(e.error))?;
            Ok(s.dest.display().to_string())
        })
        .collect()
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn load_config(path: &Path) -> asgd_core::Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config { line: 0, msg: format!("cannot read {}: {e}", path.display()) })?;
    Config::parse(&text)
}

fn run(cli: &Cli) -> asgd_core::Result<()> {
    let started = now_ms();
    let cfg = load_config(cli.command.config_path())?;
    if let Some(w) = cfg.schedule.warning() {
        eprintln!("warning: {w}");
    }
    let hash = cfg.hash();
    let seed = cfg.experiment.seed;
    let (staged, manifest_at) = match &cli.command {
        Command::Estimate { n, seed: s, out, .. } => {
            let seed = s.unwrap_or(seed);
            let n = n.unwrap_or(cfg.experiment.n_max);
            let dist = &cfg.binding.distribution;
            let mut rng = rng::stream(seed, Domain::Replicate, 0);
            let state = run_stream_with(
                &cfg.binding.objective,
                &cfg.schedule,
                cfg.clip_radius,
                |smp| dist.sample_into(&mut rng, smp),
                dist.empty_sample(),
                n,
                &[],
                |_| {},
            )?;
            let body = EstimateOutput { config_hash: &hash, seed, n: state.n, z: state.z, z_bar: state.z_bar };
            (vec![stage_json(out, &body)?], manifest_path(out))
        }
        Command::Rates { out_dir, .. } => {
            let experiment = cfg.experiment_config()?;
            let (mut report, rows) = rate_experiment(&experiment)?;
            report.config_hash = hash.clone();
            let csv = stage(&out_dir.join("moments.csv"), |w| write_moments_csv(&rows, w))?;
            let json = stage_json(&out_dir.join("report.json"), &report)?;
            (vec![json, csv], out_dir.join("manifest.json"))
        }
        Command::Oracle { out, .. } => {
            let result = empirical_truth(&cfg.binding, &cfg.truth.oracle, seed)?;
            let body = OracleOutput { config_hash: &hash, seed, n_oracle: cfg.truth.oracle.n_oracle, result };
            (vec![stage_json(out, &body)?], manifest_path(out))
        }
        Command::Check { out, .. } => {
            let truth = ground_truth(&cfg.binding, cfg.truth.mode, &cfg.truth.oracle, seed)?;
            let report = convexity_report(&cfg.binding, &truth.m, &cfg.check, seed)?;
            (vec![stage_json(out, &Tagged { config_hash: &hash, body: report })?], manifest_path(out))
        }
        Command::Gen { n, seed: s, out, .. } => {
            let data = freeze(&cfg.binding.distribution, *n, s.unwrap_or(seed))?;
            (vec![stage(out, |w| write_csv(&data, w))?], manifest_path(out))
        }
    };
    let outputs = commit(staged)?;
    let manifest = Manifest {
        config_hash: &hash,
        command: cli.command.name(),
        args: std::env::args().collect(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        version: env!("CARGO_PKG_VERSION"),
        outputs,
    };
    commit(vec![stage_json(&manifest_at, &manifest)?])?;
    Ok(())
}

fn configure_threads(flag: Option<usize>) -> Result<(), String> {
    let threads = match std::env::var("ASGD_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| format!("ASGD_THREADS must be a positive integer, got {v:?}"))?),
        Err(_) => flag,
    };
    match threads {
        Some(0) => Err("thread count must be positive".into()),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string()),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads(cli.threads) {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
