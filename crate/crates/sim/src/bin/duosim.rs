//! Command-line scenario runner.
//!
//! Exit status: 0 when every verdict passes, 1 on any FAIL, 2 on usage,
//! scenario or trace errors.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use duobft_core::quorum::{duobft_params, flexminbft_params, QuorumParams};
use duobft_sim::check::{check_liveness, check_safety, CheckError, Verdict};
use duobft_sim::metrics::{compute_metrics, Metrics};
use duobft_sim::scenario::Scenario;
use duobft_sim::sim::Simulation;
use duobft_sim::trace::{Model, Trace};

/// Environment variable naming the default directory for traces.
const OUT_DIR_ENV: &str = "DUOSIM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "duosim",
    version,
    about = "Run, check and sweep DuoBFT and Flexible MinBFT simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, write its trace and metrics, and check it.
    Run {
        scenario: PathBuf,
        /// Seed to run; defaults to every seed listed in the scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace file; defaults to `<stem>-<seed>.ndjson` under $DUOSIM_OUT_DIR or the current directory.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Re-run the checkers on a stored trace.
    Check { trace: PathBuf },
    /// Run a scenario once per value of one parameter.
    Sweep {
        scenario: PathBuf,
        /// `key=v1,v2,...`, for example `batch_size=10,50,100,200,400`.
        #[arg(long)]
        param: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print quorum thresholds.
    Matrix {
        #[arg(long, value_enum, default_value_t = MatrixProtocol::Duobft)]
        protocol: MatrixProtocol,
        /// Fault bound or inclusive range, such as `3` or `1..8`.
        #[arg(long, default_value = "1..8")]
        f: String,
        /// System size for Flexible MinBFT; defaults to 3f + 1.
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MatrixProtocol {
    Duobft,
    FlexMinbft,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Scenario(#[from] duobft_sim::scenario::ScenarioError),
    #[error(transparent)]
    Trace(#[from] duobft_sim::trace::TraceError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, seed, trace } => run(&scenario, seed, trace),
        Command::Check { trace } => check(&trace),
        Command::Sweep { scenario, param, seed } => sweep(&scenario, &param, seed),
        Command::Matrix { protocol, f, n } => matrix(protocol, &f, n),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

struct Verdicts {
    hybrid: Verdict,
    bft: Verdict,
    liveness: Verdict,
}

impl Verdicts {
    fn of(trace: &Trace) -> Result<Self, CheckError> {
        Ok(Verdicts {
            hybrid: check_safety(trace, Model::Hybrid)?,
            bft: check_safety(trace, Model::Bft)?,
            liveness: check_liveness(trace)?,
        })
    }

    fn print(&self) -> bool {
        println!("safety (hybrid): {}", self.hybrid);
        println!("safety (bft):    {}", self.bft);
        println!("liveness:        {}", self.liveness);
        self.hybrid.is_pass() && self.bft.is_pass() && self.liveness.is_pass()
    }
}

fn default_trace_path(scenario: &Path, seed: u64) -> PathBuf {
    let dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
    let stem = scenario
        .file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    dir.join(format!("{stem}-{seed}.ndjson"))
}

fn print_metrics(m: &Metrics) {
    print!("{m}");
    println!("metrics {}", m.to_json());
}

fn run(path: &Path, seed: Option<u64>, trace_path: Option<PathBuf>) -> Result<bool, CliError> {
    let scenario = Scenario::load(path)?;
    let seeds = seed.map_or_else(|| scenario.seeds.clone(), |s| vec![s]);
    if trace_path.is_some() && seeds.len() > 1 {
        return Err(CliError::Usage("--trace needs a single --seed".into()));
    }
    let mut all_pass = true;
    for seed in seeds {
        let (trace, _, diagnostic) = Simulation::new(&scenario, seed)?.run_diagnosed();
        let out = trace_path.clone().unwrap_or_else(|| default_trace_path(path, seed));
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = File::create(&out).map_err(io_err(&out))?;
        let mut w = BufWriter::new(file);
        trace.write_ndjson(&mut w)?;
        w.flush().map_err(io_err(&out))?;
        let metrics = compute_metrics(&trace);
        let metrics_path = out.with_extension("metrics.json");
        fs::write(&metrics_path, metrics.to_json() + "\n").map_err(io_err(&metrics_path))?;

        println!("seed {seed}: trace {}", out.display());
        if let Some(d) = diagnostic {
            println!("{d}");
        }
        print_metrics(&metrics);
        all_pass &= Verdicts::of(&trace)?.print();
    }
    Ok(all_pass)
}

fn check(path: &Path) -> Result<bool, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    let trace = Trace::read_ndjson(BufReader::new(file))?;
    Ok(Verdicts::of(&trace)?.print())
}

fn sweep(path: &Path, param: &str, seed: Option<u64>) -> Result<bool, CliError> {
    let scenario = Scenario::load(path)?;
    let (key, values) = param
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected key=v1,v2,... but got `{param}`")))?;
    let seed = seed.or_else(|| scenario.seeds.first().copied()).unwrap_or(1);
    let points = values
        .split(',')
        .map(|v| Ok((v.trim().to_string(), scenario.with_param(key, v.trim())?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let rows = points
        .par_iter()
        .map(|(v, s)| {
            let (trace, _) = Simulation::new(s, seed)?.run();
            let verdicts = Verdicts::of(&trace)?;
            Ok((v.clone(), compute_metrics(&trace), verdicts))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let w = key.len().max(8);
    println!("{key:>w$}  hybrid_p50  bft_p50  throughput  views  msgs/cmd  verdict");
    let mut all_pass = true;
    for (v, m, verdicts) in &rows {
        let pass = verdicts.hybrid.is_pass() && verdicts.bft.is_pass() && verdicts.liveness.is_pass();
        all_pass &= pass;
        println!(
            "{v:>w$}  {:>10}  {:>7}  {:>10.1}  {:>5}  {:>8.1}  {}",
            m.hybrid.p50,
            m.bft.p50,
            m.throughput,
            m.view_changes,
            m.messages_per_command,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    for (v, m, _) in &rows {
        println!("sweep {key}={v} {}", m.to_json());
    }
    if rows.iter().any(|(_, m, _)| m.approximate) {
        println!("note: latencies use an interpolated region matrix");
    }
    Ok(all_pass)
}

fn parse_range(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("expected a number or range like 1..8, got `{s}`"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once("..") {
        Some((lo, hi)) => {
            let (lo, hi) = (num(lo)?, num(hi.trim_start_matches('='))?);
            if lo > hi {
                return Err(bad());
            }
            Ok((lo, hi))
        }
        None => num(s).map(|f| (f, f)),
    }
}

fn matrix(protocol: MatrixProtocol, f: &str, n: Option<usize>) -> Result<bool, CliError> {
    let (lo, hi) = parse_range(f)?;
    println!(
        "{:>3} {:>4} {:>7} {:>5} {:>4} {:>7}",
        "f", "n", "hybrid", "bft", "vc", "req_vc"
    );
    for f in lo..=hi {
        let params: Result<QuorumParams, _> = match protocol {
            MatrixProtocol::Duobft => duobft_params(f),
            MatrixProtocol::FlexMinbft => flexminbft_params(n.unwrap_or(3 * f + 1), f),
        };
        match params {
            Ok(p) => println!(
                "{:>3} {:>4} {:>7} {:>5} {:>4} {:>7}",
                p.f,
                p.n,
                p.commit_hybrid,
                p.commit_bft.map_or_else(|| "-".to_string(), |b| b.to_string()),
                p.view_change,
                p.req_view_change
            ),
            Err(e) => println!("{f:>3} {:>4} {e}", n.unwrap_or(3 * f + 1)),
        }
    }
    Ok(true)
}
