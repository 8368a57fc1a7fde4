//! `tsnpe` — reproducible simulation-based-inference experiments from the
//! command line.
//!
//! Four subcommands: `run` executes one configured inference run, `coverage`
//! recomputes calibration for a persisted run, `benchmark` sweeps a
//! task × method × budget × seed grid into one long-format table, and
//! `report` turns either artifact into plot-ready CSVs plus a markdown
//! summary.
//!
//! Everything is a pure function of config + seed: rerunning any command
//! with the same inputs reproduces its outputs byte for byte, whatever
//! `--workers` says.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 bad configuration or malformed
//! artifacts, 3 sampling failure, 4 training failure.

mod benchmark;
mod config;
mod report;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use tsnpe_core::diagnostics::ks_critical_1pct;
use tsnpe_core::engine::{self, persist, CoverageConfig, CoverageStrategy};
use tsnpe_core::{Error, Method, Result, RunConfig};

use config::FileConfig;

/// Environment variable naming the default output root (fallback: `runs`).
const OUT_ENV: &str = "TSNPE_OUT";

#[derive(Parser)]
#[command(
    name = "tsnpe",
    version,
    about = "Sequential neural posterior estimation with truncated proposals"
)]
struct Cli {
    /// Bound simulator/training parallelism (default: all cores). Results
    /// never depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run from a TOML config, persisting a directory per round.
    Run {
        /// Experiment description (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's round count.
        #[arg(long)]
        rounds: Option<usize>,
        /// Run directory (default: config `out`, else `$TSNPE_OUT/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue an interrupted run from its completed rounds.
        #[arg(long)]
        resume: bool,
    },
    /// Recompute coverage calibration from a persisted run's artifacts.
    Coverage {
        /// A directory previously produced by `run`.
        run_dir: PathBuf,
        /// Round to calibrate (default: last completed).
        #[arg(long)]
        round: Option<usize>,
        /// Calibration pairs (θ*, x*).
        #[arg(long, default_value_t = 500)]
        rows: usize,
        /// Estimator draws per pair.
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, value_enum, default_value_t = StrategyArg::Mixture)]
        strategy: StrategyArg,
        /// Override the run's seed for the calibration streams.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write coverage.csv and e_values.csv (default: the
        /// round's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep a task × method × budget × seed grid into one metrics table.
    Benchmark {
        /// TOML config with a `[benchmark]` section.
        #[arg(long)]
        config: PathBuf,
        /// Root for the grid's run directories and table (default:
        /// `$TSNPE_OUT/bench_<config-stem>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse completed runs already present under the root.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize a run directory or a benchmark table: plot-ready CSVs plus
    /// a markdown report. Idempotent.
    Report {
        /// Run directory (with config.json) or benchmark CSV.
        input: PathBuf,
        /// Output directory (default: next to the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    /// Calibrate against the mixture of every round's data proposal.
    Mixture,
    /// Calibrate against the current proposal only.
    Current,
}

impl From<StrategyArg> for CoverageStrategy {
    fn from(s: StrategyArg) -> CoverageStrategy {
        match s {
            StrategyArg::Mixture => CoverageStrategy::Mixture,
            StrategyArg::Current => CoverageStrategy::Current,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
        {
            eprintln!("error: could not size the worker pool: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

/// 1 I/O, 2 config/artifact, 3 sampling, 4 training.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Sampler(_) | Error::Mcmc(_) => 3,
        Error::Training(_) => 4,
        Error::Io(_) => 1,
        _ => 2,
    }
}

/// `$TSNPE_OUT`, or `runs` beside the working directory.
fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Tsnpe => "tsnpe",
        Method::Npe => "npe",
        Method::Apt => "apt",
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            seed,
            rounds,
            out,
            resume,
        } => cmd_run(&config, seed, rounds, out, resume),
        Command::Coverage {
            run_dir,
            round,
            rows,
            draws,
            strategy,
            seed,
            out,
        } => cmd_coverage(&run_dir, round, rows, draws, strategy, seed, out),
        Command::Benchmark {
            config,
            out,
            resume,
        } => benchmark::cmd_benchmark(&config, out, resume),
        Command::Report { input, out } => report::cmd_report(&input, out),
    }
}

fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    rounds: Option<usize>,
    out: Option<PathBuf>,
    resume: bool,
) -> Result<()> {
    let file = FileConfig::load(config)?;
    let mut cfg = file.run_config()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = rounds {
        cfg.rounds = r;
        // A shorter override may strand a stop_after beyond the new horizon.
        cfg.stop_after = cfg.stop_after.filter(|s| *s <= r);
    }
    let dir = out
        .or(file.out.clone())
        .unwrap_or_else(|| out_root().join(default_run_name(&cfg)));

    let outcome = tsnpe_core::run(&cfg, Some(&dir), resume)?;
    for r in &outcome.record.rounds {
        println!("{}", round_line(r));
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn default_run_name(cfg: &RunConfig) -> String {
    format!("{}_{}_s{}", cfg.task, method_name(cfg.method), cfg.seed)
}

fn round_line(r: &engine::RoundRecord) -> String {
    let mut line = format!("round {:>2}:", r.round);
    if let Some(v) = r.metrics.nll_val {
        line.push_str(&format!(" val nll {v:.3}"));
    }
    if let Some(v) = r.metrics.leakage_fraction {
        line.push_str(&format!(", leakage {v:.4}"));
    }
    if let Some(v) = r.metrics.acceptance_rate {
        line.push_str(&format!(", acceptance {v:.4}"));
    }
    if let Some(v) = r.metrics.ess_mean {
        line.push_str(&format!(", mean ess {v:.1}"));
    }
    if let Some(v) = r.metrics.c2st {
        line.push_str(&format!(", c2st {v:.3}"));
    }
    if let Some(c) = &r.coverage {
        line.push_str(&format!(", coverage@0.95 {:.3}", c.coverage_at_95));
    }
    line
}

fn cmd_coverage(
    run_dir: &Path,
    round: Option<usize>,
    rows: usize,
    draws: usize,
    strategy: StrategyArg,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cc = CoverageConfig {
        rows,
        posterior_draws: draws,
        strategy: strategy.into(),
        final_round_only: true,
    };
    let (round, cov) = engine::coverage_of_run(run_dir, round, &cc, seed)?;
    let dir = out.unwrap_or_else(|| persist::round_dir(run_dir, round));
    std::fs::create_dir_all(&dir)?;
    persist::write_coverage_csv(&dir.join("coverage.csv"), &cov)?;
    persist::write_e_values_csv(&dir.join("e_values.csv"), &cov)?;
    println!(
        "round {round}: max deviation {:.4}, ks {:.4} (1% critical {:.4}), coverage@0.95 {:.3}",
        cov.max_deviation(),
        cov.ks,
        ks_critical_1pct(cov.e_values.len()),
        cov.at(0.95),
    );
    println!("coverage files: {}", dir.display());
    Ok(())
}
