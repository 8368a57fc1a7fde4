//! The benchmark grid: task × method × budget × seed, one table out.
//!
//! Each cell is a full engine run persisted under the benchmark root, then a
//! post-pass scores every round against the task's reference posterior. The
//! output is one long-format CSV — `task,method,budget,round,seed,metric,
//! value` — with three metrics per round:
//!
//! * `c2st` — classifier two-sample test accuracy between estimator draws
//!   and reference-posterior draws at the observation (0.5 = perfect),
//! * `prior_mass` — estimator mass inside the prior support (1 − leakage),
//! * `true_posterior_mass` — fraction of reference draws the current
//!   truncated region retains (truncation-based runs only).
//!
//! A cell that fails (training collapse, sampler exhaustion, bad budget) is
//! recorded as a `failed` row and the sweep continues; a task whose
//! reference sampler fails gets empty reference-metric cells rather than
//! fabricated numbers. Reference draws use a fixed stream, so rerunning the
//! sweep reproduces the table byte for byte.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use tsnpe_core::engine::{persist, posterior_sample, posterior_view};
use tsnpe_core::seed::{self, phase};
use tsnpe_core::tasks::Task;
use tsnpe_core::{diagnostics, Error, Method, Result, RunConfig};

use crate::config::{BenchmarkSection, FileConfig};
use crate::{method_name, out_root};

/// Root seed for reference-posterior draws. Fixed and shared by every cell
/// so identical grids produce identical tables.
const REFERENCE_ROOT: u64 = 0;

/// Reference draws for one (task, observation), or `None` when the
/// reference sampler failed.
type ReferenceDraws = Option<Arc<Vec<Vec<f64>>>>;

struct Row {
    task: String,
    method: Method,
    budget: usize,
    round: usize,
    seed: u64,
    metric: &'static str,
    value: Option<f64>,
}

pub fn cmd_benchmark(config: &Path, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let file = FileConfig::load(config)?;
    let bench = file
        .benchmark
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [benchmark] section".into()))?;
    validate(bench)?;
    let rounds = bench.rounds.unwrap_or(10);
    let observations = bench.observations.clone().unwrap_or_else(|| vec![0]);
    let n_ref = bench.c2st_samples.unwrap_or(1000);

    let stem = config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "grid".into());
    let root = out.unwrap_or_else(|| out_root().join(format!("bench_{stem}")));
    std::fs::create_dir_all(&root)?;

    // References are per (task, observation); a failed reference marks its
    // cells unavailable instead of aborting the sweep.
    let mut references: HashMap<(String, u64), ReferenceDraws> = HashMap::new();

    let mut rows: Vec<Row> = Vec::new();
    let mut failures = 0usize;
    for task_name in &bench.tasks {
        for &obs in &observations {
            for &method in &bench.methods {
                for &budget in &bench.budgets {
                    for &seed in &bench.seeds {
                        let dir = cell_dir(&root, task_name, obs, method, budget, seed);
                        let reference = references
                            .entry((task_name.clone(), obs))
                            .or_insert_with(|| draw_reference(task_name, obs, n_ref))
                            .clone();
                        match run_cell(
                            &file, task_name, obs, method, budget, seed, rounds, &dir, resume,
                            reference,
                        ) {
                            Ok(cell_rows) => rows.extend(cell_rows),
                            Err(e) => {
                                failures += 1;
                                eprintln!(
                                    "cell {task_name}/{} budget {budget} seed {seed} failed: {e}",
                                    method_name(method)
                                );
                                rows.push(Row {
                                    task: task_name.clone(),
                                    method,
                                    budget,
                                    round: 0,
                                    seed,
                                    metric: "failed",
                                    value: None,
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    let table = root.join("benchmark.csv");
    write_table(&table, &rows)?;
    let cells = bench.tasks.len()
        * observations.len()
        * bench.methods.len()
        * bench.budgets.len()
        * bench.seeds.len();
    println!(
        "{} cells ({failures} failed), {} metric rows",
        cells,
        rows.len()
    );
    println!("benchmark table: {}", table.display());
    Ok(())
}

fn validate(bench: &BenchmarkSection) -> Result<()> {
    for (name, empty) in [
        ("tasks", bench.tasks.is_empty()),
        ("methods", bench.methods.is_empty()),
        ("budgets", bench.budgets.is_empty()),
        ("seeds", bench.seeds.is_empty()),
    ] {
        if empty {
            return Err(Error::Config(format!("[benchmark] {name} is empty")));
        }
    }
    if bench.rounds == Some(0) {
        return Err(Error::Config("[benchmark] rounds must be at least 1".into()));
    }
    Ok(())
}

fn cell_dir(
    root: &Path,
    task: &str,
    obs: u64,
    method: Method,
    budget: usize,
    seed: u64,
) -> PathBuf {
    let obs_part = if obs == 0 {
        String::new()
    } else {
        format!("_o{obs}")
    };
    root.join(task)
        .join(format!("{}{obs_part}_b{budget}_s{seed}", method_name(method)))
}

fn draw_reference(task: &str, obs: u64, n: usize) -> ReferenceDraws {
    let draw = || -> Result<Vec<Vec<f64>>> {
        Task::new(task, obs)?.reference_posterior(n, REFERENCE_ROOT)
    };
    match draw() {
        Ok(samples) => Some(Arc::new(samples)),
        Err(e) => {
            eprintln!("reference posterior for {task} (observation {obs}) unavailable: {e}");
            None
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    file: &FileConfig,
    task_name: &str,
    obs: u64,
    method: Method,
    budget: usize,
    seed: u64,
    rounds: usize,
    dir: &Path,
    resume: bool,
    reference: ReferenceDraws,
) -> Result<Vec<Row>> {
    let mut cfg = file.run_config_for(task_name)?;
    cfg.observation = obs;
    cfg.method = method;
    cfg.rounds = rounds;
    cfg.sims_per_round = budget / rounds;
    cfg.seed = seed;
    cfg.stop_after = None;
    cfg.coverage = None;
    // The post-pass below scores rounds itself with shared reference draws.
    cfg.metrics.reference_c2st = false;

    let outcome = tsnpe_core::run(&cfg, Some(dir), resume)?;
    let task = Task::new(task_name, obs)?;

    let mut rows = Vec::new();
    let row = |round: usize, metric: &'static str, value: Option<f64>| Row {
        task: task_name.to_string(),
        method,
        budget,
        round,
        seed,
        metric,
        value,
    };
    for record in &outcome.record.rounds {
        let r = record.round;
        rows.push(row(
            r,
            "prior_mass",
            record.metrics.leakage_fraction.map(|l| 1.0 - l),
        ));

        let rdir = persist::round_dir(dir, r);
        let ensemble = Arc::new(persist::read_estimator(&rdir.join("estimator.bin"))?);
        let eval = posterior_view(&cfg, &task, ensemble)?;

        let c2st = match &reference {
            Some(reference) => score_c2st(&*eval, &task, &cfg, r, reference)
                .map_err(|e| eprintln!("c2st at round {r} of {}: {e}", dir.display()))
                .ok(),
            None => None,
        };
        rows.push(row(r, "c2st", c2st));

        let retention = match (&reference, record.proposal.threshold) {
            (Some(reference), Some(tau)) => {
                let cond = eval.condition(&task.x_obs)?;
                let inside = reference
                    .iter()
                    .filter(|t| {
                        task.prior.supports(t)
                            && cond.log_prob(t).map(|lp| lp > tau).unwrap_or(false)
                    })
                    .count();
                Some(inside as f64 / reference.len() as f64)
            }
            _ => None,
        };
        rows.push(row(r, "true_posterior_mass", retention));
    }
    Ok(rows)
}

fn score_c2st(
    eval: &dyn tsnpe_core::DensityEstimator,
    task: &Task,
    cfg: &RunConfig,
    round: usize,
    reference: &[Vec<f64>],
) -> Result<f64> {
    let estimate = posterior_sample(
        eval,
        task,
        &task.x_obs,
        reference.len(),
        cfg.seed,
        &[round as u64, phase::METRICS, 1],
    )?;
    diagnostics::c2st(
        reference,
        &estimate,
        seed::derive(cfg.seed, &[round as u64, phase::METRICS, 2]),
    )
}

fn write_table(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "method", "budget", "round", "seed", "metric", "value"])?;
    for r in rows {
        w.write_record([
            r.task.as_str(),
            method_name(r.method),
            &r.budget.to_string(),
            &r.round.to_string(),
            &r.seed.to_string(),
            r.metric,
            &r.value.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
