//! Turn persisted artifacts into plot-ready CSVs and a markdown summary.
//!
//! Two input shapes, distinguished by what's on disk:
//!
//! * a **run directory** (holds `config.json`) → `report.md` with the
//!   resolved config and a per-round metric table, `metrics_long.csv` in
//!   tidy `round,metric,value` form, and — when the run computed coverage —
//!   a copy of the final `(level, coverage)` curve;
//! * a **benchmark table** (a CSV from the `benchmark` subcommand) →
//!   `report.md` with one budget × method table per task and metric, plus
//!   `pivot_<metric>.csv` files of final-round medians across seeds.
//!
//! Pure file transforms: rerunning overwrites outputs with identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tsnpe_core::engine::{persist, RoundRecord, RunConfig};
use tsnpe_core::{Error, Result};

use crate::{method_name, round_line};

pub fn cmd_report(input: &Path, out: Option<PathBuf>) -> Result<()> {
    if input.join("config.json").is_file() {
        report_run(input, out.unwrap_or_else(|| input.to_path_buf()))
    } else if input.is_file() {
        let parent = input.parent().unwrap_or(Path::new(".")).to_path_buf();
        report_table(input, out.unwrap_or(parent))
    } else {
        Err(Error::Config(format!(
            "{} is neither a run directory (no config.json) nor a table file",
            input.display()
        )))
    }
}

fn report_run(dir: &Path, out: PathBuf) -> Result<()> {
    let cfg: RunConfig = persist::read_json(&dir.join("config.json"))?;
    let mut rounds: Vec<RoundRecord> = Vec::new();
    loop {
        let path = persist::round_dir(dir, rounds.len() + 1).join("record.json");
        if !path.is_file() {
            break;
        }
        rounds.push(persist::read_json(&path)?);
    }
    if rounds.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no completed rounds",
            dir.display()
        )));
    }
    std::fs::create_dir_all(&out)?;

    // Tidy long-format metrics, one row per (round, metric) that exists.
    let mut w = csv::Writer::from_path(out.join("metrics_long.csv"))?;
    w.write_record(["round", "metric", "value"])?;
    for r in &rounds {
        let m = &r.metrics;
        let cells: [(&str, Option<f64>); 7] = [
            ("nll_val", m.nll_val),
            ("leakage_fraction", m.leakage_fraction),
            ("acceptance_rate", m.acceptance_rate),
            ("ess_min", m.ess_min),
            ("ess_mean", m.ess_mean),
            ("c2st", m.c2st),
            ("coverage_at_95", r.coverage.as_ref().map(|c| c.coverage_at_95)),
        ];
        for (metric, value) in cells {
            if let Some(v) = value {
                w.write_record([&r.round.to_string(), metric, &v.to_string()])?;
            }
        }
    }
    w.flush()?;

    // The final coverage curve is already plot-ready; surface a copy.
    let mut coverage_note = String::new();
    for r in rounds.iter().rev() {
        let src = persist::round_dir(dir, r.round).join("coverage.csv");
        if src.is_file() {
            std::fs::copy(&src, out.join("coverage.csv"))?;
            coverage_note = format!(
                "\nCoverage (round {}): max deviation {:.4}, KS {:.4}, \
                 coverage@0.95 {:.3} — curve in `coverage.csv`.\n",
                r.round,
                r.coverage.as_ref().map(|c| c.max_deviation).unwrap_or(f64::NAN),
                r.coverage.as_ref().map(|c| c.ks).unwrap_or(f64::NAN),
                r.coverage.as_ref().map(|c| c.coverage_at_95).unwrap_or(f64::NAN),
            );
            break;
        }
    }

    let mut md = String::new();
    let _ = writeln!(md, "# Run report: {}", dir.display());
    let _ = writeln!(md);
    let _ = writeln!(
        md,
        "Task `{}` (observation {}), method `{}`, seed {}.",
        cfg.task,
        cfg.observation,
        method_name(cfg.method),
        cfg.seed
    );
    let _ = writeln!(
        md,
        "{} of {} rounds completed, {} simulations per round, ε = {}.",
        rounds.len(),
        cfg.rounds,
        cfg.sims_per_round,
        cfg.epsilon
    );
    let _ = writeln!(md);
    let _ = writeln!(md, "| round | summary |");
    let _ = writeln!(md, "|---|---|");
    for r in &rounds {
        let line = round_line(r);
        let body = line.split_once(':').map(|(_, b)| b.trim()).unwrap_or(&line);
        let _ = writeln!(md, "| {} | {} |", r.round, body);
    }
    md.push_str(&coverage_note);
    let _ = writeln!(md, "\nTidy metrics in `metrics_long.csv`.");
    std::fs::write(out.join("report.md"), md)?;
    println!("report: {}", out.join("report.md").display());
    Ok(())
}

/// One parsed benchmark-table row.
struct TableRow {
    task: String,
    method: String,
    budget: usize,
    round: usize,
    seed: u64,
    metric: String,
    value: Option<f64>,
}

/// (metric, task, method, budget, seed) → latest (round, value) seen.
type FinalCells = BTreeMap<(String, String, String, usize, u64), (usize, Option<f64>)>;

fn report_table(table: &Path, out: PathBuf) -> Result<()> {
    let mut rdr = csv::Reader::from_path(table)?;
    let mut rows: Vec<TableRow> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Format(format!(
                "{}: expected 7 columns, found {}",
                table.display(),
                rec.len()
            )));
        }
        let parse_num = |i: usize, what: &str| -> Result<u64> {
            rec[i].parse().map_err(|_| {
                Error::Format(format!("{}: bad {what} '{}'", table.display(), &rec[i]))
            })
        };
        rows.push(TableRow {
            task: rec[0].to_string(),
            method: rec[1].to_string(),
            budget: parse_num(2, "budget")? as usize,
            round: parse_num(3, "round")? as usize,
            seed: parse_num(4, "seed")?,
            metric: rec[5].to_string(),
            value: if rec[6].is_empty() {
                None
            } else {
                Some(rec[6].parse().map_err(|_| {
                    Error::Format(format!("{}: bad value '{}'", table.display(), &rec[6]))
                })?)
            },
        });
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{} holds no rows", table.display())));
    }
    std::fs::create_dir_all(&out)?;

    // Final-round value per (metric, task, method, budget, seed)…
    let mut finals: FinalCells = BTreeMap::new();
    for r in &rows {
        if r.metric == "failed" {
            continue;
        }
        let key = (
            r.metric.clone(),
            r.task.clone(),
            r.method.clone(),
            r.budget,
            r.seed,
        );
        let entry = finals.entry(key).or_insert((0, None));
        if r.round >= entry.0 {
            *entry = (r.round, r.value);
        }
    }
    // …then the median across seeds.
    let mut pivots: BTreeMap<(String, String, String, usize), Vec<f64>> = BTreeMap::new();
    for ((metric, task, method, budget, _seed), (_round, value)) in &finals {
        if let Some(v) = value {
            pivots
                .entry((metric.clone(), task.clone(), method.clone(), *budget))
                .or_default()
                .push(*v);
        }
    }

    let metrics: Vec<String> = {
        let mut m: Vec<String> = pivots.keys().map(|k| k.0.clone()).collect();
        m.dedup();
        m
    };
    let mut md = String::new();
    let _ = writeln!(md, "# Benchmark report: {}", table.display());
    for metric in &metrics {
        let mut w = csv::Writer::from_path(out.join(format!("pivot_{metric}.csv")))?;
        w.write_record(["task", "method", "budget", "median", "seeds"])?;
        let _ = writeln!(md, "\n## {metric} (final round, median over seeds)\n");
        let mut current_task = String::new();
        for ((m, task, method, budget), values) in &pivots {
            if m != metric {
                continue;
            }
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let median = median_of(&sorted);
            w.write_record([
                task.as_str(),
                method.as_str(),
                &budget.to_string(),
                &median.to_string(),
                &values.len().to_string(),
            ])?;
            if *task != current_task {
                current_task = task.clone();
                let _ = writeln!(md, "\n**{task}**\n");
                let _ = writeln!(md, "| method | budget | median |");
                let _ = writeln!(md, "|---|---|---|");
            }
            let _ = writeln!(md, "| {method} | {budget} | {median:.4} |");
        }
        w.flush()?;
    }
    let failed: Vec<&TableRow> = rows.iter().filter(|r| r.metric == "failed").collect();
    if !failed.is_empty() {
        let _ = writeln!(md, "\n## Failed cells\n");
        for r in failed {
            let _ = writeln!(
                md,
                "- {} / {} at budget {}, seed {}",
                r.task, r.method, r.budget, r.seed
            );
        }
    }
    std::fs::write(out.join("report.md"), md)?;
    println!("report: {}", out.join("report.md").display());
    Ok(())
}

fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
