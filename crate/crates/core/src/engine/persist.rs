//! On-disk run artifacts.
//!
//! A run directory is self-describing and append-only:
//!
//! ```text
//! <run>/
//!   config.json            exact configuration of the run
//!   round_001/
//!     dataset.csv          this round's simulations (round,theta_*,x_*,valid)
//!     estimator.bin        the ensemble trained on all data up to here
//!     proposal.json        the proposal derived from this round's estimator
//!     metrics.json         fixed-key quality metrics (values may be null)
//!     record.json          full round record (training report and all)
//!     coverage.csv         optional: empirical coverage curve
//!     e_values.csv         optional: the e-values behind the curve
//!   round_002/…
//! ```
//!
//! Floats in CSV files go through Rust's shortest-round-trip formatting, so
//! parsing a file back yields bit-identical values — resume depends on this.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::density::Ensemble;
use crate::diagnostics::Coverage;
use crate::error::{Error, Result};

pub fn round_dir(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join(format!("round_{round:03}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = fs::File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn write_estimator(path: &Path, ensemble: &Ensemble) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    ensemble.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_estimator(path: &Path) -> Result<Ensemble> {
    let file = fs::File::open(path)?;
    Ensemble::read_from(&mut BufReader::new(file))
}

/// Write one round's simulations. `round` is repeated per row so that
/// concatenating round files yields a well-formed pooled table.
pub fn write_dataset(
    path: &Path,
    round: usize,
    thetas: &[Vec<f64>],
    xs: &[Vec<f64>],
    valid: &[bool],
) -> Result<()> {
    if thetas.len() != xs.len() || thetas.len() != valid.len() {
        return Err(Error::dim("dataset rows", thetas.len(), xs.len().min(valid.len())));
    }
    let mut w = csv::Writer::from_path(path)?;
    let theta_dim = thetas.first().map_or(0, Vec::len);
    let x_dim = xs.first().map_or(0, Vec::len);
    let mut header = vec!["round".to_string()];
    header.extend((0..theta_dim).map(|d| format!("theta_{d}")));
    header.extend((0..x_dim).map(|d| format!("x_{d}")));
    header.push("valid".into());
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for ((theta, x), ok) in thetas.iter().zip(xs).zip(valid) {
        row.clear();
        row.push(round.to_string());
        row.extend(theta.iter().map(|v| format!("{v}")));
        row.extend(x.iter().map(|v| format!("{v}")));
        row.push(ok.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a round dataset back. Verifies the round column and reconstructs
/// (θ, x, valid) with the dimensions implied by the header.
#[allow(clippy::type_complexity)]
pub fn read_dataset(
    path: &Path,
    expected_round: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<bool>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let theta_dim = header.iter().filter(|h| h.starts_with("theta_")).count();
    let x_dim = header.iter().filter(|h| h.starts_with("x_")).count();
    if theta_dim == 0 || x_dim == 0 {
        return Err(Error::Format(format!(
            "{}: dataset header lacks theta_*/x_* columns",
            path.display()
        )));
    }
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let mut thetas = Vec::new();
    let mut xs = Vec::new();
    let mut valid = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 + theta_dim + x_dim {
            return Err(bad(format!("row {i} has {} fields", rec.len())));
        }
        let round: usize = rec[0].parse().map_err(|_| bad(format!("row {i}: bad round")))?;
        if round != expected_round {
            return Err(bad(format!(
                "row {i}: round {round}, expected {expected_round}"
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| bad(format!("row {i}: bad float '{s}'")))
        };
        let mut theta = Vec::with_capacity(theta_dim);
        for d in 0..theta_dim {
            theta.push(parse(&rec[1 + d])?);
        }
        let mut x = Vec::with_capacity(x_dim);
        for d in 0..x_dim {
            x.push(parse(&rec[1 + theta_dim + d])?);
        }
        let ok: bool = rec[1 + theta_dim + x_dim]
            .parse()
            .map_err(|_| bad(format!("row {i}: bad valid flag")))?;
        thetas.push(theta);
        xs.push(x);
        valid.push(ok);
    }
    Ok((thetas, xs, valid))
}

/// Coverage curve as `confidence_level,empirical_coverage`.
pub fn write_coverage_csv(path: &Path, coverage: &Coverage) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["confidence_level", "empirical_coverage"])?;
    for (c, v) in &coverage.curve {
        w.write_record([format!("{c}"), format!("{v}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Raw e-values and their integer counts, one row per calibration pair.
pub fn write_e_values_csv(path: &Path, coverage: &Coverage) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["e_value", "count"])?;
    for (e, c) in coverage.e_values.iter().zip(&coverage.counts) {
        w.write_record([format!("{e}"), format!("{c}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        // Values chosen to stress shortest-round-trip printing.
        let thetas = vec![
            vec![0.1 + 0.2, -1.0 / 3.0],
            vec![f64::MIN_POSITIVE, 1e300],
            vec![-0.0, 2.225_073_858_507_201e-308],
        ];
        let xs = vec![vec![1.5], vec![-2.5e-10], vec![9.999999999999998]];
        let valid = vec![true, false, true];
        write_dataset(&path, 3, &thetas, &xs, &valid).unwrap();
        let (t2, x2, v2) = read_dataset(&path, 3).unwrap();
        assert_eq!(thetas, t2);
        assert_eq!(xs, x2);
        assert_eq!(valid, v2);
    }

    #[test]
    fn dataset_rejects_wrong_round() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        write_dataset(&path, 1, &[vec![0.0]], &[vec![0.0]], &[true]).unwrap();
        assert!(matches!(read_dataset(&path, 2), Err(Error::Format(_))));
    }

    #[test]
    fn round_dirs_are_zero_padded() {
        let d = round_dir(Path::new("/tmp/run"), 7);
        assert_eq!(d, PathBuf::from("/tmp/run/round_007"));
    }
}
