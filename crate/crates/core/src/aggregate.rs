//! Multi-seed aggregation of run logs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GqeError, Result};
use crate::trainer::{StepRecord, CSV_HEADER};

pub const CURVE_HEADER: &str = "step,mean,min,max";
pub const BLOCK_HEADER: &str = "run,block,first_step,min_energy";

/// Statistics of `min_energy_so_far` across runs at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn parse_run_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => return Err(GqeError::input(format!("unexpected run log header {h:?}"))),
        None => return Err(GqeError::input("empty run log")),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| parse_row(line).map_err(|e| GqeError::input(format!("row {}: {e}", i + 1))))
        .collect()
}

fn parse_row(line: &str) -> std::result::Result<StepRecord, String> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 7 {
        return Err(format!("expected 7 fields, found {}", f.len()));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    let real = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    Ok(StepRecord {
        step: int(f[0])?,
        temperature: real(f[1])?,
        batch_min_energy: real(f[2])?,
        min_energy_so_far: real(f[3])?,
        loss: if f[4].is_empty() { None } else { Some(real(f[4])?) },
        n_pairs: int(f[5])?,
        buffer_size: int(f[6])?,
    })
}

pub fn read_run_csv(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| GqeError::io(path, e))?;
    parse_run_csv(&text).map_err(|e| GqeError::input(format!("{}: {e}", path.display())))
}

/// Mean, min and max of `min_energy_so_far` per step. All runs must cover
/// the same steps in the same order.
pub fn aggregate_curves(runs: &[Vec<StepRecord>]) -> Result<Vec<CurvePoint>> {
    let first = runs.first().ok_or_else(|| GqeError::input("no runs to aggregate"))?;
    for (k, run) in runs.iter().enumerate() {
        let same = run.len() == first.len() && run.iter().zip(first).all(|(a, b)| a.step == b.step);
        if !same {
            return Err(GqeError::input(format!(
                "run {k} does not cover the same steps as run 0"
            )));
        }
    }
    Ok((0..first.len())
        .map(|i| {
            let values = runs.iter().map(|r| r[i].min_energy_so_far);
            let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for v in values {
                min = min.min(v);
                max = max.max(v);
                sum += v;
            }
            CurvePoint {
                step: first[i].step,
                // Rounding can push the mean of equal values past them.
                mean: (sum / runs.len() as f64).clamp(min, max),
                min,
                max,
            }
        })
        .collect())
}

/// Lowest `batch_min_energy` in each consecutive block of `block` steps;
/// a trailing partial block is included.
pub fn block_minima(records: &[StepRecord], block: usize) -> Result<Vec<(usize, f64)>> {
    if block == 0 {
        return Err(GqeError::input("block size must be positive"));
    }
    Ok(records
        .chunks(block)
        .map(|c| {
            let min = c.iter().map(|r| r.batch_min_energy).fold(f64::INFINITY, f64::min);
            (c[0].step, min)
        })
        .collect())
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in curve {
        let _ = writeln!(out, "{},{},{},{}", p.step, p.mean, p.min, p.max);
    }
    out
}

/// One row per (run, block); `names` label the runs.
pub fn block_minima_to_csv(names: &[String], runs: &[Vec<StepRecord>], block: usize) -> Result<String> {
    let mut out = String::from(BLOCK_HEADER);
    out.push('\n');
    for (name, run) in names.iter().zip(runs) {
        for (b, (first_step, min)) in block_minima(run, block)?.into_iter().enumerate() {
            let _ = writeln!(out, "{name},{b},{first_step},{min}");
        }
    }
    Ok(out)
}
