//! One-axis ablation sweeps: every (value x seed) cell is a full run in its
//! own directory; the table aggregates final test accuracy per value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::{self, Dataset};
use crate::drloc::Variant;
use crate::error::{Error, Result};
use crate::trainer::run_experiment;

pub const TABLE_FILE: &str = "results.csv";
pub const CELLS_FILE: &str = "cells.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    M,
    Lambda,
    Variant,
    /// Side of the token grid; realized through the patch size.
    GridSide,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::M => "m",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Variant => "variant",
            SweepAxis::GridSide => "grid_side",
        }
    }

    /// Applies one axis value to a copy of `base`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{} value {value:?}: {e}", self.name()));
        let mut c = base.clone();
        match self {
            SweepAxis::M => c.loss.m = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::Lambda => c.loss.lambda = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::Variant => c.loss.variant = value.parse::<Variant>()?,
            SweepAxis::GridSide => {
                let g: usize = value.parse().map_err(|e| bad(&e))?;
                if g == 0 || !c.model.image_side.is_multiple_of(g) {
                    return Err(bad(&format!("does not divide image_side {}", c.model.image_side)));
                }
                c.model.patch_side = c.model.image_side / g;
                c.model.pool_final_grid = false;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(SweepAxis::M),
            "lambda" => Ok(SweepAxis::Lambda),
            "variant" => Ok(SweepAxis::Variant),
            "grid_side" => Ok(SweepAxis::GridSide),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected m, lambda, variant or grid_side)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: std::result::Result<f64, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub value: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub runs: usize,
    pub failed: usize,
}

/// Mean and sample standard deviation (absent below two values).
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

pub fn aggregate(values: &[String], cells: &[Cell]) -> Vec<Row> {
    values
        .iter()
        .map(|v| {
            let mine: Vec<&Cell> = cells.iter().filter(|c| &c.value == v).collect();
            let accs: Vec<f64> = mine.iter().filter_map(|c| c.result.as_ref().ok().copied()).collect();
            let (mean, std) = mean_std(&accs);
            Row {
                value: v.clone(),
                mean,
                std,
                runs: accs.len(),
                failed: mine.len() - accs.len(),
            }
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_default()
}

/// Top-1 accuracy (percent) per axis value: `value, mean, std, runs, failed`.
pub fn table_csv(axis: SweepAxis, rows: &[Row]) -> String {
    let mut s = format!("{},top1_mean,top1_std,runs,failed\n", axis.name());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_field(&r.value),
            pct(r.mean),
            pct(r.std),
            r.runs,
            r.failed
        );
    }
    s
}

pub fn cells_csv(axis: SweepAxis, cells: &[Cell]) -> String {
    let mut s = format!("{},seed,test_acc,error\n", axis.name());
    for c in cells {
        let (acc, err) = match &c.result {
            Ok(a) => (serde_json::to_string(a).unwrap_or_default(), String::new()),
            Err(e) => (String::new(), csv_field(e)),
        };
        let _ = writeln!(s, "{},{},{acc},{err}", csv_field(&c.value), c.seed);
    }
    s
}

pub fn cell_dir(out: &Path, axis: SweepAxis, value: &str, seed: u64) -> PathBuf {
    out.join(format!("{}_{value}", axis.name()))
        .join(format!("seed_{seed}"))
}

fn run_cell(
    base: &ExperimentConfig,
    data: &Dataset,
    axis: SweepAxis,
    value: &str,
    seed: u64,
    dir: &Path,
    record_timing: bool,
) -> Result<f64> {
    let c = axis.apply(base, value)?;
    let spec = c.run_spec(seed, 1, record_timing);
    let outcome = run_experiment(&spec, data, Some(dir))?;
    outcome
        .run
        .final_record()
        .and_then(|r| r.test_acc)
        .ok_or_else(|| Error::Numerical("run finished without a final evaluation".into()))
}

/// Runs every cell (up to `jobs` at a time), then writes the tables.
/// A failing cell is recorded in the tables; the others still run.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out: &Path,
    jobs: usize,
    record_timing: bool,
) -> Result<(Vec<Row>, Vec<Cell>)> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    base.validate()?;
    let data = data::load(&base.dataset, base.model.image_side, base.model.classes)?;
    let plan: Vec<(String, u64)> = values
        .iter()
        .flat_map(|v| base.seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells: Vec<Cell> = pool.install(|| {
        plan.par_iter()
            .map(|(v, seed)| {
                let dir = cell_dir(out, axis, v, *seed);
                let result = run_cell(base, &data, axis, v, *seed, &dir, record_timing).map_err(|e| e.to_string());
                Cell {
                    value: v.clone(),
                    seed: *seed,
                    dir,
                    result,
                }
            })
            .collect()
    });
    let rows = aggregate(values, &cells);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let table = out.join(TABLE_FILE);
    std::fs::write(&table, table_csv(axis, &rows)).map_err(|e| Error::io(&table, e))?;
    let cells_path = out.join(CELLS_FILE);
    std::fs::write(&cells_path, cells_csv(axis, &cells)).map_err(|e| Error::io(&cells_path, e))?;
    Ok((rows, cells))
}
