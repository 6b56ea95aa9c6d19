//! Curve files for plotting: one `epoch,value` CSV per (metric, run).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::{read_metrics, EpochRecord, METRICS_FILE};

pub const METRICS: [&str; 7] = [
    "lr",
    "loss_ce",
    "loss_aux",
    "loss_total",
    "test_acc",
    "pretext_l1",
    "sec_per_batch",
];

fn metric(r: &EpochRecord, name: &str) -> Option<f64> {
    match name {
        "lr" => Some(r.lr),
        "loss_ce" => Some(r.loss_ce),
        "loss_aux" => r.loss_aux,
        "loss_total" => Some(r.loss_total),
        "test_acc" => r.test_acc,
        "pretext_l1" => r.pretext_l1,
        "sec_per_batch" => r.sec_per_batch,
        _ => None,
    }
}

/// Run directories under `root` (itself, or any descendant holding a
/// metrics file), sorted.
fn find_runs(root: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if root.join(METRICS_FILE).is_file() {
        found.push(root.to_path_buf());
        return Ok(());
    }
    if !root.is_dir() {
        return Ok(());
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        find_runs(&d, found)?;
    }
    Ok(())
}

fn run_label(root: &Path, run: &Path) -> String {
    let base = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let rel = run.strip_prefix(root).unwrap_or(run);
    std::iter::once(base)
        .chain(rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()))
        .collect::<Vec<_>>()
        .join("__")
}

/// Writes `{out}/{run}__{metric}.csv` for every metric with at least one
/// value. Values are formatted exactly as in the metrics file.
pub fn emit_plot_data(roots: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    let mut missing = Vec::new();
    for root in roots {
        let before = runs.len();
        let mut found = Vec::new();
        find_runs(root, &mut found)?;
        runs.extend(found.into_iter().map(|r| (run_label(root, &r), r)));
        if runs.len() == before {
            missing.push(root.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no {METRICS_FILE} found for runs: {}",
            missing.join(", ")
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (label, dir) in runs {
        let records = read_metrics(&dir.join(METRICS_FILE))?;
        for name in METRICS {
            let mut text = String::from("epoch,value\n");
            let mut any = false;
            for r in &records {
                if let Some(v) = metric(r, name) {
                    any = true;
                    text.push_str(&format!(
                        "{},{}\n",
                        r.epoch,
                        serde_json::to_string(&v).unwrap_or_default()
                    ));
                }
            }
            if any {
                let path = out.join(format!("{label}__{name}.csv"));
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
