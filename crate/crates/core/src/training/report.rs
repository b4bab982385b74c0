//! Result tables (markdown and CSV) and on-disk run summaries.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{aggregate_runs, SetMetrics};

use super::experiment::{common_maps, mean_metrics};
use super::{ExperimentResult, Result, RunSetup, TrainingError};

/// One run's identity and test metrics, stored as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub setup: RunSetup,
    pub metrics: SetMetrics,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// `(column title, key, scale)`; ratio metrics are shown in percent.
const COLUMNS: [(&str, &str, f64); 7] = [
    ("Dice (%)", "dice", 100.0),
    ("mIoU (%)", "iou", 100.0),
    ("Accuracy (%)", "accuracy", 100.0),
    ("Precision (%)", "precision", 100.0),
    ("Recall (%)", "recall", 100.0),
    ("HDD (px)", "hausdorff", 1.0),
    ("AUC (%)", "auc", 100.0),
];

/// One row per label. Rows with several runs show `mean ± SD, (low, high)`,
/// single runs show the value alone, both at two decimals.
pub fn format_table(rows: &[(String, Vec<SetMetrics>)]) -> Result<Table> {
    let mut header = vec!["Method".to_string()];
    header.extend(COLUMNS.iter().map(|c| c.0.to_string()));
    let mut out = Vec::with_capacity(rows.len());
    for (label, runs) in rows {
        let mut cells = vec![label.clone()];
        if runs.len() >= 2 {
            let report = aggregate_runs(&common_maps(runs))?;
            for (_, key, scale) in COLUMNS {
                cells.push(match report.metrics.get(key) {
                    Some(stats) => stats.format_cell(scale, 2),
                    None => "n/a".into(),
                });
            }
        } else {
            let map = mean_metrics(runs).to_map();
            for (_, key, scale) in COLUMNS {
                cells.push(match map.get(key) {
                    Some(v) => format!("{:.2}", v * scale),
                    None => "n/a".into(),
                });
            }
        }
        out.push(cells);
    }
    Ok(Table { header, rows: out })
}

pub fn table_markdown(table: &Table) -> String {
    let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
    let mut s = line(&table.header);
    s.push_str(&line(&vec!["---".to_string(); table.header.len()]));
    for r in &table.rows {
        s.push_str(&line(r));
    }
    s
}

/// RFC 4180 CSV with CRLF line endings.
pub fn table_csv(table: &Table) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| TrainingError::Corrupt(format!("csv: {e}"));
    w.write_record(&table.header).map_err(csv_err)?;
    for r in &table.rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| TrainingError::Corrupt(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output of UTF-8 cells"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| TrainingError::io(path, e))
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Write `results.json`, `table.md`, `table.csv`, and per-run
/// `runs/<row>/run_<k>/{summary.json,log.csv}` under `dir`.
pub fn write_experiment(result: &ExperimentResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| TrainingError::io(dir, e))?;
    write(&dir.join("results.json"), serde_json::to_vec_pretty(result)?)?;
    let rows: Vec<(String, Vec<SetMetrics>)> = result
        .rows
        .iter()
        .map(|r| (r.label.clone(), r.runs.iter().map(|x| x.metrics).collect()))
        .collect();
    let table = format_table(&rows)?;
    write(&dir.join("table.md"), table_markdown(&table))?;
    write(&dir.join("table.csv"), table_csv(&table)?)?;
    for (i, row) in result.rows.iter().enumerate() {
        for run in &row.runs {
            let run_dir = dir
                .join("runs")
                .join(format!("{i:02}_{}", slug(&row.label)))
                .join(format!("run_{:02}", run.setup.run));
            fs::create_dir_all(&run_dir).map_err(|e| TrainingError::io(&run_dir, e))?;
            let summary = RunSummary {
                label: row.label.clone(),
                setup: run.setup.clone(),
                metrics: run.metrics,
            };
            write(&run_dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
            write(&run_dir.join("log.csv"), run.log.to_csv())?;
        }
    }
    Ok(())
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| TrainingError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| TrainingError::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "summary.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Every `summary.json` below `dir`, in sorted path order.
pub fn read_run_summaries(dir: impl AsRef<Path>) -> Result<Vec<RunSummary>> {
    let mut paths = Vec::new();
    collect(dir.as_ref(), &mut paths)?;
    paths
        .iter()
        .map(|p| {
            let text = fs::read(p).map_err(|e| TrainingError::io(p, e))?;
            Ok(serde_json::from_slice(&text)?)
        })
        .collect()
}
