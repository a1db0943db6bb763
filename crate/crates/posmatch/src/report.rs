//! Aggregate CSVs and markdown tables for an experiment directory.
//!
//! Everything here is a pure function of the per-run `report.json` files, so
//! `posmatch report` on a finished experiment reproduces the files written at
//! the end of `posmatch experiment`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use posmatch_core::faireval::{aggregate, FairnessReport, MetricStat, SeedAggregate};
use posmatch_core::losses::MethodKind;

use crate::error::{Error, Result};
use crate::experiment::{FAILURE_FILE, RUNS_DIR};
use crate::run::{read_report, REPORT_FILE};

pub const RUNS_CSV: &str = "runs.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const TABLES_MD: &str = "tables.md";

/// One (method, seed) cell; `report` is `None` when the run failed.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub method: MethodKind,
    pub seed_index: u64,
    pub report: Option<FairnessReport>,
}

/// Per-method aggregate over successful seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: MethodKind,
    pub attempted: usize,
    pub aggregate: Option<SeedAggregate>,
    /// Class names and attribute names of the evaluated dataset, in order.
    pub class_names: Vec<String>,
    pub attributes: Vec<String>,
}

impl MethodSummary {
    pub fn failed(&self) -> usize {
        self.attempted - self.aggregate.as_ref().map_or(0, |a| a.runs)
    }

    pub fn stat(&self, key: &str) -> Option<&MetricStat> {
        self.aggregate.as_ref().and_then(|a| a.metrics.get(key))
    }
}

/// Groups cells by method (in [`MethodKind::ALL`] order) and aggregates the
/// successful runs of each.
pub fn summarize(cells: &[CellResult]) -> Result<Vec<MethodSummary>> {
    let mut by_method: BTreeMap<MethodKind, Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        by_method.entry(c.method).or_default().push(c);
    }
    let mut out = Vec::new();
    for (method, cells) in by_method {
        let reports: Vec<FairnessReport> = cells.iter().filter_map(|c| c.report.clone()).collect();
        let aggregate = if reports.is_empty() { None } else { Some(aggregate(&reports)?) };
        let (class_names, attributes) = reports
            .first()
            .map(|r| (r.class_names.clone(), r.attributes.iter().map(|a| a.name.clone()).collect()))
            .unwrap_or_default();
        out.push(MethodSummary { method, attempted: cells.len(), aggregate, class_names, attributes });
    }
    Ok(out)
}

/// Reads every cell under `root/runs/`, in method then seed order.
pub fn collect_cells(root: &Path) -> Result<Vec<CellResult>> {
    let runs = root.join(RUNS_DIR);
    let mut cells = Vec::new();
    for method in MethodKind::ALL {
        let dir = runs.join(method.as_str());
        if !dir.is_dir() {
            continue;
        }
        let mut seeds: Vec<(u64, std::path::PathBuf)> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            if let Some(k) = name.to_str().and_then(|n| n.strip_prefix("seed_")).and_then(|k| k.parse().ok()) {
                seeds.push((k, entry.path()));
            }
        }
        seeds.sort();
        for (seed_index, path) in seeds {
            let report_path = path.join(REPORT_FILE);
            let report = if report_path.exists() && !path.join(FAILURE_FILE).exists() {
                Some(read_report(&report_path)?)
            } else {
                None
            };
            cells.push(CellResult { method, seed_index, report });
        }
    }
    if cells.is_empty() {
        return Err(Error::Config(format!("no runs found under {}", runs.display())));
    }
    Ok(cells)
}

fn csv_write<W: std::io::Write>(w: &mut csv::Writer<W>, row: &[String], path: &Path) -> Result<()> {
    w.write_record(row).map_err(|source| Error::Csv { path: path.to_path_buf(), source })
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// One row per cell with its headline metrics.
pub fn write_runs_csv(cells: &[CellResult], path: &Path) -> Result<()> {
    let keys: BTreeSet<String> = cells
        .iter()
        .filter_map(|c| c.report.as_ref())
        .flat_map(|r| r.metrics().into_keys())
        .filter(|k| k == "accuracy" || k == "weighted_f1" || k.starts_with("fairness/"))
        .collect();
    let mut w = csv::Writer::from_path(path).map_err(|source| Error::Csv { path: path.to_path_buf(), source })?;
    let mut header = vec!["method".to_string(), "seed_index".into(), "status".into()];
    header.extend(keys.iter().cloned());
    csv_write(&mut w, &header, path)?;
    for c in cells {
        let mut row = vec![c.method.as_str().to_string(), c.seed_index.to_string()];
        match &c.report {
            Some(r) => {
                row.push("ok".into());
                let m = r.metrics();
                row.extend(keys.iter().map(|k| m.get(k).copied().flatten().map(num).unwrap_or_default()));
            }
            None => {
                row.push("failed".into());
                row.extend(keys.iter().map(|_| String::new()));
            }
        }
        csv_write(&mut w, &row, path)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per (method, metric) with mean, sample std, count, min and max.
pub fn write_aggregate_csv(summaries: &[MethodSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|source| Error::Csv { path: path.to_path_buf(), source })?;
    let header = ["method", "metric", "mean", "std", "n", "min", "max", "failed_runs"];
    csv_write(&mut w, &header.map(String::from), path)?;
    for s in summaries {
        let Some(agg) = &s.aggregate else {
            let row = [s.method.as_str(), "", "", "", "0", "", "", &s.failed().to_string()].map(String::from);
            csv_write(&mut w, &row, path)?;
            continue;
        };
        for (key, st) in &agg.metrics {
            let row = [
                s.method.as_str().to_string(),
                key.clone(),
                num(st.mean),
                num(st.std),
                st.n.to_string(),
                num(st.min),
                num(st.max),
                s.failed().to_string(),
            ];
            csv_write(&mut w, &row, path)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn pct(st: Option<&MetricStat>) -> Option<f64> {
    st.map(|s| 100.0 * s.mean)
}

fn cell_text(st: Option<&MetricStat>) -> String {
    match st {
        Some(s) if s.n > 1 => format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.std),
        Some(s) => format!("{:.1}", 100.0 * s.mean),
        None => "—".into(),
    }
}

/// Index of the largest value among methods trained without group labels.
fn best_no_label(summaries: &[MethodSummary], value: impl Fn(&MethodSummary) -> Option<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in summaries.iter().enumerate() {
        if s.method.needs_group_labels() {
            continue;
        }
        if let Some(v) = value(s).filter(|v| v.is_finite()) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn bold_if(text: String, bold: bool) -> String {
    if bold && text != "—" {
        format!("**{text}**")
    } else {
        text
    }
}

fn method_label(s: &MethodSummary) -> String {
    let mut label = s.method.display_name().to_string();
    if s.failed() > 0 {
        let _ = write!(label, " ({}/{} runs failed)", s.failed(), s.attempted);
    }
    label
}

fn labels_column(m: MethodKind) -> &'static str {
    if m.needs_group_labels() {
        "yes"
    } else {
        "no"
    }
}

/// Renders the classification, fairness, and per-class fairness tables.
pub fn render_tables(summaries: &[MethodSummary]) -> String {
    let mut md = String::new();
    let ce = summaries.iter().find(|s| s.method == MethodKind::CeBaseline).and_then(|s| pct(s.stat("accuracy")));
    let attributes: Vec<String> =
        summaries.iter().find(|s| !s.attributes.is_empty()).map(|s| s.attributes.clone()).unwrap_or_default();
    let class_names: Vec<String> =
        summaries.iter().find(|s| !s.class_names.is_empty()).map(|s| s.class_names.clone()).unwrap_or_default();
    let note = "Mean ± sample standard deviation over seeds, in percent. Bold marks the best method among those trained without protected-attribute labels.\n\n";

    md.push_str("## Classification performance\n\n");
    md.push_str(note);
    md.push_str("| Method | Group labels | Accuracy | Weighted F1 | Δ CE |\n|---|---|---|---|---|\n");
    let best_acc = best_no_label(summaries, |s| pct(s.stat("accuracy")));
    let best_f1 = best_no_label(summaries, |s| pct(s.stat("weighted_f1")));
    for (i, s) in summaries.iter().enumerate() {
        let delta = match (pct(s.stat("accuracy")), ce) {
            (Some(a), Some(c)) => format!("{:+.1}", a - c),
            _ => "—".into(),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            method_label(s),
            labels_column(s.method),
            bold_if(cell_text(s.stat("accuracy")), best_acc == Some(i)),
            bold_if(cell_text(s.stat("weighted_f1")), best_f1 == Some(i)),
            delta
        );
    }

    if !attributes.is_empty() {
        md.push_str("\n## Fairness score\n\n");
        md.push_str(note);
        md.push_str("| Method | Group labels |");
        for a in &attributes {
            let _ = write!(md, " {a} |");
        }
        md.push_str("\n|---|---|");
        md.push_str(&"---|".repeat(attributes.len()));
        md.push('\n');
        let best: Vec<Option<usize>> =
            attributes.iter().map(|a| best_no_label(summaries, |s| pct(s.stat(&format!("fairness/{a}"))))).collect();
        for (i, s) in summaries.iter().enumerate() {
            let _ = write!(md, "| {} | {} |", method_label(s), labels_column(s.method));
            for (a, b) in attributes.iter().zip(&best) {
                let _ = write!(md, " {} |", bold_if(cell_text(s.stat(&format!("fairness/{a}"))), *b == Some(i)));
            }
            md.push('\n');
        }
    }

    for a in &attributes {
        let _ = write!(md, "\n## Per-class fairness: {a}\n\n");
        md.push_str(note);
        md.push_str("| Method |");
        for c in &class_names {
            let _ = write!(md, " {c} |");
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(class_names.len()));
        md.push('\n');
        let keys: Vec<String> = class_names.iter().map(|c| format!("class_fairness/{a}/{c}")).collect();
        let best: Vec<Option<usize>> = keys.iter().map(|k| best_no_label(summaries, |s| pct(s.stat(k)))).collect();
        for (i, s) in summaries.iter().enumerate() {
            let _ = write!(md, "| {} |", method_label(s));
            for (k, b) in keys.iter().zip(&best) {
                let _ = write!(md, " {} |", bold_if(cell_text(s.stat(k)), *b == Some(i)));
            }
            md.push('\n');
        }
    }
    md
}

/// Writes `runs.csv`, `aggregate.csv` and `tables.md` into `root`.
pub fn write_summary(cells: &[CellResult], root: &Path) -> Result<Vec<MethodSummary>> {
    let summaries = summarize(cells)?;
    write_runs_csv(cells, &root.join(RUNS_CSV))?;
    write_aggregate_csv(&summaries, &root.join(AGGREGATE_CSV))?;
    let path = root.join(TABLES_MD);
    fs::write(&path, render_tables(&summaries)).map_err(|e| Error::io(&path, e))?;
    Ok(summaries)
}
