//! Metric tables over trained runs and comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use ptrag_core::io::read_json;
use ptrag_core::metrics::{higher_is_better, MetricsReport};
use ptrag_core::trainer::CompareReport;

use crate::{CliError, METRICS_FILE, SIGNIFICANCE_FILE};

/// Row groups in display order.
pub const GROUPS: [(&str, &[&str]); 3] = [
    ("Correlations", &["pearson_deg", "spearman_deg"]),
    ("Reconstruction", &["mse", "rmse", "mae", "mse_pca50"]),
    ("Distributional", &["w1", "w2", "energy", "mmd"]),
];

/// One model column: overall values plus significance markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub label: String,
    pub values: BTreeMap<String, f64>,
    pub markers: BTreeMap<String, String>,
}

pub struct Table {
    pub text: String,
    pub csv: String,
}

/// Median over seeds for each model, with the markers of its test against
/// the reference.
pub fn columns_from_compare(report: &CompareReport) -> Vec<Column> {
    report
        .models
        .iter()
        .map(|m| {
            let markers = report
                .entries
                .iter()
                .filter(|e| e.model == m.label && !e.marker.is_empty())
                .map(|e| (e.metric.clone(), e.marker.clone()))
                .collect();
            Column { label: m.label.clone(), values: m.median.clone(), markers }
        })
        .collect()
}

pub fn column_from_metrics(report: &MetricsReport) -> Column {
    let values = GROUPS
        .iter()
        .flat_map(|(_, ms)| ms.iter())
        .filter_map(|&m| report.overall(m).map(|s| (m.to_string(), s.mean)))
        .collect();
    Column { label: report.model.clone(), values, markers: BTreeMap::new() }
}

/// Columns stored in `dir`: a comparison if it has significance.json, else a
/// single run.
pub fn load_columns(dir: &Path) -> Result<Vec<Column>, CliError> {
    let sig = dir.join(SIGNIFICANCE_FILE);
    if sig.is_file() {
        let report: CompareReport =
            read_json(&sig).map_err(|e| CliError::runtime(format!("{}: {e}", sig.display())))?;
        return Ok(columns_from_compare(&report));
    }
    let met = dir.join(METRICS_FILE);
    if met.is_file() {
        let report: MetricsReport =
            read_json(&met).map_err(|e| CliError::runtime(format!("{}: {e}", met.display())))?;
        return Ok(vec![column_from_metrics(&report)]);
    }
    Err(CliError::usage(format!(
        "{} holds neither {SIGNIFICANCE_FILE} nor {METRICS_FILE}",
        dir.display()
    )))
}

/// Index of the best column for `metric`; the earliest wins ties.
pub fn best_column(columns: &[Column], metric: &str) -> Option<usize> {
    let up = higher_is_better(metric);
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in columns.iter().enumerate() {
        let Some(&v) = c.values.get(metric) else { continue };
        if !v.is_finite() {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, b)) => if up { v > b } else { v < b },
        };
        if better {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn cell(columns: &[Column], i: usize, metric: &str, best: Option<usize>) -> String {
    let c = &columns[i];
    let Some(v) = c.values.get(metric) else {
        return "-".to_string();
    };
    let num = format!("{v:.4}");
    let num = if best == Some(i) { format!("**{num}**") } else { num };
    match c.markers.get(metric) {
        Some(m) => format!("{num}{m}"),
        None => num,
    }
}

fn dedupe(columns: &[Column]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    columns
        .iter()
        .map(|c| {
            let n = seen.entry(c.label.as_str()).or_insert(0);
            *n += 1;
            if *n == 1 { c.label.clone() } else { format!("{}#{n}", c.label) }
        })
        .collect()
}

pub fn render(columns: &[Column]) -> Result<Table, CliError> {
    if columns.is_empty() {
        return Err(CliError::usage("nothing to report"));
    }
    let labels = dedupe(columns);
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["metric".to_string()];
    header.extend(labels.iter().cloned());
    let mut csv = csv::Writer::from_writer(Vec::new());
    let mut csv_header = vec!["group".to_string(), "metric".to_string(), "direction".to_string()];
    csv_header.extend(labels.iter().cloned());
    csv.write_record(&csv_header).map_err(|e| CliError::runtime(e.to_string()))?;

    let mut group_rows = Vec::new();
    for (group, metrics) in GROUPS {
        group_rows.push(grid.len());
        grid.push(vec![group.to_string()]);
        for &m in metrics {
            let arrow = if higher_is_better(m) { "↑" } else { "↓" };
            let best = best_column(columns, m);
            let cells: Vec<String> = (0..columns.len()).map(|i| cell(columns, i, m, best)).collect();
            let mut row = vec![format!("  {m} {arrow}")];
            row.extend(cells.iter().cloned());
            grid.push(row);
            let mut rec = vec![group.to_string(), m.to_string(), arrow.to_string()];
            rec.extend(cells);
            csv.write_record(&rec).map_err(|e| CliError::runtime(e.to_string()))?;
        }
    }

    let ncol = header.len();
    let mut widths = vec![0usize; ncol];
    for row in std::iter::once(&header).chain(grid.iter().filter(|r| r.len() == ncol)) {
        for (w, s) in widths.iter_mut().zip(row) {
            *w = (*w).max(s.chars().count());
        }
    }
    let line = |row: &[String]| {
        let mut s = String::new();
        for (j, (w, c)) in widths.iter().zip(row).enumerate() {
            if j > 0 {
                s.push_str("  ");
            }
            s.push_str(c);
            s.extend(std::iter::repeat_n(' ', w - c.chars().count()));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut text = line(&header);
    for (r, row) in grid.iter().enumerate() {
        if group_rows.contains(&r) {
            text.push_str(&row[0]);
            text.push('\n');
        } else {
            text.push_str(&line(row));
        }
    }
    text.push_str("markers: † p<0.01, †† p<0.05, ††† p<0.1 (FDR-adjusted, against the reference)\n");
    let csv = String::from_utf8(csv.into_inner().map_err(|e| CliError::runtime(e.to_string()))?)
        .expect("utf8");
    Ok(Table { text, csv })
}
