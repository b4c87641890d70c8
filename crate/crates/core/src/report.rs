//! Variant-by-target result tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::SCHEMA_VERSION;
use crate::trainer::RunResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// One cell per target, in [`ReportTable::targets`] order.
    pub cells: Vec<Cell>,
    pub average: f64,
}

/// Rows are runs (usually one per variant), columns are target domains plus
/// the average of per-target means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub schema_version: u32,
    pub targets: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Row indices holding the best value of each column; the last entry is
    /// the Average column.
    pub best: Vec<Vec<usize>>,
}

/// Aggregates labelled runs. Every run must cover the same target domains.
pub fn build_report(runs: &[(String, RunResult)]) -> Result<ReportTable> {
    let (_, first) = runs.first().ok_or_else(|| Error::Config("no runs to report".into()))?;
    let targets: Vec<String> = first.targets.iter().map(|t| t.target.clone()).collect();
    let mut rows = Vec::with_capacity(runs.len());
    for (label, run) in runs {
        let mut cells = Vec::with_capacity(targets.len());
        let mut names: Vec<&str> = run.targets.iter().map(|t| t.target.as_str()).collect();
        let mut expected: Vec<&str> = targets.iter().map(String::as_str).collect();
        names.sort_unstable();
        expected.sort_unstable();
        if names != expected {
            return Err(Error::Dataset(format!(
                "run '{label}' covers domains [{}] but '{}' covers [{}]",
                names.join(", "),
                runs[0].0,
                expected.join(", ")
            )));
        }
        for t in &targets {
            let r = run.targets.iter().find(|r| &r.target == t).expect("checked above");
            cells.push(Cell { mean: r.mean, std: r.std });
        }
        let average = cells.iter().map(|c| c.mean).sum::<f64>() / cells.len() as f64;
        rows.push(ReportRow {
            label: label.clone(),
            cells,
            average,
        });
    }
    let column = |j: usize, r: &ReportRow| if j < targets.len() { r.cells[j].mean } else { r.average };
    let best = (0..=targets.len())
        .map(|j| {
            let top = rows.iter().map(|r| column(j, r)).fold(f64::NEG_INFINITY, f64::max);
            (0..rows.len()).filter(|&i| column(j, &rows[i]) == top).collect()
        })
        .collect();
    Ok(ReportTable {
        schema_version: SCHEMA_VERSION,
        targets,
        rows,
        best,
    })
}

pub fn format_cell(c: Cell) -> String {
    format!("{:.3} ± {:.3}", c.mean, c.std)
}

impl ReportTable {
    /// Plain-text table; the best entry of each column carries a `*`.
    pub fn render(&self) -> String {
        let mut header = vec!["method".to_string()];
        header.extend(self.targets.iter().cloned());
        header.push("Average".into());
        let mut lines: Vec<Vec<String>> = vec![header];
        for (i, row) in self.rows.iter().enumerate() {
            let mark = |j: usize| if self.best[j].contains(&i) { "*" } else { " " };
            let mut line = vec![row.label.clone()];
            for (j, c) in row.cells.iter().enumerate() {
                line.push(format!("{}{}", format_cell(*c), mark(j)));
            }
            line.push(format!("{:.3}{}", row.average, mark(self.targets.len())));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|j| lines.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        out.push_str("* best in column\n");
        out
    }
}
