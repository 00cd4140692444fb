//! Published metric tables shipped as data, for checking the relative-gain
//! arithmetic without any training.

use super::{MetricsReport, TaskResult};
use crate::error::{Error, Result};

pub const TABLES: &str = include_str!("../../fixtures/reference_tables.tsv");

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceRow {
    pub group: String,
    pub row: String,
    pub tasks: Vec<String>,
    pub values: Vec<f64>,
    pub delta_mtl: Option<f64>,
    pub gains: Option<Vec<f64>>,
}

/// Direction and metric name of the tasks appearing in the tables.
pub fn task_metric(task: &str) -> Option<(&'static str, bool)> {
    match task {
        "seg" | "parts" => Some(("miou", false)),
        "depth" => Some(("rmse", true)),
        "normals" => Some(("merr", true)),
        "edges" => Some(("odsf", false)),
        "sal" => Some(("maxf", false)),
        _ => None,
    }
}

fn parse_list(field: &str, line: usize) -> Result<Option<Vec<f64>>> {
    if field == "-" {
        return Ok(None);
    }
    field
        .split(',')
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::Format(format!("reference line {line}: bad number {v:?}")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn parse(text: &str) -> Result<Vec<ReferenceRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.starts_with('#') || line.trim().is_empty() || line.starts_with("group\t") {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("reference line {line_no}: expected 6 fields")));
        }
        let tasks: Vec<String> = f[2].split(',').map(str::to_string).collect();
        let values = parse_list(f[3], line_no)?.unwrap_or_default();
        let delta = parse_list(f[4], line_no)?;
        let gains = parse_list(f[5], line_no)?;
        if values.len() != tasks.len() || gains.as_ref().is_some_and(|g| g.len() != tasks.len()) {
            return Err(Error::Format(format!("reference line {line_no}: column counts disagree")));
        }
        if let Some(t) = tasks.iter().find(|t| task_metric(t).is_none()) {
            return Err(Error::Format(format!("reference line {line_no}: unknown task {t}")));
        }
        rows.push(ReferenceRow {
            group: f[0].to_string(),
            row: f[1].to_string(),
            tasks,
            values,
            delta_mtl: delta.map(|d| d[0]),
            gains,
        });
    }
    Ok(rows)
}

pub fn rows() -> Vec<ReferenceRow> {
    parse(TABLES).expect("shipped reference tables parse")
}

impl ReferenceRow {
    pub fn report(&self) -> MetricsReport {
        let tasks = self
            .tasks
            .iter()
            .zip(&self.values)
            .map(|(t, &v)| {
                let (metric, lower) = task_metric(t).expect("validated on parse");
                TaskResult::new(t.clone(), metric, lower, v)
            })
            .collect();
        MetricsReport::new(self.row.clone(), tasks, 0)
    }
}

/// Every non-reference row of every group, with gains recomputed against
/// the group's `stl` row.
pub fn recompute(rows: &[ReferenceRow]) -> Result<Vec<(ReferenceRow, MetricsReport)>> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.row != "stl") {
        let stl = rows
            .iter()
            .find(|s| s.group == r.group && s.row == "stl")
            .ok_or_else(|| Error::Format(format!("group {} has no stl row", r.group)))?;
        out.push((r.clone(), r.report().with_reference(&stl.report())?));
    }
    Ok(out)
}
