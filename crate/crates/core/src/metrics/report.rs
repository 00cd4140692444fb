use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{delta_mtl, relative_gain};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub task: String,
    pub metric: String,
    pub lower_is_better: bool,
    pub value: f64,
    /// Single-task reference value, when one was supplied.
    pub reference: Option<f64>,
    /// Relative gain in percent against `reference`.
    pub gain: Option<f64>,
}

impl TaskResult {
    pub fn new(task: impl Into<String>, metric: impl Into<String>, lower_is_better: bool, value: f64) -> Self {
        TaskResult {
            task: task.into(),
            metric: metric.into(),
            lower_is_better,
            value,
            reference: None,
            gain: None,
        }
    }
}

/// Per-task metrics of one model, optionally compared against single-task
/// references.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub tasks: Vec<TaskResult>,
    /// Mean relative gain; present only when every task has a reference.
    pub delta_mtl: Option<f64>,
    pub samples: usize,
}

impl MetricsReport {
    pub fn new(label: impl Into<String>, tasks: Vec<TaskResult>, samples: usize) -> Self {
        MetricsReport {
            label: label.into(),
            tasks,
            delta_mtl: None,
            samples,
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskResult> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Fills references and gains from `stl`, matching tasks by name. Tasks
    /// the reference lacks stay without a gain, and then the aggregate is
    /// absent too.
    pub fn with_reference(mut self, stl: &MetricsReport) -> Result<Self> {
        for t in &mut self.tasks {
            t.reference = None;
            t.gain = None;
            if let Some(r) = stl.task(&t.task) {
                if r.metric != t.metric || r.lower_is_better != t.lower_is_better {
                    return Err(Error::Invalid(format!(
                        "reference for task {} measures {} but the report measures {}",
                        t.task, r.metric, t.metric
                    )));
                }
                t.reference = Some(r.value);
                t.gain = Some(relative_gain(t.value, r.value, t.lower_is_better)?);
            }
        }
        let gains: Option<Vec<f64>> = self.tasks.iter().map(|t| t.gain).collect();
        self.delta_mtl = match gains {
            Some(g) if !g.is_empty() => Some(delta_mtl(&g)?),
            _ => None,
        };
        Ok(self)
    }

    /// Aligned table: one column per task, the aggregate last; a reference
    /// row above and a gain row below when references are present.
    pub fn to_table(&self) -> String {
        let mut header = vec!["model".to_string()];
        for t in &self.tasks {
            let arrow = if t.lower_is_better { "↓" } else { "↑" };
            header.push(format!("{} {}{}", t.task, t.metric, arrow));
        }
        header.push("ΔMTL (%)↑".to_string());

        let mut rows = vec![header];
        let has_ref = self.tasks.iter().any(|t| t.reference.is_some());
        let dash = || "-".to_string();
        if has_ref {
            let mut r = vec!["stl".to_string()];
            r.extend(self.tasks.iter().map(|t| t.reference.map_or_else(dash, fmt_metric)));
            r.push(dash());
            rows.push(r);
        }
        let mut r = vec![self.label.clone()];
        r.extend(self.tasks.iter().map(|t| fmt_metric(t.value)));
        r.push(self.delta_mtl.map_or_else(dash, fmt_gain));
        rows.push(r);
        if has_ref {
            let mut r = vec!["Δτ (%)".to_string()];
            r.extend(self.tasks.iter().map(|t| t.gain.map_or_else(dash, fmt_gain)));
            r.push(dash());
            rows.push(r);
        }

        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        let _ = writeln!(out, "samples: {}", self.samples);
        out
    }

    /// `key = value` block; floats use the shortest exact representation so
    /// the block parses back to an identical report.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "label = {}", self.label);
        let _ = writeln!(out, "samples = {}", self.samples);
        let names: Vec<&str> = self.tasks.iter().map(|t| t.task.as_str()).collect();
        let _ = writeln!(out, "tasks = {}", names.join(","));
        for t in &self.tasks {
            let _ = writeln!(out, "{}.metric = {}", t.task, t.metric);
            let _ = writeln!(out, "{}.lower_is_better = {}", t.task, t.lower_is_better);
            let _ = writeln!(out, "{}.value = {:?}", t.task, t.value);
            if let Some(r) = t.reference {
                let _ = writeln!(out, "{}.reference = {r:?}", t.task);
            }
            if let Some(g) = t.gain {
                let _ = writeln!(out, "{}.gain = {g:?}", t.task);
            }
        }
        if let Some(d) = self.delta_mtl {
            let _ = writeln!(out, "delta_mtl = {d:?}");
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line {}: expected key = value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("report is missing key {k}")));
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("report key {k} is not a number")))
        };
        let opt = |k: &str| -> Result<Option<f64>> { if kv.contains_key(k) { num(k).map(Some) } else { Ok(None) } };
        let samples = get("samples")?
            .parse()
            .map_err(|_| Error::Format("report key samples is not an integer".into()))?;
        let mut tasks = Vec::new();
        for name in get("tasks")?.split(',').filter(|s| !s.is_empty()) {
            let lower = match get(&format!("{name}.lower_is_better"))?.as_str() {
                "true" => true,
                "false" => false,
                other => return Err(Error::Format(format!("{name}.lower_is_better = {other}"))),
            };
            tasks.push(TaskResult {
                task: name.to_string(),
                metric: get(&format!("{name}.metric"))?.clone(),
                lower_is_better: lower,
                value: num(&format!("{name}.value"))?,
                reference: opt(&format!("{name}.reference"))?,
                gain: opt(&format!("{name}.gain"))?,
            });
        }
        Ok(MetricsReport {
            label: get("label")?.clone(),
            tasks,
            delta_mtl: opt("delta_mtl")?,
            samples,
        })
    }
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.4}")
}

fn fmt_gain(v: f64) -> String {
    format!("{v:+.2}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(values: [f64; 2], label: &str) -> MetricsReport {
        MetricsReport::new(
            label,
            vec![
                TaskResult::new("seg", "miou", false, values[0]),
                TaskResult::new("depth", "rmse", true, values[1]),
            ],
            16,
        )
    }

    #[test]
    fn gains_follow_reference() {
        let stl = report([50.95, 0.5698], "stl");
        let r = report([52.73, 0.5247], "bridgenet").with_reference(&stl).unwrap();
        assert!((r.delta_mtl.unwrap() - 5.70).abs() < 0.01);
        assert!((r.tasks[1].gain.unwrap() - 7.92).abs() < 0.01);
    }

    #[test]
    fn missing_reference_leaves_gains_absent() {
        let stl = MetricsReport::new("stl", vec![TaskResult::new("seg", "miou", false, 0.5)], 4);
        let r = report([0.6, 0.1], "m").with_reference(&stl).unwrap();
        assert!(r.tasks[0].gain.is_some() && r.tasks[1].gain.is_none());
        assert_eq!(r.delta_mtl, None);
        let table = report([0.6, 0.1], "m").to_table();
        assert!(table.lines().nth(1).unwrap().trim_end().ends_with('-'));
    }

    #[test]
    fn mismatched_metric_rejected() {
        let stl = MetricsReport::new("stl", vec![TaskResult::new("seg", "maxf", false, 0.5)], 4);
        assert!(report([0.6, 0.1], "m").with_reference(&stl).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let stl = report([0.5095, 0.5698], "stl");
        let r = report([0.5114, 0.5186], "bridgenet").with_reference(&stl).unwrap();
        assert_eq!(MetricsReport::from_kv(&r.to_kv()).unwrap(), r);
        assert_eq!(MetricsReport::from_kv(&stl.to_kv()).unwrap(), stl);
        assert!(MetricsReport::from_kv("label = x").is_err());
    }

    #[test]
    fn table_layout() {
        let stl = report([0.5095, 0.5698], "stl");
        let r = report([0.5114, 0.5186], "bridgenet").with_reference(&stl).unwrap();
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("model"));
        assert!(lines[1].starts_with("stl"));
        assert!(lines[2].starts_with("bridgenet"));
        assert!(lines[3].starts_with("Δτ (%)"));
        assert!(lines[2].contains("0.5114") && lines[3].contains("+8.99"));
    }
}
