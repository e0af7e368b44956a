use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalMode};
use crate::prompts::Dimension;

/// JSON schema of [`EvalReport`] files.
pub const REPORT_SCHEMA: &str = include_str!("../../data/report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task_id: String,
    pub dimension: Dimension,
    pub mode: EvalMode,
    /// `None` when the task was skipped.
    pub f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `None` for evaluated rows, otherwise why the task was skipped.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionMean {
    pub mode: EvalMode,
    pub dimension: Dimension,
    pub mean_f1: f64,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallMean {
    pub mode: EvalMode,
    pub mean_f1: f64,
    pub n_tasks: usize,
}

/// Zero-shot margin of one test clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub task_id: String,
    pub clip_id: String,
    pub speaker_id: String,
    pub label: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub dimension_means: Vec<DimensionMean>,
    pub overall: Vec<OverallMean>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub margins: Vec<MarginRow>,
}

/// Per-dimension means (equal task weight) and the overall mean over tasks,
/// per mode; skipped rows are left out.
pub fn aggregate(rows: &[ReportRow]) -> (Vec<DimensionMean>, Vec<OverallMean>) {
    let mut by_dim: BTreeMap<(EvalMode, Dimension), Vec<f64>> = BTreeMap::new();
    let mut by_mode: BTreeMap<EvalMode, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(f) = r.f1 {
            by_dim.entry((r.mode, r.dimension)).or_default().push(f);
            by_mode.entry(r.mode).or_default().push(f);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let dims = by_dim
        .into_iter()
        .map(|((mode, dimension), v)| DimensionMean {
            mode,
            dimension,
            mean_f1: mean(&v),
            n_tasks: v.len(),
        })
        .collect();
    let overall = by_mode
        .into_iter()
        .map(|(mode, v)| OverallMean {
            mode,
            mean_f1: mean(&v),
            n_tasks: v.len(),
        })
        .collect();
    (dims, overall)
}

fn io(path: &Path, e: impl ToString) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ReportRow>, margins: Vec<MarginRow>) -> Self {
        let (dimension_means, overall) = aggregate(&rows);
        Self {
            rows,
            dimension_means,
            overall,
            margins,
        }
    }

    pub fn row(&self, task_id: &str, mode: EvalMode) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.task_id == task_id && r.mode == mode)
    }

    pub fn overall_mean(&self, mode: EvalMode) -> Option<f64> {
        self.overall.iter().find(|o| o.mode == mode).map(|o| o.mean_f1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Probe(format!("report: {e}")))
    }

    /// Task rows as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
        w.write_record(["task_id", "dimension", "mode", "f1", "macro_f1", "n_pos", "n_neg", "skipped"])
            .map_err(|e| io(path, e))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.task_id.clone(),
                r.dimension.as_str().to_string(),
                r.mode.as_str().to_string(),
                opt(r.f1),
                opt(r.macro_f1),
                r.n_pos.to_string(),
                r.n_neg.to_string(),
                r.skipped.clone().unwrap_or_default(),
            ])
            .map_err(|e| io(path, e))?;
        }
        w.flush().map_err(|e| io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| io(path, e))
    }

    pub fn write_margins_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
        for m in &self.margins {
            w.serialize(m).map_err(|e| io(path, e))?;
        }
        w.flush().map_err(|e| io(path, e))
    }

    /// Plain-text table of per-dimension and overall means.
    pub fn summary_table(&self) -> String {
        let mut modes: Vec<EvalMode> = self.rows.iter().map(|r| r.mode).collect();
        modes.sort();
        modes.dedup();
        let mut out = format!("{:<10}", "mode");
        for d in Dimension::ALL {
            out += &format!(" {:>13}", d.as_str());
        }
        out += &format!(" {:>9}\n", "overall");
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        for m in modes {
            out += &format!("{:<10}", m.as_str());
            for d in Dimension::ALL {
                let v = self
                    .dimension_means
                    .iter()
                    .find(|x| x.mode == m && x.dimension == d)
                    .map(|x| x.mean_f1);
                out += &format!(" {:>13}", cell(v));
            }
            out += &format!(" {:>9}\n", cell(self.overall_mean(m)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(task: &str, dim: Dimension, mode: EvalMode, f1: Option<f64>) -> ReportRow {
        ReportRow {
            task_id: task.into(),
            dimension: dim,
            mode,
            f1,
            macro_f1: f1,
            n_pos: 1,
            n_neg: 1,
            skipped: f1.is_none().then(|| "no positives".to_string()),
        }
    }

    #[test]
    fn dimension_and_overall_means() {
        let rows = vec![
            row("a", Dimension::Health, EvalMode::Zeroshot, Some(0.8)),
            row("b", Dimension::Health, EvalMode::Zeroshot, Some(0.6)),
            row("c", Dimension::Voice, EvalMode::Zeroshot, Some(0.1)),
            row("d", Dimension::Voice, EvalMode::Zeroshot, None),
        ];
        let r = EvalReport::from_rows(rows, vec![]);
        let health = r.dimension_means.iter().find(|d| d.dimension == Dimension::Health).unwrap();
        assert!((health.mean_f1 - 0.7).abs() < 1e-12);
        assert_eq!(health.n_tasks, 2);
        assert!((r.overall_mean(EvalMode::Zeroshot).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(r.rows.len(), 4);
        let back = EvalReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.summary_table().contains("0.700"));
    }
}
