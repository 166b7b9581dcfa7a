//! The per-run metric log as CSV.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lamol_core::eval::{summarize, CheckpointId, ScoreMatrix, Summary};
use serde::{Deserialize, Serialize};

pub const COLUMNS: [&str; 9] = [
    "run_id",
    "method",
    "gamma",
    "seed",
    "train_task_index",
    "epoch",
    "eval_task",
    "metric_name",
    "score",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub method: String,
    pub gamma: f64,
    pub seed: u64,
    pub train_task_index: usize,
    pub epoch: usize,
    pub eval_task: String,
    pub metric_name: String,
    pub score: f64,
}

pub fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metric CSV; a malformed row is reported with its 1-based line.
pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        bail!("{}: header must be {}", path.display(), COLUMNS.join(","));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<MetricRow>().enumerate() {
        let row = rec.map_err(|e| anyhow::anyhow!("{}: row {}: {e}", path.display(), i + 2))?;
        if !(0.0..=100.0).contains(&row.score) {
            bail!(
                "{}: row {}: score {} outside [0, 100]",
                path.display(),
                i + 2,
                row.score
            );
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Score matrices keyed by run id, eval tasks in first-seen order.
pub fn matrices(rows: &[MetricRow]) -> Result<BTreeMap<String, ScoreMatrix>> {
    let mut tasks: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in rows {
        let t = tasks.entry(&r.run_id).or_default();
        if !t.contains(&r.eval_task) {
            t.push(r.eval_task.clone());
        }
    }
    let mut out: BTreeMap<String, ScoreMatrix> = tasks
        .into_iter()
        .map(|(id, t)| (id.to_string(), ScoreMatrix::new(t)))
        .collect();
    for r in rows {
        let id = CheckpointId {
            stage: r.train_task_index,
            epoch: r.epoch,
        };
        out.get_mut(&r.run_id)
            .expect("run present")
            .set(id, &r.eval_task, r.score)?;
    }
    Ok(out)
}

pub fn summarize_rows(rows: &[MetricRow]) -> Result<Summary> {
    let m = matrices(rows)?;
    if m.len() != 1 {
        bail!("expected the rows of exactly one run, found {}", m.len());
    }
    Ok(summarize(m.values().next().unwrap())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(stage: usize, epoch: usize, task: &str, score: f64) -> MetricRow {
        MetricRow {
            run_id: "r".into(),
            method: "finetune".into(),
            gamma: 0.0,
            seed: 1,
            train_task_index: stage,
            epoch,
            eval_task: task.into(),
            metric_name: "em".into(),
            score,
        }
    }

    #[test]
    fn round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![row(1, 1, "a", 12.5), row(1, 1, "b", 100.0)];
        write_rows(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&COLUMNS.join(",")));
        assert_eq!(read_rows(&path).unwrap(), rows);
        let s = summarize_rows(&rows).unwrap();
        assert_eq!(s.average, 56.25);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            format!(
                "{}\nr,finetune,0,1,1,1,a,em,50\nr,finetune,0,x,1,1,a,em,50\n",
                COLUMNS.join(",")
            ),
        )
        .unwrap();
        let err = read_rows(&path).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
    }
}
