//! Static SVG charts of score against global epoch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use crate::metrics::{read_rows, MetricRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;

/// One curve: scores at global epochs `1..=epochs`, with task boundaries
/// falling after the listed global epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub title: String,
    pub epochs: usize,
    pub boundaries: Vec<usize>,
    pub points: Vec<(usize, f64)>,
}

fn x_of(epoch: f64, epochs: usize) -> f64 {
    let span = WIDTH - LEFT - RIGHT;
    if epochs <= 1 {
        return LEFT + span / 2.0;
    }
    LEFT + (epoch - 1.0) / (epochs - 1) as f64 * span
}

fn y_of(score: f64) -> f64 {
    TOP + (100.0 - score) / 100.0 * (HEIGHT - TOP - BOTTOM)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn svg(curve: &Curve) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="20" font-size="14">{}</text>"#,
        escape(&curve.title)
    );
    let x0 = LEFT;
    let x1 = WIDTH - RIGHT;
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = y_of(tick);
        let _ = writeln!(
            s,
            r##"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="#dddddd"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{tick}</text>"#,
            x0 - 6.0,
            y + 4.0
        );
    }
    let (yb, yt) = (y_of(0.0), y_of(100.0));
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="{yb:.2}" x2="{x1:.2}" y2="{yb:.2}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="{yb:.2}" x2="{x0:.2}" y2="{yt:.2}" stroke="black"/>"#
    );
    for b in &curve.boundaries {
        let x = x_of(*b as f64 + 0.5, curve.epochs);
        let _ = writeln!(
            s,
            r##"<line class="task-boundary" x1="{x:.2}" y1="{yt:.2}" x2="{x:.2}" y2="{yb:.2}" stroke="#888888" stroke-dasharray="4 3"/>"##
        );
    }
    let mut labels = vec![1, curve.epochs];
    labels.extend(curve.boundaries.iter().map(|b| b + 1));
    labels.sort_unstable();
    labels.dedup();
    for e in labels {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{e}</text>"#,
            x_of(e as f64, curve.epochs),
            yb + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 8.0
    );
    let pts: Vec<String> = curve
        .points
        .iter()
        .map(|&(e, v)| format!("{:.2},{:.2}", x_of(e as f64, curve.epochs), y_of(v)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
        pts.join(" ")
    );
    for p in &pts {
        let (x, y) = p.split_once(',').unwrap();
        let _ = writeln!(s, r##"<circle cx="{x}" cy="{y}" r="2.5" fill="#1f77b4"/>"##);
    }
    s.push_str("</svg>\n");
    s
}

/// Curves per (run, eval task) from metric rows.
pub fn curves(rows: &[MetricRow]) -> Result<Vec<(String, String, Curve)>> {
    if rows.is_empty() {
        bail!("no scores to render");
    }
    let mut runs: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        runs.entry(&r.run_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for (run, rows) in runs {
        let checkpoints: BTreeSet<(usize, usize)> = rows.iter().map(|r| (r.train_task_index, r.epoch)).collect();
        let index: BTreeMap<(usize, usize), usize> = checkpoints.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        let ordered: Vec<(usize, usize)> = checkpoints.into_iter().collect();
        let boundaries: Vec<usize> = ordered
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0].0 != w[1].0)
            .map(|(i, _)| i + 1)
            .collect();
        let mut tasks: Vec<&str> = Vec::new();
        for r in &rows {
            if !tasks.contains(&r.eval_task.as_str()) {
                tasks.push(&r.eval_task);
            }
        }
        for task in tasks {
            let mut points: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.eval_task == task)
                .map(|r| (index[&(r.train_task_index, r.epoch)], r.score))
                .collect();
            points.sort_by_key(|p| p.0);
            out.push((
                run.to_string(),
                task.to_string(),
                Curve {
                    title: format!("{run}: {task}"),
                    epochs: ordered.len(),
                    boundaries: boundaries.clone(),
                    points,
                },
            ));
        }
    }
    Ok(out)
}

fn file_stem(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes one SVG per (run, eval task) found in the CSVs.
pub fn render_curves(csvs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for path in csvs {
        rows.extend(read_rows(path)?);
    }
    let curves = curves(&rows)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (run, task, curve) in curves {
        let path = out_dir.join(format!("{}__{}.svg", file_stem(&run), file_stem(&task)));
        fs::write(&path, svg(&curve))?;
        written.push(path);
    }
    Ok(written)
}
