//! Executes every (method, order, seed) run of an experiment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use lamol_core::data::TaskData;
use lamol_core::eval::{summarize_orders, Summary};
use lamol_core::replay::ReplayMode;
use lamol_core::trainer::{run_lifelong, CheckpointPolicy, RunState};
use serde_json::{json, Value};

use crate::config::{Checkpoints, Experiment, MethodSpec};
use crate::manifest::{artifact, Artifact, Manifest, RunEntry, RunStatus};
use crate::metrics::{read_rows, summarize_rows, write_rows, MetricRow};

pub const RUNS_DIR: &str = "runs";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_SUMMARY_FILE: &str = "summary.json";
pub const REPORT_JSON: &str = "summary.json";
pub const REPORT_CSV: &str = "summary.csv";

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub run_id: String,
    pub method: MethodSpec,
    pub order: Vec<String>,
    pub seed: u64,
}

pub fn run_id(label: &str, order: &[String], seed: u64) -> String {
    format!("{label}__{}__s{seed}", order.join("-"))
}

/// Runs in method, order, seed order.
pub fn plan_runs(exp: &Experiment) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for m in &exp.methods {
        for order in &exp.orders {
            let names: Vec<String> = order.iter().map(|&i| exp.tasks[i].name().to_string()).collect();
            for &seed in &exp.seeds {
                out.push(RunSpec {
                    run_id: run_id(&m.label, &names, seed),
                    method: m.clone(),
                    order: names.clone(),
                    seed,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub root: PathBuf,
    pub jobs: usize,
    pub resume: bool,
}

#[derive(Debug)]
pub struct Outcome {
    pub manifest: Manifest,
    pub executed: usize,
    pub skipped: usize,
    pub failed: Vec<(String, String)>,
}

fn rel(path: &Path, root: &Path) -> String {
    let r = path.strip_prefix(root).unwrap_or(path);
    r.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn metric_rows(spec: &RunSpec, state: &RunState) -> Vec<MetricRow> {
    let cfg = &spec.method.config;
    state
        .log
        .iter()
        .map(|r| MetricRow {
            run_id: spec.run_id.clone(),
            method: spec.method.label.clone(),
            gamma: cfg.effective_gamma(),
            seed: spec.seed,
            train_task_index: r.train_task_index,
            epoch: r.epoch,
            eval_task: r.eval_task.clone(),
            metric_name: r.metric.name().to_string(),
            score: r.score,
        })
        .collect()
}

fn summary_json(s: &Summary) -> Value {
    let finals: BTreeMap<&str, f64> = s.final_scores.iter().map(|(t, v)| (t.as_str(), *v)).collect();
    let forgetting: BTreeMap<&str, f64> = s.forgetting.iter().map(|(t, v)| (t.as_str(), *v)).collect();
    json!({ "average": s.average, "final_scores": finals, "forgetting": forgetting })
}

fn execute(exp: &Experiment, spec: &RunSpec, root: &Path) -> Result<Vec<Artifact>> {
    let dir = root.join(RUNS_DIR).join(&spec.run_id);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut cfg = spec.method.config.clone();
    cfg.seed = spec.seed;
    match exp.checkpoints {
        Checkpoints::All => {
            cfg.checkpoint_dir = Some(dir.join("checkpoints"));
            cfg.checkpoint_policy = CheckpointPolicy::EveryEpoch;
        }
        Checkpoints::Final => {
            cfg.checkpoint_dir = Some(dir.join("checkpoints"));
            cfg.checkpoint_policy = CheckpointPolicy::TaskEnd;
        }
        Checkpoints::None => cfg.checkpoint_dir = None,
    }
    if exp.dump_replay && cfg.method.replay_mode() != ReplayMode::None {
        cfg.dump_dir = Some(dir.join("replay"));
    }
    let stream: Vec<TaskData> = spec
        .order
        .iter()
        .map(|n| exp.tasks.iter().find(|t| t.name() == n).expect("task resolved").clone())
        .collect();
    let state = run_lifelong(&stream, &cfg)?;

    let rows = metric_rows(spec, &state);
    write_rows(&dir.join(METRICS_FILE), &rows)?;
    let summary = summarize_rows(&rows)?;
    let replay: Vec<Value> = state
        .replay
        .iter()
        .map(|r| {
            let discarded: BTreeMap<&str, usize> = r.discarded.iter().map(|(k, v)| (k.code(), *v)).collect();
            json!({
                "task_index": r.task_index,
                "round": r.round,
                "requested": r.requested,
                "attempted": r.attempted,
                "accepted": r.accepted,
                "discarded": discarded,
                "test_overlap_removed": r.test_overlap_removed,
            })
        })
        .collect();
    let doc = json!({
        "run_id": spec.run_id,
        "method": spec.method.label,
        "gamma": cfg.effective_gamma(),
        "lambda": cfg.effective_lambda(),
        "seed": spec.seed,
        "order": spec.order,
        "summary": summary_json(&summary),
        "replay": replay,
        "steps": state.steps,
    });
    fs::write(dir.join(RUN_SUMMARY_FILE), serde_json::to_string_pretty(&doc)? + "\n")?;

    let mut files = Vec::new();
    files_under(&dir, &mut files)?;
    files.iter().map(|p| artifact(root, &rel(p, root))).collect()
}

/// Runs whatever is missing (everything unless `resume`), then rewrites the
/// experiment reports from all completed runs' metric CSVs.
pub fn run_experiment(exp: &Experiment, opts: &RunOptions) -> Result<Outcome> {
    fs::create_dir_all(&opts.root).with_context(|| format!("creating {}", opts.root.display()))?;
    let mut manifest = Manifest::load(&opts.root)?.unwrap_or_default();
    let specs = plan_runs(exp);
    let mut todo = Vec::new();
    let mut skipped = 0;
    for spec in &specs {
        let done = opts.resume
            && manifest.complete(&spec.run_id).is_some_and(|e| {
                let single = Manifest {
                    runs: vec![e.clone()],
                    reports: vec![],
                };
                single.verify(&opts.root).is_empty()
            });
        if done {
            skipped += 1;
        } else {
            todo.push(spec);
        }
    }

    let total = todo.len();
    let next = AtomicUsize::new(0);
    let shared = Mutex::new((&mut manifest, Vec::<(String, String)>::new()));
    let jobs = opts.jobs.max(1).min(total.max(1));
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = todo.get(i) else { break };
                let result = execute(exp, spec, &opts.root);
                let mut guard = shared.lock().unwrap();
                let (manifest, failed) = &mut *guard;
                let (status, error, artifacts) = match result {
                    Ok(a) => {
                        eprintln!("[{}/{total}] {} done", i + 1, spec.run_id);
                        (RunStatus::Complete, None, a)
                    }
                    Err(e) => {
                        eprintln!("[{}/{total}] {} FAILED: {e:#}", i + 1, spec.run_id);
                        failed.push((spec.run_id.clone(), format!("{e:#}")));
                        let dir = opts.root.join(RUNS_DIR).join(&spec.run_id);
                        let mut files = Vec::new();
                        let partial = files_under(&dir, &mut files)
                            .ok()
                            .map(|_| {
                                files
                                    .iter()
                                    .filter_map(|p| artifact(&opts.root, &rel(p, &opts.root)).ok())
                                    .collect()
                            })
                            .unwrap_or_default();
                        (RunStatus::Failed, Some(format!("{e:#}")), partial)
                    }
                };
                manifest.record(RunEntry {
                    run_id: spec.run_id.clone(),
                    method: spec.method.label.clone(),
                    order: spec.order.clone(),
                    seed: spec.seed,
                    status,
                    error,
                    artifacts,
                });
                if let Err(e) = manifest.save(&opts.root) {
                    eprintln!("warning: could not save manifest: {e:#}");
                }
            });
        }
    });
    let (_, mut failed) = shared.into_inner().unwrap();
    failed.sort();

    manifest.reports = write_reports(exp, &specs, &manifest, &opts.root)?;
    manifest.save(&opts.root)?;
    Ok(Outcome {
        manifest,
        executed: total,
        skipped,
        failed,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-order summaries averaged over seeds, plus the spread across orders.
fn write_reports(exp: &Experiment, specs: &[RunSpec], manifest: &Manifest, root: &Path) -> Result<Vec<Artifact>> {
    let mut csv_rows: Vec<[String; 7]> = Vec::new();
    let mut doc = serde_json::Map::new();
    for m in &exp.methods {
        let mut orders = serde_json::Map::new();
        let mut order_summaries = Vec::new();
        for order in &exp.orders {
            let names: Vec<String> = order.iter().map(|&i| exp.tasks[i].name().to_string()).collect();
            let key = names.join("-");
            let mut seeds = Vec::new();
            let mut summaries = Vec::new();
            for spec in specs.iter().filter(|s| s.method.label == m.label && s.order == names) {
                if manifest.complete(&spec.run_id).is_none() {
                    continue;
                }
                let rows = read_rows(&root.join(RUNS_DIR).join(&spec.run_id).join(METRICS_FILE))?;
                let s = summarize_rows(&rows)?;
                for ((task, fin), (_, forget)) in s.final_scores.iter().zip(&s.forgetting) {
                    csv_rows.push([
                        m.label.clone(),
                        key.clone(),
                        spec.seed.to_string(),
                        task.clone(),
                        fin.to_string(),
                        forget.to_string(),
                        s.average.to_string(),
                    ]);
                }
                seeds.push(spec.seed);
                summaries.push(s);
            }
            if summaries.is_empty() {
                continue;
            }
            let tasks: Vec<String> = summaries[0].final_scores.iter().map(|(t, _)| t.clone()).collect();
            let averaged = Summary {
                average: mean(&summaries.iter().map(|s| s.average).collect::<Vec<_>>()),
                final_scores: tasks
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        (
                            t.clone(),
                            mean(&summaries.iter().map(|s| s.final_scores[i].1).collect::<Vec<_>>()),
                        )
                    })
                    .collect(),
                forgetting: tasks
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        (
                            t.clone(),
                            mean(&summaries.iter().map(|s| s.forgetting[i].1).collect::<Vec<_>>()),
                        )
                    })
                    .collect(),
            };
            let mut entry = summary_json(&averaged);
            entry["seeds"] = json!(seeds);
            entry["seed_averages"] = json!(summaries.iter().map(|s| s.average).collect::<Vec<_>>());
            orders.insert(key, entry);
            order_summaries.push(averaged);
        }
        let mut method = serde_json::Map::new();
        if !order_summaries.is_empty() {
            let spread = summarize_orders(&order_summaries)?;
            method.insert(
                "across_orders".into(),
                json!({ "mean": spread.mean, "std": spread.std }),
            );
        }
        method.insert("orders".into(), Value::Object(orders));
        doc.insert(m.label.clone(), Value::Object(method));
    }
    fs::write(
        root.join(REPORT_JSON),
        serde_json::to_string_pretty(&Value::Object(doc))? + "\n",
    )?;
    let mut w = csv::Writer::from_path(root.join(REPORT_CSV))?;
    w.write_record([
        "method",
        "order",
        "seed",
        "eval_task",
        "final_score",
        "forgetting",
        "run_average",
    ])?;
    for r in &csv_rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(vec![artifact(root, REPORT_JSON)?, artifact(root, REPORT_CSV)?])
}
