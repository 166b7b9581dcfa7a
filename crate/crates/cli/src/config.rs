//! Experiment configuration files (TOML).
//!
//! ```toml
//! output = "runs"            # overridden by LAMOL_FORGE_OUT, then by --out
//! seeds = [0, 1, 2]
//! checkpoints = "all"        # all | final | none
//! dump_replay = true
//!
//! [stream]
//! tasks = ["sort", "toysent", "reverse"]
//! permutations = "none"      # none | all
//!
//! [model]                    # optional, defaults shown
//! layers = 2
//! width = 64
//! heads = 4
//! ff_width = 256
//! max_len = 128
//!
//! [[task]]                   # synthetic
//! name = "sort"
//! kind = "sort"
//! train_size = 300
//! test_size = 50
//!
//! [[task]]                   # external, tab-separated context/question/answer
//! name = "trivia"
//! train = "data/trivia_train.tsv"
//! test = "data/trivia_test.tsv"
//! metric = "nf1"
//!
//! [[method]]
//! name = "lamol_gen"         # lamol_gen | lamol_task | lamol_real | finetune | multitask
//! gamma = 0.2
//! ```
//!
//! Stream entries that name a synthetic kind need no `[[task]]` table.
//! Every `[[method]]` key besides `name` is optional: `gamma`, `lambda`,
//! `top_k`, `epochs`, `batch_size`, `lr`, `retries`, `replay_refresh`
//! (`task` | `epoch`), `eval_max_new`, `label`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lamol_core::data::{load_external_task, make_synthetic_task, SyntheticKind, TaskData};
use lamol_core::eval::Metric;
use lamol_core::model::ModelConfig;
use lamol_core::optim::AdamConfig;
use lamol_core::replay::ReplayMode;
use lamol_core::trainer::{Method, ReplayRefresh, TrainConfig};
use serde::Deserialize;

pub const DEFAULT_TRAIN_SIZE: usize = 300;
pub const DEFAULT_TEST_SIZE: usize = 50;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub output: Option<PathBuf>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub checkpoints: Checkpoints,
    #[serde(default = "yes")]
    pub dump_replay: bool,
    pub stream: StreamSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default, rename = "task")]
    pub tasks: Vec<TaskSection>,
    #[serde(rename = "method")]
    pub methods: Vec<MethodSection>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Checkpoints {
    #[default]
    All,
    Final,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permutations {
    #[default]
    None,
    All,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub tasks: Vec<String>,
    #[serde(default)]
    pub permutations: Permutations,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(0);
        Self {
            layers: m.layers,
            width: m.width,
            heads: m.heads,
            ff_width: m.ff_width,
            max_len: m.max_len,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
    pub kind: Option<String>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub metric: Option<String>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub name: String,
    pub label: Option<String>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub top_k: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub retries: Option<usize>,
    pub replay_refresh: Option<String>,
    pub eval_max_new: Option<usize>,
}

/// A method configuration with the label its runs are filed under.
#[derive(Debug, Clone)]
pub struct MethodSpec {
    pub label: String,
    pub config: TrainConfig,
}

/// A fully resolved experiment: datasets loaded, methods validated.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub output: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub checkpoints: Checkpoints,
    pub dump_replay: bool,
    pub tasks: Vec<TaskData>,
    pub orders: Vec<Vec<usize>>,
    pub methods: Vec<MethodSpec>,
}

pub fn parse(text: &str) -> Result<ExperimentFile> {
    // toml's message already carries the line and column.
    let file: ExperimentFile = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(file)
}

pub fn load(path: &Path) -> Result<Experiment> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file = parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(file, base)
}

/// Stable per-name data seed so every method sees the same datasets.
fn name_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn load_task(section: &TaskSection, base: &Path) -> Result<TaskData> {
    let seed = section.seed.unwrap_or_else(|| name_seed(&section.name));
    let test_size = section.test_size.unwrap_or(DEFAULT_TEST_SIZE);
    match (&section.kind, &section.train) {
        (Some(kind), None) => {
            let kind: SyntheticKind = kind.parse()?;
            if section.metric.is_some() || section.test.is_some() {
                bail!("task {}: synthetic tasks take no metric or test file", section.name);
            }
            let train_size = section.train_size.unwrap_or(DEFAULT_TRAIN_SIZE);
            Ok(make_synthetic_task(kind, train_size, test_size, seed)?.with_name(&section.name))
        }
        (None, Some(train)) => {
            let metric: Metric = section.metric.as_deref().unwrap_or("em").parse()?;
            let test = section.test.as_ref().map(|p| base.join(p));
            let (mut task, skipped) = load_external_task(
                &section.name,
                &base.join(train),
                test.as_deref(),
                test_size,
                metric,
                seed,
            )?;
            for (file, line, reason) in skipped {
                eprintln!("warning: {}:{line}: skipped ({reason})", file.display());
            }
            if let Some(n) = section.train_size {
                task.train.truncate(n);
                task.spec.train_size = task.train.len();
            }
            Ok(task)
        }
        _ => bail!("task {}: give exactly one of `kind` or `train`", section.name),
    }
}

fn method_spec(section: &MethodSection, model: &ModelSection) -> Result<MethodSpec> {
    let method: Method = section.name.parse()?;
    let mut cfg = TrainConfig::new(method);
    if let Some(v) = section.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = section.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = section.top_k {
        cfg.top_k = v;
    }
    if let Some(v) = section.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = section.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = section.lr {
        cfg.adam = AdamConfig::with_lr(v);
    }
    if let Some(v) = section.retries {
        cfg.retries = v;
    }
    if let Some(v) = &section.replay_refresh {
        cfg.replay_refresh = v.parse::<ReplayRefresh>()?;
    }
    if let Some(v) = section.eval_max_new {
        cfg.eval_max_new = v;
    }
    cfg.model = ModelConfig {
        layers: model.layers,
        width: model.width,
        heads: model.heads,
        ff_width: model.ff_width,
        max_len: model.max_len,
        vocab_size: cfg.model.vocab_size,
    };
    cfg.validate()?;
    let label = match &section.label {
        Some(l) => l.clone(),
        None if method.replay_mode() != ReplayMode::None => {
            format!("{}_g{}", method, cfg.gamma)
        }
        None => method.to_string(),
    };
    if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
        bail!("method label {label:?} must be non-empty ASCII letters, digits, '.', '_' or '-'");
    }
    Ok(MethodSpec { label, config: cfg })
}

/// All orderings of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    loop {
        let Some(i) = (1..current.len()).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..current.len()).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
}

pub fn resolve(file: ExperimentFile, base: &Path) -> Result<Experiment> {
    if file.seeds.is_empty() {
        bail!("seeds must not be empty");
    }
    if file.stream.tasks.is_empty() {
        bail!("stream.tasks must not be empty");
    }
    if file.methods.is_empty() {
        bail!("at least one [[method]] is required");
    }
    let mut tasks = Vec::new();
    for name in &file.stream.tasks {
        if tasks.iter().any(|t: &TaskData| t.name() == name) {
            bail!("task {name} appears twice in the stream");
        }
        let section = match file.tasks.iter().find(|t| &t.name == name) {
            Some(s) => s.clone(),
            None if name.parse::<SyntheticKind>().is_ok() => TaskSection {
                name: name.clone(),
                kind: Some(name.clone()),
                train: None,
                test: None,
                metric: None,
                train_size: None,
                test_size: None,
                seed: None,
            },
            None => bail!("stream task {name:?} has no [[task]] definition"),
        };
        tasks.push(load_task(&section, base).with_context(|| format!("loading task {name}"))?);
    }
    let orders = match file.stream.permutations {
        Permutations::None => vec![(0..tasks.len()).collect()],
        Permutations::All => permutations(tasks.len()),
    };
    let methods = file
        .methods
        .iter()
        .map(|m| method_spec(m, &file.model))
        .collect::<Result<Vec<_>>>()?;
    for (i, m) in methods.iter().enumerate() {
        if methods[..i].iter().any(|o| o.label == m.label) {
            bail!(
                "two methods share the label {}; set `label` to tell them apart",
                m.label
            );
        }
    }
    Ok(Experiment {
        output: file.output,
        seeds: file.seeds,
        checkpoints: file.checkpoints,
        dump_replay: file.dump_replay,
        tasks,
        orders,
        methods,
    })
}
