//! Lifelong training over a task stream.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{format_example, FormattedExample, Rejection, Sample, TaskData};
use crate::error::{Error, Result};
use crate::eval::{evaluate_task, CheckpointId, Metric, ScoreMatrix};
use crate::model::{LanguageModel, ModelConfig, StepInput, TOKEN_EMBEDDING};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::replay::{
    compute_replay_plan, draw_real_samples, generate_pseudo_samples, GenerationConfig, ReplayBatchSet, ReplayMode,
};
use crate::vocab::{TokenId, Vocabulary, GEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    LamolGen,
    LamolTask,
    LamolReal,
    Finetune,
    Multitask,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::LamolGen,
        Method::LamolTask,
        Method::LamolReal,
        Method::Finetune,
        Method::Multitask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::LamolGen => "lamol_gen",
            Method::LamolTask => "lamol_task",
            Method::LamolReal => "lamol_real",
            Method::Finetune => "finetune",
            Method::Multitask => "multitask",
        }
    }

    pub fn replay_mode(self) -> ReplayMode {
        match self {
            Method::LamolGen => ReplayMode::Gen,
            Method::LamolTask => ReplayMode::Task,
            Method::LamolReal => ReplayMode::Real,
            Method::Finetune | Method::Multitask => ReplayMode::None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| Error::Data(format!("unknown method {s:?}")))
    }
}

/// How often replay data is rebuilt within one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReplayRefresh {
    /// Built once at the task boundary and reused by every epoch.
    PerTask,
    /// Rebuilt for every epoch from the boundary model with a fresh seed.
    PerEpoch,
}

impl fmt::Display for ReplayRefresh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplayRefresh::PerTask => "task",
            ReplayRefresh::PerEpoch => "epoch",
        })
    }
}

impl FromStr for ReplayRefresh {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(ReplayRefresh::PerTask),
            "epoch" => Ok(ReplayRefresh::PerEpoch),
            other => Err(Error::Data(format!("unknown replay refresh {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub gamma: f64,
    pub lambda: f64,
    pub top_k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Extra generation rounds to replace discarded pseudo-samples.
    pub retries: usize,
    pub replay_refresh: ReplayRefresh,
    /// Architecture; `vocab_size` is replaced by the run's vocabulary size.
    pub model: ModelConfig,
    /// Greedy decoding budget when scoring answers.
    pub eval_max_new: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_policy: CheckpointPolicy,
    /// Pseudo-sample dumps, one TSV per replay set.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CheckpointPolicy {
    #[default]
    EveryEpoch,
    /// Only the last epoch of each task.
    TaskEnd,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            gamma: 0.2,
            lambda: 0.25,
            top_k: 20,
            epochs: 9,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            retries: 3,
            replay_refresh: ReplayRefresh::PerTask,
            model: ModelConfig::new(0),
            eval_max_new: 32,
            checkpoint_dir: None,
            checkpoint_policy: CheckpointPolicy::EveryEpoch,
            dump_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("train config", reason));
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.top_k == 0 || self.epochs == 0 || self.batch_size == 0 || self.eval_max_new == 0 {
            return bad("top-k, epochs, batch size and eval budget must be positive".into());
        }
        if !(self.adam.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        Ok(())
    }

    /// Replay ratio actually used: zero for methods without replay.
    pub fn effective_gamma(&self) -> f64 {
        match self.method.replay_mode() {
            ReplayMode::None => 0.0,
            _ => self.gamma,
        }
    }

    /// LM-loss weight actually used: plain fine-tuning trains QA only.
    pub fn effective_lambda(&self) -> f64 {
        match self.method {
            Method::Finetune => 0.0,
            _ => self.lambda,
        }
    }
}

/// One cell of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub train_task_index: usize,
    pub epoch: usize,
    pub eval_task: String,
    pub metric: Metric,
    pub score: f64,
}

/// Replay bookkeeping for one task boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStats {
    pub task_index: usize,
    /// 0 when one replay set serves every epoch, else the epoch it served.
    pub round: usize,
    pub requested: usize,
    pub attempted: usize,
    pub accepted: usize,
    pub discarded: Vec<(Rejection, usize)>,
    /// Accepted samples dropped because they coincide with a test sample.
    pub test_overlap_removed: usize,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub model: LanguageModel,
    pub vocab: Vocabulary,
    pub optimizer: AdamState,
    pub completed: Vec<String>,
    pub checkpoints: Vec<(CheckpointId, PathBuf)>,
    pub replay: Vec<ReplayStats>,
    pub log: Vec<ScoreRecord>,
    pub matrix: ScoreMatrix,
    pub steps: usize,
    /// Embedding growths performed for task tokens.
    pub growths: usize,
}

/// Independent seed for a (purpose, index) pair of one run.
fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_INIT: u64 = 1;
const SEED_GROW: u64 = 2;
const SEED_SHUFFLE: u64 = 3;
const SEED_GENERATE: u64 = 4;
const SEED_REAL: u64 = 5;

/// Vocabulary over the training sets of every task in the stream.
pub fn build_vocabulary(tasks: &[TaskData]) -> Result<Vocabulary> {
    let texts: Vec<&str> = tasks
        .iter()
        .flat_map(|t| &t.train)
        .flat_map(|s| [s.context.as_str(), s.question.as_str(), s.answer.as_str()])
        .collect();
    Vocabulary::build(&texts, 1)
}

fn check_stream(stream: &[TaskData]) -> Result<()> {
    if stream.is_empty() {
        return Err(Error::Data("task stream is empty".into()));
    }
    let mut names = HashSet::new();
    for t in stream {
        if !names.insert(t.name()) {
            return Err(Error::Data(format!("task {} appears twice in the stream", t.name())));
        }
        if t.train.is_empty() || t.test.is_empty() {
            return Err(Error::Data(format!("task {} needs train and test data", t.name())));
        }
    }
    Ok(())
}

impl RunState {
    pub fn new(stream: &[TaskData], cfg: &TrainConfig) -> Result<Self> {
        check_stream(stream)?;
        cfg.validate()?;
        let vocab = build_vocabulary(stream)?;
        let model_cfg = ModelConfig {
            vocab_size: vocab.len(),
            ..cfg.model
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_INIT, 0));
        let model = LanguageModel::new(model_cfg, &mut rng)?;
        Ok(Self {
            optimizer: AdamState::new(model.params()),
            model,
            vocab,
            completed: Vec::new(),
            checkpoints: Vec::new(),
            replay: Vec::new(),
            log: Vec::new(),
            matrix: ScoreMatrix::new(stream.iter().map(|t| t.name().to_string()).collect()),
            steps: 0,
            growths: 0,
        })
    }

    /// Adds `task`'s token to the vocabulary and grows the embeddings to match.
    pub fn register_task(&mut self, task: &str, seed: u64) -> Result<TokenId> {
        let id = self.vocab.add_task_token(task)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.model.grow_embeddings(self.vocab.len(), &mut rng)?;
        let rows = self.model.params()[TOKEN_EMBEDDING].numel();
        self.optimizer.grow(TOKEN_EMBEDDING, rows);
        self.growths += 1;
        Ok(id)
    }

    /// Scores every stream task and records the checkpoint's row.
    fn evaluate(&mut self, stream: &[TaskData], id: CheckpointId, cfg: &TrainConfig) -> Result<()> {
        for task in stream {
            let metric = task.spec.metric;
            let score = evaluate_task(&self.model, &self.vocab, &task.test, metric, cfg.eval_max_new)?;
            self.matrix.set(id, task.name(), score)?;
            self.log.push(ScoreRecord {
                train_task_index: id.stage,
                epoch: id.epoch,
                eval_task: task.name().to_string(),
                metric,
                score,
            });
        }
        Ok(())
    }

    fn save_checkpoint(&mut self, id: CheckpointId, cfg: &TrainConfig) -> Result<()> {
        let Some(dir) = &cfg.checkpoint_dir else {
            return Ok(());
        };
        if cfg.checkpoint_policy == CheckpointPolicy::TaskEnd && id.epoch != cfg.epochs {
            return Ok(());
        }
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("task{}_epoch{}.ckpt", id.stage, id.epoch));
        let tasks: Vec<&str> = self.vocab.task_names().collect();
        self.model.save(&path, &tasks)?;
        self.checkpoints.push((id, path));
        Ok(())
    }
}

fn format_all<'a, I>(items: I, vocab: &Vocabulary, max_len: usize) -> Result<Vec<FormattedExample>>
where
    I: IntoIterator<Item = (&'a Sample, TokenId)>,
{
    items
        .into_iter()
        .map(|(s, token)| format_example(s, vocab, token, max_len))
        .collect()
}

fn format_tagged(samples: &[(Sample, TokenId)], vocab: &Vocabulary, max_len: usize) -> Result<Vec<FormattedExample>> {
    format_all(samples.iter().map(|(s, t)| (s, *t)), vocab, max_len)
}

/// Seed index for replay of stage `index` in `round`.
fn stream_index(index: usize, round: usize) -> u64 {
    ((index as u64) << 32) | round as u64
}

/// Trains stage `stage` (1-based) for the configured epochs, evaluating
/// every stream task and checkpointing after each epoch. `mixture` supplies
/// the examples of each epoch (1-based) and is shuffled before use.
///
/// Each batch contributes its QA formats and LM formats to one combined loss
/// and one optimizer step.
pub fn train_on_task<F>(
    state: &mut RunState,
    stream: &[TaskData],
    stage: usize,
    cfg: &TrainConfig,
    mut mixture: F,
) -> Result<()>
where
    F: FnMut(&mut RunState, usize) -> Result<Vec<FormattedExample>>,
{
    let lambda = cfg.effective_lambda();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_SHUFFLE, stage as u64));
    let mut batch_index = 0;
    for epoch in 1..=cfg.epochs {
        let examples = mixture(state, epoch)?;
        if examples.is_empty() {
            return Err(Error::Data(format!("stage {stage} has nothing to train on")));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let qa: Vec<&[TokenId]> = chunk.iter().map(|&i| examples[i].qa_tokens.as_slice()).collect();
            let masks: Vec<&[bool]> = chunk.iter().map(|&i| examples[i].qa_loss_mask.as_slice()).collect();
            let lm: Vec<&[TokenId]> = chunk.iter().map(|&i| examples[i].lm_tokens.as_slice()).collect();
            let input = StepInput {
                qa: &qa,
                qa_masks: &masks,
                lm: &lm,
            };
            let out = match state.model.step_gradients(&input, lambda) {
                Ok(out) => out,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        batch: batch_index,
                        qa: f64::NAN,
                        lm: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    batch: batch_index,
                    qa: out.qa_loss,
                    lm: out.lm_loss,
                });
            }
            adam_step(state.model.params_mut(), &out.grads, &mut state.optimizer, &cfg.adam)?;
            state.steps += 1;
            batch_index += 1;
        }
        let id = CheckpointId { stage, epoch };
        state.save_checkpoint(id, cfg)?;
        state.evaluate(stream, id, cfg)?;
    }
    Ok(())
}

/// Replay data for stage `index` (1-based) generated by `model` or drawn
/// from stored training data, with any samples equal to a test sample
/// removed. `round` is 0 for data shared by all epochs, else the epoch.
fn build_replay(
    state: &mut RunState,
    model: &LanguageModel,
    stream: &[TaskData],
    index: usize,
    round: usize,
    cfg: &TrainConfig,
) -> Result<Vec<(Sample, TokenId)>> {
    let mode = cfg.method.replay_mode();
    let gamma = cfg.effective_gamma();
    if mode == ReplayMode::None || index == 1 {
        return Ok(Vec::new());
    }
    let plan = compute_replay_plan(gamma, stream[index - 1].train.len(), index, mode)?;
    let previous = &stream[..index - 1];
    let mut set: ReplayBatchSet = match mode {
        ReplayMode::Real => {
            let tagged: Vec<(&TaskData, TokenId)> = previous
                .iter()
                .map(|t| (t, t.spec.generation_token(&state.vocab)))
                .collect();
            draw_real_samples(
                &tagged,
                &plan,
                derive_seed(cfg.seed, SEED_REAL, stream_index(index, round)),
            )?
        }
        _ => {
            let names: Vec<String> = previous.iter().map(|t| t.name().to_string()).collect();
            let gen = GenerationConfig {
                top_k: cfg.top_k,
                retries: cfg.retries,
                seed: derive_seed(cfg.seed, SEED_GENERATE, stream_index(index, round)),
            };
            generate_pseudo_samples(model, &plan, &state.vocab, &names, &gen)?
        }
    };
    let accepted = set.accepted();
    let test_keys: HashSet<(String, &str)> = stream
        .iter()
        .flat_map(|t| &t.test)
        .map(|s| (s.prompt(), s.answer.as_str()))
        .collect();
    for src in &mut set.sources {
        src.samples
            .retain(|s| !test_keys.contains(&(s.prompt(), s.answer.as_str())));
    }
    let removed = accepted - set.accepted();
    if let Some(dir) = &cfg.dump_dir {
        fs::create_dir_all(dir)?;
        let name = match round {
            0 => format!("replay_task{index}.tsv"),
            r => format!("replay_task{index}_epoch{r}.tsv"),
        };
        set.dump(&dir.join(name), &state.vocab)?;
    }
    state.replay.push(ReplayStats {
        task_index: index,
        round,
        requested: set.requested(),
        attempted: set.attempted(),
        accepted,
        discarded: Rejection::ALL.iter().map(|&r| (r, set.discarded(r))).collect(),
        test_overlap_removed: removed,
    });
    Ok(set.tagged_samples().map(|(s, t)| (s.clone(), t)).collect())
}

/// Trains the stream in order with the configured method.
///
/// Before task `i`: in task-token mode the task's token is registered and the
/// embeddings grow; for `i > 1` replay data is built from the current model
/// (or, for real replay, from stored training data). The new task's samples
/// and the replay samples are then trained together.
pub fn run_lifelong(stream: &[TaskData], cfg: &TrainConfig) -> Result<RunState> {
    if cfg.method == Method::Multitask {
        return run_multitask(stream, cfg);
    }
    let mut state = RunState::new(stream, cfg)?;
    let max_len = state.model.config().max_len;
    for (i, task) in stream.iter().enumerate() {
        let index = i + 1;
        if cfg.method == Method::LamolTask {
            state.register_task(task.name(), derive_seed(cfg.seed, SEED_GROW, index as u64))?;
        }
        let token = task.spec.generation_token(&state.vocab);
        let fresh = format_all(task.train.iter().map(|s| (s, token)), &state.vocab, max_len)?;
        let boundary = state.model.clone();
        let mut shared: Option<Vec<FormattedExample>> = None;
        train_on_task(&mut state, stream, index, cfg, |state, epoch| {
            let replay = match cfg.replay_refresh {
                ReplayRefresh::PerTask => {
                    if shared.is_none() {
                        let samples = build_replay(state, &boundary, stream, index, 0, cfg)?;
                        shared = Some(format_tagged(&samples, &state.vocab, max_len)?);
                    }
                    shared.clone().unwrap_or_default()
                }
                ReplayRefresh::PerEpoch => {
                    let samples = build_replay(state, &boundary, stream, index, epoch, cfg)?;
                    format_tagged(&samples, &state.vocab, max_len)?
                }
            };
            Ok(fresh.iter().cloned().chain(replay).collect())
        })?;
        state.completed.push(task.name().to_string());
    }
    Ok(state)
}

/// All tasks' training sets mixed into one stage, shuffled every epoch.
pub fn run_multitask(tasks: &[TaskData], cfg: &TrainConfig) -> Result<RunState> {
    let mut state = RunState::new(tasks, cfg)?;
    let max_len = state.model.config().max_len;
    let items = tasks.iter().flat_map(|t| &t.train).map(|s| (s, GEN));
    let mixture = format_all(items, &state.vocab, max_len)?;
    train_on_task(&mut state, tasks, 1, cfg, |_, _| Ok(mixture.clone()))?;
    state.completed = tasks.iter().map(|t| t.name().to_string()).collect();
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("lamol".parse::<Method>().is_err());
    }

    #[test]
    fn baselines_ignore_gamma() {
        let mut cfg = TrainConfig::new(Method::Finetune);
        cfg.gamma = 0.5;
        assert_eq!(cfg.effective_gamma(), 0.0);
        assert_eq!(cfg.effective_lambda(), 0.0);
        cfg.method = Method::Multitask;
        assert_eq!(cfg.effective_gamma(), 0.0);
        assert_eq!(cfg.effective_lambda(), 0.25);
        cfg.method = Method::LamolGen;
        assert_eq!(cfg.effective_gamma(), 0.5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(Method::LamolGen);
        assert!(cfg.validate().is_ok());
        cfg.adam.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(Method::LamolGen);
        cfg.gamma = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_purpose_and_index() {
        let a = derive_seed(7, SEED_SHUFFLE, 1);
        assert_ne!(a, derive_seed(7, SEED_SHUFFLE, 2));
        assert_ne!(a, derive_seed(7, SEED_GENERATE, 1));
        assert_ne!(a, derive_seed(8, SEED_SHUFFLE, 1));
        assert_eq!(a, derive_seed(7, SEED_SHUFFLE, 1));
    }
}
