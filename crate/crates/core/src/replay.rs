//! Replay budgets, pseudo-sample generation, and real-sample draws.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{parse_generated, write_generated, GeneratedRecord, Rejection, Sample, TaskData};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::sampling;
use crate::vocab::{TokenId, Vocabulary, GEN};

const GENERATION_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReplayMode {
    /// One shared GEN prefix, one aggregate budget.
    Gen,
    /// One prefix token per previous task, budget split evenly.
    Task,
    /// Stored real samples, budget split evenly.
    Real,
    None,
}

impl fmt::Display for ReplayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplayMode::Gen => "gen",
            ReplayMode::Task => "task",
            ReplayMode::Real => "real",
            ReplayMode::None => "none",
        })
    }
}

/// Requested replay counts before training task `task_index` (1-based).
///
/// In `Gen` mode `counts` holds a single aggregate entry; in `Task` and
/// `Real` modes it holds one entry per previous task, in stream order. No
/// previous tasks (or mode `None`) means no entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayPlan {
    pub task_index: usize,
    pub gamma: f64,
    pub mode: ReplayMode,
    pub counts: Vec<usize>,
}

impl ReplayPlan {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

// Guards against products like 0.07 * 100 landing just below an integer.
fn floor_count(x: f64) -> usize {
    (x + 1e-9).floor() as usize
}

pub fn compute_replay_plan(
    gamma: f64,
    new_task_size: usize,
    task_index: usize,
    mode: ReplayMode,
) -> Result<ReplayPlan> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::invalid(
            "compute_replay_plan",
            format!("gamma must be >= 0, got {gamma}"),
        ));
    }
    if task_index == 0 {
        return Err(Error::invalid("compute_replay_plan", "task index is 1-based"));
    }
    if new_task_size == 0 {
        return Err(Error::invalid("compute_replay_plan", "new task is empty"));
    }
    let previous = task_index - 1;
    let budget = gamma * new_task_size as f64;
    let counts = match mode {
        _ if previous == 0 => Vec::new(),
        ReplayMode::None => Vec::new(),
        ReplayMode::Gen => vec![floor_count(budget)],
        ReplayMode::Task | ReplayMode::Real => vec![floor_count(budget / previous as f64); previous],
    };
    Ok(ReplayPlan {
        task_index,
        gamma,
        mode,
        counts,
    })
}

/// Replay data obtained for one plan entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySource {
    /// Previous task the entry belongs to; `None` for the shared GEN budget.
    pub task: Option<String>,
    /// Prefix used for generation and for the LM format of these samples.
    pub token: TokenId,
    pub requested: usize,
    pub attempted: usize,
    pub samples: Vec<Sample>,
    pub discarded: BTreeMap<Rejection, usize>,
}

impl ReplaySource {
    fn new(task: Option<String>, token: TokenId, requested: usize) -> Self {
        Self {
            task,
            token,
            requested,
            attempted: 0,
            samples: Vec::new(),
            discarded: BTreeMap::new(),
        }
    }

    pub fn discarded_total(&self) -> usize {
        self.discarded.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayBatchSet {
    pub sources: Vec<ReplaySource>,
}

impl ReplayBatchSet {
    pub fn requested(&self) -> usize {
        self.sources.iter().map(|s| s.requested).sum()
    }

    pub fn accepted(&self) -> usize {
        self.sources.iter().map(|s| s.samples.len()).sum()
    }

    pub fn attempted(&self) -> usize {
        self.sources.iter().map(|s| s.attempted).sum()
    }

    pub fn discarded(&self, reason: Rejection) -> usize {
        self.sources
            .iter()
            .map(|s| s.discarded.get(&reason).copied().unwrap_or(0))
            .sum()
    }

    /// Fraction of attempts discarded; 0 when nothing was attempted.
    pub fn discard_rate(&self) -> f64 {
        let attempted = self.attempted();
        if attempted == 0 {
            return 0.0;
        }
        (attempted - self.accepted()) as f64 / attempted as f64
    }

    /// Every accepted sample with the token its LM format should start with.
    pub fn tagged_samples(&self) -> impl Iterator<Item = (&Sample, TokenId)> {
        self.sources
            .iter()
            .flat_map(|s| s.samples.iter().map(move |x| (x, s.token)))
    }

    pub fn records(&self, vocab: &Vocabulary) -> Result<Vec<GeneratedRecord>> {
        let mut out = Vec::with_capacity(self.accepted());
        for src in &self.sources {
            let token = vocab.decode(&[src.token])?;
            out.extend(src.samples.iter().map(|s| GeneratedRecord {
                sample: s.clone(),
                source_token: token.clone(),
            }));
        }
        Ok(out)
    }

    /// Writes accepted samples in the generated-sample dump format.
    pub fn dump(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        write_generated(path, &self.records(vocab)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub top_k: usize,
    /// Extra rounds spent regenerating discarded samples.
    pub retries: usize,
    pub seed: u64,
}

/// Samples pseudo-examples of previous tasks from `model`.
///
/// Each attempt starts from a one-token prefix (GEN, or the previous task's
/// token in `Task` mode) and runs top-k sampling until EOS or the model's
/// max length. Sequences failing the structural filter are counted per
/// reason. Accepted samples are attributed to the prefix, whatever their
/// content. `previous` lists the earlier tasks in stream order.
pub fn generate_pseudo_samples(
    model: &LanguageModel,
    plan: &ReplayPlan,
    vocab: &Vocabulary,
    previous: &[String],
    cfg: &GenerationConfig,
) -> Result<ReplayBatchSet> {
    if cfg.top_k == 0 {
        return Err(Error::invalid("generate_pseudo_samples", "top-k must be at least 1"));
    }
    let mut set = ReplayBatchSet::default();
    match plan.mode {
        ReplayMode::Gen => {
            if let Some(&n) = plan.counts.first() {
                set.sources.push(ReplaySource::new(None, GEN, n));
            }
        }
        ReplayMode::Task => {
            if plan.counts.len() != previous.len() {
                return Err(Error::invalid(
                    "generate_pseudo_samples",
                    format!(
                        "plan has {} entries for {} previous tasks",
                        plan.counts.len(),
                        previous.len()
                    ),
                ));
            }
            for (name, &n) in previous.iter().zip(&plan.counts) {
                let token = vocab
                    .task_token(name)
                    .ok_or_else(|| Error::Vocabulary(format!("no task token registered for {name:?}")))?;
                set.sources.push(ReplaySource::new(Some(name.clone()), token, n));
            }
        }
        ReplayMode::Real | ReplayMode::None => {
            return Err(Error::invalid(
                "generate_pseudo_samples",
                format!("plan mode {} does not generate", plan.mode),
            ));
        }
    }
    if let Some(&bad) = set
        .sources
        .iter()
        .map(|s| &s.token)
        .find(|&&t| t >= model.config().vocab_size)
    {
        return Err(Error::Model(format!("prefix token {bad} outside the model vocabulary")));
    }

    let max_new = model.config().max_len - 1;
    for (index, src) in set.sources.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        for _ in 0..=cfg.retries {
            let missing = src.requested - src.samples.len();
            if missing == 0 {
                break;
            }
            let mut remaining = missing;
            while remaining > 0 {
                let n = remaining.min(GENERATION_CHUNK);
                remaining -= n;
                let prefixes = vec![[src.token]; n];
                let outs = model.decode_batch(&prefixes, max_new, |row| {
                    sampling::sample_top_k(row, cfg.top_k, &mut rng)
                })?;
                for cont in outs {
                    src.attempted += 1;
                    let mut seq = Vec::with_capacity(cont.len() + 1);
                    seq.push(src.token);
                    seq.extend(cont);
                    match parse_generated(&seq, vocab) {
                        Ok(sample) => src.samples.push(sample),
                        Err(reason) => *src.discarded.entry(reason).or_default() += 1,
                    }
                }
            }
        }
    }
    Ok(set)
}

/// Uniform draws from each previous task's training set: without
/// replacement, or with replacement when the request exceeds the set.
/// `previous` pairs each earlier task with the token its LM format uses.
pub fn draw_real_samples(previous: &[(&TaskData, TokenId)], plan: &ReplayPlan, seed: u64) -> Result<ReplayBatchSet> {
    if plan.mode != ReplayMode::Real {
        return Err(Error::invalid(
            "draw_real_samples",
            format!("plan mode {} does not draw real data", plan.mode),
        ));
    }
    if plan.counts.len() != previous.len() {
        return Err(Error::invalid(
            "draw_real_samples",
            format!(
                "plan has {} entries for {} previous tasks",
                plan.counts.len(),
                previous.len()
            ),
        ));
    }
    let mut set = ReplayBatchSet::default();
    for (index, (&(task, token), &n)) in previous.iter().zip(&plan.counts).enumerate() {
        if task.train.is_empty() {
            return Err(Error::Data(format!("task {} has no training data", task.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let samples: Vec<Sample> = if n <= task.train.len() {
            task.train.choose_multiple(&mut rng, n).cloned().collect()
        } else {
            (0..n)
                .map(|_| task.train[rng.gen_range(0..task.train.len())].clone())
                .collect()
        };
        let mut src = ReplaySource::new(Some(task.name().to_string()), token, n);
        src.attempted = n;
        src.samples = samples;
        set.sources.push(src);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_task, SyntheticKind};
    use crate::model::ModelConfig;

    #[test]
    fn paper_budget_examples() {
        let p = compute_replay_plan(0.2, 1000, 3, ReplayMode::Task).unwrap();
        assert_eq!(p.counts, vec![100, 100]);
        let p = compute_replay_plan(0.05, 6414, 2, ReplayMode::Gen).unwrap();
        assert_eq!(p.counts, vec![320]);
        for mode in [ReplayMode::Gen, ReplayMode::Task, ReplayMode::Real] {
            assert_eq!(compute_replay_plan(0.0, 50, 4, mode).unwrap().total(), 0);
            assert_eq!(compute_replay_plan(0.5, 50, 1, mode).unwrap().total(), 0);
        }
    }

    #[test]
    fn invalid_plans() {
        assert!(compute_replay_plan(-0.1, 10, 2, ReplayMode::Gen).is_err());
        assert!(compute_replay_plan(f64::NAN, 10, 2, ReplayMode::Gen).is_err());
        assert!(compute_replay_plan(0.1, 10, 0, ReplayMode::Gen).is_err());
        assert!(compute_replay_plan(0.1, 0, 2, ReplayMode::Gen).is_err());
    }

    #[test]
    fn real_draws_follow_the_fallback_rule() {
        let task = make_synthetic_task(SyntheticKind::Copy, 5, 2, 1).unwrap();
        let mut plan = compute_replay_plan(1.0, 5, 2, ReplayMode::Real).unwrap();
        let set = draw_real_samples(&[(&task, GEN)], &plan, 3).unwrap();
        let mut got = set.sources[0].samples.clone();
        got.sort();
        let mut all = task.train.clone();
        all.sort();
        assert_eq!(got, all);

        plan.counts = vec![10];
        let set = draw_real_samples(&[(&task, GEN)], &plan, 3).unwrap();
        assert_eq!(set.accepted(), 10);
        assert!(set.sources[0].samples.iter().all(|s| task.train.contains(s)));

        plan.counts = vec![0];
        assert_eq!(draw_real_samples(&[(&task, GEN)], &plan, 3).unwrap().accepted(), 0);
        assert_eq!(
            draw_real_samples(&[(&task, GEN)], &plan, 3).unwrap(),
            draw_real_samples(&[(&task, GEN)], &plan, 3).unwrap()
        );
    }

    #[test]
    fn zero_plan_generates_nothing() {
        let vocab = Vocabulary::build(&["a b c"], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = LanguageModel::new(ModelConfig::new(vocab.len()), &mut rng).unwrap();
        let plan = compute_replay_plan(0.0, 10, 2, ReplayMode::Gen).unwrap();
        let cfg = GenerationConfig {
            top_k: 20,
            retries: 3,
            seed: 1,
        };
        let set = generate_pseudo_samples(&model, &plan, &vocab, &["t".into()], &cfg).unwrap();
        assert_eq!(set.attempted(), 0);
        assert_eq!(set.accepted(), 0);
    }

    #[test]
    fn task_mode_requires_registered_tokens() {
        let vocab = Vocabulary::build(&["a b c"], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = LanguageModel::new(ModelConfig::new(vocab.len()), &mut rng).unwrap();
        let plan = compute_replay_plan(0.5, 10, 2, ReplayMode::Task).unwrap();
        let cfg = GenerationConfig {
            top_k: 20,
            retries: 0,
            seed: 1,
        };
        let err = generate_pseudo_samples(&model, &plan, &vocab, &["sort".into()], &cfg);
        assert!(matches!(err, Err(Error::Vocabulary(_))));
    }
}
