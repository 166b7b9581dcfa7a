//! Samples, their token encodings, and task sources.

mod external;
mod format;
mod parse;
mod sample;
mod synthetic;

use std::path::PathBuf;

pub use external::{
    load_external_task, read_generated, read_samples, write_generated, write_samples, GeneratedRecord, LoadReport,
};
pub use format::{format_example, FormattedExample};
pub use parse::{parse_generated, Rejection};
pub use sample::{sanitize, Sample};
pub use synthetic::{content_kinds, make_synthetic_task, SyntheticKind};

use crate::eval::Metric;
use crate::vocab::{TokenId, Vocabulary, GEN};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskSource {
    Synthetic(SyntheticKind),
    External { train: PathBuf, test: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub source: TaskSource,
    pub metric: Metric,
    pub train_size: usize,
    pub test_size: usize,
}

impl TaskSpec {
    /// The task's own token when registered, the shared GEN token otherwise.
    pub fn generation_token(&self, vocab: &Vocabulary) -> TokenId {
        vocab.task_token(&self.name).unwrap_or(GEN)
    }
}

/// A task with its disjoint train and test sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskData {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// Renames the task (and hence its task token).
    pub fn with_name(mut self, name: &str) -> Self {
        self.spec.name = name.to_string();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus_vocab(tasks: &[TaskData]) -> Vocabulary {
        let texts: Vec<String> = tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.test))
            .flat_map(|s| [s.context.clone(), s.question.clone(), s.answer.clone()])
            .collect();
        Vocabulary::build(&texts, 1).unwrap()
    }

    #[test]
    fn format_then_parse_round_trips_every_kind() {
        let tasks: Vec<TaskData> = SyntheticKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &k)| make_synthetic_task(k, 150, 50, 100 + i as u64).unwrap())
            .collect();
        let mut vocab = corpus_vocab(&tasks);
        for t in &tasks {
            vocab.add_task_token(t.name()).unwrap();
        }
        let mut checked = 0;
        for t in &tasks {
            let gen = t.spec.generation_token(&vocab);
            for s in t.train.iter().chain(&t.test) {
                let f = format_example(s, &vocab, gen, 128).unwrap();
                assert!(f.qa_loss_mask.iter().filter(|&&m| m).count() >= 2);
                let parsed = parse_generated(&f.lm_tokens, &vocab).unwrap();
                assert_eq!(parsed.answer, s.answer);
                assert_eq!(parsed.context, s.prompt());
                checked += 1;
            }
        }
        assert_eq!(checked, 1000);
    }

    proptest! {
        #[test]
        fn every_sequence_is_accepted_or_has_one_reason(ids in prop::collection::vec(0usize..12, 0..16)) {
            let mut vocab = Vocabulary::build(&["a b c d e f"], 1).unwrap();
            vocab.add_task_token("t").unwrap();
            match parse_generated(&ids, &vocab) {
                Ok(s) => {
                    prop_assert!(!s.answer.is_empty());
                    prop_assert_eq!(ids.iter().filter(|&&t| t == crate::vocab::ANS).count() >= 1, true);
                }
                Err(r) => prop_assert!(Rejection::ALL.contains(&r)),
            }
        }
    }
}
