//! Closed-world toy tasks that share a digit vocabulary.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::Metric;

use super::{Sample, TaskData, TaskSource, TaskSpec};

const MIN_DIGITS: usize = 3;
const MAX_DIGITS: usize = 3;
const FILLER_WORDS: usize = 3;

const POSITIVE: [&str; 5] = ["good", "great", "excellent", "lovely", "fun"];
const NEGATIVE: [&str; 5] = ["bad", "awful", "terrible", "poor", "boring"];
const FILLER: [&str; 12] = [
    "the", "movie", "food", "was", "really", "today", "plot", "service", "quite", "very", "show", "and",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyntheticKind {
    Copy,
    Reverse,
    Sort,
    ToySent,
    Add,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 5] = [
        SyntheticKind::Copy,
        SyntheticKind::Reverse,
        SyntheticKind::Sort,
        SyntheticKind::ToySent,
        SyntheticKind::Add,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Copy => "copy",
            SyntheticKind::Reverse => "reverse",
            SyntheticKind::Sort => "sort",
            SyntheticKind::ToySent => "toysent",
            SyntheticKind::Add => "add",
        }
    }

    pub fn question(self) -> &'static str {
        match self {
            SyntheticKind::Copy => "what is the copy ?",
            SyntheticKind::Reverse => "what is the reverse ?",
            SyntheticKind::Sort => "what is the sorted order ?",
            SyntheticKind::ToySent => "is it positive or negative ?",
            SyntheticKind::Add => "what is the sum ?",
        }
    }

    pub fn metric(self) -> Metric {
        Metric::ExactMatch
    }

    /// Whether `answer` lies in the answer space of this kind.
    pub fn answer_fits(self, answer: &str) -> bool {
        let mut words = answer.split_whitespace().peekable();
        if words.peek().is_none() {
            return false;
        }
        match self {
            SyntheticKind::ToySent => matches!(answer.trim(), "positive" | "negative"),
            _ => words.all(|w| w.len() == 1 && w.as_bytes()[0].is_ascii_digit()),
        }
    }

    fn generate<R: Rng>(self, rng: &mut R) -> Sample {
        let digits = |rng: &mut R| -> Vec<u8> {
            let n = rng.gen_range(MIN_DIGITS..=MAX_DIGITS);
            (0..n).map(|_| rng.gen_range(0..10u8)).collect()
        };
        let join = |d: &[u8]| d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let (context, answer) = match self {
            SyntheticKind::Copy | SyntheticKind::Reverse | SyntheticKind::Sort => {
                let d = digits(rng);
                let mut out = d.clone();
                match self {
                    SyntheticKind::Reverse => out.reverse(),
                    SyntheticKind::Sort => out.sort_unstable(),
                    _ => {}
                }
                (format!("sequence : {}", join(&d)), join(&out))
            }
            SyntheticKind::Add => {
                let (a, b) = (rng.gen_range(10..100u32), rng.gen_range(10..100u32));
                let spell = |n: u32| n.to_string().chars().map(String::from).collect::<Vec<_>>().join(" ");
                (format!("numbers : {} + {}", spell(a), spell(b)), spell(a + b))
            }
            SyntheticKind::ToySent => {
                let positive = rng.gen_bool(0.5);
                let pool = if positive { &POSITIVE } else { &NEGATIVE };
                let mut words: Vec<&str> = (0..FILLER_WORDS).map(|_| *FILLER.choose(rng).unwrap()).collect();
                let at = rng.gen_range(0..=words.len());
                words.insert(at, pool.choose(rng).unwrap());
                let label = if positive { "positive" } else { "negative" };
                (format!("review : {}", words.join(" ")), label.to_string())
            }
        };
        Sample {
            context,
            question: self.question().to_string(),
            answer,
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Data(format!("unknown synthetic task kind {s:?}")))
    }
}

/// Deterministic train/test sets with disjoint prompts.
pub fn make_synthetic_task(kind: SyntheticKind, n_train: usize, n_test: usize, seed: u64) -> Result<TaskData> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Data("train and test sizes must be positive".into()));
    }
    let total = n_train + n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(total);
    let mut samples = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while samples.len() < total {
        attempts += 1;
        if attempts > total * 200 {
            return Err(Error::Data(format!(
                "{kind}: could only draw {} distinct samples of {total}",
                samples.len()
            )));
        }
        let s = kind.generate(&mut rng);
        if seen.insert(s.prompt()) {
            samples.push(s);
        }
    }
    let test = samples.split_off(n_train);
    Ok(TaskData {
        spec: TaskSpec {
            name: kind.name().to_string(),
            source: TaskSource::Synthetic(kind),
            metric: kind.metric(),
            train_size: n_train,
            test_size: n_test,
        },
        train: samples,
        test,
    })
}

/// Synthetic kinds whose content the sample resembles: the question phrase
/// decides when present, otherwise the answer space.
pub fn content_kinds(sample: &Sample) -> Vec<SyntheticKind> {
    let prompt = sample.prompt();
    let by_question: Vec<SyntheticKind> = SyntheticKind::ALL
        .into_iter()
        .filter(|k| prompt.contains(k.question()))
        .collect();
    let by_answer = SyntheticKind::ALL.into_iter().filter(|k| k.answer_fits(&sample.answer));
    if by_question.is_empty() {
        by_answer.collect()
    } else {
        by_answer.filter(|k| by_question.contains(k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_sample_shape() {
        let task = make_synthetic_task(SyntheticKind::Reverse, 20, 5, 1).unwrap();
        for s in &task.train {
            let digits: Vec<&str> = s.context.strip_prefix("sequence : ").unwrap().split(' ').collect();
            let mut rev = digits.clone();
            rev.reverse();
            assert_eq!(s.answer, rev.join(" "));
            assert_eq!(s.question, "what is the reverse ?");
        }
    }

    #[test]
    fn reverse_matches_worked_example() {
        let s = Sample {
            context: "sequence : 3 1 4".into(),
            question: SyntheticKind::Reverse.question().into(),
            answer: "4 1 3".into(),
        };
        assert_eq!(content_kinds(&s), vec![SyntheticKind::Reverse]);
    }

    #[test]
    fn toysent_label_follows_keyword() {
        let task = make_synthetic_task(SyntheticKind::ToySent, 50, 10, 3).unwrap();
        for s in task.train.iter().chain(&task.test) {
            let pos = POSITIVE.iter().any(|w| s.context.split(' ').any(|c| c == *w));
            let neg = NEGATIVE.iter().any(|w| s.context.split(' ').any(|c| c == *w));
            assert!(pos ^ neg);
            assert_eq!(s.answer, if pos { "positive" } else { "negative" });
        }
    }

    #[test]
    fn sort_and_add_are_correct() {
        let task = make_synthetic_task(SyntheticKind::Sort, 30, 5, 4).unwrap();
        for s in &task.train {
            let mut d: Vec<&str> = s.context[11..].split(' ').collect();
            d.sort();
            assert_eq!(s.answer, d.join(" "));
        }
        let task = make_synthetic_task(SyntheticKind::Add, 30, 5, 4).unwrap();
        for s in &task.train {
            let body: String = s.context[10..].split(' ').collect();
            let (a, b) = body.split_once('+').unwrap();
            let sum = a.parse::<u32>().unwrap() + b.parse::<u32>().unwrap();
            assert_eq!(s.answer.replace(' ', ""), sum.to_string());
        }
    }

    #[test]
    fn same_seed_same_data_and_disjoint_split() {
        for kind in SyntheticKind::ALL {
            let a = make_synthetic_task(kind, 40, 10, 11).unwrap();
            let b = make_synthetic_task(kind, 40, 10, 11).unwrap();
            assert_eq!(a.train, b.train);
            assert_eq!(a.test, b.test);
            let train: HashSet<String> = a.train.iter().map(Sample::prompt).collect();
            assert!(a.test.iter().all(|s| !train.contains(&s.prompt())));
        }
    }

    #[test]
    fn unknown_kind_and_zero_sizes_are_errors() {
        assert!("squad".parse::<SyntheticKind>().is_err());
        assert_eq!("SORT".parse::<SyntheticKind>().unwrap(), SyntheticKind::Sort);
        assert!(make_synthetic_task(SyntheticKind::Copy, 0, 1, 0).is_err());
    }

    #[test]
    fn digit_answers_do_not_fit_toysent() {
        assert!(!SyntheticKind::ToySent.answer_fits("1 2 3"));
        assert!(SyntheticKind::Sort.answer_fits("1 2 3"));
        assert!(!SyntheticKind::Sort.answer_fits("positive"));
    }
}
