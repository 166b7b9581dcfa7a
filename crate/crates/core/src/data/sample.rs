use crate::error::{Error, Result};
use crate::vocab::is_sentinel;

/// One question-answering example.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sample {
    pub context: String,
    pub question: String,
    pub answer: String,
}

/// Collapses whitespace (tabs and newlines included) to single spaces and
/// drops words in the reserved special-token namespace.
pub fn sanitize(text: &str) -> String {
    text.split_whitespace()
        .filter(|w| !is_sentinel(&w.to_lowercase()))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Sample {
    pub fn new(context: &str, question: &str, answer: &str) -> Result<Self> {
        let sample = Self {
            context: sanitize(context),
            question: sanitize(question),
            answer: sanitize(answer),
        };
        if sample.answer.is_empty() {
            return Err(Error::Data("sample answer is empty".into()));
        }
        Ok(sample)
    }

    /// Context and question joined the way they appear in a token sequence.
    pub fn prompt(&self) -> String {
        match (self.context.is_empty(), self.question.is_empty()) {
            (true, _) => self.question.clone(),
            (_, true) => self.context.clone(),
            _ => format!("{} {}", self.context, self.question),
        }
    }
}
