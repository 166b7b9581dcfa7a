//! Structural filter for generated sequences.

use std::fmt;

use crate::vocab::{TokenId, Vocabulary, ANS, EOS, GEN};

use super::Sample;

/// Why a generated sequence was discarded. Checked in this order: the ANS
/// count over the text before the first EOS, then EOS presence, then the
/// answer content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rejection {
    NoAns,
    MultiAns,
    NoEos,
    EmptyAnswer,
}

impl Rejection {
    pub const ALL: [Rejection; 4] = [
        Rejection::NoAns,
        Rejection::MultiAns,
        Rejection::NoEos,
        Rejection::EmptyAnswer,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Rejection::NoAns => "NO_ANS",
            Rejection::MultiAns => "MULTI_ANS",
            Rejection::NoEos => "NO_EOS",
            Rejection::EmptyAnswer => "EMPTY_ANSWER",
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Turns a generated token sequence back into a sample.
///
/// A leading generation token (GEN or a task token) is dropped. Everything
/// before the single ANS becomes the context, stored without a
/// context/question split; the tokens between ANS and the first EOS are the
/// answer. Stray special tokens inside either part are removed.
pub fn parse_generated(ids: &[TokenId], vocab: &Vocabulary) -> Result<Sample, Rejection> {
    let body = match ids.first() {
        Some(&first) if first == GEN || vocab.task_name(first).is_some() => &ids[1..],
        _ => ids,
    };
    let eos = body.iter().position(|&t| t == EOS);
    let before_eos = &body[..eos.unwrap_or(body.len())];

    let mut ans_positions = before_eos.iter().enumerate().filter(|(_, &t)| t == ANS).map(|(i, _)| i);
    let ans = match (ans_positions.next(), ans_positions.next()) {
        (None, _) => return Err(Rejection::NoAns),
        (Some(_), Some(_)) => return Err(Rejection::MultiAns),
        (Some(pos), None) => pos,
    };
    if eos.is_none() {
        return Err(Rejection::NoEos);
    }

    let words = |toks: &[TokenId]| -> String {
        toks.iter()
            .filter(|&&t| t < vocab.len() && !vocab.is_special(t))
            .filter_map(|&t| vocab.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let answer = words(&before_eos[ans + 1..]);
    if answer.is_empty() {
        return Err(Rejection::EmptyAnswer);
    }
    Ok(Sample {
        context: words(&before_eos[..ans]),
        question: String::new(),
        answer,
    })
}
