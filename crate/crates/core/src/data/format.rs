//! QA-format and LM-format encodings of a sample.

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary, ANS, EOS};

use super::Sample;

/// Both training encodings of one sample.
///
/// `qa_tokens = context ++ question ++ ANS ++ answer ++ EOS`, with the loss
/// mask set exactly on the answer and EOS positions.
/// `lm_tokens = generation token ++ qa_tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormattedExample {
    pub qa_tokens: Vec<TokenId>,
    pub qa_loss_mask: Vec<bool>,
    pub lm_tokens: Vec<TokenId>,
}

impl FormattedExample {
    /// QA tokens up to and including ANS: the decoding prompt.
    pub fn prompt(&self) -> &[TokenId] {
        let ans = self
            .qa_tokens
            .iter()
            .position(|&t| t == ANS)
            .expect("formatted example contains ANS");
        &self.qa_tokens[..=ans]
    }
}

/// Encodes `sample` so that the LM format fits in `max_len` tokens. Leading
/// context tokens are dropped first, then leading question tokens; answer
/// tokens are never dropped.
pub fn format_example(
    sample: &Sample,
    vocab: &Vocabulary,
    gen_token: TokenId,
    max_len: usize,
) -> Result<FormattedExample> {
    let answer = vocab.encode(&sample.answer);
    if answer.is_empty() {
        return Err(Error::Data("sample answer is empty".into()));
    }
    // generation token + ANS + answer + EOS must fit.
    let fixed = answer.len() + 3;
    if fixed > max_len {
        return Err(Error::Data(format!(
            "answer of {} tokens cannot fit in max length {max_len}",
            answer.len()
        )));
    }
    let mut context = vocab.encode(&sample.context);
    let mut question = vocab.encode(&sample.question);
    let budget = max_len - fixed;
    let excess = (context.len() + question.len()).saturating_sub(budget);
    if excess > 0 {
        let from_context = excess.min(context.len());
        context.drain(..from_context);
        question.drain(..excess - from_context);
    }

    let prompt_len = context.len() + question.len() + 1;
    let mut qa_tokens = Vec::with_capacity(prompt_len + answer.len() + 1);
    qa_tokens.extend_from_slice(&context);
    qa_tokens.extend_from_slice(&question);
    qa_tokens.push(ANS);
    qa_tokens.extend_from_slice(&answer);
    qa_tokens.push(EOS);
    let qa_loss_mask = (0..qa_tokens.len()).map(|i| i >= prompt_len).collect();

    let mut lm_tokens = Vec::with_capacity(qa_tokens.len() + 1);
    lm_tokens.push(gen_token);
    lm_tokens.extend_from_slice(&qa_tokens);
    Ok(FormattedExample {
        qa_tokens,
        qa_loss_mask,
        lm_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::GEN;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["a b c d e q ? x y"], 1).unwrap()
    }

    #[test]
    fn mask_covers_answer_and_eos() {
        let v = vocab();
        let s = Sample::new("a b", "q ?", "x").unwrap();
        let f = format_example(&s, &v, GEN, 32).unwrap();
        assert_eq!(f.qa_loss_mask.iter().filter(|&&m| m).count(), 2);
        assert_eq!(f.qa_tokens.len(), 7);
        assert_eq!(f.qa_tokens[4], ANS);
        assert_eq!(*f.qa_tokens.last().unwrap(), EOS);
        assert_eq!(f.lm_tokens.len(), f.qa_tokens.len() + 1);
        assert_eq!(f.lm_tokens[0], GEN);
        assert_eq!(&f.lm_tokens[1..], f.qa_tokens.as_slice());
        assert_eq!(f.prompt(), &f.qa_tokens[..5]);
    }

    #[test]
    fn truncation_drops_leading_context_first() {
        let v = vocab();
        let s = Sample::new("a b c d e", "q ?", "x y").unwrap();
        // budget for context + question = 8 - (2 + 3) = 3
        let f = format_example(&s, &v, GEN, 8).unwrap();
        assert_eq!(f.lm_tokens.len(), 8);
        assert_eq!(v.decode(&f.qa_tokens).unwrap(), "e q ? __ans__ x y __eos__");

        let f = format_example(&s, &v, GEN, 6).unwrap();
        assert_eq!(v.decode(&f.qa_tokens).unwrap(), "? __ans__ x y __eos__");
    }

    #[test]
    fn answer_too_long_is_an_error() {
        let v = vocab();
        let s = Sample::new("a", "q", "x y x y").unwrap();
        assert!(format_example(&s, &v, GEN, 6).is_err());
        assert!(format_example(&s, &v, GEN, 7).is_ok());
    }
}
