use crate::data::{format_example, Sample};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::sampling;
use crate::vocab::{Vocabulary, EOS, GEN};

use super::Metric;

const DECODE_CHUNK: usize = 64;

/// Greedy answers for each sample, decoded from `context ++ question ++ ANS`
/// and cut at EOS. Special tokens are dropped from the text.
pub fn predict(
    model: &LanguageModel,
    vocab: &Vocabulary,
    samples: &[Sample],
    max_new_tokens: usize,
) -> Result<Vec<String>> {
    let max_len = model.config().max_len;
    let prompts = samples
        .iter()
        .map(|s| Ok(format_example(s, vocab, GEN, max_len)?.prompt().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in prompts.chunks(DECODE_CHUNK) {
        for cont in model.decode_batch(chunk, max_new_tokens, sampling::argmax)? {
            let words: Vec<&str> = cont
                .iter()
                .take_while(|&&t| t != EOS)
                .filter(|&&t| !vocab.is_special(t))
                .filter_map(|&t| vocab.token(t))
                .collect();
            out.push(words.join(" "));
        }
    }
    Ok(out)
}

/// Mean per-sample metric over `test`, scaled to `[0, 100]`. Samples whose
/// decode runs out of budget are scored on the truncated text.
pub fn evaluate_task(
    model: &LanguageModel,
    vocab: &Vocabulary,
    test: &[Sample],
    metric: Metric,
    max_new_tokens: usize,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let predictions = predict(model, vocab, test, max_new_tokens)?;
    let total: f64 = predictions
        .iter()
        .zip(test)
        .map(|(p, s)| metric.score(p, &s.answer))
        .sum();
    Ok(100.0 * total / test.len() as f64)
}
