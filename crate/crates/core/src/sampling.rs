//! Token choice rules over one row of logits.

use rand::Rng;

use crate::vocab::TokenId;

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// The `k` highest-logit ids in descending order (ties by lowest id).
/// `k` is clamped to the row length.
pub fn top_k_candidates(logits: &[f64], k: usize) -> Vec<TokenId> {
    let k = k.clamp(1, logits.len());
    let mut ids: Vec<TokenId> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Samples from the softmax of the `k` highest logits.
pub fn sample_top_k<R: Rng + ?Sized>(logits: &[f64], k: usize, rng: &mut R) -> TokenId {
    let candidates = top_k_candidates(logits, k);
    if candidates.len() == 1 {
        return candidates[0];
    }
    let max = logits[candidates[0]];
    let weights: Vec<f64> = candidates.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&id, w) in candidates.iter().zip(&weights) {
        if u < *w {
            return id;
        }
        u -= w;
    }
    *candidates.last().unwrap()
}
