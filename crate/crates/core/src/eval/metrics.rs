use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    ExactMatch,
    NormalizedF1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::ExactMatch => "em",
            Metric::NormalizedF1 => "nf1",
        }
    }

    /// Per-sample score in `[0, 1]`.
    pub fn score(self, prediction: &str, gold: &str) -> f64 {
        match self {
            Metric::ExactMatch => exact_match(prediction, gold),
            Metric::NormalizedF1 => normalized_f1(prediction, gold),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(Metric::ExactMatch),
            "nf1" => Ok(Metric::NormalizedF1),
            other => Err(Error::Data(format!("unknown metric {other:?}"))),
        }
    }
}

fn collapse(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1.0 iff the lowercased, whitespace-collapsed texts are identical.
pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    let norm = |t: &str| collapse(&t.to_lowercase());
    f64::from(u8::from(norm(prediction) == norm(gold)))
}

/// Lowercase, delete punctuation, drop the articles a/an/the, split on whitespace.
fn nf1_tokens(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Token-level F1 over bag-of-words overlap after normalization. Two empty
/// normalized texts score 1; exactly one empty scores 0.
pub fn normalized_f1(prediction: &str, gold: &str) -> f64 {
    let pred = nf1_tokens(prediction);
    let gold = nf1_tokens(gold);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("positive", "positive"), 1.0);
        assert_eq!(exact_match("Positive ", "positive"), 1.0);
        assert_eq!(exact_match("positive", "negative"), 0.0);
        assert_eq!(exact_match("4  1\t3", "4 1 3"), 1.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(normalized_f1("the cat sat", "cat sat"), 1.0);
        assert_eq!(normalized_f1("x y", "y z"), 0.5);
        assert_eq!(normalized_f1("x y", "x y"), 1.0);
        assert_eq!(normalized_f1("the", "an"), 1.0);
        assert_eq!(normalized_f1("the", "cat"), 0.0);
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("EM".parse::<Metric>().unwrap(), Metric::ExactMatch);
        assert_eq!("nf1".parse::<Metric>().unwrap(), Metric::NormalizedF1);
        assert!("lfem".parse::<Metric>().is_err());
    }

    proptest! {
        #[test]
        fn f1_is_symmetric_and_bounded(a in "[a-c .,!]{0,12}", b in "[a-c .,!]{0,12}") {
            let ab = normalized_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - normalized_f1(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn exact_match_implies_full_f1(a in "[a-d ]{0,12}", upper in any::<bool>()) {
            let b = if upper { a.to_uppercase() } else { format!(" {a} ") };
            if exact_match(&a, &b) == 1.0 {
                prop_assert_eq!(normalized_f1(&a, &b), 1.0);
            }
        }

        #[test]
        fn f1_is_one_iff_bags_equal(a in "[a-c ]{0,10}", b in "[a-c ]{0,10}") {
            let mut x = nf1_tokens(&a);
            let mut y = nf1_tokens(&b);
            x.sort();
            y.sort();
            prop_assert_eq!(normalized_f1(&a, &b) == 1.0, x == y);
        }
    }
}
