//! Listing of pseudo-sample dumps with a content check against the prefix.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};
use lamol_core::data::{content_kinds, read_generated, GeneratedRecord, SyntheticKind};

/// The synthetic kind named by a task token, if any.
fn token_kind(token: &str) -> Option<SyntheticKind> {
    token
        .strip_prefix("__task_")
        .and_then(|s| s.strip_suffix("__"))
        .and_then(|name| name.parse().ok())
}

/// `Some(true)` when the record's prefix names a synthetic task but its
/// content looks like a different one; `None` when the prefix names no
/// synthetic task.
pub fn chaos(record: &GeneratedRecord) -> Option<bool> {
    let claimed = token_kind(&record.source_token)?;
    let kinds = content_kinds(&record.sample);
    Some(!kinds.is_empty() && !kinds.contains(&claimed))
}

pub fn listing(records: &[GeneratedRecord], n: usize) -> Result<String> {
    if n == 0 {
        bail!("n must be positive");
    }
    let mut out = String::new();
    for (i, r) in records.iter().take(n).enumerate() {
        let flag = match chaos(r) {
            Some(true) => "CHAOS",
            Some(false) => "ok",
            None => "-",
        };
        let _ = writeln!(
            out,
            "{:>4}  {:<20} {:<5}  {} => {}",
            i + 1,
            r.source_token,
            flag,
            r.sample.prompt(),
            r.sample.answer
        );
    }
    Ok(out)
}

pub fn inspect_pseudo(path: &Path, n: usize) -> Result<String> {
    if n == 0 {
        bail!("n must be positive");
    }
    let report = read_generated(path)?;
    for (line, reason) in &report.skipped {
        eprintln!("warning: {}:{line}: skipped ({reason})", path.display());
    }
    listing(&report.records, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lamol_core::data::Sample;

    fn rec(context: &str, question: &str, answer: &str, token: &str) -> GeneratedRecord {
        GeneratedRecord {
            sample: Sample::new(context, question, answer).unwrap(),
            source_token: token.into(),
        }
    }

    #[test]
    fn digit_answer_under_sentiment_token_is_chaos() {
        let r = rec("sequence : 3 1 4", "", "1 3 4", "__task_toysent__");
        assert_eq!(chaos(&r), Some(true));
        let r = rec(
            "review : great food",
            "is it positive or negative ?",
            "positive",
            "__task_toysent__",
        );
        assert_eq!(chaos(&r), Some(false));
        let r = rec("x", "", "positive", "__gen__");
        assert_eq!(chaos(&r), None);
    }

    #[test]
    fn listing_bounds() {
        let recs = vec![rec("sequence : 1 2", "what is the copy ?", "1 2", "__task_copy__")];
        assert!(listing(&recs, 0).is_err());
        assert_eq!(listing(&recs, 10).unwrap().lines().count(), 1);
        assert_eq!(listing(&[], 3).unwrap(), "");
    }
}
