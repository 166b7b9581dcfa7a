//! Word-level vocabulary with namespaced special tokens.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const ANS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const GEN: TokenId = 4;

const SPECIALS: [&str; 5] = ["__pad__", "__unk__", "__ans__", "__eos__", "__gen__"];

/// True for strings in the reserved `__name__` namespace. Such words never
/// enter the vocabulary as ordinary entries.
pub fn is_sentinel(word: &str) -> bool {
    word.len() > 4 && word.starts_with("__") && word.ends_with("__")
}

fn task_sentinel(name: &str) -> String {
    format!("__task_{name}__")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    words: HashMap<String, TokenId>,
    tasks: Vec<(String, TokenId)>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        Self {
            tokens: SPECIALS.iter().map(|s| s.to_string()).collect(),
            words: HashMap::new(),
            tasks: Vec::new(),
        }
    }

    /// Every lowercased word occurring at least `min_count` times gets an id,
    /// in alphabetical order after the specials.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Vocabulary("empty corpus".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for word in text.as_ref().split_whitespace() {
                let word = word.to_lowercase();
                if !is_sentinel(&word) {
                    *counts.entry(word).or_default() += 1;
                }
            }
        }
        let mut vocab = Self::with_specials();
        for (word, count) in counts {
            if count >= min_count.max(1) {
                vocab.push_word(word);
            }
        }
        Ok(vocab)
    }

    fn push_word(&mut self, word: String) {
        let id = self.tokens.len();
        self.words.insert(word.clone(), id);
        self.tokens.push(word);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn word_id(&self, word: &str) -> Option<TokenId> {
        self.words.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < SPECIALS.len() || self.tasks.iter().any(|&(_, t)| t == id)
    }

    /// Registers a generation token for `task`; the new id is the previous size.
    pub fn add_task_token(&mut self, task: &str) -> Result<TokenId> {
        if task.is_empty() || task.chars().any(char::is_whitespace) {
            return Err(Error::Vocabulary(format!("invalid task name {task:?}")));
        }
        if self.task_token(task).is_some() {
            return Err(Error::Vocabulary(format!("task {task:?} already registered")));
        }
        let id = self.tokens.len();
        self.tokens.push(task_sentinel(task));
        self.tasks.push((task.to_string(), id));
        Ok(id)
    }

    pub fn task_token(&self, task: &str) -> Option<TokenId> {
        self.tasks.iter().find(|(n, _)| n == task).map(|&(_, id)| id)
    }

    pub fn task_name(&self, id: TokenId) -> Option<&str> {
        self.tasks.iter().find(|&&(_, t)| t == id).map(|(n, _)| n.as_str())
    }

    /// Registered task names in registration order.
    pub fn task_names(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|(n, _)| n.as_str())
    }

    /// Lowercased whitespace tokenization. Sentinel strings map back to their
    /// special ids so that `encode(decode(ids)) == ids`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                if is_sentinel(&w) {
                    self.sentinel_id(&w).unwrap_or(UNK)
                } else {
                    self.words.get(&w).copied().unwrap_or(UNK)
                }
            })
            .collect()
    }

    fn sentinel_id(&self, word: &str) -> Option<TokenId> {
        if let Some(pos) = SPECIALS.iter().position(|s| *s == word) {
            return Some(pos);
        }
        let name = word.strip_prefix("__task_")?.strip_suffix("__")?;
        self.task_token(name)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self
                .tokens
                .get(id)
                .ok_or_else(|| Error::Vocabulary(format!("id {id} out of range (size {})", self.len())))?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for tok in &self.tokens {
            let _ = writeln!(s, "{tok}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Vocabulary("file must start with the five special tokens".into()));
        }
        let mut vocab = Self::with_specials();
        for (lineno, line) in lines.iter().enumerate().skip(SPECIALS.len()) {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("line {}: invalid token", lineno + 1)));
            }
            if is_sentinel(line) {
                let name = line
                    .strip_prefix("__task_")
                    .and_then(|s| s.strip_suffix("__"))
                    .ok_or_else(|| Error::Vocabulary(format!("line {}: unknown special {line}", lineno + 1)))?;
                vocab.add_task_token(name)?;
            } else if vocab.words.contains_key(*line) {
                return Err(Error::Vocabulary(format!("line {}: duplicate {line}", lineno + 1)));
            } else {
                vocab.push_word(line.to_string());
            }
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_occupy_lowest_ids() {
        let v = Vocabulary::build(&["a b a"], 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(ANS), Some("__ans__"));
        assert_eq!(v.word_id("a"), Some(5));
        assert_eq!(v.word_id("b"), Some(6));
    }

    #[test]
    fn min_count_drops_rare_words_to_unk() {
        let v = Vocabulary::build(&["a b a"], 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.encode("b"), vec![UNK]);
        assert_eq!(v.encode("a"), vec![5]);
    }

    #[test]
    fn literal_special_words_are_ordinary_words() {
        let v = Vocabulary::build(&["ans eos gen __ans__"], 1).unwrap();
        let ans = v.word_id("ans").unwrap();
        assert_ne!(ans, ANS);
        assert!(v.word_id("__ans__").is_none());
        assert_eq!(v.encode("ANS"), vec![ans]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(Vocabulary::build(&empty, 1).is_err());
    }

    #[test]
    fn encode_lowercases_and_maps_unknown() {
        let v = Vocabulary::build(&["a b"], 1).unwrap();
        assert_eq!(v.encode("A b"), vec![5, 6]);
        assert_eq!(v.encode("zzz"), vec![UNK]);
        assert_eq!(v.decode(&v.encode("a b")).unwrap(), "a b");
    }

    #[test]
    fn decode_out_of_range_is_an_error() {
        let v = Vocabulary::build(&["a"], 1).unwrap();
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn task_tokens_append_consecutively() {
        let mut v = Vocabulary::build(&["a b"], 1).unwrap();
        let size = v.len();
        assert_eq!(v.add_task_token("sort").unwrap(), size);
        assert_eq!(v.len(), size + 1);
        assert_eq!(v.add_task_token("copy").unwrap(), size + 1);
        assert_eq!(v.add_task_token("add").unwrap(), size + 2);
        assert!(v.add_task_token("sort").is_err());
        assert_eq!(v.task_name(size + 1), Some("copy"));
        assert!(v.is_special(size));
        assert_eq!(v.decode(&[size]).unwrap(), "__task_sort__");
    }

    #[test]
    fn text_round_trip() {
        let mut v = Vocabulary::build(&["x y z"], 1).unwrap();
        v.add_task_token("reverse").unwrap();
        let text = v.to_text();
        assert_eq!(text.lines().nth(2), Some("__ans__"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn task_tokens_never_move_existing_ids(names in prop::collection::hash_set("[a-z]{1,6}", 1..8)) {
            let mut v = Vocabulary::build(&["one two three four"], 1).unwrap();
            let before: Vec<(String, TokenId)> =
                ["one", "two", "three", "four"].iter().map(|w| (w.to_string(), v.word_id(w).unwrap())).collect();
            let mut added = vec![];
            for n in &names {
                added.push((n.clone(), v.add_task_token(n).unwrap()));
                for (w, id) in &before {
                    prop_assert_eq!(v.word_id(w), Some(*id));
                }
                for (n, id) in &added {
                    prop_assert_eq!(v.task_token(n), Some(*id));
                }
            }
        }

        #[test]
        fn encode_decode_encode_is_stable(ids in prop::collection::vec(0usize..12, 0..20)) {
            let mut v = Vocabulary::build(&["p q r s t u"], 1).unwrap();
            v.add_task_token("t1").unwrap();
            let text = v.decode(&ids).unwrap();
            let once = v.encode(&text);
            prop_assert_eq!(&once, &ids);
            let again = v.encode(&v.decode(&once).unwrap());
            prop_assert_eq!(again, once);
        }
    }
}
