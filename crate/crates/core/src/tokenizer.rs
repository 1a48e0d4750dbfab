//! Word-level tokenizer with punctuation split out as separate tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const N_SPECIAL: usize = 4;

const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const PUNCT: &[char] = &[';', ',', ':', '(', ')', '%', '.'];
/// Punctuation that attaches to the preceding token when joining.
const CLOSING: &[&str] = &[";", ",", ":", ")", "%", "."];

/// Lowercases and splits into word and punctuation tokens.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if PUNCT.contains(&ch) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Joins tokens with single spaces, except before closing punctuation and
/// after an opening parenthesis.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev_open = true;
    for t in tokens {
        let t = t.as_ref();
        if !prev_open && !CLOSING.contains(&t) {
            out.push(' ');
        }
        out.push_str(t);
        prev_open = t == "(";
    }
    out
}

/// Canonical text form: `join_tokens(normalize_tokens(text))`.
pub fn normalize(text: &str) -> String {
    join_tokens(&normalize_tokens(text))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    min_count: usize,
}

impl Vocab {
    /// Builds a vocabulary from report texts. Tokens with at least
    /// `min_count` occurrences are kept, ordered by count (descending) and
    /// then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if min_count == 0 {
            return Err(Error::InvalidInput("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in normalize_tokens(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t).collect(), min_count))
    }

    fn from_tokens(words: Vec<String>, min_count: usize) -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words).collect();
        let index = tokens
            .iter()
            .enumerate()
            .skip(N_SPECIAL)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == N_SPECIAL
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[N_SPECIAL..]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str, add_specials: bool) -> Vec<usize> {
        let mut ids = Vec::new();
        if add_specials {
            ids.push(BOS);
        }
        ids.extend(normalize_tokens(text).iter().map(|t| self.id(t).unwrap_or(UNK)));
        if add_specials {
            ids.push(EOS);
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.len() {
                return Err(Error::TokenOutOfRange { id, size: self.len() });
            }
            if id >= N_SPECIAL {
                words.push(self.tokens[id].as_str());
            }
        }
        Ok(join_tokens(&words))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabFile {
            tokens: self.words().to_vec(),
            min_count: self.min_count,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        let mut seen = std::collections::HashSet::new();
        for t in &f.tokens {
            if SPECIAL_TOKENS.contains(&t.as_str()) || !seen.insert(t) {
                return Err(Error::InvalidInput(format!("vocabulary token `{t}` is duplicated or reserved")));
            }
        }
        Ok(Self::from_tokens(f.tokens, f.min_count))
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VocabFile {
            tokens: self.words().to_vec(),
            min_count: self.min_count,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = VocabFile::deserialize(d)?;
        Ok(Self::from_tokens(f.tokens, f.min_count))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(v: &Vocab) -> Vec<&str> {
        v.words().iter().map(String::as_str).collect()
    }

    #[test]
    fn build_orders_by_count_then_token() {
        let v = Vocab::build(&["a b", "a c"], 1).unwrap();
        assert_eq!(words(&v), ["a", "b", "c"]);
        let v = Vocab::build(&["a b", "a c"], 2).unwrap();
        assert_eq!(words(&v), ["a"]);
        assert_eq!(v.encode("b c", false), vec![UNK, UNK]);
    }

    #[test]
    fn build_rejects_empty() {
        assert!(matches!(Vocab::build::<&str>(&[], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn empty_text_with_specials() {
        let v = Vocab::build(&["x"], 1).unwrap();
        assert_eq!(v.encode("", true), vec![BOS, EOS]);
        assert_eq!(v.decode(&[BOS, EOS]).unwrap(), "");
    }

    #[test]
    fn splits_punctuation() {
        assert_eq!(
            normalize_tokens("Lung, biopsy; Adenocarcinoma"),
            ["lung", ",", "biopsy", ";", "adenocarcinoma"]
        );
    }

    #[test]
    fn decode_joining_rules() {
        let v = Vocab::build(&["grade ii lung , biopsy"], 1).unwrap();
        let ids: Vec<usize> = ["grade", "ii"].iter().map(|t| v.id(t).unwrap()).collect();
        assert_eq!(v.decode(&ids).unwrap(), "grade ii");
        let ids: Vec<usize> = ["lung", ",", "biopsy"].iter().map(|t| v.id(t).unwrap()).collect();
        assert_eq!(v.decode(&ids).unwrap(), "lung, biopsy");
        assert!(matches!(v.decode(&[999]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn parenthesized_groups_round_trip() {
        let t = "Gleason's score 6 (3+3), grade group 1, tumor volume: 10%";
        let v = Vocab::build(&[t], 1).unwrap();
        assert_eq!(v.decode(&v.encode(t, true)).unwrap(), normalize(t));
        assert_eq!(normalize(t), "gleason's score 6 (3+3), grade group 1, tumor volume: 10%");
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::build(&["a b", "a c"], 1).unwrap();
        let s = v.to_json().unwrap();
        assert_eq!(s, r#"{"tokens":["a","b","c"],"min_count":1}"#);
        assert_eq!(Vocab::from_json(&s).unwrap(), v);
    }
}
