use std::collections::BTreeSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::normalize_tokens;

const DEFAULT_LEXICON: &str = include_str!("../../data/lexicon.txt");

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "have", "in", "includes", "into", "is",
    "it", "its", "no", "not", "of", "on", "or", "that", "the", "this", "to", "was", "were", "with", "without",
];

/// Medical terms (normalized unigrams and bigrams) plus a stopword list.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordLexicon {
    terms: BTreeSet<String>,
    stopwords: BTreeSet<String>,
    sha256: String,
}

impl Default for KeywordLexicon {
    fn default() -> Self {
        KeywordLexicon::parse(DEFAULT_LEXICON).expect("shipped lexicon is valid")
    }
}

impl KeywordLexicon {
    /// Parses lexicon text: one term per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let stopwords: BTreeSet<String> = STOPWORDS.iter().map(|s| s.to_string()).collect();
        let mut terms = BTreeSet::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks = normalize_tokens(line);
            if toks.is_empty() || toks.len() > 2 {
                return Err(Error::InvalidInput(format!("lexicon term `{line}` must be one or two tokens")));
            }
            let term = toks.join(" ");
            if stopwords.contains(&term) {
                return Err(Error::InvalidInput(format!("lexicon term `{term}` is a stopword")));
            }
            terms.insert(term);
        }
        if terms.is_empty() {
            return Err(Error::InvalidInput("lexicon is empty".into()));
        }
        let sha256 = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        Ok(KeywordLexicon {
            terms,
            stopwords,
            sha256,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.terms.contains(term)
    }

    pub fn is_stopword(&self, tok: &str) -> bool {
        self.stopwords.contains(tok)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// SHA-256 of the lexicon source text, lowercase hex.
    pub fn sha256(&self) -> &str {
        &self.sha256
    }
}

/// Unigrams and bigrams of the normalized text that appear in the lexicon.
pub fn extract_keywords(text: &str, lex: &KeywordLexicon) -> BTreeSet<String> {
    let toks = normalize_tokens(text);
    let mut out = BTreeSet::new();
    for (i, t) in toks.iter().enumerate() {
        if !lex.is_stopword(t) && lex.contains(t) {
            out.insert(t.clone());
        }
        if let Some(next) = toks.get(i + 1) {
            let bigram = format!("{t} {next}");
            if lex.contains(&bigram) {
                out.insert(bigram);
            }
        }
    }
    out
}

/// |a ∩ b| / |a ∪ b|, with two empty sets scoring 1.0.
pub fn key_jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn lung_fixture_keywords() {
        let lex = KeywordLexicon::default();
        assert_eq!(
            extract_keywords("Lung, biopsy; Adenocarcinoma", &lex),
            set(&["lung", "biopsy", "adenocarcinoma"])
        );
    }

    #[test]
    fn stopwords_only() {
        let lex = KeywordLexicon::default();
        assert!(extract_keywords("the of with and", &lex).is_empty());
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(key_jaccard(&set(&["x", "y"]), &set(&["x", "y"])), 1.0);
        assert!((key_jaccard(&set(&["x", "y"]), &set(&["y", "z"])) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(key_jaccard(&set(&[]), &set(&[])), 1.0);
    }

    #[test]
    fn lexicon_rejects_stopwords_and_empty() {
        assert!(KeywordLexicon::parse("the\n").is_err());
        assert!(KeywordLexicon::parse("# only a comment\n").is_err());
        let lex = KeywordLexicon::parse("carcinoma # trailing comment\n").unwrap();
        assert!(lex.contains("carcinoma"));
        assert_eq!(lex.sha256().len(), 64);
    }
}
