//! Composite report-generation score:
//! `0.15·(ROUGE-L + BLEU-4) + 0.4·KEY + 0.3·EMB`.

mod bleu;
mod emb;
mod keywords;
mod rouge;

pub use bleu::bleu4_tokens;
pub use emb::{trigram_cosine, EmbBackend};
pub use keywords::{extract_keywords, key_jaccard, KeywordLexicon};
pub use rouge::{lcs_len, rouge_l_f1_tokens};

use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::normalize_tokens;

pub const W_LEXICAL: f64 = 0.15;
pub const W_KEY: f64 = 0.4;
pub const W_EMB: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub bleu4: f64,
    pub rouge_l_f1: f64,
    pub key: f64,
    pub emb: f64,
    pub composite: f64,
}

/// The weighted combination. Every component must lie in [0, 1].
pub fn composite_score(rouge_l_f1: f64, bleu4: f64, key: f64, emb: f64) -> Result<f64> {
    for (name, value) in [("rouge_l_f1", rouge_l_f1), ("bleu4", bleu4), ("key", key), ("emb", emb)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::ComponentOutOfRange { name, value });
        }
    }
    Ok(W_LEXICAL * (rouge_l_f1 + bleu4) + W_KEY * key + W_EMB * emb)
}

pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    bleu4_tokens(&normalize_tokens(candidate), &normalize_tokens(reference))
}

pub fn rouge_l_f1(candidate: &str, reference: &str) -> f64 {
    rouge_l_f1_tokens(&normalize_tokens(candidate), &normalize_tokens(reference))
}

#[derive(Clone, Debug)]
pub struct Scorer {
    pub lexicon: KeywordLexicon,
    pub backend: EmbBackend,
}

impl Default for Scorer {
    fn default() -> Self {
        Scorer {
            lexicon: KeywordLexicon::default(),
            backend: EmbBackend::Trigram,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairInput {
    pub id: String,
    pub generated: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: String,
    pub breakdown: ScoreBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub emb: String,
    pub lexicon: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub mean: ScoreBreakdown,
    pub pairs: Vec<PairScore>,
    pub backend: BackendInfo,
}

impl Scorer {
    pub fn score(&self, candidate: &str, reference: &str) -> ScoreBreakdown {
        let (c, r) = (normalize_tokens(candidate), normalize_tokens(reference));
        let bleu4 = bleu4_tokens(&c, &r);
        let rouge_l_f1 = rouge_l_f1_tokens(&c, &r);
        let key = key_jaccard(
            &extract_keywords(candidate, &self.lexicon),
            &extract_keywords(reference, &self.lexicon),
        );
        let emb = self.backend.similarity(candidate, reference);
        let composite = composite_score(rouge_l_f1, bleu4, key, emb).expect("components are clamped to [0, 1]");
        ScoreBreakdown {
            bleu4,
            rouge_l_f1,
            key,
            emb,
            composite,
        }
    }

    /// Scores every pair (in parallel on the current rayon pool) and
    /// averages per-pair components. Output order follows input order.
    pub fn score_corpus(&self, pairs: &[PairInput]) -> CorpusScore {
        let scored: Vec<PairScore> = pairs
            .par_iter()
            .map(|p| PairScore {
                id: p.id.clone(),
                breakdown: self.score(&p.generated, &p.reference),
            })
            .collect();
        CorpusScore {
            mean: mean_breakdown(scored.iter().map(|p| &p.breakdown)),
            pairs: scored,
            backend: BackendInfo {
                emb: self.backend.id().to_string(),
                lexicon: self.lexicon.sha256().to_string(),
            },
        }
    }
}

pub fn mean_breakdown<'a>(items: impl IntoIterator<Item = &'a ScoreBreakdown>) -> ScoreBreakdown {
    let mut acc = ScoreBreakdown::default();
    let mut n = 0usize;
    for b in items {
        acc.bleu4 += b.bleu4;
        acc.rouge_l_f1 += b.rouge_l_f1;
        acc.key += b.key;
        acc.emb += b.emb;
        acc.composite += b.composite;
        n += 1;
    }
    if n == 0 {
        return acc;
    }
    let n = n as f64;
    ScoreBreakdown {
        bleu4: acc.bleu4 / n,
        rouge_l_f1: acc.rouge_l_f1 / n,
        key: acc.key / n,
        emb: acc.emb / n,
        composite: acc.composite / n,
    }
}

/// Reads `{"id", "generated", "reference"}` JSON-Lines.
pub fn read_pairs(path: &Path) -> Result<Vec<PairInput>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PairInput = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reports::fixtures;

    #[test]
    fn composite_arithmetic() {
        assert_eq!(composite_score(1.0, 1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(composite_score(0.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!((composite_score(0.8, 0.6, 0.9, 0.7).unwrap() - 0.78).abs() < 1e-12);
        assert!(matches!(composite_score(1.2, 0.0, 0.0, 0.0), Err(Error::ComponentOutOfRange { .. })));
    }

    #[test]
    fn perfect_match() {
        let s = Scorer::default().score("Lung, biopsy; Adenocarcinoma", "Lung, biopsy; Adenocarcinoma");
        assert_eq!(s.composite, 1.0);
    }

    #[test]
    fn bladder_hallucination_lowers_key() {
        let (gt, gen) = fixtures::PAIRS[fixtures::BLADDER_PAIR];
        let s = Scorer::default().score(gen, gt);
        assert!(s.key < 1.0);
        let lex = KeywordLexicon::default();
        let extra = extract_keywords(gen, &lex);
        assert!(extra.contains("granulomatous"));
        assert!(!extract_keywords(gt, &lex).contains("granulomatous"));
    }

    #[test]
    fn corpus_mean_is_mean_of_pairs() {
        let pairs: Vec<PairInput> = fixtures::PAIRS
            .iter()
            .enumerate()
            .map(|(i, (gt, gen))| PairInput {
                id: format!("p{i}"),
                generated: gen.to_string(),
                reference: gt.to_string(),
            })
            .collect();
        let out = Scorer::default().score_corpus(&pairs);
        assert_eq!(out.pairs.len(), 5);
        assert_eq!(out.pairs[3].id, "p3");
        let mean: f64 = out.pairs.iter().map(|p| p.breakdown.composite).sum::<f64>() / 5.0;
        assert!((out.mean.composite - mean).abs() < 1e-15);
        assert_eq!(out.backend.emb, "trigram");
    }
}
