use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::{normalize, Vocab, N_SPECIAL};

/// Backend for the semantic-similarity component.
#[derive(Clone, Debug)]
pub enum EmbBackend {
    /// Cosine of character-trigram count vectors over normalized text.
    Trigram,
    /// Cosine of mean-pooled token embeddings from a trained model.
    TokenEmbedding { vocab: Vocab, table: Tensor<f32> },
}

impl EmbBackend {
    pub fn id(&self) -> &'static str {
        match self {
            EmbBackend::Trigram => "trigram",
            EmbBackend::TokenEmbedding { .. } => "model",
        }
    }

    /// Resolves a backend id. `model` needs the vocabulary and embedding
    /// table of a checkpoint.
    pub fn from_id(id: &str, model: Option<(Vocab, Tensor<f32>)>) -> Result<Self> {
        match id {
            "trigram" => Ok(EmbBackend::Trigram),
            "model" => {
                let (vocab, table) = model.ok_or_else(|| {
                    Error::InvalidInput("embedding backend `model` requires a checkpoint".into())
                })?;
                Ok(EmbBackend::TokenEmbedding { vocab, table })
            }
            other => Err(Error::UnknownBackend(other.to_string())),
        }
    }

    pub fn similarity(&self, candidate: &str, reference: &str) -> f64 {
        let (c, r) = (normalize(candidate), normalize(reference));
        if c == r {
            return 1.0;
        }
        match self {
            EmbBackend::Trigram => trigram_cosine(&c, &r),
            EmbBackend::TokenEmbedding { vocab, table } => {
                let pool = |text: &str| -> Option<Vec<f64>> {
                    let d = table.shape()[1];
                    let ids: Vec<usize> = vocab.encode(text, false).into_iter().filter(|&i| i >= N_SPECIAL).collect();
                    if ids.is_empty() {
                        return None;
                    }
                    let mut acc = vec![0.0f64; d];
                    for id in &ids {
                        for (a, &v) in acc.iter_mut().zip(&table.data()[id * d..(id + 1) * d]) {
                            *a += v as f64;
                        }
                    }
                    Some(acc)
                };
                match (pool(&c), pool(&r)) {
                    (Some(a), Some(b)) => cosine(&a, &b),
                    _ => 0.0,
                }
            }
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

fn trigrams(s: &str) -> HashMap<[char; 3], u32> {
    let chars: Vec<char> = s.chars().collect();
    let mut m = HashMap::new();
    for w in chars.windows(3) {
        *m.entry([w[0], w[1], w[2]]).or_insert(0) += 1;
    }
    m
}

/// Cosine similarity of character-trigram count vectors, clamped to [0, 1].
/// Counts are integers, so identical inputs give exactly 1.0.
pub fn trigram_cosine(a: &str, b: &str) -> f64 {
    let (ta, tb) = (trigrams(a), trigrams(b));
    if ta.is_empty() || tb.is_empty() {
        return if a == b { 1.0 } else { 0.0 };
    }
    let dot: f64 = ta.iter().map(|(k, &v)| v as f64 * tb.get(k).copied().unwrap_or(0) as f64).sum();
    let na: f64 = ta.values().map(|&v| (v as f64).powi(2)).sum();
    let nb: f64 = tb.values().map(|&v| (v as f64).powi(2)).sum();
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_one_and_disjoint_is_zero() {
        let b = EmbBackend::Trigram;
        assert_eq!(b.similarity("Lung, biopsy; Adenocarcinoma", "Lung, biopsy; Adenocarcinoma"), 1.0);
        assert_eq!(b.similarity("aaaa", "bbbb"), 0.0);
        assert_eq!(trigram_cosine("abcabc", "abcabc"), 1.0);
    }

    #[test]
    fn unknown_backend() {
        assert!(matches!(EmbBackend::from_id("bert", None), Err(Error::UnknownBackend(_))));
        assert!(EmbBackend::from_id("model", None).is_err());
    }

    #[test]
    fn token_embedding_backend() {
        let vocab = Vocab::build(&["lung biopsy adenocarcinoma"], 1).unwrap();
        let table = Tensor::new(vec![vocab.len(), 2], (0..vocab.len() * 2).map(|i| i as f32).collect()).unwrap();
        let b = EmbBackend::from_id("model", Some((vocab, table))).unwrap();
        assert_eq!(b.id(), "model");
        assert_eq!(b.similarity("lung biopsy", "lung biopsy"), 1.0);
        let s = b.similarity("lung", "adenocarcinoma");
        assert!(s > 0.0 && s <= 1.0);
    }
}
