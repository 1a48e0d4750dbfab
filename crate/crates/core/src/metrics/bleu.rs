use std::collections::HashMap;

pub const MAX_ORDER: usize = 4;

/// Sentence-level BLEU-4 over pre-tokenized sequences.
///
/// Modified n-gram precisions for n = 1..4 are combined by geometric mean
/// and multiplied by the brevity penalty `exp(min(0, 1 − r/c))`. An order
/// with zero clipped matches has its match count replaced by
/// `1 / (2 · total_n)`; an order with no candidate n-grams at all counts as
/// `total_n = 1`.
pub fn bleu4_tokens<S: AsRef<str> + Eq + std::hash::Hash>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let (matches, total) = clipped_matches(candidate, reference, n);
        let total = total.max(1) as f64;
        let matches = if matches == 0 { 1.0 / (2.0 * total) } else { matches as f64 };
        log_sum += (matches / total).ln();
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = (1.0 - r / c).min(0.0).exp();
    (bp * (log_sum / MAX_ORDER as f64).exp()).clamp(0.0, 1.0)
}

/// (Σ min(count_cand, count_ref), number of candidate n-grams)
fn clipped_matches<S: AsRef<str> + Eq + std::hash::Hash>(cand: &[S], refr: &[S], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[S], usize> = HashMap::new();
    if refr.len() >= n {
        for w in refr.windows(n) {
            *ref_counts.entry(w).or_default() += 1;
        }
    }
    let mut cand_counts: HashMap<&[S], usize> = HashMap::new();
    for w in cand.windows(n) {
        *cand_counts.entry(w).or_default() += 1;
    }
    let matches = cand_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, cand.len() - n + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn perfect_match_is_one() {
        let t = toks("lung , biopsy ; adenocarcinoma");
        assert_eq!(bleu4_tokens(&t, &t), 1.0);
    }

    #[test]
    fn disjoint_is_smoothing_floor() {
        let c = toks("a b c d e f g h i j");
        let r = toks("k l m n o p q r s t");
        let s = bleu4_tokens(&c, &r);
        assert!(s > 0.0 && s < 0.01, "{s}");
    }

    #[test]
    fn empty_candidate_is_zero() {
        assert_eq!(bleu4_tokens::<&str>(&[], &toks("a b")), 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        let r = toks("a b c d e f g h");
        let c = toks("a b c d");
        let expected = (1.0f64 - 8.0 / 4.0).exp();
        assert!((bleu4_tokens(&c, &r) - expected).abs() < 1e-12);
    }
}
