/// Length of the longest common subsequence, O(|a|·|b|) time and O(|b|)
/// space.
pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1. Two empty sequences score 1.0; one empty sequence scores 0.0.
pub fn rouge_l_f1_tokens<S: PartialEq>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swapped_middle() {
        let a = ["a", "b", "c", "d"];
        let b = ["a", "c", "b", "d"];
        assert_eq!(lcs_len(&a, &b), 3);
        assert!((rouge_l_f1_tokens(&a, &b) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint() {
        let a = ["x", "y"];
        assert_eq!(rouge_l_f1_tokens(&a, &a), 1.0);
        assert_eq!(rouge_l_f1_tokens(&a, &["z"]), 0.0);
        assert_eq!(rouge_l_f1_tokens::<&str>(&[], &[]), 1.0);
        assert_eq!(rouge_l_f1_tokens(&[], &a), 0.0);
    }
}
