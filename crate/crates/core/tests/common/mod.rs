//! Brute-force reference implementations used as test oracles.

#![allow(dead_code)]

/// Sentence BLEU-4 by direct n-gram enumeration and pairwise counting.
/// Zero-match orders use 1/(2·total); orders without candidate n-grams
/// count as total = 1.
pub fn bleu4_oracle(cand: &[String], refr: &[String]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut product = 1.0f64;
    for n in 1..=4 {
        let grams = |s: &[String]| -> Vec<Vec<String>> {
            if s.len() < n {
                Vec::new()
            } else {
                (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
            }
        };
        let cg = grams(cand);
        let rg = grams(refr);
        let mut seen: Vec<&Vec<String>> = Vec::new();
        let mut matches = 0usize;
        for g in &cg {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let in_cand = cg.iter().filter(|x| *x == g).count();
            let in_ref = rg.iter().filter(|x| *x == g).count();
            matches += in_cand.min(in_ref);
        }
        let total = cg.len().max(1) as f64;
        let m = if matches == 0 { 0.5 / total } else { matches as f64 };
        product *= m / total;
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * product.powf(0.25)
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

/// LCS length by enumerating every subsequence of `a` (|a| ≤ 16).
pub fn lcs_exhaustive(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "exhaustive oracle is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if is_subsequence(&sub, b) {
            best = k;
        }
    }
    best
}

/// LCS length by memoized recursion on suffixes, for inputs too long to
/// enumerate.
pub fn lcs_recursive(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len()]; a.len()];
    go(a, b, 0, 0, &mut memo)
}

pub fn rouge_l_oracle(cand: &[String], refr: &[String], lcs: usize) -> f64 {
    if cand.is_empty() && refr.is_empty() {
        return 1.0;
    }
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / refr.len() as f64;
    2.0 * p * r / (p + r)
}
