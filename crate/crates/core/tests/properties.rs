mod common;

use common::{bleu4_oracle, lcs_exhaustive, rouge_l_oracle};
use mpath_core::metrics::{bleu4_tokens, extract_keywords, key_jaccard, lcs_len, rouge_l_f1_tokens, KeywordLexicon, Scorer};
use mpath_core::reports::{parse_report, render_report, Organ, StructuredReport, Taxonomy};
use mpath_core::tokenizer::{join_tokens, normalize, normalize_tokens, Vocab};
use mpath_core::training::{kfold_split, EarlyStopping};
use proptest::prelude::*;

fn token_seq(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "c", "d", "e", ",", ";", "carcinoma"]),
        0..=max,
    )
    .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn free_text() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,;:()%.\\-']{0,60}"
}

/// Reports drawn from the shipped taxonomy, optionally with a note.
fn structured_report() -> impl Strategy<Value = StructuredReport> {
    let tax = Taxonomy::default();
    (0..Organ::ALL.len(), any::<prop::sample::Index>(), prop::collection::vec(any::<prop::sample::Index>(), 1..4), any::<bool>())
        .prop_map(move |(o, s, fs, with_note)| {
            let entry = tax.entry(Organ::ALL[o]);
            let mut findings: Vec<String> = fs.iter().map(|i| i.get(&entry.findings).clone()).collect();
            findings.dedup();
            StructuredReport {
                organ: Organ::ALL[o],
                sample_type: s.get(&entry.sample_types).clone(),
                findings,
                note: with_note.then(|| "The specimen includes muscle proper.".to_string()),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn normalize_is_idempotent(s in free_text()) {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once.clone());
        prop_assert_eq!(normalize_tokens(&once), normalize_tokens(&s));
    }

    #[test]
    fn join_then_split_is_identity(toks in token_seq(12)) {
        prop_assert_eq!(normalize_tokens(&join_tokens(&toks)), toks);
    }

    #[test]
    fn vocab_round_trips_known_text(s in free_text()) {
        let vocab = Vocab::build(&[s.as_str()], 1).unwrap();
        let ids = vocab.encode(&s, true);
        prop_assert_eq!(vocab.decode(&ids).unwrap(), normalize(&s));
    }

    #[test]
    fn render_parse_round_trip(r in structured_report()) {
        prop_assert!(r.validate().is_ok());
        let text = render_report(&r);
        let back = parse_report(&text).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(render_report(&back), text);
    }

    #[test]
    fn keywords_stable_under_render_parse(r in structured_report()) {
        let lex = KeywordLexicon::default();
        let text = render_report(&r);
        let again = render_report(&parse_report(&text).unwrap());
        prop_assert_eq!(extract_keywords(&text, &lex), extract_keywords(&again, &lex));
    }

    #[test]
    fn bleu_matches_oracle(c in token_seq(12), r in token_seq(12)) {
        let got = bleu4_tokens(&c, &r);
        let want = bleu4_oracle(&c, &r);
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn rouge_matches_exhaustive_oracle(c in token_seq(10), r in token_seq(10)) {
        let l = lcs_exhaustive(&c, &r);
        prop_assert_eq!(lcs_len(&c, &r), l);
        let got = rouge_l_f1_tokens(&c, &r);
        prop_assert!((got - rouge_l_oracle(&c, &r, l)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn rouge_and_key_are_symmetric(c in token_seq(10), r in token_seq(10)) {
        prop_assert_eq!(rouge_l_f1_tokens(&c, &r), rouge_l_f1_tokens(&r, &c));
        let lex = KeywordLexicon::default();
        let (a, b) = (extract_keywords(&join_tokens(&c), &lex), extract_keywords(&join_tokens(&r), &lex));
        prop_assert_eq!(key_jaccard(&a, &b), key_jaccard(&b, &a));
    }

    #[test]
    fn lcs_grows_with_appended_tokens(c in token_seq(10), r in token_seq(10), extra in token_seq(4)) {
        let mut longer = c.clone();
        longer.extend(extra);
        prop_assert!(lcs_len(&longer, &r) >= lcs_len(&c, &r));
    }

    #[test]
    fn scores_lie_in_unit_interval(a in free_text(), b in free_text()) {
        let s = Scorer::default().score(&a, &b);
        for v in [s.bleu4, s.rouge_l_f1, s.key, s.emb, s.composite] {
            prop_assert!((0.0..=1.0).contains(&v), "{:?}", s);
        }
    }

    #[test]
    fn report_scored_against_itself_is_perfect(r in structured_report()) {
        let text = render_report(&r);
        prop_assert_eq!(Scorer::default().score(&text, &text).composite, 1.0);
    }

    #[test]
    fn kfold_is_a_partition(n in 10usize..200, k in 2usize..8, seed in any::<u64>()) {
        let folds = kfold_split(n, k, seed).unwrap();
        let mut seen = vec![0usize; n];
        for (train, val) in &folds {
            prop_assert_eq!(train.len() + val.len(), n);
            prop_assert!(val.len() == n / k || val.len() == n / k + 1);
            for &i in val {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn early_stopping_halts_patience_after_best(scores in prop::collection::vec(0.0f64..1.0, 1..60), patience in 1usize..10) {
        let mut es = EarlyStopping::new(patience);
        let mut stopped_at = None;
        for (i, &s) in scores.iter().enumerate() {
            if es.observe(i + 1, s).stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        let (best_epoch, best) = es.best().unwrap();
        let seen = stopped_at.unwrap_or(scores.len());
        // The best is the first occurrence of the maximum seen so far.
        let first_max = scores[..seen].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(best, first_max);
        prop_assert_eq!(best_epoch, scores.iter().position(|&s| s == first_max).unwrap() + 1);
        if let Some(e) = stopped_at {
            prop_assert_eq!(e, best_epoch + patience);
        } else {
            prop_assert!(scores.len() < best_epoch + patience);
        }
    }
}
