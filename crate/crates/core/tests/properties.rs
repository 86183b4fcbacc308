//! Randomized invariants over normalization, staging and splitting.

use std::collections::BTreeSet;

use proptest::prelude::*;
use sevcl::arabic_text::{fold_letter, is_punctuation, is_stripped_mark, normalize, tokenize_whitespace, NormalizedText};
use sevcl::dataset::{stage_split, train_eval_split, QaRecord};
use sevcl::severity::SeverityLabel;

/// Characters weighted towards the ones normalization has to handle.
fn text_char() -> impl Strategy<Value = char> {
    prop_oneof![
        4 => (0x0621u32..=0x064A).prop_map(|c| char::from_u32(c).unwrap()),
        2 => (0x064Bu32..=0x065F).prop_map(|c| char::from_u32(c).unwrap()),
        1 => Just('\u{0640}'),
        1 => Just('\u{0670}'),
        1 => Just('\u{0671}'),
        2 => prop::sample::select(vec!['،', '؛', '؟', '.', ',', '!', '?', '-', '(', ')', '«', '»', '"', '\'', '…']),
        2 => prop::sample::select(vec![' ', ' ', '\t', '\n', '\u{00A0}', '\u{2003}', '\u{3000}']),
        1 => prop::sample::select(vec!['e', '\u{0301}', '\u{0653}', 'A', 'z', '7', '0', 'é']),
        2 => any::<char>(),
    ]
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(text_char(), 0..40).prop_map(|cs| cs.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn normalization_invariants(s in text()) {
        let n = normalize(&s);
        prop_assert_eq!(normalize(n.as_str()), n.clone(), "not idempotent");
        prop_assert!(NormalizedText::satisfies_invariants(n.as_str()));
        for c in n.as_str().chars() {
            prop_assert!(!is_stripped_mark(c), "mark {:?} survived", c);
            prop_assert!(!is_punctuation(c), "punctuation {:?} survived", c);
            prop_assert_eq!(fold_letter(c), c, "unfolded letter survived");
            prop_assert!(c == ' ' || !c.is_whitespace());
        }
        let tokens = tokenize_whitespace(&n);
        prop_assert!(tokens.iter().all(|t| !t.is_empty() && !t.contains(' ')));
        prop_assert_eq!(NormalizedText::from_tokens(&tokens), n.clone());
    }
}

fn labeled_corpus() -> impl Strategy<Value = Vec<QaRecord>> {
    prop::collection::vec(prop::sample::select(SeverityLabel::ALL.to_vec()), 1..60).prop_map(|labels| {
        labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| QaRecord::new(1000 + 3 * i as u64, format!("q{i}"), format!("a{i}")).with_severity(l))
            .collect()
    })
}

fn ids_where(records: &[QaRecord], keep: impl Fn(SeverityLabel) -> bool) -> BTreeSet<u64> {
    records.iter().filter(|r| keep(r.severity.unwrap())).map(|r| r.id).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn stages_are_nested_and_tier_exact(records in labeled_corpus()) {
        let p = stage_split(&records).unwrap();
        prop_assert!(p.d1.is_subset(&p.d2) && p.d2.is_subset(&p.d3));
        prop_assert_eq!(p.d3.len(), records.len());
        prop_assert_eq!(&p.d1, &ids_where(&records, |l| l == SeverityLabel::Mild));
        prop_assert_eq!(&p.d2, &ids_where(&records, |l| l != SeverityLabel::Critical));
        prop_assert_eq!(&p.d3, &ids_where(&records, |_| true));
    }

    #[test]
    fn split_is_stratified_and_complementary(
        records in labeled_corpus(),
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let (train, eval) = train_eval_split(&records, fraction, seed).unwrap();
        let train_ids: BTreeSet<u64> = train.iter().map(|r| r.id).collect();
        let eval_ids: BTreeSet<u64> = eval.iter().map(|r| r.id).collect();
        prop_assert!(train_ids.is_disjoint(&eval_ids));
        prop_assert_eq!(train_ids.len() + eval_ids.len(), records.len());
        prop_assert_eq!(train_ids.union(&eval_ids).count(), records.len());
        for tier in SeverityLabel::ALL {
            let total = records.iter().filter(|r| r.severity == Some(tier)).count();
            let kept = train.iter().filter(|r| r.severity == Some(tier)).count();
            prop_assert!((kept as f64 - fraction * total as f64).abs() <= 1.0, "{tier}: {kept} of {total}");
        }
        let again = train_eval_split(&records, fraction, seed).unwrap();
        prop_assert_eq!(again, (train, eval));
    }
}
