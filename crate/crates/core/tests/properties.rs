//! Randomized properties of the data pipeline, decision rules and metrics.

use std::collections::BTreeSet;

use proptest::prelude::*;
use temprank::corpus::{
    fewshot_sample, filter_hard_subset, frequency_buckets, generate_synthetic, parse_jsonl_str, SplitName, SynthConfig,
};
use temprank::eval::{micro_prf, LabelSet};
use temprank::inference::{argmax_first, joint_choice};
use temprank::text::{build_vocab, tokenize};

fn corpus() -> &'static temprank::corpus::SyntheticCorpus {
    use std::sync::OnceLock;
    static C: OnceLock<temprank::corpus::SyntheticCorpus> = OnceLock::new();
    C.get_or_init(|| generate_synthetic(&SynthConfig::restaurant(7)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fewshot_is_a_covering_subset(k in 1usize..60, seed in any::<u64>()) {
        let c = corpus();
        let sample = fewshot_sample(&c.train, k, seed);
        let all = c.train.ids();
        prop_assert!(sample.split.ids().is_subset(&all));
        for cat in &c.schema.categories {
            let support = c.train.examples.iter().filter(|e| e.categories().any(|x| x == cat)).count();
            let got = sample.split.examples.iter().filter(|e| e.categories().any(|x| x == cat)).count();
            prop_assert!(got >= k.min(support), "{cat}: {got} < min({k}, {support})");
        }
    }

    #[test]
    fn argmax_first_takes_the_earliest_maximum(scores in prop::collection::vec(-5i32..5, 1..8)) {
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expected = s.iter().position(|&x| x == max).unwrap();
        prop_assert_eq!(argmax_first(&s), expected);
    }

    #[test]
    fn joint_rule_prefers_none_on_ties(scores in prop::collection::vec(-3i32..3, 2..6)) {
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let none = *s.last().unwrap();
        let pols = &s[..s.len() - 1];
        let best = pols.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        match joint_choice(&s) {
            Some(i) => prop_assert!(pols[i] == best && best > none),
            None => prop_assert!(best <= none),
        }
    }

    #[test]
    fn micro_prf_is_bounded_and_symmetric_in_f1(
        sets in prop::collection::vec((prop::collection::btree_set(0u8..6, 0..6), prop::collection::btree_set(0u8..6, 0..6)), 1..20)
    ) {
        let to = |s: &BTreeSet<u8>| s.iter().map(|x| x.to_string()).collect::<BTreeSet<String>>();
        let pred: Vec<LabelSet> = sets.iter().enumerate().map(|(i, (p, _))| (i.to_string(), to(p))).collect();
        let gold: Vec<LabelSet> = sets.iter().enumerate().map(|(i, (_, g))| (i.to_string(), to(g))).collect();
        let a = micro_prf(&pred, &gold).unwrap();
        let b = micro_prf(&gold, &pred).unwrap();
        for v in [a.precision, a.recall, a.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(a.f1, b.f1);
        prop_assert_eq!(a.precision, b.recall);
    }

    #[test]
    fn tokenize_is_idempotent_on_joined_tokens(text in "[A-Za-z ,.!']{0,40}") {
        let once = tokenize(&text);
        prop_assert_eq!(tokenize(&once.join(" ")), once);
    }
}

#[test]
fn jsonl_round_trip_is_identity() {
    let c = corpus();
    let back = parse_jsonl_str(&c.test.to_jsonl(), SplitName::Test, &c.schema).unwrap();
    assert_eq!(back, c.test);
}

#[test]
fn hard_subset_is_idempotent() {
    let c = corpus();
    let once = filter_hard_subset(&c.train);
    assert!(!once.is_empty());
    assert_eq!(filter_hard_subset(&once), once);
}

#[test]
fn buckets_partition_labelled_categories() {
    let c = corpus();
    let b = frequency_buckets(&c.train, &c.schema);
    let bucketed: BTreeSet<&str> = b.buckets.iter().map(|(c, _)| c.as_str()).collect();
    let labelled: BTreeSet<&str> = c.train.examples.iter().flat_map(|e| e.categories()).collect();
    assert_eq!(bucketed, labelled);
}

#[test]
fn vocab_covers_every_schema_word() {
    let c = corpus();
    let v = build_vocab(&[&c.train], &c.schema);
    for w in c.schema.words() {
        assert!(v.id(&w).is_some(), "{w}");
    }
}
