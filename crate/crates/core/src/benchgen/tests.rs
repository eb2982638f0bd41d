use proptest::prelude::*;

use super::*;
use crate::bank::{jaccard, similarity_distance};
use crate::taxonomy::message_tokens;

fn spec(n: usize, clean: Ratio<u64>, seed: u64) -> SuiteSpec {
    SuiteSpec { clean_fraction: clean, ..SuiteSpec::new(n, seed) }
}

fn class_counts(cards: &[EpisodeCard]) -> BTreeMap<ErrorClass, usize> {
    let mut counts = BTreeMap::new();
    for c in cards.iter().filter_map(EpisodeCard::class) {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
}

#[test]
fn seventy_uniform_is_ten_per_class() {
    let cards = generate_suite(&task_pool(), &spec(70, Ratio::from_integer(0), 7)).unwrap();
    assert_eq!(cards.len(), 70);
    let counts = class_counts(&cards);
    assert_eq!(counts.len(), 7);
    assert!(counts.values().all(|&n| n == 10), "{counts:?}");
}

#[test]
fn clean_fraction_splits_suite() {
    let cards = generate_suite(&task_pool(), &spec(100, Ratio::new(1, 5), 3)).unwrap();
    assert_eq!(cards.iter().filter(|c| c.plan.is_clean()).count(), 20);
    assert_eq!(cards.iter().filter(|c| !c.plan.is_clean()).count(), 80);
}

#[test]
fn suite_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let s = SuiteSpec::standard(11);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_suite(&a, &generate_suite(&task_pool(), &s).unwrap()).unwrap();
    write_suite(&b, &generate_suite(&task_pool(), &s).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_suite(&a).unwrap(), generate_suite(&task_pool(), &s).unwrap());
}

#[test]
fn cards_are_unique_and_seeded_per_index() {
    let pool = task_pool();
    let s = SuiteSpec::standard(5);
    let cards = generate_suite(&pool, &s).unwrap();
    let mut keys = BTreeSet::new();
    for (idx, card) in cards.iter().enumerate() {
        assert_eq!(card.plan.seed, seed::mix(5, idx as u64));
        let task = pool.iter().find(|t| t.task_id == card.task_id).unwrap();
        assert!(keys.insert((task.hash(), card.plan.kind.clone(), card.plan.turn_index)));
        assert!(card.plan.turn_index as usize <= task.n_steps());
    }
}

#[test]
fn plans_validate_and_use_default_manifestation() {
    for card in generate_suite(&task_pool(), &SuiteSpec::standard(2)).unwrap() {
        card.plan.validate(&card.config).unwrap();
        assert!(card.plan.manifestation.is_none());
        if let Some(ms) = card.plan.retry_after_ms {
            assert!((500..=3000).contains(&ms));
            assert!(matches!(card.plan.kind.as_deref(), Some("http_429" | "http_503")));
        }
    }
}

#[test]
fn toolreflect_protocol_fails_first_call_with_budget_three() {
    let s = SuiteSpec { protocol: Protocol::ToolReflect, ..SuiteSpec::new(60, 1) };
    for card in generate_suite(&task_pool(), &s).unwrap() {
        assert_eq!(card.plan.turn_index, 1);
        assert_eq!(card.config.retry_budget_per_error, 3);
    }
}

#[test]
fn exhausted_pool_is_reported() {
    let pool = &task_pool()[..1];
    let s = spec(3, Ratio::new(2, 3), 0);
    assert!(matches!(generate_suite(pool, &s), Err(BenchError::PoolExhausted(_))));
}

#[test]
fn held_out_suite_injects_only_held_out_kinds() {
    let held: BTreeSet<String> =
        ["http_503", "http_422", "schema_violation", "stale_reference"].into_iter().map(String::from).collect();
    let s = SuiteSpec { held_out_kinds: held.clone(), ..SuiteSpec::new(40, 9) };
    let (bank, cards) = generalization_split(&task_pool(), &s, ExemplarBank::shipped()).unwrap();
    assert!(bank.exemplars.iter().all(|e| e.pattern.kind.as_ref().is_none_or(|k| !held.contains(k))));
    for card in cards.iter().filter(|c| !c.plan.is_clean()) {
        assert!(held.contains(card.plan.kind.as_ref().unwrap()));
    }
    assert_eq!(class_counts(&cards).len(), 4);
}

#[test]
fn held_out_503_falls_back_to_500_exemplar() {
    let held: BTreeSet<String> = ["http_503".to_string()].into();
    let s = SuiteSpec { held_out_kinds: held, ..SuiteSpec::new(10, 1) };
    let (bank, _) = generalization_split(&task_pool(), &s, ExemplarBank::shipped()).unwrap();
    let observed = Catalog::shipped().get("http_503").unwrap().example_signature("t", 1);
    let (best, d) = bank.top_k(&observed, 1).pop().unwrap();
    assert_eq!(best.pattern.kind.as_deref(), Some("http_500"));
    // kind mismatch (2) + status 503 vs 500 (1) + message dissimilarity.
    let pattern_tokens = message_tokens(&best.pattern.message_tokens.as_ref().unwrap().join(" "));
    let observed_tokens = message_tokens(&observed.message);
    let shared = observed_tokens.intersection(&pattern_tokens).count() as u64;
    let union = observed_tokens.union(&pattern_tokens).count() as u64;
    let expected = Ratio::from_integer(3) + Ratio::from_integer(1) - Ratio::new(shared, union);
    assert_eq!(d, expected);
    assert!(d > Ratio::from_integer(0));
    assert_eq!(jaccard(&observed_tokens, &pattern_tokens), Ratio::new(shared, union));
    assert_eq!(similarity_distance(&observed, &best.pattern, &bank.weights).unwrap(), expected);
}

#[test]
fn holding_out_nothing_matches_plain_generation() {
    let s = SuiteSpec::new(50, 4);
    let (bank, cards) = generalization_split(&task_pool(), &s, ExemplarBank::shipped()).unwrap();
    assert_eq!(bank.len(), ExemplarBank::shipped().len());
    assert_eq!(cards, generate_suite(&task_pool(), &s).unwrap());
}

#[test]
fn holding_out_a_whole_class_is_rejected() {
    let held: BTreeSet<String> =
        Catalog::shipped().kinds_of_class(ErrorClass::ReentrantFailure).map(|k| k.identifier.clone()).collect();
    let s = SuiteSpec { held_out_kinds: held, ..SuiteSpec::new(10, 1) };
    assert!(matches!(
        generalization_split(&task_pool(), &s, ExemplarBank::shipped()),
        Err(BenchError::HeldOutCoversClass { class: ErrorClass::ReentrantFailure, .. })
    ));
}

#[test]
fn manifest_records_versions_and_mixer() {
    let s = SuiteSpec::new(30, 8);
    let cards = generate_suite(&task_pool(), &s).unwrap();
    let m = manifest(&s, &cards, ExemplarBank::shipped());
    assert_eq!(m.mixer, seed::MIXER);
    assert_eq!(m.n_cards, 30);
    assert_eq!(m.n_clean, 6);
    assert_eq!(m.class_counts.values().sum::<usize>(), 24);
    assert_eq!(m.bank_version, ExemplarBank::shipped().version);
}

proptest! {
    #[test]
    fn largest_remainder_is_within_one(total in 0usize..500, ws in proptest::collection::vec(1u32..10, 7)) {
        let weights: BTreeMap<ErrorClass, u32> = ErrorClass::ALL.into_iter().zip(ws.iter().copied()).collect();
        let counts = largest_remainder(total, &weights);
        prop_assert_eq!(counts.values().sum::<usize>(), total);
        let sum: u32 = ws.iter().sum();
        for (class, w) in &weights {
            let exact = total as f64 * f64::from(*w) / f64::from(sum);
            prop_assert!((counts[class] as f64 - exact).abs() < 1.0, "{:?}", class);
        }
    }

    #[test]
    fn class_counts_follow_distribution(n in 1usize..120, seed in any::<u64>()) {
        let s = SuiteSpec::new(n, seed);
        let cards = generate_suite(&task_pool(), &s).unwrap();
        prop_assert_eq!(cards.len(), n);
        let fail = cards.iter().filter(|c| !c.plan.is_clean()).count();
        prop_assert_eq!(fail, n - n / 5);
        for count in class_counts(&cards).values() {
            prop_assert!((*count as f64 - fail as f64 / 7.0).abs() < 1.0);
        }
    }
}
