use std::collections::{BTreeMap, BTreeSet};

use ddghm_core::data::{
    merge_chronological, parse_log, preprocess, split, write_processed, BehaviorSequence, Domain,
    InteractionEvent, PreprocessConfig, ProcessedData, SeqItem, SequenceDomain, DEFAULT_SPLIT,
};
use ddghm_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DAY: u64 = 86_400;

fn synthetic_log(seed: u64, users: usize) -> Vec<InteractionEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    for u in 0..users {
        let single_domain = rng.gen_bool(0.15);
        for d in Domain::BOTH {
            if single_domain && d == Domain::B {
                continue;
            }
            let n = rng.gen_range(0..25);
            for _ in 0..n {
                events.push(InteractionEvent {
                    user_id: format!("u{u:02}"),
                    item_id: format!("{d}{}", rng.gen_range(0..18)),
                    rating: rng.gen_range(1..=5) as f64,
                    timestamp: 1_000_000 + rng.gen_range(0..150 * DAY),
                    domain: d,
                });
            }
        }
    }
    events
}

/// Window contents keyed by (user, window start), as sorted item-id lists per domain.
type Windows = BTreeMap<(String, u64), [Vec<(u64, String)>; 2]>;

/// Deliberately naive restatement of the preprocessing rules.
fn oracle(events: &[InteractionEvent], cfg: &PreprocessConfig) -> Windows {
    let both = |u: &str, evs: &[InteractionEvent]| {
        Domain::BOTH
            .iter()
            .all(|d| evs.iter().any(|e| e.user_id == u && e.domain == *d))
    };
    let mut alive: Vec<InteractionEvent> = events.iter().filter(|e| both(&e.user_id, events)).cloned().collect();
    loop {
        let keep: Vec<bool> = alive
            .iter()
            .map(|e| {
                let per_domain = |d: Domain| alive.iter().filter(|x| x.user_id == e.user_id && x.domain == d).count();
                let item = alive.iter().filter(|x| x.domain == e.domain && x.item_id == e.item_id).count();
                per_domain(Domain::A) >= cfg.min_interactions
                    && per_domain(Domain::B) >= cfg.min_interactions
                    && item >= cfg.min_interactions
            })
            .collect();
        if keep.iter().all(|k| *k) {
            break;
        }
        alive = alive.into_iter().zip(keep).filter(|(_, k)| *k).map(|(e, _)| e).collect();
    }
    let mut windows: Windows = BTreeMap::new();
    for e in &alive {
        let first = alive.iter().filter(|x| x.user_id == e.user_id).map(|x| x.timestamp).min().unwrap();
        let w = (e.timestamp - first) / (cfg.period_days * DAY);
        windows.entry((e.user_id.clone(), w)).or_default()[e.domain.index()].push((e.timestamp, e.item_id.clone()));
    }
    windows.retain(|_, per| per.iter().all(|v| v.len() >= cfg.min_items_per_domain));
    for per in windows.values_mut() {
        for v in per.iter_mut() {
            v.sort();
        }
    }
    windows
}

#[test]
fn preprocess_matches_brute_force_filter() {
    let cfg = PreprocessConfig {
        min_interactions: 4,
        period_days: 60,
        min_items_per_domain: 3,
    };
    for seed in 0..4 {
        let events = synthetic_log(seed, 50);
        let want = oracle(&events, &cfg);
        assert!(!want.is_empty(), "generator produced nothing to keep");
        let got = preprocess(&events, &cfg).unwrap();
        assert_eq!(got.stats.sequences, want.len());
        let users: BTreeSet<&String> = want.keys().map(|(u, _)| u).collect();
        assert_eq!(got.stats.users_kept, users.len());
        for d in Domain::BOTH {
            let items: BTreeSet<&String> = want.values().flat_map(|w| w[d.index()].iter().map(|(_, i)| i)).collect();
            assert_eq!(got.vocab.domain(d).len(), items.len());
        }
        let total: usize = want.values().map(|w| w[0].len() + w[1].len()).sum();
        assert!((got.stats.avg_sequence_length - total as f64 / want.len() as f64).abs() < 1e-12);

        // Same window contents, translated back to raw ids.
        let mut translated: Vec<(String, [Vec<(u64, String)>; 2])> = got
            .triples
            .iter()
            .map(|t| {
                let per = Domain::BOTH.map(|d| {
                    let mut v: Vec<(u64, String)> = t
                        .domain(d)
                        .items
                        .iter()
                        .map(|it| (it.timestamp, got.vocab.domain(d).id_of(it.item).unwrap().to_string()))
                        .collect();
                    v.sort();
                    v
                });
                (got.users[t.a.user].clone(), per)
            })
            .collect();
        translated.sort();
        let mut expected: Vec<(String, [Vec<(u64, String)>; 2])> =
            want.into_iter().map(|((u, _), per)| (u, per)).collect();
        expected.sort();
        assert_eq!(translated, expected);
        for t in &got.triples {
            t.validate().unwrap();
        }
    }
}

#[test]
fn no_overlapping_users_exhausts() {
    let events: Vec<InteractionEvent> = (0..30)
        .map(|i| InteractionEvent {
            user_id: format!("u{}", i % 3),
            item_id: "x".into(),
            rating: 1.0,
            timestamp: i,
            domain: Domain::A,
        })
        .collect();
    assert!(matches!(
        preprocess(&events, &PreprocessConfig::default()),
        Err(Error::DatasetExhausted(_))
    ));
}

#[test]
fn preprocessing_is_idempotent_in_output_bytes() {
    let cfg = PreprocessConfig {
        min_interactions: 4,
        period_days: 60,
        min_items_per_domain: 3,
    };
    let events = synthetic_log(7, 50);
    let render = || {
        let p = preprocess(&events, &cfg).unwrap();
        write_processed(&ProcessedData {
            catalog: p.vocab.catalog(),
            triples: p.triples,
        })
    };
    assert_eq!(render(), render());
}

fn arb_event() -> impl Strategy<Value = InteractionEvent> {
    ("[a-z0-9_]{1,8}", "[A-Za-z0-9:-]{1,8}", 0u32..50, 0u64..10_000_000_000, prop::bool::ANY).prop_map(
        |(user_id, item_id, r, timestamp, a)| InteractionEvent {
            user_id,
            item_id,
            rating: r as f64 / 10.0,
            timestamp,
            domain: if a { Domain::A } else { Domain::B },
        },
    )
}

fn arb_sequence(domain: Domain) -> impl Strategy<Value = BehaviorSequence> {
    prop::collection::vec((0usize..20, 0u64..30), 0..15).prop_map(move |mut v| {
        v.sort_by_key(|x| x.1);
        BehaviorSequence {
            user: 0,
            domain: match domain {
                Domain::A => SequenceDomain::A,
                Domain::B => SequenceDomain::B,
            },
            items: v
                .into_iter()
                .map(|(item, timestamp)| SeqItem {
                    item,
                    timestamp,
                    source: domain,
                })
                .collect(),
        }
    })
}

proptest! {
    #[test]
    fn serialized_events_parse_back(events in prop::collection::vec(arb_event(), 0..30)) {
        let lines: Vec<String> = events.iter().map(|e| e.to_line()).collect();
        let report = parse_log(&lines);
        prop_assert!(report.rejects.is_empty());
        prop_assert_eq!(report.events, events);
    }

    #[test]
    fn merge_is_sorted_and_restricts_to_inputs(a in arb_sequence(Domain::A), b in arb_sequence(Domain::B)) {
        let m = merge_chronological(&a, &b).unwrap();
        prop_assert_eq!(m.len(), a.len() + b.len());
        prop_assert!(m.items.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let only_a: Vec<SeqItem> = m.items.iter().filter(|i| i.source == Domain::A).copied().collect();
        let only_b: Vec<SeqItem> = m.items.iter().filter(|i| i.source == Domain::B).copied().collect();
        prop_assert_eq!(only_a, a.items);
        prop_assert_eq!(only_b, b.items);
    }

    #[test]
    fn split_partitions_the_input(n in 3usize..200, seed in 0u64..1000) {
        let items: Vec<usize> = (0..n).collect();
        let s = split(&items, DEFAULT_SPLIT, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort();
        prop_assert_eq!(all, items);
        prop_assert!(!s.train.is_empty());
    }
}
