use std::path::Path;

use latmem::bench::{self, export, generate, ingest, ingest_str, lexicon, recompute_lag, BenchConfig, LagProfile};
use latmem::eval::{bucket_of, evidence_lag, BUCKET_EDGES};
use proptest::prelude::*;

fn fixture() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/micro.json"))
}

#[test]
fn default_corpus_fills_every_bucket() {
    let cfg = BenchConfig::default();
    let corpus = generate(&cfg).unwrap();
    let mut histogram = [0usize; BUCKET_EDGES.len()];
    for d in &corpus {
        for q in &d.qa {
            histogram[bucket_of(evidence_lag(d, q).unwrap())] += 1;
        }
    }
    assert!(histogram.iter().all(|&c| c >= cfg.n_dialogues), "{histogram:?}");
}

#[test]
fn generated_items_are_consistent() {
    let corpus = generate(&BenchConfig {
        n_dialogues: 4,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let vocab = lexicon::vocabulary();
    for d in &corpus {
        d.validate().unwrap();
        d.check_answers_in_evidence().unwrap();
        for q in &d.qa {
            assert_eq!(recompute_lag(d, q), Some(evidence_lag(d, q).unwrap()));
            let last = q.evidence.iter().map(|&(s, t)| d.global_index(s, t).unwrap()).max().unwrap();
            assert!(q.ask_after >= last);
            assert_eq!(vocab.encode(&q.probe()).unknown, 0);
        }
        for (_, _, t) in d.turns() {
            assert_eq!(vocab.encode(&t.render()).unknown, 0, "{}", t.text);
        }
    }
}

#[test]
fn export_then_ingest_is_identity() {
    let corpus = generate(&BenchConfig {
        n_dialogues: 2,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.json");
    bench::export_to(&path, &corpus).unwrap();
    let (back, report) = ingest(&path, &lexicon::vocabulary()).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(report.unknown_words, 0);
    assert_eq!(report.dialogues, 2);
}

#[test]
fn dangling_evidence_is_rejected() {
    let corpus = generate(&BenchConfig {
        n_dialogues: 1,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let mut bad = corpus.clone();
    bad[0].qa[0].evidence = vec![(99, 0)];
    let err = ingest_str(&export(&bad).unwrap(), &lexicon::vocabulary()).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains(&bad[0].qa[0].question), "{err}");
}

#[test]
fn micro_fixture_parses() {
    let (ds, report) = ingest(fixture(), &lexicon::vocabulary()).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds[0].turn_count(), 5);
    assert_eq!(report.turns, 5);
    assert_eq!(report.unknown_words, 0);
    let q = &ds[0].qa[0];
    assert_eq!(q.ask_after, 4);
    assert_eq!(evidence_lag(&ds[0], q).unwrap(), 4);
    ds[0].check_answers_in_evidence().unwrap();
}

#[test]
fn same_seed_same_bytes() {
    let cfg = BenchConfig {
        n_dialogues: 3,
        seed: 7,
        ..Default::default()
    };
    assert_eq!(export(&generate(&cfg).unwrap()).unwrap(), export(&generate(&cfg).unwrap()).unwrap());
    let other = BenchConfig { seed: 8, ..cfg.clone() };
    assert_ne!(export(&generate(&cfg).unwrap()).unwrap(), export(&generate(&other).unwrap()).unwrap());
}

#[test]
fn unreachable_lag_names_the_maximum() {
    let cfg = BenchConfig {
        n_sessions: 5,
        turns_per_session: 10,
        ..Default::default()
    };
    let err = generate(&cfg).unwrap_err().to_string();
    assert!(err.contains("49"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn small_configs_generate_valid_corpora(
        seed in any::<u64>(),
        n_sessions in 1usize..8,
        turns in 2usize..8,
        active in 1usize..5,
        distractor_rate in 0.0f64..0.8,
        overwrite_rate in 0.0f64..0.5,
    ) {
        let cfg = BenchConfig {
            n_dialogues: 2,
            n_sessions,
            turns_per_session: turns,
            active_facts: active,
            distractor_rate,
            overwrite_rate,
            lag_profile: LagProfile { buckets: vec![0], questions_per_bucket: 2 },
            seed,
            ..Default::default()
        };
        for d in generate(&cfg).unwrap() {
            prop_assert!(d.validate().is_ok());
            prop_assert!(d.check_answers_in_evidence().is_ok());
            prop_assert_eq!(d.turn_count(), n_sessions * turns);
            for q in &d.qa {
                prop_assert_eq!(recompute_lag(&d, q), evidence_lag(&d, q).ok());
            }
        }
    }
}
