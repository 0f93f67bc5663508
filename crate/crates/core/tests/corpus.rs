use std::collections::BTreeSet;

use cure::corpus::{build_splits, concept_mi, generate_synthetic, io, Document, SplitManifest, SyntheticSpec};
use cure::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;

/// Per-concept mutual information by explicit double loop over the documents.
fn mi_oracle(docs: &[Document]) -> Vec<(String, f64)> {
    let concepts: BTreeSet<&str> = docs.iter().map(|d| d.concept.as_deref().unwrap()).collect();
    let labels: BTreeSet<usize> = docs.iter().map(|d| d.label).collect();
    let n = docs.len() as f64;
    concepts
        .iter()
        .map(|&c| {
            let mut total = 0.0;
            for &y in &labels {
                let ncy = docs.iter().filter(|d| d.concept.as_deref() == Some(c) && d.label == y).count() as f64;
                if ncy == 0.0 {
                    continue;
                }
                let nc = docs.iter().filter(|d| d.concept.as_deref() == Some(c)).count() as f64;
                let ny = docs.iter().filter(|d| d.label == y).count() as f64;
                total += ncy / n * ((ncy / n) / ((nc / n) * (ny / n))).ln();
            }
            (c.to_string(), total)
        })
        .collect()
}

fn docs_from_table(table: &[Vec<usize>]) -> Vec<Document> {
    let mut docs = Vec::new();
    for (c, row) in table.iter().enumerate() {
        for (y, &n) in row.iter().enumerate() {
            for i in 0..n {
                docs.push(Document::new(format!("c{c}y{y}i{i}"), "t", y).with_concept(format!("concept{c}")));
            }
        }
    }
    docs
}

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        ..Default::default()
    }
}

#[test]
fn mi_closed_forms() {
    // One concept covering half the corpus, all positive; P(y=+) = 0.5.
    let stats = concept_mi(&docs_from_table(&[vec![0, 50], vec![50, 0]])).unwrap();
    assert!((stats.mi[0] - 0.5 * 2f64.ln()).abs() < 1e-12);
    let stats = concept_mi(&docs_from_table(&[vec![10, 10], vec![30, 30]])).unwrap();
    assert!(stats.mi.iter().all(|m| m.abs() < 1e-15));
}

#[test]
fn mi_matches_oracle_on_random_tables() {
    let mut r = rng::substream(5, "test.mi");
    for _ in 0..100 {
        let table: Vec<Vec<usize>> = (0..4)
            .map(|_| (0..2).map(|_| rand::Rng::gen_range(&mut r, 0..40)).collect())
            .collect();
        if table.iter().any(|row| row.iter().sum::<usize>() == 0) {
            continue;
        }
        let docs = docs_from_table(&table);
        let stats = concept_mi(&docs).unwrap();
        for (name, want) in mi_oracle(&docs) {
            let got = stats.mi_of(&name).unwrap();
            assert!((got - want).abs() < 1e-12, "{name}: {got} vs {want}");
        }
        assert_eq!(stats.total, docs.len());
        let col: usize = stats.label_counts.iter().sum();
        assert_eq!(col, stats.total);
    }
}

fn favored_fraction(spec: &SyntheticSpec) -> Vec<f64> {
    let corpus = generate_synthetic(spec).unwrap();
    corpus
        .biased
        .iter()
        .map(|&(c, y)| {
            let labels: Vec<usize> = corpus
                .docs
                .iter()
                .zip(&corpus.truth)
                .filter(|(_, &t)| t == c)
                .map(|(d, _)| d.label)
                .collect();
            labels.iter().filter(|&&l| l == y).count() as f64 / labels.len() as f64
        })
        .collect()
}

#[test]
fn unbiased_generator_stays_inside_binomial_interval() {
    let n = 200;
    let half_width = 1.96 * (0.25 / n as f64).sqrt();
    let mut outside = 0;
    let mut cells = 0;
    for seed in 0..50 {
        let s = SyntheticSpec {
            bias_strength: 0.5,
            docs_per_concept: n,
            ..spec(seed)
        };
        for f in favored_fraction(&s) {
            cells += 1;
            if (f - 0.5).abs() > half_width {
                outside += 1;
            }
        }
    }
    // 5% expected outside; allow sampling slack.
    assert!(outside as f64 <= 0.1 * cells as f64, "{outside} of {cells}");
}

#[test]
fn fully_confounded_generator() {
    let s = SyntheticSpec {
        bias_strength: 1.0,
        ..spec(3)
    };
    assert!(favored_fraction(&s).iter().all(|&f| f == 1.0));
}

#[test]
fn bias_090_fraction_lands_in_band() {
    let seeds = 100;
    let mut hits = 0;
    for seed in 0..seeds {
        let s = SyntheticSpec {
            bias_strength: 0.9,
            docs_per_concept: 200,
            biased_concepts: 1,
            ..spec(seed)
        };
        let f = favored_fraction(&s)[0];
        if (0.85..=0.95).contains(&f) {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits} of {seeds}");
}

fn labeled(spec: &SyntheticSpec) -> (Vec<Document>, Vec<String>) {
    let corpus = generate_synthetic(spec).unwrap();
    let docs = corpus
        .docs
        .iter()
        .zip(&corpus.truth)
        .map(|(d, &c)| d.clone().with_concept(corpus.concepts[c].clone()))
        .collect();
    let biased = corpus.biased.iter().map(|&(c, _)| corpus.concepts[c].clone()).collect();
    (docs, biased)
}

#[test]
fn splits_select_the_biased_concepts() {
    for seed in 0..20 {
        let (docs, biased) = labeled(&spec(seed));
        let split = build_splits(&docs, 2, 0.15, seed).unwrap();
        let top: BTreeSet<String> = split.top.iter().map(|c| c.name.clone()).collect();
        assert_eq!(top, biased.into_iter().collect::<BTreeSet<_>>(), "seed {seed}");
        split.check_invariants().unwrap();
    }
}

#[test]
fn split_parts_are_balanced() {
    let (docs, _) = labeled(&spec(8));
    let split = build_splits(&docs, 2, 0.15, 8).unwrap();
    for part in [&split.train, &split.iid_test] {
        let pos = part.iter().filter(|d| d.label == 1).count();
        assert_eq!(pos * 2, part.len());
    }
    let mut per: std::collections::BTreeMap<&str, [usize; 2]> = Default::default();
    for d in &split.ood_test {
        per.entry(d.concept.as_deref().unwrap()).or_default()[d.label] += 1;
    }
    assert!(!per.is_empty());
    assert!(per.values().all(|c| c[0] == c[1]));
}

fn ids(docs: &[Document]) -> BTreeSet<String> {
    docs.iter().map(|d| d.id.clone()).collect()
}

#[test]
fn shuffling_documents_changes_nothing() {
    let (docs, _) = labeled(&spec(4));
    let base = build_splits(&docs, 2, 0.15, 11).unwrap();
    let stats = concept_mi(&docs).unwrap();
    let mut r = rng::substream(4, "test.shuffle");
    for _ in 0..3 {
        let mut shuffled = docs.clone();
        shuffled.shuffle(&mut r);
        assert_eq!(concept_mi(&shuffled).unwrap(), stats);
        let s = build_splits(&shuffled, 2, 0.15, 11).unwrap();
        assert_eq!(ids(&s.train), ids(&base.train));
        assert_eq!(ids(&s.iid_test), ids(&base.iid_test));
        assert_eq!(ids(&s.ood_test), ids(&base.ood_test));
    }
}

#[test]
fn jsonl_and_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (mut docs, _) = labeled(&SyntheticSpec {
        docs_per_concept: 30,
        ..spec(2)
    });
    docs[0].concept = None;
    let path = dir.path().join("c.jsonl");
    io::save(&path, &docs).unwrap();
    assert_eq!(io::load(&path).unwrap(), docs);

    let (docs, _) = labeled(&spec(2));
    let split = build_splits(&docs, 2, 0.15, 2).unwrap();
    let m = split.manifest(2, 0.15, 2);
    let text = serde_json::to_string(&m).unwrap();
    let back: SplitManifest = serde_json::from_str(&text).unwrap();
    let rebuilt = cure::corpus::DatasetSplit::from_manifest(&docs, &back).unwrap();
    assert_eq!(ids(&rebuilt.ood_test), ids(&split.ood_test));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_specs_give_valid_splits(
        seed in 0u64..10_000,
        num_labels in 2usize..4,
        num_concepts in 4usize..9,
        docs_per_concept in 60usize..160,
        bias in 0.7f64..1.0,
        biased in 1usize..3,
    ) {
        let s = SyntheticSpec {
            seed,
            num_labels,
            num_concepts,
            docs_per_concept,
            bias_strength: bias,
            biased_concepts: biased,
            ..Default::default()
        };
        let (docs, _) = labeled(&s);
        // A Group A with a label missing entirely is reported, never returned.
        let split = match build_splits(&docs, 2, 0.15, seed) {
            Ok(s) => s,
            Err(cure::Error::Degenerate(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(split.check_invariants().is_ok());
        let all = ids(&split.train).len() + ids(&split.iid_test).len() + ids(&split.ood_test).len();
        prop_assert_eq!(all, split.train.len() + split.iid_test.len() + split.ood_test.len());
    }

    #[test]
    fn mi_is_non_negative(table in prop::collection::vec(prop::collection::vec(0usize..30, 3), 2..6)) {
        prop_assume!(table.iter().all(|r| r.iter().sum::<usize>() > 0));
        let stats = concept_mi(&docs_from_table(&table)).unwrap();
        prop_assert!(stats.mi.iter().all(|&m| m > -1e-12));
    }
}
