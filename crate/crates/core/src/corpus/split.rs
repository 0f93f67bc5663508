use std::collections::{BTreeMap, HashSet};
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::corpus::{concept_mi, ConceptStats, Document};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConcept {
    pub name: String,
    pub mi: f64,
}

/// Biased train set and i.i.d. test set from the top-k concepts (Group A),
/// label-balanced OOD test set from the bottom-k concepts (Group B).
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Document>,
    pub iid_test: Vec<Document>,
    pub ood_test: Vec<Document>,
    pub top: Vec<ScoredConcept>,
    pub bottom: Vec<ScoredConcept>,
    /// Bottom-k concepts left out of the OOD set for lacking some label.
    pub dropped: Vec<String>,
    /// Statistics of the full labeled corpus the split was built from.
    pub stats: ConceptStats,
}

/// On-disk description of a split: document ids per part plus the selected
/// concepts and their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub k: usize,
    pub iid_holdout_fraction: f64,
    pub seed: u64,
    pub top: Vec<ScoredConcept>,
    pub bottom: Vec<ScoredConcept>,
    pub dropped: Vec<String>,
    pub train: Vec<String>,
    pub iid_test: Vec<String>,
    pub ood_test: Vec<String>,
}

fn order_key(seed: u64, id: &str) -> u64 {
    let mut h = FnvHasher::with_key(0xcbf2_9ce4_8422_2325 ^ seed);
    h.write(id.as_bytes());
    h.finish()
}

/// Sorts by a seeded hash of the id, so the result does not depend on input
/// order.
fn seeded_order(docs: &mut [Document], seed: u64) {
    docs.sort_by(|a, b| {
        order_key(seed, &a.id)
            .cmp(&order_key(seed, &b.id))
            .then_with(|| a.id.cmp(&b.id))
    });
}

fn by_label(docs: Vec<Document>, num_labels: usize) -> Vec<Vec<Document>> {
    let mut out = vec![Vec::new(); num_labels];
    for d in docs {
        out[d.label].push(d);
    }
    out
}

fn concept_of(d: &Document) -> &str {
    d.concept.as_deref().unwrap_or_default()
}

pub fn build_splits(docs: &[Document], k: usize, iid_holdout_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&iid_holdout_fraction) {
        return Err(Error::Config(format!(
            "iid_holdout_fraction {iid_holdout_fraction} is outside [0, 1)"
        )));
    }
    let mut seen = HashSet::new();
    if let Some(d) = docs.iter().find(|d| !seen.insert(d.id.as_str())) {
        return Err(Error::Config(format!("duplicate document id `{}`", d.id)));
    }
    let stats = concept_mi(docs)?;
    let n_concepts = stats.concepts.len();
    if n_concepts < 2 * k {
        return Err(Error::Config(format!(
            "need at least {} distinct concepts for k = {k}, found {n_concepts}",
            2 * k
        )));
    }
    let ranked = stats.ranked();
    let score = |c: usize| ScoredConcept {
        name: stats.concepts[c].clone(),
        mi: stats.mi[c],
    };
    let top: Vec<ScoredConcept> = ranked[..k].iter().map(|&c| score(c)).collect();
    let bottom: Vec<ScoredConcept> = ranked[n_concepts - k..].iter().map(|&c| score(c)).collect();
    let num_labels = stats.num_labels;

    let mut pool = docs.to_vec();
    seeded_order(&mut pool, seed);

    let in_top = |d: &Document| top.iter().any(|s| s.name == concept_of(d));
    let group_a: Vec<Document> = pool.iter().filter(|d| in_top(d)).cloned().collect();
    let mut per_label = by_label(group_a, num_labels);
    let n_min = per_label.iter().map(Vec::len).min().unwrap_or(0);
    let n_iid = (n_min as f64 * iid_holdout_fraction).round() as usize;
    if n_min == n_iid {
        return Err(Error::Degenerate(format!(
            "Group A has {n_min} documents for its rarest label; nothing left to train on"
        )));
    }
    let mut train = Vec::new();
    let mut iid_test = Vec::new();
    for docs_y in &mut per_label {
        docs_y.truncate(n_min);
        iid_test.extend(docs_y.drain(..n_iid));
        train.append(docs_y);
    }

    let mut ood_test = Vec::new();
    let mut dropped = Vec::new();
    for s in &bottom {
        let group: Vec<Document> = pool.iter().filter(|d| concept_of(d) == s.name).cloned().collect();
        let mut per_label = by_label(group, num_labels);
        let m = per_label.iter().map(Vec::len).min().unwrap_or(0);
        if m == 0 {
            log::warn!(
                "concept `{}` lacks documents for some label; dropped from the OOD set",
                s.name
            );
            dropped.push(s.name.clone());
            continue;
        }
        for docs_y in &mut per_label {
            docs_y.truncate(m);
            ood_test.append(docs_y);
        }
    }
    for part in [&mut train, &mut iid_test, &mut ood_test] {
        part.sort_by(|a, b| a.id.cmp(&b.id));
    }
    let split = DatasetSplit {
        train,
        iid_test,
        ood_test,
        top,
        bottom,
        dropped,
        stats,
    };
    split.check_invariants()?;
    Ok(split)
}

fn label_counts(docs: &[Document], num_labels: usize) -> Vec<usize> {
    let mut c = vec![0; num_labels];
    docs.iter().for_each(|d| c[d.label] += 1);
    c
}

impl DatasetSplit {
    pub fn num_labels(&self) -> usize {
        self.stats.num_labels
    }

    /// Verifies label balance of train and iid_test, uneven concept counts in
    /// train, per-concept label balance of ood_test and id disjointness.
    pub fn check_invariants(&self) -> Result<()> {
        let k = self.num_labels();
        for (name, part) in [("train", &self.train), ("iid_test", &self.iid_test)] {
            let c = label_counts(part, k);
            if c.iter().any(|&x| x != c[0]) {
                return Err(Error::Degenerate(format!("{name} label counts are unequal: {c:?}")));
            }
        }
        let mut per_concept: BTreeMap<&str, usize> =
            self.stats.concepts.iter().map(|c| (c.as_str(), 0)).collect();
        for d in &self.train {
            *per_concept.entry(concept_of(d)).or_default() += 1;
        }
        let first = per_concept.values().next().copied().unwrap_or(0);
        if per_concept.values().all(|&n| n == first) {
            return Err(Error::Degenerate("train concept distribution is even".into()));
        }
        let mut ood: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for d in &self.ood_test {
            ood.entry(concept_of(d)).or_insert_with(|| vec![0; k])[d.label] += 1;
        }
        for (c, counts) in &ood {
            if counts.iter().any(|&x| x != counts[0]) {
                return Err(Error::Degenerate(format!(
                    "OOD concept `{c}` is not label-balanced: {counts:?}"
                )));
            }
        }
        let mut ids = HashSet::new();
        for d in self.train.iter().chain(&self.iid_test).chain(&self.ood_test) {
            if !ids.insert(d.id.as_str()) {
                return Err(Error::Degenerate(format!("document `{}` appears in two parts", d.id)));
            }
        }
        Ok(())
    }

    pub fn manifest(&self, k: usize, iid_holdout_fraction: f64, seed: u64) -> SplitManifest {
        let ids = |docs: &[Document]| docs.iter().map(|d| d.id.clone()).collect();
        SplitManifest {
            k,
            iid_holdout_fraction,
            seed,
            top: self.top.clone(),
            bottom: self.bottom.clone(),
            dropped: self.dropped.clone(),
            train: ids(&self.train),
            iid_test: ids(&self.iid_test),
            ood_test: ids(&self.ood_test),
        }
    }

    /// Rebuilds a split from a manifest and the labeled corpus it refers to.
    pub fn from_manifest(docs: &[Document], manifest: &SplitManifest) -> Result<Self> {
        let by_id: BTreeMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
        let pick = |ids: &[String]| -> Result<Vec<Document>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|&d| d.clone())
                        .ok_or_else(|| Error::Config(format!("split manifest names unknown document `{id}`")))
                })
                .collect()
        };
        let split = Self {
            train: pick(&manifest.train)?,
            iid_test: pick(&manifest.iid_test)?,
            ood_test: pick(&manifest.ood_test)?,
            top: manifest.top.clone(),
            bottom: manifest.bottom.clone(),
            dropped: manifest.dropped.clone(),
            stats: concept_mi(docs)?,
        };
        split.check_invariants()?;
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: usize, concept: &str, label: usize) -> Document {
        Document::new(format!("{id:04}"), "t", label).with_concept(concept)
    }

    fn corpus() -> Vec<Document> {
        let mut docs = Vec::new();
        let mut id = 0;
        let mut push = |c: &str, y: usize, n: usize| {
            for _ in 0..n {
                docs.push(doc(id, c, y));
                id += 1;
            }
        };
        push("a", 0, 40);
        push("a", 1, 2);
        push("b", 1, 40);
        push("b", 0, 2);
        push("c", 0, 10);
        push("c", 1, 12);
        push("d", 0, 9);
        push("d", 1, 11);
        docs
    }

    #[test]
    fn selects_biased_concepts() {
        let s = build_splits(&corpus(), 1, 0.15, 3).unwrap();
        assert!(["a", "b"].contains(&s.top[0].name.as_str()));
        assert!(["c", "d"].contains(&s.bottom[0].name.as_str()));
        s.check_invariants().unwrap();
    }

    #[test]
    fn drops_concept_missing_a_label() {
        let mut docs = corpus();
        docs.retain(|d| !matches!(d.concept.as_deref(), Some("c" | "d")));
        docs.push(doc(200, "d", 0));
        docs.extend((201..211).map(|i| doc(i, "e", 0)));
        docs.extend((211..221).map(|i| doc(i, "e", 1)));
        let s = build_splits(&docs, 2, 0.2, 1).unwrap();
        assert_eq!(s.dropped, vec!["d".to_string()]);
        assert!(s.ood_test.iter().all(|d| d.concept.as_deref() == Some("e")));
        s.check_invariants().unwrap();
    }

    #[test]
    fn too_few_concepts() {
        assert!(build_splits(&corpus(), 3, 0.15, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let docs = corpus();
        let s = build_splits(&docs, 2, 0.15, 9).unwrap();
        let m = s.manifest(2, 0.15, 9);
        let back = DatasetSplit::from_manifest(&docs, &m).unwrap();
        assert_eq!(back.train, s.train);
        assert_eq!(back.ood_test, s.ood_test);
    }
}
