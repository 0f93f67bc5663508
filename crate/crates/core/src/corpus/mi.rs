use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

/// Empirical (concept, label) counts and the per-concept bias score
/// `I(c; Y) = Σ_y P(c,y) ln(P(c,y) / (P(c) P(y)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptStats {
    /// Concept names in lexicographic order; all other fields index by this.
    pub concepts: Vec<String>,
    pub num_labels: usize,
    pub joint: Vec<Vec<usize>>,
    pub concept_counts: Vec<usize>,
    pub label_counts: Vec<usize>,
    pub total: usize,
    pub mi: Vec<f64>,
}

impl ConceptStats {
    pub fn from_counts(concepts: Vec<String>, joint: Vec<Vec<usize>>) -> Result<Self> {
        if concepts.len() != joint.len() {
            return Err(Error::Shape(format!(
                "{} concept names for {} count rows",
                concepts.len(),
                joint.len()
            )));
        }
        let num_labels = joint.first().map_or(0, Vec::len);
        if joint.iter().any(|r| r.len() != num_labels) {
            return Err(Error::Shape("ragged count table".into()));
        }
        let concept_counts: Vec<usize> = joint.iter().map(|r| r.iter().sum()).collect();
        let label_counts: Vec<usize> = (0..num_labels)
            .map(|y| joint.iter().map(|r| r[y]).sum())
            .collect();
        let total: usize = concept_counts.iter().sum();
        let n = total as f64;
        let mi = joint
            .iter()
            .enumerate()
            .map(|(c, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &k)| k > 0)
                    .map(|(y, &k)| {
                        let pcy = k as f64 / n;
                        let pc = concept_counts[c] as f64 / n;
                        let py = label_counts[y] as f64 / n;
                        pcy * (pcy / (pc * py)).ln()
                    })
                    .sum()
            })
            .collect();
        Ok(Self {
            concepts,
            num_labels,
            joint,
            concept_counts,
            label_counts,
            total,
            mi,
        })
    }

    pub fn index_of(&self, concept: &str) -> Option<usize> {
        self.concepts.binary_search_by(|c| c.as_str().cmp(concept)).ok()
    }

    pub fn mi_of(&self, concept: &str) -> Option<f64> {
        self.index_of(concept).map(|i| self.mi[i])
    }

    /// Concept indices sorted by descending score; ties keep lexicographic
    /// order.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.concepts.len()).collect();
        idx.sort_by(|&a, &b| self.mi[b].total_cmp(&self.mi[a]).then(a.cmp(&b)));
        idx
    }
}

/// Per-concept mutual information with the task label over `docs`.
pub fn concept_mi(docs: &[Document]) -> Result<ConceptStats> {
    let num_labels = docs.iter().map(|d| d.label + 1).max().unwrap_or(0).max(2);
    let mut table: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for d in docs {
        let c = d.concept.as_deref().ok_or_else(|| {
            Error::LabelingIncomplete(format!("document `{}` has no concept", d.id))
        })?;
        table.entry(c).or_insert_with(|| vec![0; num_labels])[d.label] += 1;
    }
    let (concepts, joint): (Vec<String>, Vec<Vec<usize>>) =
        table.into_iter().map(|(c, r)| (c.to_string(), r)).unzip();
    ConceptStats::from_counts(concepts, joint)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs_from(table: &[(&str, &[usize])]) -> Vec<Document> {
        let mut out = Vec::new();
        for (c, row) in table {
            for (y, &k) in row.iter().enumerate() {
                for i in 0..k {
                    out.push(Document::new(format!("{c}-{y}-{i}"), "t", y).with_concept(*c));
                }
            }
        }
        out
    }

    #[test]
    fn independent_concept_scores_zero() {
        let s = concept_mi(&docs_from(&[("a", &[10, 10]), ("b", &[5, 5])])).unwrap();
        assert_eq!(s.mi, vec![0.0, 0.0]);
    }

    #[test]
    fn half_corpus_all_positive() {
        let s = concept_mi(&docs_from(&[("a", &[0, 50]), ("b", &[50, 0])])).unwrap();
        assert!((s.mi[0] - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((s.mi[1] - 0.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn missing_concept_is_an_error() {
        let docs = vec![Document::new("x", "t", 0)];
        assert!(matches!(concept_mi(&docs), Err(Error::LabelingIncomplete(_))));
    }

    #[test]
    fn ranking_breaks_ties_lexicographically() {
        let s = concept_mi(&docs_from(&[
            ("b", &[5, 5]),
            ("a", &[5, 5]),
            ("z", &[9, 1]),
            ("c", &[1, 9]),
        ]))
        .unwrap();
        let names: Vec<&str> = s.ranked().iter().map(|&i| s.concepts[i].as_str()).collect();
        assert_eq!(names, vec!["c", "z", "a", "b"]);
    }
}
