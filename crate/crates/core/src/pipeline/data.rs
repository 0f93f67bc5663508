use std::collections::HashSet;

use crate::corpus::{DatasetSplit, Document};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::labeling::UNKNOWN;
use crate::nn::Tensor;
use crate::par::Exec;
use crate::pipeline::config::ConceptPool;
use crate::scalar::Real;

/// Embedded documents with their task labels and concept indices.
#[derive(Debug, Clone)]
pub struct EmbeddedSet<F> {
    pub ids: Vec<String>,
    pub x: Tensor<F>,
    pub labels: Vec<usize>,
    /// Index into [`PreparedData::concepts`].
    pub concepts: Vec<usize>,
}

impl<F: Real> EmbeddedSet<F> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            concepts: idx.iter().map(|&i| self.concepts[i]).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> EmbeddedSet<G> {
        EmbeddedSet {
            ids: self.ids.clone(),
            x: self.x.cast(),
            labels: self.labels.clone(),
            concepts: self.concepts.clone(),
        }
    }
}

/// Embeddings of every split part, computed once per corpus.
#[derive(Debug, Clone)]
pub struct PreparedData<F> {
    pub concepts: Vec<String>,
    pub num_labels: usize,
    /// Documents the concept head, extractor and reversal network train on.
    pub pool: EmbeddedSet<F>,
    pub train: EmbeddedSet<F>,
    pub iid: EmbeddedSet<F>,
    pub ood: EmbeddedSet<F>,
    pub warnings: Vec<String>,
}

/// Drops documents whose concept is missing or [`UNKNOWN`]; returns the
/// kept documents and the number dropped.
pub fn known_concepts(docs: &[Document]) -> (Vec<Document>, usize) {
    let kept: Vec<Document> = docs
        .iter()
        .filter(|d| d.concept.as_deref().is_some_and(|c| c != UNKNOWN))
        .cloned()
        .collect();
    let dropped = docs.len() - kept.len();
    (kept, dropped)
}

fn embed_set<F: Real>(
    docs: &[Document],
    concepts: &[String],
    encoder: &FrozenEncoder,
    exec: Exec,
    warnings: &mut Vec<String>,
    part: &str,
) -> Result<EmbeddedSet<F>> {
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let e = encoder.embed::<F, _>(&texts, exec);
    if !e.null_rows.is_empty() {
        warnings.push(format!(
            "{part}: {} documents had no tokens and use the null embedding",
            e.null_rows.len()
        ));
    }
    let concept_idx = docs
        .iter()
        .map(|d| {
            let c = d.concept.as_deref().unwrap_or_default();
            concepts
                .iter()
                .position(|k| k == c)
                .ok_or_else(|| Error::LabelingIncomplete(format!("document `{}` has concept `{c}`", d.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddedSet {
        ids: docs.iter().map(|d| d.id.clone()).collect(),
        x: e.embeddings,
        labels: docs.iter().map(|d| d.label).collect(),
        concepts: concept_idx,
    })
}

/// Embeds the split parts and the concept pool. `corpus` must be the labeled
/// corpus the split was built from.
pub fn prepare<F: Real>(
    corpus: &[Document],
    split: &DatasetSplit,
    encoder: &FrozenEncoder,
    pool: ConceptPool,
    exec: Exec,
) -> Result<PreparedData<F>> {
    let concepts = split.stats.concepts.clone();
    let mut warnings = Vec::new();
    let pool_docs: Vec<Document> = match pool {
        ConceptPool::Corpus => {
            let known: HashSet<&str> = concepts.iter().map(String::as_str).collect();
            corpus
                .iter()
                .filter(|d| d.concept.as_deref().is_some_and(|c| known.contains(c)))
                .cloned()
                .collect()
        }
        ConceptPool::Train => split.train.clone(),
    };
    Ok(PreparedData {
        pool: embed_set(&pool_docs, &concepts, encoder, exec, &mut warnings, "pool")?,
        train: embed_set(&split.train, &concepts, encoder, exec, &mut warnings, "train")?,
        iid: embed_set(&split.iid_test, &concepts, encoder, exec, &mut warnings, "iid_test")?,
        ood: embed_set(&split.ood_test, &concepts, encoder, exec, &mut warnings, "ood_test")?,
        num_labels: split.num_labels(),
        concepts,
        warnings,
    })
}
