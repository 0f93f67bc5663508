//! Synthetic corpora with a controllable concept/label confound.
//!
//! Each document is a bag of tokens drawn from three sources:
//!
//! * sentiment tokens, causal for the label: each one comes from the
//!   document's own label vocabulary with probability `sentiment_reliability`,
//!   otherwise from another label's;
//! * concept tokens from the document's concept cluster. A fraction
//!   `concept_overlap` of them comes instead from the vocabulary shared with a
//!   neighbouring cluster (clusters sit on a ring), which gives related
//!   concepts related representations;
//! * noise tokens.
//!
//! Biased concepts carry their favored label with probability `bias_strength`;
//! all other concepts draw labels uniformly. The first concept token of every
//! document is always from its own cluster, so cluster membership can be
//! recovered exactly by keyword lookup.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::rng;

const CONCEPT_NAMES: [&str; 12] = [
    "acting", "plot", "visuals", "music", "humor", "genre", "pacing", "dialogue", "ending", "casting",
    "setting", "effects",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_labels: usize,
    pub num_concepts: usize,
    pub docs_per_concept: usize,
    pub bias_strength: f64,
    pub biased_concepts: usize,
    pub concept_vocab: usize,
    pub sentiment_vocab: usize,
    pub noise_vocab: usize,
    pub concept_tokens: usize,
    pub sentiment_tokens: usize,
    pub noise_tokens: usize,
    pub sentiment_reliability: f64,
    pub concept_overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_labels: 2,
            num_concepts: 6,
            docs_per_concept: 667,
            bias_strength: 0.95,
            biased_concepts: 2,
            concept_vocab: 6,
            sentiment_vocab: 12,
            noise_vocab: 300,
            concept_tokens: 6,
            sentiment_tokens: 5,
            noise_tokens: 6,
            sentiment_reliability: 0.75,
            concept_overlap: 0.5,
            seed: 1,
        }
    }
}

/// Generated documents plus the generator's ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub docs: Vec<Document>,
    /// Cluster names, indexed by concept id.
    pub concepts: Vec<String>,
    /// Own-cluster keywords per concept.
    pub keywords: Vec<Vec<String>>,
    /// Generating concept of each document, parallel to `docs`.
    pub truth: Vec<usize>,
    /// `(concept, favored label)` for every biased concept.
    pub biased: Vec<(usize, usize)>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("synthetic spec `{field}`: {why}")));
        if !(0.5..=1.0).contains(&self.bias_strength) {
            return bad("bias_strength", &format!("{} is outside [0.5, 1]", self.bias_strength));
        }
        if self.num_labels < 2 {
            return bad("num_labels", "need at least 2 labels");
        }
        if self.num_concepts == 0 {
            return bad("num_concepts", "need at least 1 concept");
        }
        if self.biased_concepts > self.num_concepts {
            return bad("biased_concepts", "more biased concepts than concepts");
        }
        if self.concept_vocab == 0 || self.sentiment_vocab == 0 || self.noise_vocab == 0 {
            return bad("vocab", "every vocabulary needs at least one token");
        }
        if self.concept_tokens == 0 {
            return bad("concept_tokens", "documents need at least one concept token");
        }
        if !(0.0..1.0).contains(&self.concept_overlap) {
            return bad("concept_overlap", "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.sentiment_reliability) {
            return bad("sentiment_reliability", "must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn concept_name(&self, c: usize) -> String {
        let base = CONCEPT_NAMES[c % CONCEPT_NAMES.len()];
        match c / CONCEPT_NAMES.len() {
            0 => base.to_string(),
            k => format!("{base}{k}"),
        }
    }

    fn biased_layout(&self) -> Vec<(usize, usize)> {
        (0..self.biased_concepts)
            .map(|i| (i * self.num_concepts / self.biased_concepts.max(1), (i + 1) % self.num_labels))
            .collect()
    }

    fn own_token(&self, c: usize, j: usize) -> String {
        format!("{}{}", self.concept_name(c), j)
    }

    /// Token shared by clusters `c` and `c + 1` (mod ring size).
    fn shared_token(&self, c: usize, j: usize) -> String {
        let next = (c + 1) % self.num_concepts;
        format!("{}{}x{}", &self.concept_name(c)[..3], &self.concept_name(next)[..3], j)
    }
}

fn sentiment_token(label: usize, j: usize) -> String {
    match label {
        0 => format!("neg{j}"),
        1 => format!("pos{j}"),
        y => format!("senti{y}w{j}"),
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut r = rng::substream(spec.seed, "corpus.synthetic");
    let concepts: Vec<String> = (0..spec.num_concepts).map(|c| spec.concept_name(c)).collect();
    let keywords: Vec<Vec<String>> = (0..spec.num_concepts)
        .map(|c| (0..spec.concept_vocab).map(|j| spec.own_token(c, j)).collect())
        .collect();
    let biased = spec.biased_layout();
    let k = spec.num_labels;

    let mut docs = Vec::with_capacity(spec.num_concepts * spec.docs_per_concept);
    let mut truth = Vec::with_capacity(docs.capacity());
    for c in 0..spec.num_concepts {
        let favored = biased.iter().find(|(bc, _)| *bc == c).map(|&(_, y)| y);
        for i in 0..spec.docs_per_concept {
            let label = match favored {
                Some(y) if r.gen_bool(spec.bias_strength) => y,
                Some(y) => {
                    let other = r.gen_range(0..k - 1);
                    if other >= y {
                        other + 1
                    } else {
                        other
                    }
                }
                None => r.gen_range(0..k),
            };
            let mut toks: Vec<String> = Vec::new();
            for _ in 0..spec.sentiment_tokens {
                let y = if r.gen_bool(spec.sentiment_reliability) {
                    label
                } else {
                    let other = r.gen_range(0..k - 1);
                    if other >= label {
                        other + 1
                    } else {
                        other
                    }
                };
                toks.push(sentiment_token(y, r.gen_range(0..spec.sentiment_vocab)));
            }
            toks.push(spec.own_token(c, r.gen_range(0..spec.concept_vocab)));
            for _ in 1..spec.concept_tokens {
                if spec.concept_overlap > 0.0 && r.gen_bool(spec.concept_overlap) {
                    let edge = if r.gen_bool(0.5) {
                        c
                    } else {
                        (c + spec.num_concepts - 1) % spec.num_concepts
                    };
                    toks.push(spec.shared_token(edge, r.gen_range(0..spec.concept_vocab)));
                } else {
                    toks.push(spec.own_token(c, r.gen_range(0..spec.concept_vocab)));
                }
            }
            for _ in 0..spec.noise_tokens {
                toks.push(format!("w{}", r.gen_range(0..spec.noise_vocab)));
            }
            toks.shuffle(&mut r);
            docs.push(Document::new(format!("d{c:02}-{i:05}"), toks.join(" "), label));
            truth.push(c);
        }
    }
    Ok(SyntheticCorpus {
        docs,
        concepts,
        keywords,
        truth,
        biased,
    })
}
