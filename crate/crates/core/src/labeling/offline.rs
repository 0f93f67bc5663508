use std::collections::HashMap;

use crate::corpus::{Document, SyntheticCorpus};
use crate::error::Result;
use crate::labeling::client::AnnotatorClient;
use crate::labeling::UNKNOWN;

/// Keyword-lookup annotator for generated corpora. Answers all three prompts
/// without network access, and is exact on documents from the generator.
#[derive(Debug, Clone)]
pub struct OfflineAnnotator {
    clusters: Vec<String>,
    keyword_to_cluster: HashMap<String, usize>,
}

impl OfflineAnnotator {
    pub fn new(clusters: &[(String, Vec<String>)]) -> Self {
        let mut keyword_to_cluster = HashMap::new();
        for (i, (_, kws)) in clusters.iter().enumerate() {
            for k in kws {
                keyword_to_cluster.insert(k.to_lowercase(), i);
            }
        }
        Self {
            clusters: clusters.iter().map(|(n, _)| n.clone()).collect(),
            keyword_to_cluster,
        }
    }

    pub fn from_corpus(corpus: &SyntheticCorpus) -> Self {
        let clusters: Vec<(String, Vec<String>)> = corpus
            .concepts
            .iter()
            .cloned()
            .zip(corpus.keywords.iter().cloned())
            .collect();
        Self::new(&clusters)
    }

    pub fn clusters(&self) -> &[String] {
        &self.clusters
    }

    /// Cluster of the first keyword in `text`, if any.
    pub fn lookup(&self, text: &str) -> Option<&str> {
        text.split_whitespace()
            .find_map(|t| self.keyword_to_cluster.get(&t.to_lowercase()))
            .map(|&i| self.clusters[i].as_str())
    }

    /// Labels documents directly, bypassing the prompt pipeline. Documents
    /// without a keyword get [`UNKNOWN`]; their ids are returned.
    pub fn annotate(&self, docs: &[Document]) -> (Vec<Document>, Vec<String>) {
        let mut misses = Vec::new();
        let out = docs
            .iter()
            .map(|d| {
                let c = self.lookup(&d.text).unwrap_or_else(|| {
                    misses.push(d.id.clone());
                    UNKNOWN
                });
                d.clone().with_concept(c)
            })
            .collect();
        (out, misses)
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let e = text[s..].find(end).map_or(text.len(), |e| s + e);
    Some(&text[s..e])
}

impl AnnotatorClient for OfflineAnnotator {
    fn complete(&self, prompt: &str) -> Result<String> {
        if let Some(review) = between(prompt, "Here is a given movie review:\n\n", "\n\nIdentify") {
            return Ok(self.lookup(review).unwrap_or(UNKNOWN).to_string());
        }
        if let Some(list) = between(prompt, "extracted concepts from movie reviews: ", "\n") {
            let names: Vec<&str> = list
                .split(',')
                .map(str::trim)
                .filter(|c| self.clusters.iter().any(|k| k == c))
                .collect();
            return Ok(names.join(", "));
        }
        if let Some(concept) = between(prompt, "Given concept: ", "\n") {
            return Ok(concept.trim().to_string());
        }
        Ok(String::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann() -> OfflineAnnotator {
        OfflineAnnotator::new(&[
            ("plot".into(), vec!["plot0".into(), "plot1".into()]),
            ("music".into(), vec!["music0".into()]),
        ])
    }

    #[test]
    fn keyword_lookup() {
        let docs = vec![
            Document::new("a", "neg3 music0 w1", 0),
            Document::new("b", "w1 w2", 1),
        ];
        let (out, misses) = ann().annotate(&docs);
        assert_eq!(out[0].concept.as_deref(), Some("music"));
        assert_eq!(out[1].concept.as_deref(), Some(UNKNOWN));
        assert_eq!(misses, vec!["b".to_string()]);
    }
}
