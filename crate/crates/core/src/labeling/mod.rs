//! Concept annotation: clean, label each document with a one-word concept,
//! merge the raw concepts into a meta-concept set, then map every raw concept
//! onto that set. All requests go through an [`Annotator`], which retries and
//! logs them.

mod client;
mod live;
mod offline;
mod prompt;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use client::{content_hash, Annotator, AnnotatorClient, AuditLog, AuditRecord, MockClient, RetryPolicy};
pub use live::BackendConfig;
#[cfg(feature = "live")]
pub use live::LiveClient;
pub use offline::OfflineAnnotator;
pub use prompt::{PromptTemplate, TemplateId};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::par::Exec;

pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelError {
    pub doc_id: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelOutcome {
    /// Every input document, with `concept` set to a member of `concepts` or
    /// to [`UNKNOWN`].
    pub docs: Vec<Document>,
    pub concepts: Vec<String>,
    pub errors: Vec<LabelError>,
    pub warnings: Vec<String>,
    /// Ids of documents whose cleaned text is empty.
    pub empty_after_cleaning: Vec<String>,
    pub client_calls: usize,
}

/// Drops non-ASCII characters and collapses whitespace runs.
pub fn clean_text(raw: &str) -> String {
    let ascii: String = raw.chars().filter(char::is_ascii).collect();
    ascii.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercases and strips surrounding punctuation; `None` unless the result is
/// a single ASCII alphanumeric token.
pub fn normalize_concept(reply: &str) -> Option<String> {
    let s = reply.trim().to_ascii_lowercase();
    let s = s.strip_prefix("concept:").unwrap_or(&s);
    let s = s.trim_matches(|c: char| !c.is_ascii_alphanumeric());
    (!s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric())).then(|| s.to_string())
}

fn parse_cluster_list(reply: &str) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for piece in reply.split([',', '\n', ';']) {
        let item = piece
            .trim()
            .trim_start_matches(|c: char| c.is_ascii_digit() || ".)-*".contains(c) || c.is_whitespace());
        if item.is_empty() {
            continue;
        }
        let name = normalize_concept(item)
            .ok_or_else(|| Error::Parse(format!("cluster name `{item}` is not a single word")))?;
        if out.contains(&name) {
            return Err(Error::Parse(format!("duplicate cluster name `{name}`")));
        }
        out.push(name);
    }
    if out.is_empty() {
        return Err(Error::Parse("no cluster names in reply".into()));
    }
    Ok(out)
}

fn label_one(doc: &Document, ann: &Annotator) -> std::result::Result<String, LabelError> {
    let prompt = PromptTemplate::get(TemplateId::Pa)
        .render(&[("review", &doc.text)])
        .map_err(|e| LabelError {
            doc_id: doc.id.clone(),
            stage: "label".into(),
            message: e.to_string(),
        })?;
    let mut last = String::new();
    for attempt in 0..ann.policy.max_attempts.max(1) {
        match ann.ask(TemplateId::Pa, &prompt, attempt) {
            Ok(reply) => match normalize_concept(&reply) {
                Some(c) => return Ok(c),
                None => last = format!("unparseable reply {reply:?}"),
            },
            Err(e) => {
                last = e.to_string();
                break;
            }
        }
    }
    Err(LabelError {
        doc_id: doc.id.clone(),
        stage: "label".into(),
        message: last,
    })
}

/// Raw one-word concept per document. Failures yield [`UNKNOWN`] plus an
/// error record. At most `max_in_flight` requests are outstanding at once.
pub fn label_concepts(
    docs: &[Document],
    ann: &Annotator,
    exec: Exec,
    max_in_flight: usize,
) -> (Vec<String>, Vec<LabelError>) {
    let mut raw = Vec::with_capacity(docs.len());
    let mut errors = Vec::new();
    for chunk in docs.chunks(max_in_flight.max(1)) {
        for r in exec.map(chunk, |d| label_one(d, ann)) {
            match r {
                Ok(c) => raw.push(c),
                Err(e) => {
                    raw.push(UNKNOWN.to_string());
                    errors.push(e);
                }
            }
        }
    }
    (raw, errors)
}

/// Meta-concept set from the deduplicated raw concepts. Replies with
/// duplicate or multi-word names are retried, then rejected.
pub fn merge_meta_concepts(raw: &[String], ann: &Annotator) -> Result<Vec<String>> {
    let distinct: BTreeSet<&str> = raw.iter().map(String::as_str).filter(|c| *c != UNKNOWN).collect();
    if distinct.is_empty() {
        return Err(Error::LabelingIncomplete("no raw concepts to merge".into()));
    }
    let list = distinct.into_iter().collect::<Vec<_>>().join(", ");
    let prompt = PromptTemplate::get(TemplateId::Pb).render(&[("concepts", &list)])?;
    let mut last = None;
    for attempt in 0..ann.policy.max_attempts.max(1) {
        let reply = ann.ask(TemplateId::Pb, &prompt, attempt)?;
        match parse_cluster_list(&reply) {
            Ok(c) => return Ok(c),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Parse("no reply".into())))
}

/// A member of `concepts` for `raw`, and a warning when the edit-distance
/// fallback was used.
pub fn assign_final_concept(raw: &str, concepts: &[String], ann: &Annotator) -> Result<(String, Option<String>)> {
    if concepts.is_empty() {
        return Err(Error::Config("concept set is empty".into()));
    }
    let labels = concepts.join(", ");
    let prompt = PromptTemplate::get(TemplateId::Pc).render(&[("concept", raw), ("concept labels", &labels)])?;
    let mut last = raw.to_string();
    for attempt in 0..ann.policy.max_attempts.max(1) {
        let reply = ann.ask(TemplateId::Pc, &prompt, attempt)?;
        let norm = normalize_concept(&reply);
        if let Some(c) = norm.as_ref().filter(|c| concepts.contains(c)) {
            return Ok((c.clone(), None));
        }
        last = norm.unwrap_or_else(|| reply.trim().to_ascii_lowercase());
    }
    let nearest = concepts
        .iter()
        .min_by_key(|c| strsim::levenshtein(&last, c))
        .expect("non-empty concept set")
        .clone();
    let warning = format!("no valid assignment for `{raw}`; reply `{last}` mapped to nearest concept `{nearest}`");
    log::warn!("{warning}");
    Ok((nearest, Some(warning)))
}

/// Full pipeline: clean, label, merge, assign.
pub fn run_labeling(docs: &[Document], ann: &Annotator, exec: Exec, max_in_flight: usize) -> Result<LabelOutcome> {
    let mut empty_after_cleaning = Vec::new();
    let cleaned: Vec<Document> = docs
        .iter()
        .map(|d| {
            let text = clean_text(&d.text);
            if text.is_empty() {
                empty_after_cleaning.push(d.id.clone());
            }
            Document {
                text,
                concept: None,
                ..d.clone()
            }
        })
        .collect();
    let (raw, mut errors) = label_concepts(&cleaned, ann, exec, max_in_flight);
    let concepts = merge_meta_concepts(&raw, ann)?;
    let mut warnings = Vec::new();
    let mut assigned: BTreeMap<&str, String> = BTreeMap::new();
    for r in raw.iter().filter(|r| *r != UNKNOWN) {
        if !assigned.contains_key(r.as_str()) {
            let (c, w) = assign_final_concept(r, &concepts, ann)?;
            warnings.extend(w);
            assigned.insert(r, c);
        }
    }
    let errored: BTreeSet<&str> = errors.iter().map(|e| e.doc_id.as_str()).collect();
    let mut unknown_without_error = Vec::new();
    let out: Vec<Document> = docs
        .iter()
        .zip(&raw)
        .map(|(d, r)| {
            let c = assigned.get(r.as_str()).map_or(UNKNOWN, String::as_str);
            if c == UNKNOWN && !errored.contains(d.id.as_str()) {
                unknown_without_error.push(d.id.clone());
            }
            d.clone().with_concept(c)
        })
        .collect();
    errors.extend(unknown_without_error.into_iter().map(|id| LabelError {
        doc_id: id,
        stage: "label".into(),
        message: "annotator found no concept".into(),
    }));
    Ok(LabelOutcome {
        docs: out,
        concepts,
        errors,
        warnings,
        empty_after_cleaning,
        client_calls: ann.client_calls(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn annotator(client: &dyn AnnotatorClient) -> Annotator<'_> {
        Annotator::new(client, RetryPolicy::default(), AuditLog::in_memory())
    }

    #[test]
    fn cleaning() {
        assert_eq!(clean_text("good café!"), "good caf!");
        assert_eq!(clean_text("a  b\t c"), "a b c");
        assert_eq!(clean_text("😀🎬"), "");
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_concept("  Genre.\n").as_deref(), Some("genre"));
        assert_eq!(normalize_concept("Concept: plot").as_deref(), Some("plot"));
        assert_eq!(normalize_concept("the plot is good"), None);
    }

    #[test]
    fn label_happy_and_exhausted() {
        let docs = vec![Document::new("a", "nice film", 1)];
        let c = MockClient::constant("plot");
        let (raw, errs) = label_concepts(&docs, &annotator(&c), Exec::Sequential, 4);
        assert_eq!((raw[0].as_str(), errs.len()), ("plot", 0));

        let c = MockClient::constant("This review is mainly about the plot.");
        let (raw, errs) = label_concepts(&docs, &annotator(&c), Exec::Sequential, 4);
        assert_eq!(raw[0], UNKNOWN);
        assert_eq!(errs.len(), 1);
        assert_eq!(c.calls(), 3);
    }

    #[test]
    fn merge_parses_and_rejects() {
        let raw: Vec<String> = ["plot", "story", "cast"].iter().map(|s| s.to_string()).collect();
        let c = MockClient::constant("acting, plot, visuals");
        assert_eq!(merge_meta_concepts(&raw, &annotator(&c)).unwrap(), ["acting", "plot", "visuals"]);
        let c = MockClient::constant("plot, plot");
        assert!(matches!(merge_meta_concepts(&raw, &annotator(&c)), Err(Error::Parse(_))));
        assert_eq!(c.calls(), 3);
        let c = MockClient::constant("the acting, plot");
        assert!(merge_meta_concepts(&raw, &annotator(&c)).is_err());
    }

    #[test]
    fn assignment_paths() {
        let set: Vec<String> = ["acting", "plot"].iter().map(|s| s.to_string()).collect();
        let c = MockClient::constant("plot");
        assert_eq!(assign_final_concept("storyline", &set, &annotator(&c)).unwrap(), ("plot".into(), None));
        let c = MockClient::constant("Plot ");
        assert_eq!(assign_final_concept("storyline", &set, &annotator(&c)).unwrap().0, "plot");
        let c = MockClient::constant("plots");
        let (got, warn) = assign_final_concept("storyline", &set, &annotator(&c)).unwrap();
        assert_eq!(got, "plot");
        assert!(warn.is_some());
        assert_eq!(c.calls(), 3);
        assert!(assign_final_concept("x", &[], &annotator(&c)).is_err());
    }
}
