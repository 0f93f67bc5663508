//! Documents, synthetic biased corpora, per-concept mutual information and
//! Group A / Group B split construction.

mod document;
pub mod io;
mod mi;
mod split;
mod synthetic;

pub use document::Document;
pub use mi::{concept_mi, ConceptStats};
pub use split::{build_splits, DatasetSplit, ScoredConcept, SplitManifest};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
