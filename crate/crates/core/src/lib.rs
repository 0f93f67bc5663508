//! Controlled unlearning of conceptual shortcuts in text classifiers.
//!
//! The crate covers the whole pipeline: a frozen text encoder stand-in,
//! synthetic biased corpora with per-concept mutual information and
//! i.i.d./OOD split construction, a concept-annotation pipeline behind a
//! pluggable client, the content extractor / reversal network / debiasing
//! module training stages, and the evaluation harness.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod labeling;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;
