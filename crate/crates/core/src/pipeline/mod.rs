//! Training stages, checkpointing and run orchestration.

mod config;
mod data;
mod gradsuite;
mod losses;
mod model;
mod report;
mod run;
pub mod stages;

pub use config::{ConceptPool, CureHyper, DataConfig, Mode, ModelConfig, RunConfig, SplitConfig, StageSchedule};
pub use data::{known_concepts, prepare, EmbeddedSet, PreparedData};
pub use gradsuite::{case_names, gradient_suite, GradCase};
pub use losses::{concept_dropout_floor, concept_dropout_loss, hinge, margin_loss, margin_loss_from_cos};
pub use model::{argmax_rows, CureModel, DebiasModule, Extractor, ParamCounts, Part, REFERENCE_WIDTH};
pub use report::{CurvePoint, EpochRecord, StageRecord, StageStatus, TrainReport};
pub use run::{
    checkpoint_path, finish_from_prefix, load_dataset, load_trained, model_fingerprints, prepare_data, run_cure,
    train_prefix,
    Dataset, Prefix, RunOptions, RunOutcome, STAGES,
};
