//! Metrics, i.i.d./OOD evaluation, margin sweeps and the reversal-network
//! ablation.

mod experiments;
mod metrics;

pub use experiments::{
    ablation_reversal, margin_sweep, output_variance, AblationResult, AblationRow, CellMetrics, SweepCell,
    SweepResult, SweepSummaryRow,
};
pub use metrics::{compute_metrics, Metrics};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::pipeline::{argmax_rows, CureModel, EmbeddedSet, Mode};
use crate::scalar::Real;

/// Scores `model` on `set` through the inference path of `mode`.
pub fn evaluate<F: Real>(model: &CureModel<F>, set: &EmbeddedSet<F>, mode: Mode, exec: Exec) -> Result<Metrics> {
    if set.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    let logits = model.task_logits(&set.x, mode, exec)?;
    compute_metrics(&argmax_rows(&logits), &set.labels, model.num_labels)
}
