use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::pipeline::model::{ParamCounts, Part};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    /// Restored from a checkpoint instead of being trained.
    Resumed,
    /// Not part of this run (baseline mode).
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub steps: usize,
    pub epochs: usize,
    /// Parts updated by the stage.
    pub trained: Vec<Part>,
    /// Fingerprints of every other part, identical before and after.
    pub frozen_fingerprints: BTreeMap<Part, String>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Loss curves, per-epoch diagnostics and stage bookkeeping of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stages: Vec<StageRecord>,
    /// One point per optimizer step, keyed by curve name.
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
    pub epochs: Vec<EpochRecord>,
    pub degenerate_cosines: usize,
    pub warnings: Vec<String>,
    pub param_counts: Option<ParamCounts>,
}

impl TrainReport {
    pub fn push(&mut self, curve: &str, value: f64) {
        let c = self.curves.entry(curve.to_string()).or_default();
        let step = c.len();
        c.push(CurvePoint { step, value });
    }

    pub fn curve(&self, name: &str) -> &[CurvePoint] {
        self.curves.get(name).map_or(&[], Vec::as_slice)
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.curve(name).last().map(|p| p.value)
    }

    pub fn epoch(&mut self, stage: &str, epoch: usize, metrics: &[(&str, f64)]) {
        self.epochs.push(EpochRecord {
            stage: stage.to_string(),
            epoch,
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        });
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// `step,value` CSV of one curve.
    pub fn curve_csv(&self, name: &str) -> String {
        let mut s = String::from("step,value\n");
        for p in self.curve(name) {
            let _ = writeln!(s, "{},{}", p.step, p.value);
        }
        s
    }

    pub fn merge(&mut self, other: TrainReport) {
        self.stages.extend(other.stages);
        for (k, v) in other.curves {
            self.curves.entry(k).or_default().extend(v);
        }
        self.epochs.extend(other.epochs);
        self.degenerate_cosines += other.degenerate_cosines;
        self.warnings.extend(other.warnings);
        if other.param_counts.is_some() {
            self.param_counts = other.param_counts;
        }
    }
}
