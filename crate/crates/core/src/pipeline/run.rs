//! End-to-end orchestration: data preparation, the four stages in order,
//! per-stage checkpoints, resume, and final evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, build_splits, generate_synthetic, DatasetSplit, Document};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::labeling::OfflineAnnotator;
use crate::nn::checkpoint;
use crate::par::Exec;
use crate::pipeline::config::{Mode, RunConfig};
use crate::pipeline::data::{known_concepts, prepare, PreparedData};
use crate::pipeline::model::{CureModel, Part};
use crate::pipeline::report::{StageRecord, StageStatus, TrainReport};
use crate::pipeline::stages::{self, StageContext, STAGE_CONCEPT, STAGE_DEBIAS, STAGE_EXTRACTOR, STAGE_TASK};

/// Stage names in execution order.
pub const STAGES: [&str; 4] = [STAGE_CONCEPT, STAGE_EXTRACTOR, STAGE_DEBIAS, STAGE_TASK];

/// A labeled corpus with its split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Vec<Document>,
    pub split: DatasetSplit,
    pub warnings: Vec<String>,
}

/// Loads the configured corpus (or generates and labels the synthetic one),
/// drops documents without a usable concept and builds the split.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut warnings = Vec::new();
    let docs = match &cfg.data.corpus {
        Some(path) => corpus::io::load(path)?,
        None => {
            let synth = generate_synthetic(&cfg.data.synthetic)?;
            let (docs, misses) = OfflineAnnotator::from_corpus(&synth).annotate(&synth.docs);
            if !misses.is_empty() {
                warnings.push(format!("{} documents had no concept keyword", misses.len()));
            }
            docs
        }
    };
    let (known, dropped) = known_concepts(&docs);
    if dropped > 0 {
        warnings.push(format!("{dropped} documents without a known concept were dropped"));
    }
    if known.is_empty() {
        return Err(Error::LabelingIncomplete("no document carries a concept label".into()));
    }
    let split = build_splits(
        &known,
        cfg.split.k,
        cfg.split.iid_holdout_fraction,
        cfg.data.synthetic.seed,
    )?;
    Ok(Dataset {
        corpus: known,
        split,
        warnings,
    })
}

/// Loads the dataset and embeds every part with the frozen encoder.
pub fn prepare_data(cfg: &RunConfig, exec: Exec) -> Result<PreparedData<f32>> {
    let ds = load_dataset(cfg)?;
    let encoder = FrozenEncoder::new(cfg.encoder.clone())?;
    let mut data = prepare(&ds.corpus, &ds.split, &encoder, cfg.schedule.concept_pool, exec)?;
    data.warnings.splice(0..0, ds.warnings);
    Ok(data)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where per-stage checkpoints go. `None` disables checkpointing.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint written with the same config.
    pub resume: bool,
    pub exec: Exec,
    /// Stop after this many stages (used to simulate interruption).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: CureModel<f32>,
    pub report: TrainReport,
    pub iid: Metrics,
    pub ood: Metrics,
    /// Wall-clock seconds of each stage run in this call. Kept out of the
    /// report so reports stay reproducible.
    pub timing: Vec<(String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    stage: String,
    report: TrainReport,
}

pub fn checkpoint_path(dir: &Path, stage_index: usize) -> PathBuf {
    dir.join(format!("{:02}-{}.ckpt", stage_index + 1, STAGES[stage_index]))
}

fn save_stage(dir: &Path, i: usize, cfg: &RunConfig, model: &CureModel<f32>, report: &TrainReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        config: cfg.clone(),
        stage: STAGES[i].to_string(),
        report: report.clone(),
    };
    checkpoint::save(
        &checkpoint_path(dir, i),
        &model.named_params(),
        serde_json::to_value(meta)?,
        cfg.seed,
    )
}

/// Latest checkpoint in `dir` whose stored config equals `cfg`.
fn latest_checkpoint(dir: &Path, cfg: &RunConfig, model: &mut CureModel<f32>) -> Result<Option<(usize, TrainReport)>> {
    for i in (0..STAGES.len()).rev() {
        let path = checkpoint_path(dir, i);
        if !path.exists() {
            continue;
        }
        let (header, params) = checkpoint::load::<f32>(&path)?;
        let meta: CheckpointMeta = serde_json::from_value(header.hyperparameters)?;
        if meta.config != *cfg {
            log::warn!("{} was written with a different config; ignored", path.display());
            continue;
        }
        model.load_named(&params)?;
        return Ok(Some((i, meta.report)));
    }
    Ok(None)
}

fn absent(name: &str) -> StageRecord {
    StageRecord {
        name: name.to_string(),
        status: StageStatus::Absent,
        steps: 0,
        epochs: 0,
        trained: Vec::new(),
        frozen_fingerprints: Default::default(),
        stopped_early: false,
    }
}

fn run_stage(
    i: usize,
    model: &mut CureModel<f32>,
    data: &PreparedData<f32>,
    ctx: &StageContext,
    report: &mut TrainReport,
) -> Result<StageRecord> {
    if ctx.hyper.mode == Mode::Off && i < 3 {
        return Ok(absent(STAGES[i]));
    }
    match i {
        0 => stages::train_concept_head(model, &data.pool, ctx, report),
        1 => stages::train_content_extractor(model, &data.pool, ctx, report),
        2 => stages::train_debias(model, &data.train, ctx, report),
        _ => stages::train_task_head(model, &data.train, ctx, report),
    }
}

fn new_model(cfg: &RunConfig, data: &PreparedData<f32>) -> Result<CureModel<f32>> {
    CureModel::new(
        data.train.x.row_len(),
        data.concepts.len(),
        data.num_labels,
        &cfg.model,
        cfg.seed,
    )
}

fn new_report(cfg: &RunConfig, data: &PreparedData<f32>, model: &CureModel<f32>) -> TrainReport {
    let mut report = TrainReport {
        param_counts: Some(model.param_counts()),
        ..Default::default()
    };
    report.warnings.extend(data.warnings.iter().cloned());
    if cfg.cure.mode == Mode::Off {
        report.warnings.push("baseline mode: only the task head is trained".into());
    }
    report
}

/// Runs stages `from..to` on an existing model.
fn run_stages(
    cfg: &RunConfig,
    data: &PreparedData<f32>,
    model: &mut CureModel<f32>,
    report: &mut TrainReport,
    stages: std::ops::Range<usize>,
    opts: &RunOptions,
) -> Result<Vec<(String, f64)>> {
    let mut timing = Vec::new();
    let ctx = StageContext {
        schedule: &cfg.schedule,
        hyper: &cfg.cure,
        seed: cfg.seed,
        exec: opts.exec,
    };
    for i in stages {
        let t0 = Instant::now();
        let rec = run_stage(i, model, data, &ctx, report)?;
        timing.push((STAGES[i].to_string(), t0.elapsed().as_secs_f64()));
        log::info!("stage {} finished: {:?}, {} steps", rec.name, rec.status, rec.steps);
        let trained = rec.status != StageStatus::Absent;
        report.stages.push(rec);
        if let (Some(dir), true) = (&opts.checkpoint_dir, trained) {
            save_stage(dir, i, cfg, model, report)?;
        }
    }
    Ok(timing)
}

/// Runs every stage for `cfg` on prepared data and evaluates the result.
pub fn run_cure(cfg: &RunConfig, data: &PreparedData<f32>, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = new_model(cfg, data)?;
    let mut report = new_report(cfg, data, &model);
    let mut start = 0;
    if opts.resume {
        let dir = opts
            .checkpoint_dir
            .as_deref()
            .ok_or_else(|| Error::Config("resume needs a checkpoint directory".into()))?;
        if let Some((i, saved)) = latest_checkpoint(dir, cfg, &mut model)? {
            report = saved;
            for s in &mut report.stages {
                if s.status == StageStatus::Completed {
                    s.status = StageStatus::Resumed;
                }
            }
            start = i + 1;
        }
    }
    let end = opts.stop_after.map_or(STAGES.len(), |n| n.min(STAGES.len())).max(start);
    let timing = run_stages(cfg, data, &mut model, &mut report, start..end, opts)?;
    if end < STAGES.len() {
        return Err(Error::Config(format!("run stopped after stage {}", STAGES[end - 1])));
    }
    finish(model, report, cfg, data, opts.exec, timing)
}

fn finish(
    model: CureModel<f32>,
    report: TrainReport,
    cfg: &RunConfig,
    data: &PreparedData<f32>,
    exec: Exec,
    timing: Vec<(String, f64)>,
) -> Result<RunOutcome> {
    let iid = evaluate(&model, &data.iid, cfg.cure.mode, exec)?;
    let ood = evaluate(&model, &data.ood, cfg.cure.mode, exec)?;
    Ok(RunOutcome {
        model,
        report,
        iid,
        ood,
        timing,
    })
}

/// Loads the model saved after the last stage of a finished run.
pub fn load_trained(dir: &Path, cfg: &RunConfig, data: &PreparedData<f32>) -> Result<(CureModel<f32>, TrainReport)> {
    let last = STAGES.len() - 1;
    let path = checkpoint_path(dir, last);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} not found; the run did not finish", path.display())));
    }
    let (header, params) = checkpoint::load::<f32>(&path)?;
    let meta: CheckpointMeta = serde_json::from_value(header.hyperparameters)?;
    if meta.config != *cfg {
        return Err(Error::Checkpoint(format!("{} was written with a different config", path.display())));
    }
    let mut model = new_model(cfg, data)?;
    model.load_named(&params)?;
    Ok((model, meta.report))
}

/// Model and report after the concept head and extractor stages. These do
/// not depend on the mode or margin, so sweeps share them across cells.
#[derive(Debug, Clone)]
pub struct Prefix {
    pub model: CureModel<f32>,
    pub report: TrainReport,
}

pub fn train_prefix(cfg: &RunConfig, data: &PreparedData<f32>, exec: Exec) -> Result<Prefix> {
    let mut cfg = cfg.clone();
    if cfg.cure.mode == Mode::Off {
        cfg.cure.mode = Mode::Removal;
    }
    cfg.validate()?;
    let mut model = new_model(&cfg, data)?;
    let mut report = new_report(&cfg, data, &model);
    let opts = RunOptions {
        exec,
        ..Default::default()
    };
    run_stages(&cfg, data, &mut model, &mut report, 0..2, &opts)?;
    Ok(Prefix { model, report })
}

/// Finishes a run from a shared prefix with the mode and margin of `cfg`.
/// Equals `run_cure(cfg)` when the prefix was trained with the same seed,
/// schedule, model and extractor settings.
pub fn finish_from_prefix(prefix: &Prefix, cfg: &RunConfig, data: &PreparedData<f32>, exec: Exec) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.cure.mode == Mode::Off {
        let opts = RunOptions {
            exec,
            ..Default::default()
        };
        return run_cure(cfg, data, &opts);
    }
    let mut model = prefix.model.clone();
    let mut report = prefix.report.clone();
    let opts = RunOptions {
        exec,
        ..Default::default()
    };
    let timing = run_stages(cfg, data, &mut model, &mut report, 2..4, &opts)?;
    finish(model, report, cfg, data, exec, timing)
}

/// Fingerprints of every part, for determinism checks.
pub fn model_fingerprints(model: &CureModel<f32>) -> Vec<(Part, String)> {
    Part::ALL.iter().map(|&p| (p, model.fingerprint(p))).collect()
}
