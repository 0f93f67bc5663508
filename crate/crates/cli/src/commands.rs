use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use cure::corpus::{self, build_splits, generate_synthetic, Document, SyntheticSpec};
use cure::eval::{ablation_reversal, evaluate, margin_sweep, Metrics};
use cure::labeling::{run_labeling, AnnotatorClient, Annotator, AuditLog, OfflineAnnotator};
use cure::par::Exec;
use cure::pipeline::{
    gradient_suite, known_concepts, load_trained, model_fingerprints, prepare_data, run_cure,
    CureModel, Mode, RunConfig, RunOptions, SplitConfig,
};
use cure::Error;

use crate::config::{self, CliSections};
use crate::manifest::{write_atomic, RunManifest};
use crate::ConfigArgs;

pub fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let bad = || Error::Config(format!("seeds `{s}` must be a list like 1,2,3 or a range like 1..5"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad().into());
    }
    Ok(seeds)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Effective config table plus the decoded run config.
fn run_config(args: &ConfigArgs, extra: &[(&str, toml::Value)]) -> anyhow::Result<(toml::Table, RunConfig)> {
    let mut table = config::load_table(args.config.as_deref(), &args.sets)?;
    if let Some(seed) = args.seed {
        config::set(&mut table, "seed", seed as i64)?;
    }
    if let Some(c) = &args.corpus {
        config::set(&mut table, "data.corpus", c.display().to_string())?;
    }
    for (k, v) in extra {
        config::set(&mut table, k, v.clone())?;
    }
    let cfg: RunConfig = config::decode(&table)?;
    cfg.validate()?;
    // Store the fully resolved config so the manifest alone reproduces the run.
    let mut resolved: toml::Table = toml::Value::try_from(&cfg)?
        .as_table()
        .cloned()
        .unwrap_or_default();
    if let Some(l) = table.get("labeling") {
        resolved.insert("labeling".into(), l.clone());
    }
    Ok((resolved, cfg))
}

/// Runs `body` between a starting and a finalized manifest in `dir`.
fn with_manifest(
    dir: &Path,
    command: &str,
    table: toml::Table,
    seeds: Vec<u64>,
    body: impl FnOnce(&mut RunManifest) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut m = RunManifest::start(dir, command, table, seeds)?;
    let outcome = body(&mut m);
    m.finish(dir, &outcome)?;
    outcome
}

/// Ground truth of a generated corpus.
#[derive(Debug, Serialize, Deserialize)]
pub struct GeneratorTruth {
    pub concepts: Vec<String>,
    pub keywords: Vec<Vec<String>>,
    /// `(concept, favored label)` pairs.
    pub biased: Vec<(String, usize)>,
    /// Generating concept of every document.
    pub truth: BTreeMap<String, String>,
}

impl GeneratorTruth {
    fn annotator(&self) -> OfflineAnnotator {
        let clusters: Vec<(String, Vec<String>)> =
            self.concepts.iter().cloned().zip(self.keywords.iter().cloned()).collect();
        OfflineAnnotator::new(&clusters)
    }
}

fn write_split(dir: &Path, docs: &[Document], split: &SplitConfig, seed: u64) -> anyhow::Result<()> {
    let s = build_splits(docs, split.k, split.iid_holdout_fraction, seed)?;
    write_json(&dir.join("split.json"), &s.manifest(split.k, split.iid_holdout_fraction, seed))
}

pub fn generate(spec_path: Option<&Path>, sets: &[String], seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut table = config::load_table(spec_path, sets)?;
    if let Some(s) = seed {
        config::set(&mut table, "seed", s as i64)?;
    }
    let spec: SyntheticSpec = config::decode(&table)?;
    spec.validate()?;
    let seeds = vec![spec.seed];
    let resolved = toml::Value::try_from(&spec)?.as_table().cloned().unwrap_or_default();
    with_manifest(out, "generate", resolved, seeds, |_| {
        let synth = generate_synthetic(&spec)?;
        corpus::io::save(&out.join("corpus.jsonl"), &synth.docs)?;
        let truth = GeneratorTruth {
            concepts: synth.concepts.clone(),
            keywords: synth.keywords.clone(),
            biased: synth.biased.iter().map(|&(c, y)| (synth.concepts[c].clone(), y)).collect(),
            truth: synth
                .docs
                .iter()
                .zip(&synth.truth)
                .map(|(d, &c)| (d.id.clone(), synth.concepts[c].clone()))
                .collect(),
        };
        write_json(&out.join("generator.json"), &truth)?;
        let labeled: Vec<Document> = synth
            .docs
            .iter()
            .zip(&synth.truth)
            .map(|(d, &c)| d.clone().with_concept(synth.concepts[c].clone()))
            .collect();
        write_split(out, &labeled, &SplitConfig::default(), spec.seed)?;
        println!("wrote {} documents to {}", synth.docs.len(), out.join("corpus.jsonl").display());
        Ok(())
    })
}

#[derive(Serialize)]
struct LabelReport<'a> {
    concepts: &'a [String],
    documents: usize,
    client_calls: usize,
    /// Fraction of documents whose concept matches the generator's.
    agreement: Option<f64>,
    errors: &'a [cure::labeling::LabelError],
    warnings: &'a [String],
    empty_after_cleaning: &'a [String],
}

fn client_for(backend: &str, sections: &CliSections, truth: Option<&GeneratorTruth>) -> anyhow::Result<Box<dyn AnnotatorClient>> {
    match backend {
        "offline" => {
            let t = truth.ok_or_else(|| {
                Error::Config("the offline backend needs the generator ground truth (--generator)".into())
            })?;
            Ok(Box::new(t.annotator()))
        }
        "live" => {
            // Fail before any work if the token is missing.
            sections.labeling.live.token()?;
            #[cfg(feature = "live")]
            {
                Ok(Box::new(cure::labeling::LiveClient::new(sections.labeling.live.clone())?))
            }
            #[cfg(not(feature = "live"))]
            {
                Err(Error::Config("this build has no live backend; rebuild with --features live".into()).into())
            }
        }
        other => Err(Error::Config(format!("labeling.backend `{other}` is not one of offline, live")).into()),
    }
}

pub fn label(
    args: &ConfigArgs,
    input: &Path,
    backend: Option<String>,
    generator: Option<PathBuf>,
    audit: Option<PathBuf>,
    out: &Path,
    exec: Exec,
) -> anyhow::Result<()> {
    let (table, cfg) = run_config(args, &[])?;
    let sections: CliSections = config::decode(&table)?;
    let backend = backend.unwrap_or_else(|| sections.labeling.backend.clone());
    let gen_path = generator.unwrap_or_else(|| input.with_file_name("generator.json"));
    let truth: Option<GeneratorTruth> = if gen_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(&gen_path)?)?)
    } else {
        None
    };
    let client = client_for(&backend, &sections, truth.as_ref())?;
    let docs = corpus::io::load(input)?;
    with_manifest(out, "label", table, vec![cfg.seed], |_| {
        let log = AuditLog::open(&audit.unwrap_or_else(|| out.join("audit.jsonl")))?;
        let ann = Annotator::new(client.as_ref(), sections.labeling.retry, log);
        let res = run_labeling(&docs, &ann, exec, sections.labeling.max_in_flight)?;
        corpus::io::save(&out.join("labeled.jsonl"), &res.docs)?;
        let agreement = truth.as_ref().map(|t| {
            let hits = res
                .docs
                .iter()
                .filter(|d| d.concept.as_ref() == t.truth.get(&d.id))
                .count();
            hits as f64 / res.docs.len().max(1) as f64
        });
        write_json(
            &out.join("label_report.json"),
            &LabelReport {
                concepts: &res.concepts,
                documents: res.docs.len(),
                client_calls: res.client_calls,
                agreement,
                errors: &res.errors,
                warnings: &res.warnings,
                empty_after_cleaning: &res.empty_after_cleaning,
            },
        )?;
        let (known, _) = known_concepts(&res.docs);
        if let Err(e) = write_split(out, &known, &cfg.split, cfg.data.synthetic.seed) {
            log::warn!("no split manifest written: {e:#}");
        }
        if !res.errors.is_empty() {
            log::warn!("{} documents could not be labeled; see label_report.json", res.errors.len());
        }
        println!(
            "labeled {} documents into {} concepts ({} client calls)",
            res.docs.len(),
            res.concepts.len(),
            res.client_calls
        );
        Ok(())
    })
}

#[derive(Serialize, Deserialize)]
struct SplitMetrics {
    iid: Metrics,
    ood: Metrics,
}

fn record_fingerprints(m: &mut RunManifest, model: &CureModel<f32>) {
    for (part, fp) in model_fingerprints(model) {
        m.stage_checksums.insert(part.name().to_string(), fp);
    }
}

pub fn train(
    args: &ConfigArgs,
    mode: Option<Mode>,
    margin: Option<f64>,
    resume: bool,
    stop_after: Option<usize>,
    out: &Path,
    exec: Exec,
) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    if let Some(m) = mode {
        extra.push(("cure.mode", toml::Value::String(m.to_string())));
    }
    if let Some(m) = margin {
        extra.push(("cure.margin", toml::Value::Float(m)));
    }
    let (table, cfg) = run_config(args, &extra)?;
    with_manifest(out, "train", table, vec![cfg.seed], |m| {
        let data = prepare_data(&cfg, exec)?;
        let opts = RunOptions {
            checkpoint_dir: Some(out.join("checkpoints")),
            resume,
            exec,
            stop_after,
        };
        let res = run_cure(&cfg, &data, &opts)?;
        m.timing = res.timing.clone();
        record_fingerprints(m, &res.model);
        write_json(&out.join("report.json"), &res.report)?;
        write_json(
            &out.join("metrics.json"),
            &SplitMetrics {
                iid: res.iid.clone(),
                ood: res.ood.clone(),
            },
        )?;
        for name in res.report.curves.keys() {
            write_text(&out.join("curves").join(format!("{name}.csv")), &res.report.curve_csv(name))?;
        }
        println!(
            "iid accuracy {:.4}, ood accuracy {:.4}",
            res.iid.accuracy, res.ood.accuracy
        );
        Ok(())
    })
}

pub fn eval(run: &Path, out: Option<PathBuf>, exec: Exec) -> anyhow::Result<()> {
    let manifest = RunManifest::read(run).with_context(|| format!("reading the manifest of {}", run.display()))?;
    if manifest.command != "train" {
        return Err(Error::Config(format!("{} is not a training run", run.display())).into());
    }
    let cfg: RunConfig = config::decode(&manifest.config)?;
    let data = prepare_data(&cfg, exec)?;
    let (model, _) = load_trained(&run.join("checkpoints"), &cfg, &data)?;
    let metrics = SplitMetrics {
        iid: evaluate(&model, &data.iid, cfg.cure.mode, exec)?,
        ood: evaluate(&model, &data.ood, cfg.cure.mode, exec)?,
    };
    write_json(&out.unwrap_or_else(|| run.join("eval.json")), &metrics)?;
    println!(
        "iid accuracy {:.4}, ood accuracy {:.4}",
        metrics.iid.accuracy, metrics.ood.accuracy
    );
    Ok(())
}

pub fn sweep(
    args: &ConfigArgs,
    modes: &[Mode],
    margins: &[f64],
    seeds: &[u64],
    out: &Path,
    exec: Exec,
) -> anyhow::Result<()> {
    let (table, cfg) = run_config(args, &[])?;
    if let Some(m) = margins.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::Config(format!("margin {m} is outside [0, 1]")).into());
    }
    with_manifest(out, "sweep", table, seeds.to_vec(), |m| {
        let data = prepare_data(&cfg, exec)?;
        let t0 = Instant::now();
        let res = margin_sweep(&cfg, &data, modes, margins, seeds, exec)?;
        m.timing.push(("sweep".into(), t0.elapsed().as_secs_f64()));
        write_text(&out.join("sweep.csv"), &res.to_csv())?;
        write_text(&out.join("sweep_long.csv"), &res.to_long_csv())?;
        write_json(&out.join("sweep_summary.json"), &res.summary())?;
        let failed = res.cells.iter().filter(|c| c.error.is_some()).count();
        if failed == res.cells.len() {
            return Err(Error::Divergence {
                stage: "sweep".into(),
                detail: "every cell failed".into(),
            }
            .into());
        }
        if failed > 0 {
            log::warn!("{failed} of {} cells failed; see sweep.csv", res.cells.len());
        }
        println!("wrote {} cells to {}", res.cells.len(), out.join("sweep.csv").display());
        Ok(())
    })
}

pub fn ablate(args: &ConfigArgs, seeds: &[u64], out: &Path, exec: Exec) -> anyhow::Result<()> {
    let (table, cfg) = run_config(args, &[])?;
    with_manifest(out, "ablate", table, seeds.to_vec(), |m| {
        let data = prepare_data(&cfg, exec)?;
        let t0 = Instant::now();
        let res = ablation_reversal(&cfg, &data, seeds, exec)?;
        m.timing.push(("ablation".into(), t0.elapsed().as_secs_f64()));
        write_text(&out.join("ablation.csv"), &res.to_csv())?;
        write_json(&out.join("ablation.json"), &res)?;
        println!(
            "ood accuracy with reversal {:.4}, without {:.4}",
            res.mean_ood_with(),
            res.mean_ood_without()
        );
        Ok(())
    })
}

#[derive(Serialize)]
struct GradRow {
    seed: u64,
    case: String,
    max_rel_err: f64,
    max_abs_err: f64,
    coords: usize,
}

pub fn grad_check(seeds: u64, tolerance: f64, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for seed in 0..seeds {
        for c in gradient_suite(seed)? {
            rows.push(GradRow {
                seed,
                case: c.name,
                max_rel_err: c.check.max_rel_err,
                max_abs_err: c.check.max_abs_err,
                coords: c.check.coords,
            });
        }
    }
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &rows {
        let w = worst.entry(&r.case).or_insert(0.0);
        *w = w.max(r.max_rel_err);
    }
    for (case, err) in &worst {
        let flag = if *err < tolerance { "ok" } else { "FAIL" };
        println!("{case:<28} max rel err {err:.3e}  {flag}");
    }
    if let Some(p) = out {
        write_json(&p, &rows)?;
    }
    let failing: Vec<&str> = worst.iter().filter(|(_, e)| **e >= tolerance).map(|(c, _)| *c).collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: "grad-check".into(),
            detail: format!("relative error above {tolerance:e} in {}", failing.join(", ")),
        }
        .into())
    }
}
