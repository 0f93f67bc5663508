use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::Metrics;
use crate::par::Exec;
use crate::pipeline::{finish_from_prefix, train_prefix, Mode, PreparedData, RunConfig, RunOptions, RunOutcome};
use crate::pipeline::run_cure;
use crate::scalar::Real;
use crate::nn::Tensor;

/// iid and OOD metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub iid: Metrics,
    pub ood: Metrics,
}

impl From<&RunOutcome> for CellMetrics {
    fn from(o: &RunOutcome) -> Self {
        Self {
            iid: o.iid.clone(),
            ood: o.ood.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mode: Mode,
    pub margin: f64,
    pub seed: u64,
    pub metrics: Option<CellMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub mode: Mode,
    pub margin: f64,
    pub seeds_ok: usize,
    pub mean_iid_accuracy: f64,
    pub mean_ood_accuracy: f64,
    pub mean_iid_macro_f1: f64,
    pub mean_ood_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Ordered by mode, then margin, then seed.
    pub cells: Vec<SweepCell>,
}

fn fmt_opt(m: Option<&Metrics>, f: impl Fn(&Metrics) -> f64) -> String {
    m.map_or_else(String::new, |m| format!("{}", f(m)))
}

impl SweepResult {
    /// One row per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,margin,seed,iid_accuracy,iid_macro_f1,ood_accuracy,ood_macro_f1,error\n");
        for c in &self.cells {
            let iid = c.metrics.as_ref().map(|m| &m.iid);
            let ood = c.metrics.as_ref().map(|m| &m.ood);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.mode,
                c.margin,
                c.seed,
                fmt_opt(iid, |m| m.accuracy),
                fmt_opt(iid, |m| m.macro_f1),
                fmt_opt(ood, |m| m.accuracy),
                fmt_opt(ood, |m| m.macro_f1),
                c.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            );
        }
        s
    }

    /// Plot-ready long format: `mode,margin,seed,split,metric,value`.
    pub fn to_long_csv(&self) -> String {
        let mut s = String::from("mode,margin,seed,split,metric,value\n");
        for c in &self.cells {
            let Some(m) = &c.metrics else { continue };
            for (split, mm) in [("iid", &m.iid), ("ood", &m.ood)] {
                for (metric, v) in [("accuracy", mm.accuracy), ("macro_f1", mm.macro_f1)] {
                    let _ = writeln!(s, "{},{},{},{split},{metric},{v}", c.mode, c.margin, c.seed);
                }
            }
        }
        s
    }

    /// Seed-averaged metrics per (mode, margin), over the cells that succeeded.
    pub fn summary(&self) -> Vec<SweepSummaryRow> {
        let mut groups: Vec<((Mode, f64), Vec<&CellMetrics>)> = Vec::new();
        for c in &self.cells {
            let key = (c.mode, c.margin);
            let pos = match groups.iter().position(|(k, _)| *k == key) {
                Some(p) => p,
                None => {
                    groups.push((key, Vec::new()));
                    groups.len() - 1
                }
            };
            if let Some(m) = &c.metrics {
                groups[pos].1.push(m);
            }
        }
        groups
            .into_iter()
            .map(|((mode, margin), ms)| {
                let n = ms.len();
                let mean = |f: &dyn Fn(&CellMetrics) -> f64| {
                    if n == 0 {
                        f64::NAN
                    } else {
                        ms.iter().map(|m| f(m)).sum::<f64>() / n as f64
                    }
                };
                SweepSummaryRow {
                    mode,
                    margin,
                    seeds_ok: n,
                    mean_iid_accuracy: mean(&|m| m.iid.accuracy),
                    mean_ood_accuracy: mean(&|m| m.ood.accuracy),
                    mean_iid_macro_f1: mean(&|m| m.iid.macro_f1),
                    mean_ood_macro_f1: mean(&|m| m.ood.macro_f1),
                }
            })
            .collect()
    }

    pub fn summary_row(&self, mode: Mode, margin: f64) -> Option<SweepSummaryRow> {
        self.summary().into_iter().find(|r| r.mode == mode && r.margin == margin)
    }
}

/// Trains every (mode, margin, seed) cell. The mode-independent stages are
/// trained once per seed and shared; cells run on `exec`. A failing cell is
/// recorded with its error and the grid continues.
pub fn margin_sweep(
    cfg: &RunConfig,
    data: &PreparedData<f32>,
    modes: &[Mode],
    margins: &[f64],
    seeds: &[u64],
    exec: Exec,
) -> Result<SweepResult> {
    for &m in margins {
        let mut c = cfg.clone();
        c.cure.margin = m;
        c.validate()?;
    }
    let needs_prefix = modes.iter().any(|&m| m != Mode::Off);
    let prefixes = exec.map(seeds, |&seed| {
        if !needs_prefix {
            return None;
        }
        let mut c = cfg.clone();
        c.seed = seed;
        Some(train_prefix(&c, data, Exec::Sequential).map_err(|e| e.to_string()))
    });
    let mut jobs = Vec::new();
    for &mode in modes {
        for &margin in margins {
            for (si, &seed) in seeds.iter().enumerate() {
                jobs.push((mode, margin, si, seed));
            }
        }
    }
    let cells = exec.map(&jobs, |&(mode, margin, si, seed)| {
        let mut c = cfg.clone();
        c.seed = seed;
        c.cure.mode = mode;
        c.cure.margin = margin;
        let out = match (&prefixes[si], mode) {
            (_, Mode::Off) | (None, _) => run_cure(
                &c,
                data,
                &RunOptions {
                    exec: Exec::Sequential,
                    ..Default::default()
                },
            )
            .map_err(|e| e.to_string()),
            (Some(Ok(p)), _) => finish_from_prefix(p, &c, data, Exec::Sequential).map_err(|e| e.to_string()),
            (Some(Err(e)), _) => Err(e.clone()),
        };
        match out {
            Ok(o) => SweepCell {
                mode,
                margin,
                seed,
                metrics: Some(CellMetrics::from(&o)),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep cell mode={mode} M={margin} seed={seed} failed: {e}");
                SweepCell {
                    mode,
                    margin,
                    seed,
                    metrics: None,
                    error: Some(e),
                }
            }
        }
    });
    Ok(SweepResult { cells })
}

/// Mean over dimensions of the across-input variance of the rows of `x`.
pub fn output_variance<F: Real>(x: &Tensor<F>) -> f64 {
    let (n, d) = (x.rows(), x.row_len());
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..d {
        let col = (0..n).map(|i| x.row(i)[j].as_f64());
        let mean = col.clone().sum::<f64>() / n as f64;
        total += col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    }
    total / d as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub with_reversal: Option<CellMetrics>,
    pub without_reversal: Option<CellMetrics>,
    /// [`output_variance`] of `f_φ(x)` over the concept pool.
    pub variance_with: Option<f64>,
    pub variance_without: Option<f64>,
    /// Per-step `l_concept` and `l_content` curves of both variants.
    pub curves_with: BTreeMap<String, Vec<f64>>,
    pub curves_without: BTreeMap<String, Vec<f64>>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn ood_delta(&self) -> Option<f64> {
        Some(self.with_reversal.as_ref()?.ood.accuracy - self.without_reversal.as_ref()?.ood.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub lambda: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    /// One row per seed and variant.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,variant,iid_accuracy,iid_macro_f1,ood_accuracy,ood_macro_f1,output_variance\n");
        for r in &self.rows {
            for (variant, m, v) in [
                ("with_reversal", &r.with_reversal, r.variance_with),
                ("without_reversal", &r.without_reversal, r.variance_without),
            ] {
                let iid = m.as_ref().map(|m| &m.iid);
                let ood = m.as_ref().map(|m| &m.ood);
                let _ = writeln!(
                    s,
                    "{},{variant},{},{},{},{},{}",
                    r.seed,
                    fmt_opt(iid, |m| m.accuracy),
                    fmt_opt(iid, |m| m.macro_f1),
                    fmt_opt(ood, |m| m.accuracy),
                    fmt_opt(ood, |m| m.macro_f1),
                    v.map_or_else(String::new, |v| v.to_string())
                );
            }
        }
        s
    }

    fn mean(&self, f: impl Fn(&AblationRow) -> Option<f64>) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter_map(f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn mean_ood_with(&self) -> f64 {
        self.mean(|r| r.with_reversal.as_ref().map(|m| m.ood.accuracy))
    }

    pub fn mean_ood_without(&self) -> f64 {
        self.mean(|r| r.without_reversal.as_ref().map(|m| m.ood.accuracy))
    }

    pub fn mean_variance_with(&self) -> f64 {
        self.mean(|r| r.variance_with)
    }

    pub fn mean_variance_without(&self) -> f64 {
        self.mean(|r| r.variance_without)
    }
}

fn extractor_curves(o: &RunOutcome) -> BTreeMap<String, Vec<f64>> {
    ["l_concept", "l_content"]
        .iter()
        .map(|&k| (k.to_string(), o.report.curve(k).iter().map(|p| p.value).collect()))
        .collect()
}

/// Paired runs per seed: the configured λ against λ = 0, where φ trains on
/// the concept loss alone. Both use the mode and margin of `cfg`.
pub fn ablation_reversal(cfg: &RunConfig, data: &PreparedData<f32>, seeds: &[u64], exec: Exec) -> Result<AblationResult> {
    cfg.validate()?;
    let jobs: Vec<(u64, bool)> = seeds.iter().flat_map(|&s| [(s, true), (s, false)]).collect();
    let outs = exec.map(&jobs, |&(seed, with)| {
        let mut c = cfg.clone();
        c.seed = seed;
        if !with {
            c.cure.lambda = 0.0;
        }
        let opts = RunOptions {
            exec: Exec::Sequential,
            ..Default::default()
        };
        run_cure(&c, data, &opts).and_then(|o| {
            let var = output_variance(&o.model.extract(&data.pool.x, Exec::Sequential)?);
            Ok((CellMetrics::from(&o), var, extractor_curves(&o)))
        })
    });
    let mut rows = Vec::new();
    let mut it = outs.into_iter();
    for &seed in seeds {
        let (w, wo) = (it.next().expect("paired job"), it.next().expect("paired job"));
        let mut errors = Vec::new();
        let mut row = AblationRow {
            seed,
            with_reversal: None,
            without_reversal: None,
            variance_with: None,
            variance_without: None,
            curves_with: BTreeMap::new(),
            curves_without: BTreeMap::new(),
            error: None,
        };
        match w {
            Ok((m, v, c)) => {
                row.with_reversal = Some(m);
                row.variance_with = Some(v);
                row.curves_with = c;
            }
            Err(e) => errors.push(format!("with reversal: {e}")),
        }
        match wo {
            Ok((m, v, c)) => {
                row.without_reversal = Some(m);
                row.variance_without = Some(v);
                row.curves_without = c;
            }
            Err(e) => errors.push(format!("without reversal: {e}")),
        }
        if !errors.is_empty() {
            row.error = Some(errors.join("; "));
        }
        rows.push(row);
    }
    Ok(AblationResult {
        lambda: cfg.cure.lambda,
        rows,
    })
}
