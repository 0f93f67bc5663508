//! The four training stages. Each stage updates only its designated parts and
//! verifies, by fingerprint, that every other part is untouched.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Graph, Tensor};
use crate::par::Exec;
use crate::pipeline::config::{CureHyper, Mode, StageSchedule};
use crate::pipeline::data::EmbeddedSet;
use crate::pipeline::losses::{concept_dropout_loss, hinge, margin_loss};
use crate::pipeline::model::{argmax_rows, CureModel, Part};
use crate::pipeline::report::{StageRecord, StageStatus, TrainReport};
use crate::rng;
use crate::scalar::Real;

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

pub const STAGE_CONCEPT: &str = "concept_head";
pub const STAGE_EXTRACTOR: &str = "content_extractor";
pub const STAGE_DEBIAS: &str = "debias";
pub const STAGE_TASK: &str = "task_head";

/// Settings shared by all stages of one run.
#[derive(Debug, Clone, Copy)]
pub struct StageContext<'a> {
    pub schedule: &'a StageSchedule,
    pub hyper: &'a CureHyper,
    pub seed: u64,
    /// Used for batched inference between steps; steps themselves are
    /// single-threaded.
    pub exec: Exec,
}

impl StageContext<'_> {
    fn optimizer<F: Real>(&self, model: &CureModel<F>, part: Part) -> AdamW<F> {
        let lr = match part {
            Part::Phi | Part::PhiHat => self.schedule.lr_extractor,
            Part::Omega | Part::Psi | Part::Theta => self.schedule.lr_heads,
        };
        AdamW::new(
            AdamWConfig {
                lr,
                weight_decay: self.schedule.weight_decay,
                ..Default::default()
            },
            model.params(part),
        )
    }

    fn batches(&self, stage: &str, epoch: usize, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::substream(self.seed, &format!("batches.{stage}.{epoch}")));
        idx.chunks(self.schedule.batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

fn check_loss(stage: &str, name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v > DIVERGENCE_LIMIT {
        return Err(Error::Divergence {
            stage: stage.to_string(),
            detail: format!("{name} = {v}"),
        });
    }
    Ok(())
}

fn frozen_prints<F: Real>(model: &CureModel<F>, trained: &[Part]) -> BTreeMap<Part, String> {
    Part::ALL
        .iter()
        .filter(|p| !trained.contains(p))
        .map(|&p| (p, model.fingerprint(p)))
        .collect()
}

struct StageGuard {
    name: &'static str,
    trained: Vec<Part>,
    before: BTreeMap<Part, String>,
}

impl StageGuard {
    fn new<F: Real>(model: &CureModel<F>, name: &'static str, trained: &[Part]) -> Self {
        Self {
            name,
            trained: trained.to_vec(),
            before: frozen_prints(model, trained),
        }
    }

    fn finish<F: Real>(self, model: &CureModel<F>, steps: usize, epochs: usize, stopped_early: bool) -> Result<StageRecord> {
        let after = frozen_prints(model, &self.trained);
        if after != self.before {
            return Err(Error::Divergence {
                stage: self.name.to_string(),
                detail: "a frozen part changed during the stage".into(),
            });
        }
        Ok(StageRecord {
            name: self.name.to_string(),
            status: StageStatus::Completed,
            steps,
            epochs,
            trained: self.trained,
            frozen_fingerprints: after,
            stopped_early,
        })
    }
}

fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    let hit = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    hit as f64 / gold.len().max(1) as f64
}

/// Concept accuracy of ω on raw embeddings.
pub fn concept_accuracy<F: Real>(model: &CureModel<F>, set: &EmbeddedSet<F>, exec: Exec) -> Result<f64> {
    let logits = model.concept_logits(&set.x, exec)?;
    Ok(accuracy(&argmax_rows(&logits), &set.concepts))
}

/// Concept accuracy of the frozen ω on `f_φ(x)`.
pub fn extracted_concept_accuracy<F: Real>(model: &CureModel<F>, set: &EmbeddedSet<F>, exec: Exec) -> Result<f64> {
    let xc = model.extract(&set.x, exec)?;
    let logits = model.concept_logits(&xc, exec)?;
    Ok(accuracy(&argmax_rows(&logits), &set.concepts))
}

/// Mean concept-dropout loss and reconstruction loss over a whole set.
pub fn extractor_losses<F: Real>(model: &CureModel<F>, set: &EmbeddedSet<F>, tau: f64, exec: Exec) -> Result<(f64, f64)> {
    let xc = model.extract(&set.x, exec)?;
    let logits = model.concept_logits(&xc, exec)?;
    let mut g = Graph::<F>::new();
    let l = g.constant(logits);
    let lc = concept_dropout_loss(&mut g, l, tau)?;
    let recon = {
        let mut g2 = Graph::<F>::new();
        let p = model.bind(&mut g2, Part::PhiHat, false);
        let c = g2.constant(xc);
        let r = model.phi_hat.forward(&mut g2, &p, c)?;
        let x = g2.constant(set.x.clone());
        let m = g2.mse(r, x)?;
        g2.value(m).item().as_f64()
    };
    Ok((g.value(lc).item().as_f64(), recon))
}

/// Trains ω by cross-entropy on concept labels; ω is frozen afterwards.
pub fn train_concept_head<F: Real>(
    model: &mut CureModel<F>,
    pool: &EmbeddedSet<F>,
    ctx: &StageContext,
    report: &mut TrainReport,
) -> Result<StageRecord> {
    let mut distinct = pool.concepts.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Degenerate(format!(
            "concept head needs at least 2 concepts, the pool has {}",
            distinct.len()
        )));
    }
    let guard = StageGuard::new(model, STAGE_CONCEPT, &[Part::Omega]);
    let mut opt = ctx.optimizer(model, Part::Omega);
    let mut steps = 0;
    for epoch in 0..ctx.schedule.epochs_concept {
        for idx in ctx.batches(STAGE_CONCEPT, epoch, pool.len()) {
            let mut g = Graph::new();
            let p = model.bind(&mut g, Part::Omega, true);
            let x = g.constant(pool.x.select_rows(&idx));
            let logits = model.omega.forward(&mut g, &p, x)?;
            let targets: Vec<usize> = idx.iter().map(|&i| pool.concepts[i]).collect();
            let loss = g.cross_entropy(logits, &targets)?;
            let v = g.value(loss).item().as_f64();
            check_loss(STAGE_CONCEPT, "concept cross-entropy", v)?;
            let grads = g.backward(loss)?;
            model.params_mut(Part::Omega).accumulate(&p, &grads);
            opt.step(model.params_mut(Part::Omega))?;
            report.push("concept_ce", v);
            steps += 1;
        }
        let acc = concept_accuracy(model, pool, ctx.exec)?;
        report.epoch(STAGE_CONCEPT, epoch, &[("accuracy", acc)]);
    }
    guard.finish(model, steps, ctx.schedule.epochs_concept, false)
}

/// One reversal-network step on `‖f_φ̂(f_φ(x)) - x‖²` with φ frozen.
pub fn reversal_step<F: Real>(model: &mut CureModel<F>, opt: &mut AdamW<F>, x: &Tensor<F>) -> Result<f64> {
    let mut g = Graph::new();
    let phi = model.bind(&mut g, Part::Phi, false);
    let hat = model.bind(&mut g, Part::PhiHat, true);
    let xn = g.constant(x.clone());
    let xc = model.phi.forward(&mut g, &phi, xn)?;
    let r = model.phi_hat.forward(&mut g, &hat, xc)?;
    let loss = g.mse(r, xn)?;
    let v = g.value(loss).item().as_f64();
    check_loss(STAGE_EXTRACTOR, "reconstruction loss", v)?;
    let grads = g.backward(loss)?;
    model.params_mut(Part::PhiHat).accumulate(&hat, &grads);
    opt.step(model.params_mut(Part::PhiHat))?;
    Ok(v)
}

/// Losses of one extractor step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractorLosses {
    pub concept: f64,
    pub content: f64,
    pub total: f64,
}

/// One extractor step on `L_concept + λ L_content` with ω and φ̂ frozen.
pub fn extractor_step<F: Real>(
    model: &mut CureModel<F>,
    opt: &mut AdamW<F>,
    x: &Tensor<F>,
    tau: f64,
    lambda: f64,
) -> Result<ExtractorLosses> {
    let mut g = Graph::new();
    let phi = model.bind(&mut g, Part::Phi, true);
    let omega = model.bind(&mut g, Part::Omega, false);
    let hat = model.bind(&mut g, Part::PhiHat, false);
    let xn = g.constant(x.clone());
    let xc = model.phi.forward(&mut g, &phi, xn)?;
    let logits = model.omega.forward(&mut g, &omega, xc)?;
    let lc = concept_dropout_loss(&mut g, logits, tau)?;
    let r = model.phi_hat.forward(&mut g, &hat, xc)?;
    let lr = g.mse(r, xn)?;
    let weighted = g.scale(lr, F::of(lambda));
    let total = g.add(lc, weighted)?;
    let out = ExtractorLosses {
        concept: g.value(lc).item().as_f64(),
        content: g.value(lr).item().as_f64(),
        total: g.value(total).item().as_f64(),
    };
    check_loss(STAGE_EXTRACTOR, "extractor loss", out.total)?;
    let grads = g.backward(total)?;
    model.params_mut(Part::Phi).accumulate(&phi, &grads);
    opt.step(model.params_mut(Part::Phi))?;
    Ok(out)
}

/// Alternates `alternation` reversal steps with one extractor step per batch.
pub fn train_content_extractor<F: Real>(
    model: &mut CureModel<F>,
    pool: &EmbeddedSet<F>,
    ctx: &StageContext,
    report: &mut TrainReport,
) -> Result<StageRecord> {
    let guard = StageGuard::new(model, STAGE_EXTRACTOR, &[Part::Phi, Part::PhiHat]);
    let mut opt_phi = ctx.optimizer(model, Part::Phi);
    let mut opt_hat = ctx.optimizer(model, Part::PhiHat);
    let (tau, lambda) = (ctx.hyper.tau, ctx.hyper.lambda);
    let pre_acc = extracted_concept_accuracy(model, pool, ctx.exec)?;
    report.epoch(STAGE_EXTRACTOR, 0, &[("concept_accuracy_on_extracted", pre_acc)]);
    let mut steps = 0;
    for epoch in 0..ctx.schedule.epochs_extractor {
        for idx in ctx.batches(STAGE_EXTRACTOR, epoch, pool.len()) {
            let x = pool.x.select_rows(&idx);
            for _ in 0..ctx.schedule.alternation {
                let v = reversal_step(model, &mut opt_hat, &x)?;
                report.push("reversal_content", v);
            }
            let l = extractor_step(model, &mut opt_phi, &x, tau, lambda)?;
            report.push("l_concept", l.concept);
            report.push("l_content", l.content);
            report.push("l_phi", l.total);
            steps += 1;
        }
        let acc = extracted_concept_accuracy(model, pool, ctx.exec)?;
        let (lc, lr) = extractor_losses(model, pool, tau, ctx.exec)?;
        report.epoch(
            STAGE_EXTRACTOR,
            epoch + 1,
            &[
                ("concept_accuracy_on_extracted", acc),
                ("l_concept", lc),
                ("l_content", lr),
            ],
        );
        if acc > pre_acc + 0.02 {
            report.warnings.push(format!(
                "extractor epoch {}: concept accuracy on f_phi(x) rose from {pre_acc:.4} to {acc:.4}",
                epoch + 1
            ));
        }
    }
    guard.finish(model, steps, ctx.schedule.epochs_extractor, false)
}

/// Per-pair cosine between `f_ψ(x)` and `f_ψ(x_cont)`.
pub fn debias_cosines<F: Real>(model: &CureModel<F>, x: &Tensor<F>, x_cont: &Tensor<F>, exec: Exec) -> Result<Vec<f64>> {
    let a = model.debias(x, exec)?;
    let b = model.debias(x_cont, exec)?;
    let mut g = Graph::<F>::new();
    let (a, b) = (g.constant(a), g.constant(b));
    let c = g.cosine(a, b)?;
    Ok(g.value(c).data().iter().map(|v| v.as_f64()).collect())
}

/// Fraction of pairs whose hinge term is exactly zero, and the mean cosine.
pub fn hinge_stats(cos: &[f64], mode: Mode, margin: f64) -> Result<(f64, f64)> {
    let mut satisfied = 0;
    for &c in cos {
        if hinge(mode, c, margin)? == 0.0 {
            satisfied += 1;
        }
    }
    let n = cos.len().max(1) as f64;
    Ok((satisfied as f64 / n, cos.iter().sum::<f64>() / n))
}

/// Trains ψ on the margin loss between `f_ψ(x)` and `f_ψ(f_φ(x))`. Stops
/// early once the hinge is satisfied on `hinge_target` of the pairs.
pub fn train_debias<F: Real>(
    model: &mut CureModel<F>,
    train: &EmbeddedSet<F>,
    ctx: &StageContext,
    report: &mut TrainReport,
) -> Result<StageRecord> {
    let (mode, margin) = (ctx.hyper.mode, ctx.hyper.margin);
    let guard = StageGuard::new(model, STAGE_DEBIAS, &[Part::Psi]);
    let x_cont = model.extract(&train.x, ctx.exec)?;
    let mut opt = ctx.optimizer(model, Part::Psi);
    let mut steps = 0;
    let mut epochs = 0;
    let mut stopped_early = false;
    let (sat, mean_cos) = hinge_stats(&debias_cosines(model, &train.x, &x_cont, ctx.exec)?, mode, margin)?;
    report.epoch(STAGE_DEBIAS, 0, &[("hinge_satisfied", sat), ("mean_cos", mean_cos)]);
    for epoch in 0..ctx.schedule.epochs_debias {
        if sat >= ctx.schedule.hinge_target && epoch == 0 {
            stopped_early = true;
            break;
        }
        for idx in ctx.batches(STAGE_DEBIAS, epoch, train.len()) {
            let mut g = Graph::new();
            let p = model.bind(&mut g, Part::Psi, true);
            let x = g.constant(train.x.select_rows(&idx));
            let xc = g.constant(x_cont.select_rows(&idx));
            let a = model.psi.forward(&mut g, &p, x)?;
            let b = model.psi.forward(&mut g, &p, xc)?;
            let loss = margin_loss(&mut g, a, b, mode, margin)?;
            let v = g.value(loss).item().as_f64();
            check_loss(STAGE_DEBIAS, "margin loss", v)?;
            report.degenerate_cosines += g.degenerate_cosines();
            let grads = g.backward(loss)?;
            model.params_mut(Part::Psi).accumulate(&p, &grads);
            opt.step(model.params_mut(Part::Psi))?;
            report.push("margin", v);
            steps += 1;
        }
        epochs += 1;
        let (sat, mean_cos) = hinge_stats(&debias_cosines(model, &train.x, &x_cont, ctx.exec)?, mode, margin)?;
        report.epoch(STAGE_DEBIAS, epoch + 1, &[("hinge_satisfied", sat), ("mean_cos", mean_cos)]);
        if sat >= ctx.schedule.hinge_target {
            stopped_early = epoch + 1 < ctx.schedule.epochs_debias;
            break;
        }
    }
    guard.finish(model, steps, epochs, stopped_early)
}

/// Trains θ on the task labels. In baseline mode θ reads raw embeddings;
/// otherwise θ and ψ are trained jointly on `f_ψ(x)`, with the margin loss
/// kept in the objective.
pub fn train_task_head<F: Real>(
    model: &mut CureModel<F>,
    train: &EmbeddedSet<F>,
    ctx: &StageContext,
    report: &mut TrainReport,
) -> Result<StageRecord> {
    let mode = ctx.hyper.mode;
    let trained: &[Part] = if mode == Mode::Off {
        &[Part::Theta]
    } else {
        &[Part::Psi, Part::Theta]
    };
    let guard = StageGuard::new(model, STAGE_TASK, trained);
    let x_cont = if mode == Mode::Off {
        None
    } else {
        Some(model.extract(&train.x, ctx.exec)?)
    };
    let mut opt_theta = ctx.optimizer(model, Part::Theta);
    let mut opt_psi = ctx.optimizer(model, Part::Psi);
    let w = ctx.hyper.joint_margin_weight;
    let mut steps = 0;
    for epoch in 0..ctx.schedule.epochs_task {
        for idx in ctx.batches(STAGE_TASK, epoch, train.len()) {
            let mut g = Graph::new();
            let th = model.bind(&mut g, Part::Theta, true);
            let x = g.constant(train.x.select_rows(&idx));
            let targets: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let psi = match &x_cont {
                None => None,
                Some(xc) => {
                    let p = model.bind(&mut g, Part::Psi, true);
                    let a = model.psi.forward(&mut g, &p, x)?;
                    let xc = g.constant(xc.select_rows(&idx));
                    let b = model.psi.forward(&mut g, &p, xc)?;
                    Some((p, a, b))
                }
            };
            let h = psi.as_ref().map_or(x, |(_, a, _)| *a);
            let logits = model.theta.forward(&mut g, &th, h)?;
            let ce = g.cross_entropy(logits, &targets)?;
            let ce_v = g.value(ce).item().as_f64();
            let loss = match &psi {
                Some((_, a, b)) if w > 0.0 => {
                    let m = margin_loss(&mut g, *a, *b, mode, ctx.hyper.margin)?;
                    report.push("joint_margin", g.value(m).item().as_f64());
                    let m = g.scale(m, F::of(w));
                    g.add(ce, m)?
                }
                _ => ce,
            };
            let v = g.value(loss).item().as_f64();
            check_loss(STAGE_TASK, "task loss", v)?;
            report.degenerate_cosines += g.degenerate_cosines();
            let grads = g.backward(loss)?;
            model.params_mut(Part::Theta).accumulate(&th, &grads);
            opt_theta.step(model.params_mut(Part::Theta))?;
            if let Some((p, _, _)) = &psi {
                model.params_mut(Part::Psi).accumulate(p, &grads);
                opt_psi.step(model.params_mut(Part::Psi))?;
            }
            report.push("task_ce", ce_v);
            steps += 1;
        }
        let logits = model.task_logits(&train.x, mode, ctx.exec)?;
        report.epoch(
            STAGE_TASK,
            epoch + 1,
            &[("train_accuracy", accuracy(&argmax_rows(&logits), &train.labels))],
        );
    }
    guard.finish(model, steps, ctx.schedule.epochs_task, false)
}
