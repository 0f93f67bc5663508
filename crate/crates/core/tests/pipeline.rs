use cure::nn::{AdamW, AdamWConfig, Graph, Tensor};
use cure::par::Exec;
use cure::pipeline::stages::{
    concept_accuracy, debias_cosines, extractor_losses, hinge_stats, reversal_step, train_concept_head, train_debias,
    StageContext, STAGE_EXTRACTOR,
};
use cure::pipeline::{
    concept_dropout_floor, concept_dropout_loss, hinge, margin_loss_from_cos, model_fingerprints, prepare_data, run_cure,
    train_prefix, CureModel, Mode, ModelConfig, Part, PreparedData, RunConfig, RunOptions, StageStatus, TrainReport,
    STAGES,
};
use cure::rng;
use cure::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// A corpus and schedule small enough for quick end-to-end runs.
fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic.docs_per_concept = 150;
    cfg.encoder.dim = 32;
    cfg.schedule.epochs_concept = 2;
    cfg.schedule.epochs_extractor = 2;
    cfg.schedule.epochs_debias = 2;
    cfg.schedule.epochs_task = 2;
    cfg
}

fn ctx<'a>(cfg: &'a RunConfig) -> StageContext<'a> {
    StageContext {
        schedule: &cfg.schedule,
        hyper: &cfg.cure,
        seed: cfg.seed,
        exec: Exec::available(),
    }
}

fn model_for(cfg: &RunConfig, data: &PreparedData<f32>) -> CureModel<f32> {
    CureModel::new(data.pool.x.row_len(), data.concepts.len(), data.num_labels, &cfg.model, cfg.seed).unwrap()
}

#[test]
fn concept_head_separates_concepts() {
    let cfg = RunConfig::default();
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let mut model = model_for(&cfg, &data);
    let mut report = TrainReport::default();
    let rec = train_concept_head(&mut model, &data.pool, &ctx(&cfg), &mut report).unwrap();
    assert_eq!(rec.trained, vec![Part::Omega]);
    let acc = concept_accuracy(&model, &data.pool, Exec::available()).unwrap();
    assert!(acc > 0.95, "accuracy {acc}");

    // Non-overlapping 10-step block means of the loss never rise by more
    // than minibatch noise, and the last block is far below the first.
    let curve: Vec<f64> = report.curve("concept_ce").iter().map(|p| p.value).collect();
    assert_eq!(curve.len(), rec.steps);
    let blocks: Vec<f64> = curve.chunks_exact(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    let smoothed: Vec<f64> = blocks.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in smoothed.windows(2) {
        assert!(w[1] <= w[0] + 0.02, "{} -> {}", w[0], w[1]);
    }
    assert!(blocks.last().unwrap() < &(blocks[0] * 0.5));
}

#[test]
fn concept_head_on_random_labels_is_at_chance() {
    let cfg = RunConfig::default();
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let mut pool = data.pool.clone();
    let mut r = rng::substream(3, "test.random_concepts");
    let k = data.concepts.len();
    pool.concepts.iter_mut().for_each(|c| *c = r.gen_range(0..k));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut r);
    let (fit, held) = order.split_at(pool.len() / 2);
    let mut model = model_for(&cfg, &data);
    train_concept_head(&mut model, &pool.select(fit), &ctx(&cfg), &mut TrainReport::default()).unwrap();
    let acc = concept_accuracy(&model, &pool.select(held), Exec::available()).unwrap();
    assert!((acc - 1.0 / k as f64).abs() < 0.05, "accuracy {acc}");
}

#[test]
fn concept_head_needs_two_concepts() {
    let cfg = small();
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let mut model = model_for(&cfg, &data);
    let mut pool = data.pool.clone();
    pool.concepts.iter_mut().for_each(|c| *c = 0);
    let err = train_concept_head(&mut model, &pool, &ctx(&cfg), &mut TrainReport::default()).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)));
}

#[test]
fn dropout_loss_reference_values() {
    let mut g = Graph::<f64>::new();
    let uniform = g.constant(Tensor::filled(&[3, 6], 0.7));
    for tau in [0.0, 0.5, 1.0, 2.5] {
        let l = concept_dropout_loss(&mut g, uniform, tau).unwrap();
        let want = (tau - 1.0) * 6f64.ln();
        assert!((g.value(l).item() - want).abs() < 1e-12);
        assert_eq!(concept_dropout_floor(tau, 6), want);
    }
    let one_hot = g.constant(Tensor::new(&[1, 4], vec![1000.0, 0.0, 0.0, 0.0]).unwrap());
    let l = concept_dropout_loss(&mut g, one_hot, 1.0).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-9);
}

fn extractor_grad(model: &CureModel<f64>, x: &Tensor<f64>, tau: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let phi = model.bind(&mut g, Part::Phi, true);
    let omega = model.bind(&mut g, Part::Omega, false);
    let xn = g.constant(x.clone());
    let xc = model.phi.forward(&mut g, &phi, xn).unwrap();
    let logits = model.omega.forward(&mut g, &omega, xc).unwrap();
    let l = concept_dropout_loss(&mut g, logits, tau).unwrap();
    let grads = g.backward(l).unwrap();
    phi.ids().iter().flat_map(|&id| grads.get(id).unwrap().to_vec()).collect()
}

fn random_rows(seed: u64, n: usize, d: usize) -> Tensor<f64> {
    let mut r = rng::substream(seed, "test.rows");
    Tensor::new(&[n, d], (0..n * d).map(|_| r.gen_range(-1.5..1.5)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dropout_loss_respects_its_floor(
        logits in prop::collection::vec(-4.0f64..4.0, 10),
        tau in 0.0f64..3.0,
        flat in -2.0f64..2.0,
    ) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, 5], logits.clone()).unwrap());
        let l = concept_dropout_loss(&mut g, x, tau).unwrap();
        let floor = concept_dropout_floor(tau, 5);
        prop_assert!(g.value(l).item() >= floor - 1e-12);
        let spread = logits.iter().cloned().fold(f64::MIN, f64::max) - logits.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-3 {
            prop_assert!(g.value(l).item() > floor);
        }
        let u = g.constant(Tensor::filled(&[2, 5], flat));
        let l = concept_dropout_loss(&mut g, u, tau).unwrap();
        prop_assert!((g.value(l).item() - floor).abs() < 1e-12);
    }

    #[test]
    fn extractor_gradient_does_not_depend_on_tau(seed in 0u64..1000, t1 in 0.0f64..4.0, t2 in 0.0f64..4.0) {
        let model = CureModel::<f64>::new(8, 5, 2, &ModelConfig::default(), seed).unwrap();
        let x = random_rows(seed, 6, 8);
        let a = extractor_grad(&model, &x, t1);
        let b = extractor_grad(&model, &x, t2);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-10, "{} vs {}", u, v);
        }
    }

    #[test]
    fn hinge_is_monotone(c1 in -1.0f64..1.0, c2 in -1.0f64..1.0, m1 in 0.0f64..1.0, m2 in 0.0f64..1.0) {
        let (clo, chi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        let (mlo, mhi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        let h = |mode, c, m| hinge(mode, c, m).unwrap();
        prop_assert!(h(Mode::Removal, clo, mhi) <= h(Mode::Removal, clo, mlo));
        prop_assert!(h(Mode::Removal, chi, mlo) <= h(Mode::Removal, clo, mlo));
        prop_assert!(h(Mode::Enhancement, clo, mhi) <= h(Mode::Enhancement, clo, mlo));
        prop_assert!(h(Mode::Enhancement, chi, mlo) >= h(Mode::Enhancement, clo, mlo));
        // The graph loss agrees with the scalar definition.
        let mut g = Graph::<f64>::new();
        let cos = g.constant(Tensor::new(&[2], vec![clo, chi]).unwrap());
        for mode in [Mode::Removal, Mode::Enhancement] {
            let l = margin_loss_from_cos(&mut g, cos, mode, mlo).unwrap();
            let want = (h(mode, clo, mlo) + h(mode, chi, mlo)) / 2.0;
            prop_assert!((g.value(l).item() - want).abs() < 1e-12);
        }
    }
}

#[test]
fn hinge_reference_values_and_grid() {
    assert_eq!(hinge(Mode::Removal, 1.0, 0.0).unwrap(), 0.0);
    assert!((hinge(Mode::Removal, 0.0, 0.2).unwrap() - 0.8).abs() < 1e-15);
    assert_eq!(hinge(Mode::Enhancement, 0.0, 0.0).unwrap(), 0.0);
    assert!(matches!(hinge(Mode::Off, 0.0, 0.0), Err(Error::Config(_))));
    for c in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        for m in [0.0, 0.25, 0.5, 1.0] {
            assert_eq!(hinge(Mode::Removal, c, m).unwrap(), f64::max(0.0, 1.0 - c - m));
            assert_eq!(hinge(Mode::Enhancement, c, m).unwrap(), f64::max(0.0, c - m));
        }
    }
}

#[test]
fn identity_extractor_and_reversal_reconstruct_exactly() {
    let mut cfg = small();
    cfg.model.residual_init = 0.0;
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let model = model_for(&cfg, &data);
    let (_, content) = extractor_losses(&model, &data.pool, 1.0, Exec::available()).unwrap();
    assert!(content < 1e-10, "reconstruction loss {content}");
}

#[test]
fn reversal_network_learns_to_invert_a_fixed_extractor() {
    let mut r = rng::substream(21, "test.reversal");
    let x = Tensor::<f32>::new(&[256, 16], (0..256 * 16).map(|_| r.gen_range(-1.7f32..1.7)).collect()).unwrap();
    let cfg = ModelConfig {
        residual_init: 1.0,
        ..Default::default()
    };
    let mut model = CureModel::<f32>::new(16, 4, 2, &cfg, 21).unwrap();
    let mut opt = AdamW::new(AdamWConfig::with_lr(1e-3), model.params(Part::PhiHat));
    let phi_before = model.fingerprint(Part::Phi);
    let first = reversal_step(&mut model, &mut opt, &x).unwrap();
    let mut last = first;
    for _ in 1..500 {
        last = reversal_step(&mut model, &mut opt, &x).unwrap();
    }
    assert!(last < 0.25 * first, "{first} -> {last}");
    assert_eq!(model.fingerprint(Part::Phi), phi_before);
}

#[test]
fn debias_hinge_outcomes() {
    let cfg = RunConfig::default();
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let prefix = train_prefix(&cfg, &data, Exec::available()).unwrap();
    let x_cont = prefix.model.extract(&data.train.x, Exec::available()).unwrap();
    let run = |mode: Mode, margin: f64, epochs: usize| {
        let mut c = cfg.clone();
        c.cure.mode = mode;
        c.cure.margin = margin;
        c.schedule.epochs_debias = epochs;
        c.schedule.hinge_target = 1.0;
        let mut model = prefix.model.clone();
        train_debias(&mut model, &data.train, &ctx(&c), &mut TrainReport::default()).unwrap();
        let cos = debias_cosines(&model, &data.train.x, &x_cont, Exec::available()).unwrap();
        (model, hinge_stats(&cos, mode, margin).unwrap())
    };
    let (_, (_, removal_cos)) = run(Mode::Removal, 0.0, 5);
    assert!(removal_cos >= 0.99, "removal mean cos {removal_cos}");
    let (_, (_, enh_cos)) = run(Mode::Enhancement, 0.0, 5);
    assert!(enh_cos <= 0.05, "enhancement mean cos {enh_cos}");

    // With M = 1 the removal hinge is zero wherever cos >= 0, so ψ must not move.
    let init = debias_cosines(&prefix.model, &data.train.x, &x_cont, Exec::available()).unwrap();
    assert!(init.iter().all(|&c| c >= 0.0));
    let (model, _) = run(Mode::Removal, 1.0, 2);
    assert_eq!(model.fingerprint(Part::Psi), prefix.model.fingerprint(Part::Psi));
}

#[test]
fn frozen_parts_keep_their_fingerprints() {
    let cfg = small();
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let out = run_cure(&cfg, &data, &RunOptions::default()).unwrap();
    let init = model_for(&cfg, &data);
    let last = |part: Part, stage: &str| out.report.stage(stage).unwrap().frozen_fingerprints[&part].clone();
    assert_eq!(last(Part::Theta, "debias"), init.fingerprint(Part::Theta));
    assert_eq!(last(Part::Psi, "content_extractor"), init.fingerprint(Part::Psi));
    for part in [Part::Omega, Part::Phi, Part::PhiHat] {
        assert_eq!(last(part, "task_head"), out.model.fingerprint(part));
    }
    for s in &out.report.stages {
        assert_eq!(s.status, StageStatus::Completed);
        for p in &s.trained {
            assert!(!s.frozen_fingerprints.contains_key(p));
        }
    }
    // One curve record per optimizer step.
    let ext = out.report.stage(STAGE_EXTRACTOR).unwrap();
    assert_eq!(out.report.curve("l_concept").len(), ext.steps);
    assert_eq!(out.report.curve("reversal_content").len(), ext.steps * cfg.schedule.alternation);
}

#[test]
fn alternation_never_strengthens_concept_recovery() {
    let cfg = RunConfig::default();
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let prefix = train_prefix(&cfg, &data, Exec::available()).unwrap();
    let accs: Vec<f64> = prefix
        .report
        .epochs
        .iter()
        .filter(|e| e.stage == STAGE_EXTRACTOR)
        .map(|e| e.metrics["concept_accuracy_on_extracted"])
        .collect();
    assert_eq!(accs.len(), cfg.schedule.epochs_extractor + 1);
    assert!(accs.iter().all(|&a| a <= accs[0] + 0.02), "{accs:?}");
    assert!(prefix.report.warnings.iter().all(|w| !w.contains("concept accuracy")));
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let cfg = small();
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let a = run_cure(&cfg, &data, &RunOptions::default()).unwrap();
    let seq = RunOptions {
        exec: Exec::Sequential,
        ..Default::default()
    };
    let b = run_cure(&cfg, &data, &seq).unwrap();
    assert_eq!(a.iid, b.iid);
    assert_eq!(a.ood, b.ood);
    assert_eq!(model_fingerprints(&a.model), model_fingerprints(&b.model));

    let dir = tempfile::tempdir().unwrap();
    let interrupted = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(2),
        ..Default::default()
    };
    assert!(run_cure(&cfg, &data, &interrupted).is_err());
    let resumed = run_cure(
        &cfg,
        &data,
        &RunOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            resume: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.iid, a.iid);
    assert_eq!(resumed.ood, a.ood);
    assert_eq!(model_fingerprints(&resumed.model), model_fingerprints(&a.model));
    let statuses: Vec<StageStatus> = resumed.report.stages.iter().map(|s| s.status).collect();
    assert_eq!(
        statuses,
        [StageStatus::Resumed, StageStatus::Resumed, StageStatus::Completed, StageStatus::Completed]
    );
}

#[test]
fn resume_ignores_checkpoints_from_another_config() {
    let cfg = small();
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    run_cure(&cfg, &data, &opts).unwrap();
    let mut other = cfg.clone();
    other.cure.margin = 0.3;
    let res = run_cure(
        &other,
        &data,
        &RunOptions {
            resume: true,
            ..opts.clone()
        },
    )
    .unwrap();
    assert!(res.report.stages.iter().all(|s| s.status == StageStatus::Completed));
}

#[test]
fn baseline_skips_cure_stages() {
    let mut cfg = small();
    cfg.cure.mode = Mode::Off;
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_cure(
        &cfg,
        &data,
        &RunOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    let statuses: Vec<StageStatus> = out.report.stages.iter().map(|s| s.status).collect();
    assert_eq!(
        statuses,
        [StageStatus::Absent, StageStatus::Absent, StageStatus::Absent, StageStatus::Completed]
    );
    let init = model_for(&cfg, &data);
    for part in [Part::Omega, Part::Phi, Part::PhiHat, Part::Psi] {
        assert_eq!(out.model.fingerprint(part), init.fingerprint(part));
    }
    let files: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(files, vec![format!("04-{}.ckpt", STAGES[3])]);
}

#[test]
fn without_reversal_the_content_loss_is_left_behind() {
    let mut cfg = RunConfig::default();
    let data = prepare_data(&cfg, Exec::available()).unwrap();
    let with = train_prefix(&cfg, &data, Exec::available()).unwrap();
    cfg.cure.lambda = 0.0;
    let without = train_prefix(&cfg, &data, Exec::available()).unwrap();
    let floor = concept_dropout_floor(cfg.cure.tau, data.concepts.len());
    let (lc, lr_without) = extractor_losses(&without.model, &data.pool, cfg.cure.tau, Exec::available()).unwrap();
    let (_, lr_with) = extractor_losses(&with.model, &data.pool, cfg.cure.tau, Exec::available()).unwrap();
    assert!(lc - floor < 0.05, "concept loss {lc}");
    assert!(lr_without > lr_with, "{lr_without} vs {lr_with}");
}

#[test]
fn the_encoder_is_not_a_model_parameter() {
    let model = CureModel::<f32>::new(64, 6, 2, &ModelConfig::default(), 1).unwrap();
    let prefixes = ["omega.", "phi.", "phi_hat.", "psi.", "theta."];
    for (name, _) in model.named_params() {
        assert!(prefixes.iter().any(|p| name.starts_with(p)), "{name}");
    }
}
