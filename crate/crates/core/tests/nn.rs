use cure::nn::checkpoint::{read_checkpoint, write_checkpoint};
use cure::nn::gradcheck::grad_check;
use cure::nn::{AdamW, AdamWConfig, Graph, ParamSet, Tensor};
use cure::pipeline::{case_names, gradient_suite};
use cure::Error;
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn cross_entropy_reference_value() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let l = g.cross_entropy(x, &[2]).unwrap();
    // -ln(e^3 / (e + e^2 + e^3))
    assert!((g.value(l).item() - 0.40761).abs() < 1e-5);
}

#[test]
fn cosine_reference_value() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[1, 2], &[2.0, 1.0]));
    let c = g.cosine(a, b).unwrap();
    assert!((g.value(c).item() - 0.8).abs() < 1e-12);
}

#[test]
fn cosine_of_zero_vector_is_counted_not_nan() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let b = g.constant(t(&[1, 2], &[2.0, 1.0]));
    let c = g.cosine(a, b).unwrap();
    assert!(g.value(c).item().is_finite());
    assert_eq!(g.degenerate_cosines(), 1);
}

fn adamw_one_step(wd: f64) -> f64 {
    let mut ps = ParamSet::new();
    ps.add("w", t(&[1], &[1.0]));
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 0.1,
            weight_decay: wd,
            ..Default::default()
        },
        &ps,
    );
    ps.get_mut(0).grad = Some(t(&[1], &[if wd == 0.0 { 1.0 } else { 0.0 }]));
    opt.step(&mut ps).unwrap();
    ps.get(0).value.data()[0]
}

#[test]
fn adamw_first_step_and_decoupled_decay() {
    // A unit gradient moves the parameter by exactly lr on the first step.
    assert!((adamw_one_step(0.0) - 0.9).abs() < 1e-6);
    // With zero gradient only the decay acts: 1 - lr * wd.
    assert!((adamw_one_step(0.1) - 0.99).abs() < 1e-12);
}

#[test]
fn layer_norm_reference_values() {
    let mut g = Graph::<f64>::new();
    let ones3 = g.constant(t(&[3], &[1.0; 3]));
    let zeros3 = g.constant(t(&[3], &[0.0; 3]));
    let x = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
    let y = g.layer_norm(x, ones3, zeros3, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let ones2 = g.constant(t(&[2], &[1.0; 2]));
    let zeros2 = g.constant(t(&[2], &[0.0; 2]));
    let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
    let y = g.layer_norm(x, ones2, zeros2, 1e-12).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
}

#[test]
fn fan_out_gradients_accumulate() {
    // y = x*x + 3x, dy/dx = 2x + 3.
    let mut g = Graph::<f64>::new();
    let x = g.variable(t(&[1], &[2.0]));
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0);
    let y = g.add(sq, lin).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[7.0]);
}

#[test]
fn gradient_suite_covers_every_case_on_one_seed() {
    let res = gradient_suite(3).unwrap();
    assert_eq!(res.len(), case_names().len());
    for c in res {
        assert!(c.check.max_rel_err < 1e-5, "{}: {:?}", c.name, c.check);
        assert!(c.check.coords > 0);
    }
}

#[test]
fn grad_check_detects_a_wrong_gradient() {
    // relu's gradient is only correct away from zero; a function whose value
    // ignores a perturbed input must report zero error, and a mismatched
    // analytic gradient must not.
    let x = t(&[2], &[0.5, -0.7]);
    let ok = grad_check(|g, ids| Ok(g.sum(ids[0])), &[x.clone()], 1e-6).unwrap();
    assert!(ok.max_rel_err < 1e-8);
    let bad = grad_check(
        |g, ids| {
            // Value depends on x twice but one branch is a constant copy.
            let c = g.constant(g.value(ids[0]).clone());
            let p = g.mul(ids[0], c)?;
            Ok(g.sum(p))
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(bad.max_rel_err > 0.1);
}

#[test]
fn checkpoint_round_trip_is_exact_in_f32() {
    let a = Tensor::<f32>::new(&[2, 2], vec![1.5, -2.25, 3.0e-8, 7.0]).unwrap();
    let b = Tensor::<f32>::new(&[3], vec![0.1, 0.2, 0.3]).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(
        &mut buf,
        &[("a".to_string(), &a), ("b".to_string(), &b)],
        serde_json::json!({"tau": 1.0}),
        42,
    )
    .unwrap();
    let (header, params) = read_checkpoint::<f32, _>(buf.as_slice()).unwrap();
    assert_eq!(header.seed, 42);
    assert_eq!(params[0].1, a);
    assert_eq!(params[1].1, b);
    assert!(read_checkpoint::<f32, _>(&buf[..buf.len() - 1]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint::<f32, _>(bad.as_slice()).is_err());
}

#[test]
fn matmul_reference_values_and_shape_error() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
    match g.matmul(a, a) {
        Err(Error::Shape(msg)) => assert!(msg.contains("[1, 2]"), "{msg}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let b = Tensor::new(&[4, 2], (0..8).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
    let r = grad_check(
        |g, ids| {
            let p = g.matmul(ids[0], ids[1])?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        },
        &[a, b],
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn layer_norm_rejects_zero_width() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 0]));
    let w = g.constant(Tensor::zeros(&[0]));
    assert!(matches!(g.layer_norm(x, w, w, 1e-5), Err(Error::Shape(_))));
}

#[test]
fn cross_entropy_closed_forms_and_errors() {
    let mut g = Graph::<f64>::new();
    let u = g.constant(t(&[1, 4], &[0.5; 4]));
    let l = g.cross_entropy(u, &[1]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    let m = g.constant(t(&[1, 3], &[20.0, 0.0, 0.0]));
    let l = g.cross_entropy(m, &[0]).unwrap();
    assert!(g.value(l).item() < 1e-8);
    assert!(matches!(g.cross_entropy(m, &[3]), Err(Error::Index(_))));
}

#[test]
fn cosine_self_and_orthogonal() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[1, 2], &[3.0, 4.0]));
    let c = g.cosine(a, a).unwrap();
    assert!((g.value(c).item() - 1.0).abs() < 1e-12);
    let x = g.constant(t(&[1, 2], &[1.0, 0.0]));
    let y = g.constant(t(&[1, 2], &[0.0, 1.0]));
    let c = g.cosine(x, y).unwrap();
    assert_eq!(g.value(c).item(), 0.0);
}

#[test]
fn adamw_rejects_non_finite_gradients() {
    let mut ps = ParamSet::new();
    ps.add("w", t(&[2], &[1.0, 2.0]));
    let mut opt = AdamW::new(AdamWConfig::with_lr(0.1), &ps);
    ps.get_mut(0).grad = Some(t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(opt.step(&mut ps), Err(Error::Divergence { .. })));
    assert_eq!(ps.get(0).value.data(), &[1.0, 2.0]);
}

#[test]
fn polynomial_gradient() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let mut g = Graph::<f64>::new();
    let id = g.variable(x.clone());
    let sq = g.mul(id, id).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(id).unwrap(), &[2.0, 4.0, 6.0]);
    let r = grad_check(
        |g, ids| {
            let sq = g.mul(ids[0], ids[0])?;
            Ok(g.sum(sq))
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-9, "{r:?}");
}

#[test]
fn shared_input_matches_expanded_form() {
    // x*x with one shared node against the same product of two copies.
    let x = t(&[3], &[0.3, -1.2, 2.5]);
    let mut g = Graph::<f64>::new();
    let a = g.variable(x.clone());
    let p = g.mul(a, a).unwrap();
    let s = g.sum(p);
    let shared = g.backward(s).unwrap().get(a).unwrap().to_vec();

    let mut g = Graph::<f64>::new();
    let a = g.variable(x.clone());
    let b = g.variable(x);
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    let expanded: Vec<f64> = grads
        .get(a)
        .unwrap()
        .iter()
        .zip(grads.get(b).unwrap())
        .map(|(u, v)| u + v)
        .collect();
    assert_eq!(shared, expanded);
}

#[test]
fn gradient_suite_passes_on_twenty_seeds() {
    for seed in 0..20 {
        for c in gradient_suite(seed).unwrap() {
            assert!(c.check.max_rel_err < 1e-5, "seed {seed} {}: {:?}", c.name, c.check);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 1..8)) {
        let n = v.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, n], v).unwrap());
        let s = g.softmax(x);
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 4], a).unwrap());
        let y = g.constant(Tensor::new(&[1, 4], b).unwrap());
        let c = g.cosine(x, y).unwrap();
        let v = g.value(c).item();
        prop_assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn matmul_matches_naive(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, 3], a.clone()).unwrap());
        let y = g.constant(Tensor::new(&[3, 4], b.clone()).unwrap());
        let z = g.matmul(x, y).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                prop_assert!((g.value(z).data()[i * 4 + j] - e).abs() < 1e-12);
            }
        }
    }
    #[test]
    fn adamw_zero_grad_zero_decay_is_a_fixed_point(v in prop::collection::vec(-3.0f64..3.0, 1..6), steps in 1usize..5) {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(&[v.len()], v.clone()).unwrap());
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() }, &ps);
        for _ in 0..steps {
            ps.get_mut(0).grad = Some(Tensor::zeros(&[v.len()]));
            opt.step(&mut ps).unwrap();
        }
        prop_assert_eq!(ps.get(0).value.data(), v.as_slice());
        prop_assert_eq!(opt.steps(), steps as u64);
    }

    #[test]
    fn cross_entropy_is_non_negative_and_ln_k_on_constant_rows(
        v in prop::collection::vec(-10.0f64..10.0, 2..7),
        c in -5.0f64..5.0,
    ) {
        let k = v.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, k], v.clone()).unwrap());
        let l = g.cross_entropy(x, &[0]).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
        let flat = g.constant(Tensor::filled(&[1, k], c));
        let l = g.cross_entropy(flat, &[k - 1]).unwrap();
        prop_assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_parallel_vectors_is_clamped(v in prop::collection::vec(-1e3f64..1e3, 3), s in 1e-3f64..1e3) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let w: Vec<f64> = v.iter().map(|x| x * s).collect();
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(&[1, 3], v).unwrap());
        let b = g.constant(Tensor::new(&[1, 3], w).unwrap());
        let c = g.cosine(a, b).unwrap();
        prop_assert!(g.value(c).item() <= 1.0);
    }
}
