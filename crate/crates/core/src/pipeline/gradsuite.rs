//! Finite-difference checks of every differentiable op, layer and loss used
//! by the model, in `f64`.

use rand::Rng;

use crate::error::Result;
use crate::nn::gradcheck::{grad_check, GradCheck};
use crate::nn::layers::{LayerNorm, Linear, ProjNorm, SwiGlu, TransformerLayer};
use crate::nn::{Bound, Graph, NodeId, ParamSet, Tensor};
use crate::pipeline::config::Mode;
use crate::pipeline::losses::{concept_dropout_loss, margin_loss};
use crate::pipeline::model::{DebiasModule, Extractor};
use crate::rng::{self, StageRng};

/// Step of the central difference.
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    pub check: GradCheck,
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

fn rand_tensor(r: &mut StageRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).expect("shape")
}

/// Reduces a tensor node to a scalar through a fixed random weighting, so
/// every output coordinate contributes a distinct gradient.
fn project(g: &mut Graph<f64>, y: NodeId, r: &mut StageRng) -> Result<NodeId> {
    let w = rand_tensor(r, &g.shape(y).to_vec(), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

fn op(name: &'static str, inputs: Vec<Tensor<f64>>, seed: u64, f: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'static) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(move |g, ids| {
            let y = f(g, ids)?;
            let mut r = rng::substream(seed, "gradcheck.projection");
            project(g, y, &mut r)
        }),
    }
}

/// A layer checked with respect to its input and every parameter.
fn layer<L: Copy + 'static>(
    name: &'static str,
    x: Tensor<f64>,
    ps: ParamSet<f64>,
    l: L,
    seed: u64,
    fwd: fn(&L, &mut Graph<f64>, &Bound, NodeId) -> Result<NodeId>,
) -> Case {
    let mut inputs = vec![x];
    inputs.extend(ps.iter().map(|p| p.value.clone()));
    op(name, inputs, seed, move |g, ids| {
        let b = Bound::new(ids[1..].to_vec(), true);
        fwd(&l, g, &b, ids[0])
    })
}

fn cases(seed: u64) -> Vec<Case> {
    let mut r = rng::substream(seed, "gradcheck.inputs");
    let mut t = |shape: &[usize]| rand_tensor(&mut r, shape, -1.0, 1.0);
    let a23 = t(&[2, 3]);
    let b34 = t(&[3, 4]);
    let c23 = t(&[2, 3]);
    let d23 = t(&[2, 3]);
    let e234 = t(&[2, 3, 4]);
    let f243 = t(&[2, 4, 3]);
    let bias3 = t(&[3]);
    let v35 = t(&[3, 5]);
    let w35 = t(&[3, 5]);
    let logits = t(&[4, 5]);
    let gamma = t(&[5]);
    let beta = t(&[5]);
    let mut cases = vec![
        op("matmul", vec![a23, b34], seed, |g, x| g.matmul(x[0], x[1])),
        op("bmm", vec![e234.clone(), f243], seed, |g, x| g.bmm(x[0], x[1])),
        op("transpose", vec![e234.clone()], seed, |g, x| g.transpose(x[0])),
        op("reshape", vec![e234], seed, |g, x| g.reshape(x[0], &[4, 6])),
        op("add", vec![c23.clone(), d23.clone()], seed, |g, x| g.add(x[0], x[1])),
        op("sub", vec![c23.clone(), d23.clone()], seed, |g, x| g.sub(x[0], x[1])),
        op("mul", vec![c23.clone(), d23.clone()], seed, |g, x| g.mul(x[0], x[1])),
        op("add_bias", vec![c23.clone(), bias3], seed, |g, x| g.add_bias(x[0], x[1])),
        op("scale", vec![c23.clone()], seed, |g, x| Ok(g.scale(x[0], -1.7))),
        op("add_scalar", vec![c23.clone()], seed, |g, x| Ok(g.add_scalar(x[0], 0.3))),
        op("relu", vec![c23.clone()], seed, |g, x| Ok(g.relu(x[0]))),
        op("gelu", vec![c23.clone()], seed, |g, x| Ok(g.gelu(x[0]))),
        op("silu", vec![c23.clone()], seed, |g, x| Ok(g.silu(x[0]))),
        op("softmax", vec![logits.clone()], seed, |g, x| Ok(g.softmax(x[0]))),
        op("log_softmax", vec![logits.clone()], seed, |g, x| Ok(g.log_softmax(x[0]))),
        op("layer_norm", vec![v35.clone(), gamma, beta], seed, |g, x| {
            g.layer_norm(x[0], x[1], x[2], 1e-5)
        }),
        op("cross_entropy", vec![logits.clone()], seed, |g, x| {
            g.cross_entropy(x[0], &[0, 4, 2, 2])
        }),
        op("cosine", vec![v35.clone(), w35.clone()], seed, |g, x| g.cosine(x[0], x[1])),
        op("sum", vec![c23.clone()], seed, |g, x| Ok(g.sum(x[0]))),
        op("mean", vec![c23.clone()], seed, |g, x| Ok(g.mean(x[0]))),
        op("sum_last", vec![c23], seed, |g, x| Ok(g.sum_last(x[0]))),
        op("mse", vec![v35.clone(), w35.clone()], seed, |g, x| g.mse(x[0], x[1])),
        op("fan_out", vec![d23], seed, |g, x| {
            let a = g.mul(x[0], x[0])?;
            let b = g.silu(x[0]);
            g.add(a, b)
        }),
        op("concept_dropout_loss", vec![logits.clone()], seed, |g, x| {
            concept_dropout_loss(g, x[0], 2.0)
        }),
        op("margin_loss_removal", vec![v35.clone(), w35.clone()], seed, |g, x| {
            margin_loss(g, x[0], x[1], Mode::Removal, 0.25)
        }),
        op("margin_loss_enhancement", vec![v35, w35], seed, |g, x| {
            margin_loss(g, x[0], x[1], Mode::Enhancement, -1.0)
        }),
    ];

    let mut lr = rng::substream(seed, "gradcheck.layers");
    let x = |shape: &[usize], lr: &mut StageRng| rand_tensor(lr, shape, -1.0, 1.0);

    let mut ps = ParamSet::new();
    let l = Linear::new(&mut ps, "lin", 5, 3, 1.0, &mut lr);
    cases.push(layer("linear", x(&[4, 5], &mut lr), ps, l, seed, |l, g, b, x| l.forward(g, b, x)));

    let mut ps = ParamSet::new();
    let l = LayerNorm::new(&mut ps, "ln", 6, 1.0);
    // Perturb gamma and beta away from their trivial init.
    ps.values_mut().for_each(|v| v.data_mut().iter_mut().for_each(|e| *e += 0.3));
    cases.push(layer("layer_norm_layer", x(&[3, 6], &mut lr), ps, l, seed, |l, g, b, x| {
        l.forward(g, b, x)
    }));

    let mut ps = ParamSet::new();
    let l = ProjNorm::new(&mut ps, "pn", 6, 1.0, 1.0, &mut lr);
    cases.push(layer("proj_norm", x(&[3, 6], &mut lr), ps, l, seed, |l, g, b, x| l.forward(g, b, x)));

    let mut ps = ParamSet::new();
    let l = TransformerLayer::new(&mut ps, "tf", 8, 1.0, &mut lr);
    cases.push(layer("transformer_layer", x(&[1, 4, 8], &mut lr), ps, l, seed, |l, g, b, x| {
        l.forward(g, b, x)
    }));

    let mut ps = ParamSet::new();
    let l = SwiGlu::new(&mut ps, "glu", 8, 5, &mut lr);
    cases.push(layer("swiglu", x(&[1, 8], &mut lr), ps, l, seed, |l, g, b, x| l.forward(g, b, x)));

    let mut ps = ParamSet::new();
    let l = Extractor::new(&mut ps, "phi", 8, 2, 1.0, &mut lr);
    cases.push(layer("extractor", x(&[2, 8], &mut lr), ps, l, seed, |l, g, b, x| l.forward(g, b, x)));

    let mut ps = ParamSet::new();
    let l = DebiasModule::new(&mut ps, "psi", 6, 2, &mut lr);
    cases.push(layer("debias_module", x(&[2, 6], &mut lr), ps, l, seed, |l, g, b, x| {
        l.forward(g, b, x)
    }));

    // Reconstruction loss through φ̂ ∘ φ, checked with respect to φ̂'s
    // parameters (φ's parameters are inputs too, so both are covered).
    let mut ps_phi = ParamSet::new();
    let phi = Extractor::new(&mut ps_phi, "phi", 4, 2, 1.0, &mut lr);
    let mut ps_hat = ParamSet::new();
    let hat = Extractor::new(&mut ps_hat, "hat", 4, 2, 1.0, &mut lr);
    let n_phi = ps_phi.len();
    let mut inputs = vec![x(&[2, 4], &mut lr)];
    inputs.extend(ps_phi.iter().map(|p| p.value.clone()));
    inputs.extend(ps_hat.iter().map(|p| p.value.clone()));
    cases.push(Case {
        name: "reconstruction_loss",
        inputs,
        f: Box::new(move |g, ids| {
            let bp = Bound::new(ids[1..1 + n_phi].to_vec(), true);
            let bh = Bound::new(ids[1 + n_phi..].to_vec(), true);
            let c = phi.forward(g, &bp, ids[0])?;
            let rec = hat.forward(g, &bh, c)?;
            g.mse(rec, ids[0])
        }),
    });
    cases
}

/// Runs every case for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    cases(seed)
        .into_iter()
        .map(|c| {
            Ok(GradCase {
                name: c.name.to_string(),
                check: grad_check(&c.f, &c.inputs, STEP)?,
            })
        })
        .collect()
}

/// Names of the cases in [`gradient_suite`].
pub fn case_names() -> Vec<&'static str> {
    cases(0).iter().map(|c| c.name).collect()
}
