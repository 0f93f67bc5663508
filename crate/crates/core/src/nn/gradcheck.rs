//! Finite-difference verification of the autodiff engine.

use crate::error::Result;
use crate::nn::graph::{Graph, NodeId};
use crate::nn::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares autodiff gradients of a scalar-valued `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate, over every
/// input tensor.
pub fn grad_check<Fun>(f: Fun, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    Fun: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &ids)?;
        Ok(g.value(y).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &ids)?;
    let grads = g.backward(y)?;

    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (t, &id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(id, inputs[t].len());
        for j in 0..inputs[t].len() {
            let x0 = inputs[t].data()[j];
            work[t].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[t].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[t].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            out.max_rel_err = out.max_rel_err.max(rel_err(analytic[j], numeric));
            out.max_abs_err = out.max_abs_err.max((analytic[j] - numeric).abs());
            out.coords += 1;
        }
    }
    Ok(out)
}
