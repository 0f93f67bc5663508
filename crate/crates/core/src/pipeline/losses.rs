use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId};
use crate::pipeline::config::Mode;
use crate::scalar::Real;

/// `mean_b Σ_c P(c|x_b) ln(P(c|x_b) / (1/|C|)^τ)` from concept logits.
///
/// Equals `Σ P ln P + τ ln|C|`: τ only shifts the loss, so its gradient does
/// not depend on τ, and the minimum `(τ-1) ln|C|` is reached at the uniform
/// distribution.
pub fn concept_dropout_loss<F: Real>(g: &mut Graph<F>, logits: NodeId, tau: f64) -> Result<NodeId> {
    let k = *g
        .shape(logits)
        .last()
        .ok_or_else(|| Error::Shape("concept logits must have a class dimension".into()))?;
    let p = g.softmax(logits);
    let lp = g.log_softmax(logits);
    let plp = g.mul(p, lp)?;
    let neg_entropy = g.sum_last(plp);
    let mean = g.mean(neg_entropy);
    Ok(g.add_scalar(mean, F::of(tau * (k as f64).ln())))
}

/// The value [`concept_dropout_loss`] reaches at a uniform prediction.
pub fn concept_dropout_floor(tau: f64, num_concepts: usize) -> f64 {
    (tau - 1.0) * (num_concepts as f64).ln()
}

/// Per-pair hinge term: `max(0, 1 - cos - m)` for removal,
/// `max(0, cos - m)` for enhancement.
pub fn hinge(mode: Mode, cos: f64, margin: f64) -> Result<f64> {
    match mode {
        Mode::Removal => Ok((1.0 - cos - margin).max(0.0)),
        Mode::Enhancement => Ok((cos - margin).max(0.0)),
        Mode::Off => Err(off_mode()),
    }
}

fn off_mode() -> Error {
    Error::Config("margin loss is undefined for mode `off`; the caller must skip it".into())
}

/// Mean hinge over row-wise cosines `cos` (shape `[batch]`).
pub fn margin_loss_from_cos<F: Real>(g: &mut Graph<F>, cos: NodeId, mode: Mode, margin: f64) -> Result<NodeId> {
    let pre = match mode {
        Mode::Removal => {
            let neg = g.scale(cos, -F::one());
            g.add_scalar(neg, F::of(1.0 - margin))
        }
        Mode::Enhancement => g.add_scalar(cos, F::of(-margin)),
        Mode::Off => return Err(off_mode()),
    };
    let h = g.relu(pre);
    Ok(g.mean(h))
}

/// Margin loss between `f_ψ(x)` and `f_ψ(x_cont)`.
pub fn margin_loss<F: Real>(g: &mut Graph<F>, psi_x: NodeId, psi_cont: NodeId, mode: Mode, margin: f64) -> Result<NodeId> {
    if mode == Mode::Off {
        return Err(off_mode());
    }
    let cos = g.cosine(psi_x, psi_cont)?;
    margin_loss_from_cos(g, cos, mode, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn dropout_loss_special_cases() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[3, 6]));
        for tau in [0.5, 1.0, 2.0] {
            let l = concept_dropout_loss(&mut g, uniform, tau).unwrap();
            assert!((g.value(l).item() - concept_dropout_floor(tau, 6)).abs() < 1e-12);
        }
        let mut onehot = vec![0.0; 4];
        onehot[2] = 200.0;
        let x = g.constant(Tensor::new(&[1, 4], onehot).unwrap());
        let l = concept_dropout_loss(&mut g, x, 1.0).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn hinge_values() {
        assert_eq!(hinge(Mode::Removal, 1.0, 0.0).unwrap(), 0.0);
        assert!((hinge(Mode::Removal, 0.0, 0.2).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(hinge(Mode::Enhancement, 0.0, 0.0).unwrap(), 0.0);
        assert!(hinge(Mode::Off, 0.0, 0.0).is_err());
    }
}
