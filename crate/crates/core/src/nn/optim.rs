use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay: the decay
/// shrinks the parameter directly and never enters `m` or `v`.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &ParamSet<F>) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![F::zero(); p.value.len()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.value.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update using the grads accumulated in `params`, then clears
    /// them. Parameters without a grad are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamSet<F>) -> Result<()> {
        let grads: Vec<Option<Tensor<F>>> = (0..params.len())
            .map(|i| params.get_mut(i).grad.take())
            .collect();
        if let Some((i, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
        {
            return Err(Error::Divergence {
                stage: "optimizer".into(),
                detail: format!("non-finite gradient for `{}`", params.get(i).name),
            });
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let one = F::one();
        let bc1 = F::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = F::of(1.0 - c.beta2.powi(self.t as i32));
        let lr = F::of(c.lr);
        let decay = F::of(c.lr * c.weight_decay);
        let eps = F::of(c.eps);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(i).value.data_mut();
            for j in 0..p.len() {
                let gj = g.as_ref().map_or(F::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] - decay * p[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
        if !params.all_finite() {
            return Err(Error::Divergence {
                stage: "optimizer".into(),
                detail: "non-finite parameter after update".into(),
            });
        }
        Ok(())
    }
}
