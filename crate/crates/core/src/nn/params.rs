use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::graph::{Gradients, Graph, NodeId};
use crate::nn::tensor::Tensor;
use crate::scalar::Real;

/// A named trainable tensor with a lazily allocated gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
}

/// Ordered parameter collection owned by one network.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F> {
    params: Vec<Param<F>>,
}

/// Graph node ids of a [`ParamSet`] bound into one [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<NodeId>,
    trainable: bool,
}

impl Bound {
    pub fn new(ids: Vec<NodeId>, trainable: bool) -> Self {
        Self { ids, trainable }
    }

    pub fn node(&self, param: usize) -> NodeId {
        self.ids[param]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param<F> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<F> {
        &mut self.params[i]
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds every parameter to `g` as a leaf. Frozen sets become constants.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect();
        Bound { ids, trainable }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients reaching `bound` into each parameter's grad buffer.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<F>) {
        for (p, &id) in self.params.iter_mut().zip(&bound.ids) {
            let Some(g) = grads.get(id) else { continue };
            match &mut p.grad {
                Some(t) => t
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a = *a + b),
                None => {
                    p.grad = Some(Tensor::new(p.value.shape(), g.to_vec()).expect("grad shape"))
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// SHA-256 over names, shapes and values. Used to prove frozen parts are
    /// untouched by a stage.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet<F>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            if p.name != q.name || p.value.shape() != q.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    p.name,
                    p.value.shape(),
                    q.name,
                    q.value.shape()
                )));
            }
            p.value = q.value.clone();
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
        }
    }

    pub fn prefixed(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        self.params
            .iter()
            .map(|p| (format!("{prefix}.{}", p.name), &p.value))
            .collect()
    }
}
