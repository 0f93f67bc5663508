//! Layer definitions. Each layer registers its parameters in a caller-owned
//! [`ParamSet`] and remembers their indices; `forward` reads them through a
//! [`Bound`] so the same layer can run frozen or trainable.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::params::{Bound, ParamSet};
use crate::nn::tensor::Tensor;
use crate::scalar::Real;

pub const LN_EPS: f64 = 1e-5;

/// Uniform fan-in init, `U(-s/sqrt(fan_in), s/sqrt(fan_in))`.
pub fn uniform_init<F: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, scale: f64) -> Tensor<F> {
    let bound = scale / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::of(if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Applies `f` to `x` viewed as `[rows, d]`, restoring the leading dims.
fn as_rows<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    f: impl FnOnce(&mut Graph<F>, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() == 2 {
        return f(g, x);
    }
    let d = *s.last().ok_or_else(|| Error::Shape("scalar input to layer".into()))?;
    let rows = s.iter().product::<usize>() / d.max(1);
    let flat = g.reshape(x, &[rows, d])?;
    let y = f(g, flat)?;
    let mut out_shape = s[..s.len() - 1].to_vec();
    out_shape.push(*g.shape(y).last().unwrap_or(&0));
    g.reshape(y, &out_shape)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: usize,
    b: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), uniform_init(rng, &[d_in, d_out], d_in, init_scale));
        let b = ps.add(format!("{name}.bias"), uniform_init(rng, &[d_out], d_in, init_scale));
        Self { w, b, d_in, d_out }
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: NodeId) -> Result<NodeId> {
        as_rows(g, x, |g, x| {
            let y = g.matmul(x, p.node(self.w))?;
            g.add_bias(y, p.node(self.b))
        })
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
    pub d: usize,
}

impl LayerNorm {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, name: &str, d: usize, gamma0: f64) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::filled(&[d], F::of(gamma0)));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta, d }
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, p.node(self.gamma), p.node(self.beta), F::of(LN_EPS))
    }
}

/// Linear projection followed by layer norm, with a skip around the
/// projection: `LN(x + xW + b)`.
#[derive(Debug, Clone, Copy)]
pub struct ProjNorm {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl ProjNorm {
    pub fn new<F: Real, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        d: usize,
        residual_scale: f64,
        out_scale: f64,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(ps, &format!("{name}.proj"), d, d, residual_scale, rng);
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), d, out_scale);
        Self { proj, norm }
    }

    pub fn param_count(d: usize) -> usize {
        Linear::param_count(d, d) + LayerNorm::param_count(d)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let h = self.proj.forward(g, p, x)?;
        let s = g.add(x, h)?;
        self.norm.forward(g, p, s)
    }
}

/// Pre-norm encoder layer with single-head self-attention and a GELU
/// feed-forward of the same width. Input `[batch, tokens, d]`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    pub d: usize,
}

impl TransformerLayer {
    /// `out_scale` multiplies the init of the two projections that write into
    /// the residual stream; zero makes the layer an exact identity.
    pub fn new<F: Real, R: Rng>(ps: &mut ParamSet<F>, name: &str, d: usize, out_scale: f64, rng: &mut R) -> Self {
        let ln1 = LayerNorm::new(ps, &format!("{name}.ln1"), d, 1.0);
        let q = Linear::new(ps, &format!("{name}.attn.q"), d, d, 1.0, rng);
        let k = Linear::new(ps, &format!("{name}.attn.k"), d, d, 1.0, rng);
        let v = Linear::new(ps, &format!("{name}.attn.v"), d, d, 1.0, rng);
        let o = Linear::new(ps, &format!("{name}.attn.o"), d, d, out_scale, rng);
        let ln2 = LayerNorm::new(ps, &format!("{name}.ln2"), d, 1.0);
        let ff1 = Linear::new(ps, &format!("{name}.ff.up"), d, d, 1.0, rng);
        let ff2 = Linear::new(ps, &format!("{name}.ff.down"), d, d, out_scale, rng);
        Self {
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            ff1,
            ff2,
            d,
        }
    }

    pub fn param_count(d: usize) -> usize {
        6 * Linear::param_count(d, d) + 2 * LayerNorm::param_count(d)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d {
            return Err(Error::Shape(format!(
                "transformer layer expects [batch, tokens, {}], got {s:?}",
                self.d
            )));
        }
        let h = self.ln1.forward(g, p, x)?;
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, h)?;
        let v = self.v.forward(g, p, h)?;
        let kt = g.transpose(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, F::of(1.0 / (self.d as f64).sqrt()));
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, v)?;
        let a = self.o.forward(g, p, ctx)?;
        let x1 = g.add(x, a)?;
        let h2 = self.ln2.forward(g, p, x1)?;
        let f = self.ff1.forward(g, p, h2)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, p, f)?;
        g.add(x1, f)
    }
}

/// `down(silu(x W_gate) ⊙ (x W_value))`.
#[derive(Debug, Clone, Copy)]
pub struct SwiGlu {
    gate: Linear,
    value: Linear,
    down: Linear,
    pub d: usize,
    pub hidden: usize,
}

impl SwiGlu {
    pub fn new<F: Real, R: Rng>(ps: &mut ParamSet<F>, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        let gate = Linear::new(ps, &format!("{name}.gate"), d, hidden, 1.0, rng);
        let value = Linear::new(ps, &format!("{name}.value"), d, hidden, 1.0, rng);
        let down = Linear::new(ps, &format!("{name}.down"), hidden, d, 1.0, rng);
        Self {
            gate,
            value,
            down,
            d,
            hidden,
        }
    }

    pub fn param_count(d: usize, hidden: usize) -> usize {
        2 * Linear::param_count(d, hidden) + Linear::param_count(hidden, d)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let a = self.gate.forward(g, p, x)?;
        let a = g.silu(a);
        let b = self.value.forward(g, p, x)?;
        let h = g.mul(a, b)?;
        self.down.forward(g, p, h)
    }
}
