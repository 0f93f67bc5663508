//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in execution order. Node ids are indices into
//! that record, so index order is a topological order and [`Graph::backward`]
//! simply walks the tape from the end. Gradients are accumulated (`+=`) into
//! per-node buffers, which makes fan-out (one tensor feeding several ops) work
//! without special handling.

use crate::error::{Error, Result};
use crate::nn::kernels;
use crate::nn::tensor::Tensor;
use crate::par::Exec;
use crate::scalar::Real;

/// Smallest denominator allowed in cosine similarity.
pub const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Silu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Cosine {
        a: usize,
        b: usize,
        norm_a: Vec<F>,
        norm_b: Vec<F>,
        denom: Vec<F>,
    },
    Sum(usize),
    Mean(usize),
    SumLast(usize),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    exec: Exec,
    degenerate_cosines: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `id`, or zeros of length `len` if nothing reached it.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<F> {
        self.get(id)
            .map(<[F]>::to_vec)
            .unwrap_or_else(|| vec![F::zero(); len])
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape2(op, a, b));
    }
    Ok(())
}

fn acc<F: Real>(slot: &mut Option<Vec<F>>, contrib: &[F]) {
    match slot {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(contrib.to_vec()),
    }
}

fn acc_with<F: Real>(slot: &mut Option<Vec<F>>, len: usize, f: impl FnOnce(&mut [F])) {
    let g = slot.get_or_insert_with(|| vec![F::zero(); len]);
    f(g);
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let one = F::one();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + F::of(3.0) * k * x * x);
    (y, dy)
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self::with_exec(Exec::Sequential)
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
            degenerate_cosines: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cosine rows whose denominator had to be clamped.
    pub fn degenerate_cosines(&self) -> usize {
        self.degenerate_cosines
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<F>, trainable: bool) -> NodeId {
        self.push(t, Op::Leaf, trainable)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape2("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(
            self.exec,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a.0, b.0), ng))
    }

    /// Batched matmul `[B,m,k] · [B,k,n] → [B,m,n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape2("bmm", &sa, &sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bs * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..bs {
                kernels::matmul(
                    Exec::Sequential,
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(&[bs, m, n], out)?,
            Op::BatchMatMul(a.0, b.0),
            ng,
        ))
    }

    /// Swaps the last two dimensions of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s.len() > 3 {
            return Err(Error::Shape(format!("transpose: unsupported shape {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let bs: usize = s[..s.len() - 2].iter().product();
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..bs {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut ns = s.clone();
        let l = ns.len();
        ns.swap(l - 2, l - 1);
        let ng = self.ng(&[a.0]);
        Ok(self.push(Tensor::new(&ns, out)?, Op::Transpose(a.0), ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(t, Op::Reshape(a.0), ng))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(t, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(t, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(t, Op::Mul(a.0, b.0), ng))
    }

    /// Adds a `[d]` vector to every row of `a[..., d]`.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let d = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != d {
            return Err(Error::shape2("add_bias", &sa, &sb));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            row.iter_mut().zip(&bv).for_each(|(o, &v)| *o = *o + v);
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&sa, out)?, Op::AddBias(a.0, b.0), ng))
    }

    fn map(&self, a: NodeId, f: impl Fn(F) -> F) -> Tensor<F> {
        let v = self.value(a);
        Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same length")
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let t = self.map(a, |x| x * c);
        let ng = self.ng(&[a.0]);
        self.push(t, Op::Scale(a.0, c), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let t = self.map(a, |x| x + c);
        let ng = self.ng(&[a.0]);
        self.push(t, Op::AddScalar(a.0), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.map(a, |x| x.max(F::zero()));
        let ng = self.ng(&[a.0]);
        self.push(t, Op::Relu(a.0), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = self.map(a, |x| gelu_parts(x).0);
        let ng = self.ng(&[a.0]);
        self.push(t, Op::Gelu(a.0), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let t = self.map(a, |x| x * sigmoid(x));
        let ng = self.ng(&[a.0]);
        self.push(t, Op::Silu(a.0), ng)
    }

    fn rowwise(&self, a: NodeId, f: impl Fn(&[F], &mut [F])) -> Tensor<F> {
        let v = self.value(a);
        let d = v.row_len().max(1);
        let mut out = vec![F::zero(); v.len()];
        for (src, dst) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            f(src, dst);
        }
        Tensor::new(v.shape(), out).expect("same length")
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.rowwise(a, kernels::softmax_row);
        let ng = self.ng(&[a.0]);
        self.push(t, Op::Softmax(a.0), ng)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.rowwise(a, kernels::log_softmax_row);
        let ng = self.ng(&[a.0]);
        self.push(t, Op::LogSoftmax(a.0), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `d`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: F) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::Shape("layer_norm: scalar input".into()))?;
        if d == 0 {
            return Err(Error::Shape("layer_norm: zero-width rows".into()));
        }
        same_shape("layer_norm gamma", &[d], self.shape(gamma))?;
        same_shape("layer_norm beta", &[d], self.shape(beta))?;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        let df = F::of(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(&sx, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let k = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!(
                "cross_entropy: target {t} outside [0, {k})"
            )));
        }
        let lv = self.value(logits).data();
        let n = targets.len();
        let mut probs = vec![F::zero(); lv.len()];
        let mut logp = vec![F::zero(); k];
        let mut loss = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            kernels::softmax_row(row, &mut probs[i * k..(i + 1) * k]);
            kernels::log_softmax_row(row, &mut logp);
            loss = loss - logp[t];
        }
        if n > 0 {
            loss = loss / F::of(n as f64);
        }
        let ng = self.ng(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Row-wise cosine similarity; output drops the last dimension.
    ///
    /// The denominator is clamped at [`COS_EPS`]; each clamped row is counted
    /// in [`Graph::degenerate_cosines`]. Outputs are clipped to `[-1, 1]`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        same_shape("cosine", &sa, self.shape(b))?;
        let d = *sa.last().ok_or_else(|| Error::Shape("cosine: scalar input".into()))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let rows = if d == 0 { 0 } else { av.len() / d };
        let eps = F::of(COS_EPS);
        let mut out = vec![F::zero(); rows];
        let mut norm_a = vec![F::zero(); rows];
        let mut norm_b = vec![F::zero(); rows];
        let mut denom = vec![F::zero(); rows];
        let mut degenerate = 0;
        for r in 0..rows {
            let (ra, rb) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
            let na = kernels::dot(ra, ra).sqrt();
            let nb = kernels::dot(rb, rb).sqrt();
            let raw = na * nb;
            let den = if raw < eps {
                degenerate += 1;
                eps
            } else {
                raw
            };
            norm_a[r] = na;
            norm_b[r] = nb;
            denom[r] = den;
            out[r] = (kernels::dot(ra, rb) / den).max(-F::one()).min(F::one());
        }
        self.degenerate_cosines += degenerate;
        let ng = self.ng(&[a.0, b.0]);
        let oshape = &sa[..sa.len() - 1];
        Ok(self.push(
            Tensor::new(oshape, out)?,
            Op::Cosine {
                a: a.0,
                b: b.0,
                norm_a,
                norm_b,
                denom,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = v.len().max(1);
        let s = v.data().iter().copied().sum::<F>() / F::of(n as f64);
        let ng = self.ng(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean(a.0), ng)
    }

    /// Sums over the last dimension.
    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.shape().to_vec();
        let d = v.row_len().max(1);
        let out: Vec<F> = v.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
        let oshape = if s.is_empty() { vec![] } else { s[..s.len() - 1].to_vec() };
        let ng = self.ng(&[a.0]);
        self.push(
            Tensor::new(&oshape, out).expect("row count"),
            Op::SumLast(a.0),
            ng,
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<F>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, j: usize) -> bool {
        self.nodes[j].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bv = self.nodes[*b].value.data();
                    acc_with(&mut grads[*a], m * k, |ga| kernels::matmul_bt_acc(g, bv, ga, m, n, k));
                }
                if self.wants(*b) {
                    let av = self.nodes[*a].value.data();
                    acc_with(&mut grads[*b], k * n, |gb| kernels::matmul_at_acc(av, g, gb, m, k, n));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if self.wants(*a) {
                    acc_with(&mut grads[*a], bs * m * k, |ga| {
                        for t in 0..bs {
                            kernels::matmul_bt_acc(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                }
                if self.wants(*b) {
                    acc_with(&mut grads[*b], bs * k * n, |gb| {
                        for t in 0..bs {
                            kernels::matmul_at_acc(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    // out has shape [.., c, r]; input [.., r, c]
                    let s = node.value.shape();
                    let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                    let bs = g.len() / (r * c).max(1);
                    acc_with(&mut grads[*a], g.len(), |ga| {
                        for b in 0..bs {
                            let off = b * r * c;
                            for i in 0..c {
                                for j in 0..r {
                                    ga[off + j * c + i] = ga[off + j * c + i] + g[off + i * r + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) | Op::AddScalar(a) => {
                if self.wants(*a) {
                    acc(&mut grads[*a], g);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(&mut grads[*a], g);
                }
                if self.wants(*b) {
                    acc(&mut grads[*b], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(&mut grads[*a], g);
                }
                if self.wants(*b) {
                    acc_with(&mut grads[*b], g.len(), |gb| {
                        gb.iter_mut().zip(g).for_each(|(o, &v)| *o = *o - v)
                    });
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if self.wants(*a) {
                    acc_with(&mut grads[*a], g.len(), |ga| {
                        for j in 0..g.len() {
                            ga[j] = ga[j] + g[j] * bv[j];
                        }
                    });
                }
                if self.wants(*b) {
                    acc_with(&mut grads[*b], g.len(), |gb| {
                        for j in 0..g.len() {
                            gb[j] = gb[j] + g[j] * av[j];
                        }
                    });
                }
            }
            Op::AddBias(a, b) => {
                if self.wants(*a) {
                    acc(&mut grads[*a], g);
                }
                if self.wants(*b) {
                    let d = self.nodes[*b].value.len();
                    acc_with(&mut grads[*b], d, |gb| {
                        for row in g.chunks(d.max(1)) {
                            gb.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    acc_with(&mut grads[*a], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v * *c)
                    });
                }
            }
            Op::Relu(a) | Op::Gelu(a) | Op::Silu(a) => {
                if self.wants(*a) {
                    let xv = self.nodes[*a].value.data();
                    let deriv: Box<dyn Fn(F) -> F> = match node.op {
                        Op::Relu(_) => Box::new(|x: F| if x > F::zero() { F::one() } else { F::zero() }),
                        Op::Gelu(_) => Box::new(|x: F| gelu_parts(x).1),
                        _ => Box::new(|x: F| {
                            let s = sigmoid(x);
                            s * (F::one() + x * (F::one() - s))
                        }),
                    };
                    acc_with(&mut grads[*a], g.len(), |ga| {
                        for j in 0..g.len() {
                            ga[j] = ga[j] + g[j] * deriv(xv[j]);
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let d = node.value.row_len().max(1);
                    acc_with(&mut grads[*a], g.len(), |ga| {
                        for ((gr, pr), gar) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                            let s: F = gr.iter().zip(pr).map(|(&x, &p)| x * p).sum();
                            for j in 0..d {
                                gar[j] = gar[j] + pr[j] * (gr[j] - s);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                if self.wants(*a) {
                    let d = node.value.row_len().max(1);
                    acc_with(&mut grads[*a], g.len(), |ga| {
                        for ((gr, lr), gar) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                            let s: F = gr.iter().copied().sum();
                            for j in 0..d {
                                gar[j] = gar[j] + gr[j] - lr[j].exp() * s;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[*gamma].value.len();
                let gv = self.nodes[*gamma].value.data();
                if self.wants(*gamma) {
                    acc_with(&mut grads[*gamma], d, |gg| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] = gg[j] + gr[j] * hr[j];
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    acc_with(&mut grads[*beta], d, |gb| {
                        for gr in g.chunks(d) {
                            gb.iter_mut().zip(gr).for_each(|(o, &v)| *o = *o + v);
                        }
                    });
                }
                if self.wants(*x) {
                    let df = F::of(d as f64);
                    acc_with(&mut grads[*x], g.len(), |gx| {
                        for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for j in 0..d {
                                let gh = gr[j] * gv[j];
                                s1 = s1 + gh;
                                s2 = s2 + gh * hr[j];
                            }
                            let k = inv_std[r] / df;
                            for j in 0..d {
                                let gh = gr[j] * gv[j];
                                gx[r * d + j] = gx[r * d + j] + k * (df * gh - s1 - hr[j] * s2);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let n = targets.len().max(1);
                    let k = probs.len() / n;
                    let scale = g[0] / F::of(n as f64);
                    acc_with(&mut grads[*logits], probs.len(), |gl| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..k {
                                let y = if j == t { F::one() } else { F::zero() };
                                gl[i * k + j] = gl[i * k + j] + scale * (probs[i * k + j] - y);
                            }
                        }
                    });
                }
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
                denom,
            } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let d = self.nodes[*a].value.row_len();
                let eps = F::of(COS_EPS);
                for (side, (x, y, nx)) in [(*a, (av, bv, norm_a)), (*b, (bv, av, norm_b))] {
                    if !self.wants(side) {
                        continue;
                    }
                    acc_with(&mut grads[side], av.len(), |gx| {
                        for r in 0..g.len() {
                            let xr = &x[r * d..(r + 1) * d];
                            let yr = &y[r * d..(r + 1) * d];
                            let raw = kernels::dot(xr, yr) / denom[r];
                            let clamped = norm_a[r] * norm_b[r] < eps;
                            for j in 0..d {
                                let dj = if clamped || nx[r] == F::zero() {
                                    yr[j] / denom[r]
                                } else {
                                    yr[j] / denom[r] - raw * xr[j] / (nx[r] * nx[r])
                                };
                                gx[r * d + j] = gx[r * d + j] + g[r] * dj;
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.nodes[*a].value.len();
                    acc_with(&mut grads[*a], n, |ga| ga.iter_mut().for_each(|o| *o = *o + g[0]));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.nodes[*a].value.len();
                    let v = g[0] / F::of(n.max(1) as f64);
                    acc_with(&mut grads[*a], n, |ga| ga.iter_mut().for_each(|o| *o = *o + v));
                }
            }
            Op::SumLast(a) => {
                if self.wants(*a) {
                    let n = self.nodes[*a].value.len();
                    let d = self.nodes[*a].value.row_len().max(1);
                    acc_with(&mut grads[*a], n, |ga| {
                        for (r, row) in ga.chunks_mut(d).enumerate() {
                            row.iter_mut().for_each(|o| *o = *o + g[r]);
                        }
                    });
                }
            }
        }
    }
}
