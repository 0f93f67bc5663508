use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Linear, ProjNorm, SwiGlu, TransformerLayer};
use crate::nn::{Bound, Graph, NodeId, ParamSet, Tensor};
use crate::par::Exec;
use crate::pipeline::config::{ModelConfig, Mode};
use crate::rng;
use crate::scalar::Real;

/// Projection + layer norm, one transformer layer over a token view of the
/// embedding, projection + layer norm. Maps `R^u -> R^u`.
#[derive(Debug, Clone, Copy)]
pub struct Extractor {
    inp: ProjNorm,
    layer: TransformerLayer,
    out: ProjNorm,
    pub dim: usize,
    pub tokens: usize,
}

impl Extractor {
    pub fn new<F: Real, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        dim: usize,
        tokens: usize,
        residual_init: f64,
        rng: &mut R,
    ) -> Self {
        let width = dim / tokens;
        let inp = ProjNorm::new(ps, &format!("{name}.in"), dim, residual_init, 1.0, rng);
        let layer = TransformerLayer::new(ps, &format!("{name}.layer"), width, residual_init, rng);
        // Embeddings are centered with unit RMS, so the final norm maps them
        // to themselves and the identity init is exact.
        let out = ProjNorm::new(ps, &format!("{name}.out"), dim, residual_init, 1.0, rng);
        Self {
            inp,
            layer,
            out,
            dim,
            tokens,
        }
    }

    pub fn param_count(dim: usize, tokens: usize) -> usize {
        2 * ProjNorm::param_count(dim) + TransformerLayer::param_count(dim / tokens)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let b = g.shape(x)[0];
        let h = self.inp.forward(g, p, x)?;
        let h = g.reshape(h, &[b, self.tokens, self.dim / self.tokens])?;
        let h = self.layer.forward(g, p, h)?;
        let h = g.reshape(h, &[b, self.dim])?;
        self.out.forward(g, p, h)
    }
}

/// SwiGLU block followed by a linear layer, `R^u -> R^u`.
#[derive(Debug, Clone, Copy)]
pub struct DebiasModule {
    glu: SwiGlu,
    out: Linear,
}

impl DebiasModule {
    pub fn new<F: Real, R: Rng>(ps: &mut ParamSet<F>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let glu = SwiGlu::new(ps, &format!("{name}.swiglu"), dim, hidden, rng);
        let out = Linear::new(ps, &format!("{name}.out"), dim, dim, 1.0, rng);
        Self { glu, out }
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        SwiGlu::param_count(dim, hidden) + Linear::param_count(dim, dim)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let h = self.glu.forward(g, p, x)?;
        self.out.forward(g, p, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Omega,
    Phi,
    PhiHat,
    Psi,
    Theta,
}

impl Part {
    pub const ALL: [Part; 5] = [Part::Omega, Part::Phi, Part::PhiHat, Part::Psi, Part::Theta];

    pub fn name(self) -> &'static str {
        match self {
            Part::Omega => "omega",
            Part::Phi => "phi",
            Part::PhiHat => "phi_hat",
            Part::Psi => "psi",
            Part::Theta => "theta",
        }
    }
}

/// The five trainable parts. The encoder is not here: it is frozen and lives
/// outside the model, which only ever sees its embeddings.
#[derive(Debug, Clone)]
pub struct CureModel<F: Real> {
    pub dim: usize,
    pub num_concepts: usize,
    pub num_labels: usize,
    pub config: ModelConfig,
    pub omega: Linear,
    pub phi: Extractor,
    pub phi_hat: Extractor,
    pub psi: DebiasModule,
    pub theta: Linear,
    params: [ParamSet<F>; 5],
}

/// Parameter counts of φ and ψ, at the run's width and at width 768.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub width: usize,
    pub phi: usize,
    pub psi: usize,
    pub reference_width: usize,
    pub phi_at_reference_width: usize,
    pub psi_at_reference_width: usize,
    pub phi_reference: usize,
    pub psi_reference: usize,
    pub note: String,
}

pub const REFERENCE_WIDTH: usize = 768;
const PHI_REFERENCE: usize = 1_780_000;
const PSI_REFERENCE: usize = 1_180_000;

impl<F: Real> CureModel<F> {
    /// Builds every part from its own named substream of `seed`, so a part's
    /// initial values do not depend on which other parts exist.
    pub fn new(dim: usize, num_concepts: usize, num_labels: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.tokens == 0 || dim % config.tokens != 0 {
            return Err(Error::Config(format!("tokens = {} must divide dim = {dim}", config.tokens)));
        }
        if num_concepts < 2 || num_labels < 2 {
            return Err(Error::Degenerate(format!(
                "need at least 2 concepts and 2 labels, got {num_concepts} and {num_labels}"
            )));
        }
        let mut params: [ParamSet<F>; 5] = Default::default();
        let [ps_omega, ps_phi, ps_hat, ps_psi, ps_theta] = &mut params;
        let omega = Linear::new(ps_omega, "omega", dim, num_concepts, 1.0, &mut rng::substream(seed, "init.omega"));
        let phi = Extractor::new(
            ps_phi,
            "phi",
            dim,
            config.tokens,
            config.residual_init,
            &mut rng::substream(seed, "init.phi"),
        );
        let phi_hat = Extractor::new(
            ps_hat,
            "phi_hat",
            dim,
            config.tokens,
            config.residual_init,
            &mut rng::substream(seed, "init.phi_hat"),
        );
        let psi = DebiasModule::new(
            ps_psi,
            "psi",
            dim,
            config.hidden_for(dim),
            &mut rng::substream(seed, "init.psi"),
        );
        let theta = Linear::new(ps_theta, "theta", dim, num_labels, 1.0, &mut rng::substream(seed, "init.theta"));
        Ok(Self {
            dim,
            num_concepts,
            num_labels,
            config: config.clone(),
            omega,
            phi,
            phi_hat,
            psi,
            theta,
            params,
        })
    }

    pub fn params(&self, part: Part) -> &ParamSet<F> {
        &self.params[part as usize]
    }

    pub fn params_mut(&mut self, part: Part) -> &mut ParamSet<F> {
        &mut self.params[part as usize]
    }

    pub fn bind(&self, g: &mut Graph<F>, part: Part, trainable: bool) -> Bound {
        self.params(part).bind(g, trainable)
    }

    pub fn fingerprint(&self, part: Part) -> String {
        self.params(part).fingerprint()
    }

    /// All parameters with `part.` prefixes, in part order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        Part::ALL
            .iter()
            .flat_map(|&p| self.params(p).prefixed(p.name()))
            .collect()
    }

    /// Loads values saved by [`CureModel::named_params`].
    pub fn load_named(&mut self, named: &[(String, Tensor<F>)]) -> Result<()> {
        let mut it = named.iter();
        for part in Part::ALL {
            let ps = &mut self.params[part as usize];
            for i in 0..ps.len() {
                let (name, t) = it
                    .next()
                    .ok_or_else(|| Error::Checkpoint("checkpoint has too few parameters".into()))?;
                let p = ps.get_mut(i);
                let expected = format!("{}.{}", part.name(), p.name);
                if *name != expected || t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "expected {expected} {:?}, found {name} {:?}",
                        p.value.shape(),
                        t.shape()
                    )));
                }
                p.value = t.clone();
            }
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint("checkpoint has extra parameters".into()));
        }
        Ok(())
    }

    pub fn param_counts(&self) -> ParamCounts {
        let hidden = self.config.hidden_for(REFERENCE_WIDTH);
        ParamCounts {
            width: self.dim,
            phi: self.params(Part::Phi).count(),
            psi: self.params(Part::Psi).count(),
            reference_width: REFERENCE_WIDTH,
            phi_at_reference_width: Extractor::param_count(REFERENCE_WIDTH, self.config.tokens),
            psi_at_reference_width: DebiasModule::param_count(REFERENCE_WIDTH, hidden),
            phi_reference: PHI_REFERENCE,
            psi_reference: PSI_REFERENCE,
            note: format!(
                "The reference counts are approximate totals with no layer widths given. Here the \
                 extractor's transformer layer runs over {} tokens of width u/{} with a 1x GELU \
                 feed-forward, and the SwiGLU hidden width is {} at u = {REFERENCE_WIDTH}, so \
                 counts are compared within a factor of 2.",
                self.config.tokens, self.config.tokens, hidden
            ),
        }
    }

    /// `f_φ(x)` for a batch of embeddings, without recording gradients.
    pub fn extract(&self, x: &Tensor<F>, exec: Exec) -> Result<Tensor<F>> {
        self.forward_rows(x, exec, |m, g, x| {
            let p = m.bind(g, Part::Phi, false);
            m.phi.forward(g, &p, x)
        })
    }

    /// Concept logits of ω on `x`.
    pub fn concept_logits(&self, x: &Tensor<F>, exec: Exec) -> Result<Tensor<F>> {
        self.forward_rows(x, exec, |m, g, x| {
            let p = m.bind(g, Part::Omega, false);
            m.omega.forward(g, &p, x)
        })
    }

    /// `f_ψ(x)`.
    pub fn debias(&self, x: &Tensor<F>, exec: Exec) -> Result<Tensor<F>> {
        self.forward_rows(x, exec, |m, g, x| {
            let p = m.bind(g, Part::Psi, false);
            m.psi.forward(g, &p, x)
        })
    }

    /// Task logits on the inference path of `mode`: `θ(x)` for the baseline,
    /// `θ(f_ψ(x))` otherwise.
    pub fn task_logits(&self, x: &Tensor<F>, mode: Mode, exec: Exec) -> Result<Tensor<F>> {
        self.forward_rows(x, exec, |m, g, x| {
            let t = m.bind(g, Part::Theta, false);
            let h = if mode == Mode::Off {
                x
            } else {
                let p = m.bind(g, Part::Psi, false);
                m.psi.forward(g, &p, x)?
            };
            m.theta.forward(g, &t, h)
        })
    }

    /// Runs `f` over row blocks of `x` and stacks the outputs.
    fn forward_rows(
        &self,
        x: &Tensor<F>,
        exec: Exec,
        f: impl Fn(&Self, &mut Graph<F>, NodeId) -> Result<NodeId> + Sync,
    ) -> Result<Tensor<F>> {
        const BLOCK: usize = 256;
        let n = x.rows();
        let blocks: Vec<Vec<usize>> = (0..n)
            .step_by(BLOCK)
            .map(|s| (s..(s + BLOCK).min(n)).collect())
            .collect();
        let outs = exec.map(&blocks, |idx| -> Result<Tensor<F>> {
            let mut g = Graph::new();
            let xi = g.constant(x.select_rows(idx));
            let y = f(self, &mut g, xi)?;
            Ok(g.value(y).clone())
        });
        let mut data = Vec::new();
        let mut width = 0;
        for o in outs {
            let o = o?;
            width = o.row_len();
            data.extend_from_slice(o.data());
        }
        Tensor::new(&[n, width], data)
    }
}

pub fn argmax_rows<F: Real>(t: &Tensor<F>) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            t.row(i)
                .iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
