//! Heterogeneous experts and the combination stage.
//!
//! Each pathway gets its own post-norm transformer layer. The expert outputs
//! are concatenated along time and read by a single learnable global query
//! through multi-head cross-attention; the attended vector feeds a linear
//! classifier. The per-expert readout mass `W` is the head-averaged
//! attention probability summed over each expert's token span.
//!
//! No positional encodings are used, so every expert is permutation
//! covariant over its tokens and the readout is invariant to the order of
//! the concatenation.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Multi-head attention projections. The key map has no bias: it would
/// only add a per-query constant to the scores.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Result of one attention call.
pub struct Attended {
    /// Output after the output projection, `Lq × D`.
    pub out: Var,
    /// Concatenated head outputs before the output projection, `Lq × D`.
    pub heads_out: Var,
    /// Attention probabilities per head, each `Lq × L`.
    pub probs: Vec<Var>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim),
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, &format!("{name}.o"), dim, dim),
            heads,
        })
    }

    /// Queries from `xq[Lq×D]` attend over keys/values from `xkv[L×D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xq: Var, xkv: Var) -> Result<Attended> {
        let dim = self.q.in_dim;
        let dh = dim / self.heads;
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores, 1)?;
            outs.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let heads_out = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let out = self.o.forward(g, store, heads_out)?;
        Ok(Attended { out, heads_out, probs })
    }
}

/// One post-norm transformer layer:
/// `F' = LN(F + MHSA(F))`, `out = LN(F' + FFN(F'))`.
#[derive(Clone, Debug)]
pub struct ExpertLayer {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
}

impl ExpertLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(ExpertLayer {
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, ffn_mult * dim, dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        })
    }

    /// Output and the per-head self-attention probabilities.
    pub fn forward_traced(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<(Var, Vec<Var>)> {
        if g.shape(f).len() != 2 || g.shape(f)[0] == 0 {
            return Err(Error::shape(format!(
                "expert input must be T×D with T ≥ 1, got {:?}",
                g.shape(f)
            )));
        }
        let a = self.attn.forward(g, store, f, f)?;
        let r1 = g.add(f, a.out)?;
        let h = self.ln1.forward(g, store, r1)?;
        let ff = self.ffn.forward(g, store, h)?;
        let r2 = g.add(h, ff)?;
        let out = self.ln2.forward(g, store, r2)?;
        Ok((out, a.probs))
    }
}

pub fn expert_forward(g: &mut Graph, store: &ParamStore, f: Var, expert: &ExpertLayer) -> Result<Var> {
    Ok(expert.forward_traced(g, store, f)?.0)
}

/// How expert outputs are combined into one clip vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    /// Mean of the per-expert time means.
    MeanPool,
    /// Linear map of the concatenated per-expert time means.
    Linear,
    /// Two-layer perceptron of the concatenated per-expert time means.
    Mlp,
    /// The global query attends within each expert separately; the
    /// per-expert results are averaged.
    LocalAttn,
    /// The global query attends over all experts' tokens jointly.
    GlobalAttn,
}

impl Combination {
    pub const ALL: [Combination; 5] = [
        Combination::MeanPool,
        Combination::Linear,
        Combination::Mlp,
        Combination::LocalAttn,
        Combination::GlobalAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Combination::MeanPool => "mean_pool",
            Combination::Linear => "linear",
            Combination::Mlp => "mlp",
            Combination::LocalAttn => "local_attn",
            Combination::GlobalAttn => "global_attn",
        }
    }
}

#[derive(Clone, Debug)]
enum Fuser {
    MeanPool,
    Linear(Linear),
    Mlp(Mlp),
    Attn {
        query: ParamId,
        attn: Attention,
        local: bool,
    },
}

/// Combination stage plus classifier.
#[derive(Clone, Debug)]
pub struct Readout {
    pub combination: Combination,
    fuser: Fuser,
    pub classifier: Linear,
    pub num_experts: usize,
}

/// Result of reading one clip's expert outputs.
pub struct ReadoutOutput {
    /// `1 × D`.
    pub v_fused: Var,
    /// `1 × N` readout mass per expert; rows sum to 1.
    pub weights: Var,
    /// `1 × C`.
    pub logits: Var,
    /// Head-averaged attention over the concatenated tokens (`1 × ΣT_i`),
    /// present for the global-attention combination.
    pub attention: Option<Var>,
}

impl Readout {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        combination: Combination,
        num_experts: usize,
        dim: usize,
        heads: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let fuser = match combination {
            Combination::MeanPool => Fuser::MeanPool,
            Combination::Linear => Fuser::Linear(Linear::new(store, &format!("{name}.fuse"), num_experts * dim, dim)),
            Combination::Mlp => Fuser::Mlp(Mlp::new(store, &format!("{name}.fuse"), num_experts * dim, dim, dim)),
            Combination::LocalAttn | Combination::GlobalAttn => Fuser::Attn {
                query: store.glorot(&format!("{name}.q_global"), &[1, dim], 1, dim),
                attn: Attention::new(store, &format!("{name}.attn"), dim, heads)?,
                local: combination == Combination::LocalAttn,
            },
        };
        Ok(Readout {
            combination,
            fuser,
            classifier: Linear::new(store, &format!("{name}.classifier"), dim, num_classes),
            num_experts,
        })
    }

    /// The global query parameter, for attention combinations.
    pub fn query(&self) -> Option<ParamId> {
        match &self.fuser {
            Fuser::Attn { query, .. } => Some(*query),
            _ => None,
        }
    }

    pub fn attention(&self) -> Option<&Attention> {
        match &self.fuser {
            Fuser::Attn { attn, .. } => Some(attn),
            _ => None,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, experts: &[Var]) -> Result<ReadoutOutput> {
        if experts.is_empty() {
            return Err(Error::contract("readout needs at least one expert output"));
        }
        if experts.len() != self.num_experts {
            return Err(Error::shape(format!(
                "readout built for {} experts, got {}",
                self.num_experts,
                experts.len()
            )));
        }
        let n = experts.len();
        let uniform = |g: &mut Graph| g.constant(Tensor::full(&[1, n], 1.0 / n as f64));
        let means = |g: &mut Graph| -> Result<Vec<Var>> { experts.iter().map(|&e| g.mean(e, 0)).collect() };

        let (v_fused, weights, attention) = match &self.fuser {
            Fuser::MeanPool => {
                let m = means(g)?;
                let stacked = g.concat(&m, 0)?;
                (g.mean(stacked, 0)?, uniform(g), None)
            }
            Fuser::Linear(lin) => {
                let m = means(g)?;
                let cat = g.concat(&m, 1)?;
                (lin.forward(g, store, cat)?, uniform(g), None)
            }
            Fuser::Mlp(mlp) => {
                let m = means(g)?;
                let cat = g.concat(&m, 1)?;
                (mlp.forward(g, store, cat)?, uniform(g), None)
            }
            Fuser::Attn {
                query,
                attn,
                local: true,
            } => {
                let q = g.param(store, *query);
                let mut outs = Vec::with_capacity(n);
                for &e in experts {
                    outs.push(attn.forward(g, store, q, e)?.out);
                }
                let stacked = g.concat(&outs, 0)?;
                (g.mean(stacked, 0)?, uniform(g), None)
            }
            Fuser::Attn {
                query,
                attn,
                local: false,
            } => {
                let q = g.param(store, *query);
                let concat = if n == 1 { experts[0] } else { g.concat(experts, 0)? };
                let a = attn.forward(g, store, q, concat)?;
                let mut total = a.probs[0];
                for &p in &a.probs[1..] {
                    total = g.add(total, p)?;
                }
                let avg = g.scale(total, 1.0 / a.probs.len() as f64);
                let mut spans = Vec::with_capacity(n);
                let mut offset = 0;
                for &e in experts {
                    let len = g.shape(e)[0];
                    let span = g.slice(avg, 1, offset, len)?;
                    spans.push(g.sum(span, 1)?);
                    offset += len;
                }
                // A lone expert holds all the mass; the sum of its span would
                // only approximate one.
                let w = if n == 1 { uniform(g) } else { g.concat(&spans, 1)? };
                (a.out, w, Some(avg))
            }
        };
        let logits = self.classifier.forward(g, store, v_fused)?;
        Ok(ReadoutOutput {
            v_fused,
            weights,
            logits,
            attention,
        })
    }
}
