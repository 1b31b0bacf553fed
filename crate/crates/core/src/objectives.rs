//! Training losses.
//!
//! `total = cls + λ_rank·rank + λ_div·div + λ_gate·gate`

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator guard for cosine similarity in the diversity loss.
pub const DIV_EPS: f64 = 1e-8;
/// Allowed deviation of a readout row sum from 1.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rank: f64,
    pub lambda_div: f64,
    pub lambda_gate: f64,
    /// Ranking temperature `T_s`.
    pub rank_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rank: 0.1,
            lambda_div: 0.01,
            lambda_gate: 0.01,
            rank_temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rank", self.lambda_rank),
            ("lambda_div", self.lambda_div),
            ("lambda_gate", self.lambda_gate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.rank_temperature.is_finite() && self.rank_temperature > 0.0) {
            return Err(Error::config(format!(
                "rank_temperature must be positive, got {}",
                self.rank_temperature
            )));
        }
        Ok(())
    }
}

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub rank: f64,
    pub div: f64,
    pub gate: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the terms with `w`, in the same order as [`loss_total`].
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.cls + w.lambda_rank * self.rank + w.lambda_div * self.div + w.lambda_gate * self.gate
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.cls += b.cls;
            m.rank += b.rank;
            m.div += b.div;
            m.gate += b.gate;
            m.total += b.total;
        }
        LossBreakdown {
            cls: m.cls / n,
            rank: m.rank / n,
            div: m.div / n,
            gate: m.gate / n,
            total: m.total / n,
        }
    }
}

/// Mean cross-entropy of `logits[B×C]` against `labels`.
pub fn loss_cls(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::shape(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let mut mask = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::contract(format!("label {y} outside 0..{c}")));
        }
        mask[i * c + y] = 1.0;
    }
    let lp = g.log_softmax(logits, 1)?;
    let mask = g.constant(Tensor::new(&[b, c], mask)?);
    let picked = g.mul(lp, mask)?;
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// KL divergence from the target score distribution to the predicted one,
/// averaged over clips. Targets are detached.
pub fn loss_rank(g: &mut Graph, s_pred: &[Var], s_tgt: &[Var], temperature: f64) -> Result<Var> {
    if s_pred.len() != s_tgt.len() || s_pred.is_empty() {
        return Err(Error::shape(format!(
            "{} predicted vs {} target score vectors",
            s_pred.len(),
            s_tgt.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&pred, &tgt) in s_pred.iter().zip(s_tgt) {
        let (sp, st) = (g.shape(pred).to_vec(), g.shape(tgt).to_vec());
        if sp.len() != 1 || sp != st {
            return Err(Error::shape(format!(
                "score shapes {sp:?} and {st:?} differ or are not 1-D"
            )));
        }
        let tgt = g.detach(tgt);
        let tgt = g.scale(tgt, 1.0 / temperature);
        let log_p = g.log_softmax(tgt, 0)?;
        let p = g.exp(log_p);
        let scaled = g.scale(pred, 1.0 / temperature);
        let log_q = g.log_softmax(scaled, 0)?;
        // Identical scores give bit-identical sums, so the loss is exactly
        // zero there.
        let neg_entropy = g.mul(p, log_p)?;
        let neg_entropy = g.sum_all(neg_entropy);
        let cross = g.mul(p, log_q)?;
        let cross = g.sum_all(cross);
        let kl = g.sub(neg_entropy, cross)?;
        total = Some(match total {
            Some(t) => g.add(t, kl)?,
            None => kl,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / s_pred.len() as f64))
}

/// Mean pairwise cosine similarity of time-averaged expert outputs,
/// averaged over samples. `outputs[b][i]` is expert `i`'s `T_i × D`
/// output for sample `b`. Zero when there is a single expert.
pub fn loss_div(g: &mut Graph, outputs: &[Vec<Var>]) -> Result<Var> {
    if outputs.is_empty() {
        return Err(Error::contract("diversity loss needs at least one sample"));
    }
    let n = outputs[0].len();
    if n == 0 || outputs.iter().any(|o| o.len() != n) {
        return Err(Error::shape("every sample needs the same non-zero number of experts"));
    }
    if n == 1 {
        return Ok(g.scalar(0.0));
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let mut total: Option<Var> = None;
    for sample in outputs {
        let means: Vec<Var> = sample.iter().map(|&e| g.mean(e, 0)).collect::<Result<_>>()?;
        for i in 0..n {
            for j in i + 1..n {
                let c = g.cosine_similarity(means[i], means[j], 1, DIV_EPS)?;
                let c = g.sum_all(c);
                total = Some(match total {
                    Some(t) => g.add(t, c)?,
                    None => c,
                });
            }
        }
    }
    Ok(g.scale(total.expect("n ≥ 2"), 1.0 / (pairs * outputs.len() as f64)))
}

/// `N · Σ_i C_i²` with `C_i` the column mean of `w[B×N]`.
pub fn loss_gate(g: &mut Graph, w: Var) -> Result<Var> {
    let shape = g.shape(w).to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::shape(format!("readout weights must be B×N, got {shape:?}")));
    }
    let n = shape[1];
    for (b, row) in g.value(w).data().chunks(n).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::contract(format!("readout row {b} sums to {s}, not 1")));
        }
    }
    let c = g.mean(w, 0)?;
    let sq = g.mul(c, c)?;
    let s = g.sum_all(sq);
    Ok(g.scale(s, n as f64))
}

/// The four loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub rank: Var,
    pub div: Var,
    pub gate: Var,
}

/// Weighted sum of the terms and their values.
pub fn loss_total(g: &mut Graph, terms: LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let rank = g.scale(terms.rank, w.lambda_rank);
    let div = g.scale(terms.div, w.lambda_div);
    let gate = g.scale(terms.gate, w.lambda_gate);
    let total = g.add(terms.cls, rank)?;
    let total = g.add(total, div)?;
    let total = g.add(total, gate)?;
    let item = |g: &Graph, v: Var| g.value(v).item();
    let breakdown = LossBreakdown {
        cls: item(g, terms.cls),
        rank: item(g, terms.rank),
        div: item(g, terms.div),
        gate: item(g, terms.gate),
        total: item(g, total),
    };
    Ok((total, breakdown))
}
