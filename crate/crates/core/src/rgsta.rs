//! Rate-guided aggregation: compress a clip of `T` frames into a pathway of
//! `T / r` tokens.
//!
//! Frames are split into consecutive groups of `r`. Within a group the frame
//! with the highest mixed importance score is kept and the remaining `r − 1`
//! frames are merged into it, weighted by a softmax over their cosine
//! similarity to the kept frame in a learned metric space:
//!
//! ```text
//! s_pred = ScoreHead(LN(MetricProj(c)))      s_norm = ‖c‖₂
//! s_mix  = α·s_pred + (1 − α)·s_norm          (min-max normalized per clip)
//! Z      = MetricProj(·) / ‖MetricProj(·)‖
//! A      = softmax(Z_rest Z_keptᵀ / τ)        over the kept set
//! merged = c_kept + δ · Aᵀ c_rest
//! ```
//!
//! Kept selection is a hard routing decision: gradients flow through the
//! frame values but not through the argmax. The score head is trained by
//! the ranking objective against [`target_scores`].

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Added to norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMixing {
    /// Min-max normalize `s_pred` and `s_norm` over the clip before mixing.
    Normalized,
    /// Mix the raw values.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgstaConfig {
    pub rate: usize,
    pub alpha: f64,
    pub tau: f64,
    pub delta: f64,
    pub metric_dim: usize,
    pub mixing: ScoreMixing,
}

impl RgstaConfig {
    /// Defaults for feature width `dim`: α = 0.5, τ = 1, δ = 0.5,
    /// metric width `dim / 2`.
    pub fn new(rate: usize, dim: usize) -> Self {
        RgstaConfig {
            rate,
            alpha: 0.5,
            tau: 1.0,
            delta: 0.5,
            metric_dim: (dim / 2).max(1),
            mixing: ScoreMixing::Normalized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate == 0 {
            return Err(Error::config("rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::config(format!("tau {} must be positive", self.tau)));
        }
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::config(format!("delta {} must be non-negative", self.delta)));
        }
        if self.metric_dim == 0 {
            return Err(Error::config("metric_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RgstaParams {
    pub metric_proj: Linear,
    pub score_norm: LayerNorm,
    pub score_head: Linear,
}

impl RgstaParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, metric_dim: usize) -> Self {
        RgstaParams {
            metric_proj: Linear::new(store, &format!("{name}.metric_proj"), dim, metric_dim),
            score_norm: LayerNorm::new(store, &format!("{name}.score_norm"), metric_dim),
            score_head: Linear::new(store, &format!("{name}.score_head"), metric_dim, 1),
        }
    }
}

/// Scores of every frame of a clip.
pub struct FrameScores {
    /// Learned scores `[T]`, differentiable.
    pub s_pred: Var,
    /// Metric projection of every frame `[T × metric_dim]`.
    pub projected: Var,
    pub s_norm: Vec<f64>,
    pub s_mix: Vec<f64>,
}

/// Per-group record of one merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupTrace {
    /// Absolute frame index of the kept frame.
    pub kept: usize,
    pub rest: Vec<usize>,
    /// `A_norm`: one row per rest frame, one column per kept frame.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeTrace {
    pub rate: usize,
    pub groups: Vec<GroupTrace>,
    pub s_pred: Vec<f64>,
    pub s_norm: Vec<f64>,
    pub s_mix: Vec<f64>,
    pub s_tgt: Vec<f64>,
}

impl MergeTrace {
    pub fn kept_indices(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.kept).collect()
    }
}

/// Rescales to `[0, 1]`; a constant input maps to zeros.
pub fn min_max_normalize(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - lo) / span).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn frame_norms(frames: &Tensor) -> Vec<f64> {
    (0..frames.rows())
        .map(|t| frames.row(t).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Hybrid importance scoring of every frame in `frames[T×D]`.
pub fn score_frames(
    g: &mut Graph,
    store: &ParamStore,
    params: &RgstaParams,
    cfg: &RgstaConfig,
    frames: Var,
) -> Result<FrameScores> {
    if g.shape(frames).len() != 2 {
        return Err(Error::shape(format!("frames must be T×D, got {:?}", g.shape(frames))));
    }
    let t = g.shape(frames)[0];
    let projected = params.metric_proj.forward(g, store, frames)?;
    let normed = params.score_norm.forward(g, store, projected)?;
    let head = params.score_head.forward(g, store, normed)?;
    let s_pred = g.reshape(head, &[t])?;

    let s_norm = frame_norms(g.value(frames));
    let pred = g.value(s_pred).data().to_vec();
    let (p, n) = match cfg.mixing {
        ScoreMixing::Normalized => (min_max_normalize(&pred), min_max_normalize(&s_norm)),
        ScoreMixing::Raw => (pred, s_norm.clone()),
    };
    let s_mix = p
        .iter()
        .zip(&n)
        .map(|(a, b)| cfg.alpha * a + (1.0 - cfg.alpha) * b)
        .collect();
    Ok(FrameScores {
        s_pred,
        projected,
        s_norm,
        s_mix,
    })
}

/// Frame ranges `[g·r, (g+1)·r)` of every group.
pub fn group_ranges(t: usize, rate: usize) -> Result<Vec<Range<usize>>> {
    if rate == 0 || !t.is_multiple_of(rate) {
        return Err(Error::Rate { t, rate });
    }
    Ok((0..t / rate).map(|g| g * rate..(g + 1) * rate).collect())
}

/// Splits `frames[T×D]` into `T / rate` consecutive `rate × D` groups.
pub fn split_groups(frames: &Tensor, rate: usize) -> Result<Vec<Tensor>> {
    let d = frames.cols();
    group_ranges(frames.rows(), rate)?
        .into_iter()
        .map(|r| Tensor::new(&[rate, d], frames.data()[r.start * d..r.end * d].to_vec()))
        .collect()
}

fn l2_normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.l2_norm(x, 1)?;
    let n = g.add_scalar(n, NORM_EPS);
    g.div(x, n)
}

/// Merge of one group given its metric projections.
fn merge_projected(
    g: &mut Graph,
    cfg: &RgstaConfig,
    group: Var,
    projected: Var,
    s_mix: &[f64],
) -> Result<(Var, usize, Vec<Vec<f64>>)> {
    let r = g.shape(group)[0];
    if r == 0 {
        return Err(Error::contract("cannot merge an empty group"));
    }
    if s_mix.len() != r {
        return Err(Error::shape(format!("{} scores for a group of {r}", s_mix.len())));
    }
    let kept = argmax(s_mix);
    if r == 1 {
        return Ok((group, kept, Vec::new()));
    }
    let rest: Vec<usize> = (0..r).filter(|&i| i != kept).collect();

    let kept_rows = g.index_select(group, 0, &[kept])?;
    let rest_rows = g.index_select(group, 0, &rest)?;
    let z_all = l2_normalize_rows(g, projected)?;
    let z_kept = g.index_select(z_all, 0, &[kept])?;
    let z_rest = g.index_select(z_all, 0, &rest)?;

    let z_kept_t = g.transpose(z_kept)?;
    let sim = g.matmul(z_rest, z_kept_t)?; // (r−1) × 1
    let sim = g.scale(sim, 1.0 / cfg.tau);
    let attn = g.softmax(sim, 1)?;
    let attn_t = g.transpose(attn)?; // 1 × (r−1)
    let pulled = g.matmul(attn_t, rest_rows)?;
    let pulled = g.scale(pulled, cfg.delta);
    let merged = g.add(kept_rows, pulled)?;

    let a = g.value(attn);
    let rows = (0..a.rows()).map(|i| a.row(i).to_vec()).collect();
    Ok((merged, kept, rows))
}

/// Keeps the top-scored frame of `group[r×D]` and merges the rest into it.
/// Returns the `1×D` merged token and the group-relative trace.
pub fn soft_merge_group(
    g: &mut Graph,
    store: &ParamStore,
    params: &RgstaParams,
    cfg: &RgstaConfig,
    group: Var,
    s_mix: &[f64],
) -> Result<(Var, GroupTrace)> {
    let projected = params.metric_proj.forward(g, store, group)?;
    let r = g.shape(group)[0];
    let (merged, kept, attention) = merge_projected(g, cfg, group, projected, s_mix)?;
    Ok((
        merged,
        GroupTrace {
            kept,
            rest: (0..r).filter(|&i| i != kept).collect(),
            attention,
        },
    ))
}

/// Full aggregation of `frames[T×D]` into a `(T/r)×D` pathway.
pub fn aggregate(
    g: &mut Graph,
    store: &ParamStore,
    params: &RgstaParams,
    cfg: &RgstaConfig,
    frames: Var,
) -> Result<(Var, MergeTrace, Var)> {
    let t = g.shape(frames)[0];
    let ranges = group_ranges(t, cfg.rate)?;
    let scores = score_frames(g, store, params, cfg, frames)?;
    let mut merged = Vec::with_capacity(ranges.len());
    let mut groups = Vec::with_capacity(ranges.len());
    for range in ranges {
        let group = g.slice(frames, 0, range.start, cfg.rate)?;
        let proj = g.slice(scores.projected, 0, range.start, cfg.rate)?;
        let (m, kept, attention) = merge_projected(g, cfg, group, proj, &scores.s_mix[range.clone()])?;
        merged.push(m);
        groups.push(GroupTrace {
            kept: range.start + kept,
            rest: range.clone().filter(|&i| i != range.start + kept).collect(),
            attention,
        });
    }
    let pathway = g.concat(&merged, 0)?;
    let trace = MergeTrace {
        rate: cfg.rate,
        groups,
        s_pred: g.value(scores.s_pred).data().to_vec(),
        s_norm: scores.s_norm,
        s_mix: scores.s_mix,
        s_tgt: target_scores(g.value(frames), cfg.rate)?,
    };
    Ok((pathway, trace, scores.s_pred))
}

/// Hard top-1 sampling: the kept frame of every group, nothing merged.
pub fn hard_sample(
    g: &mut Graph,
    store: &ParamStore,
    params: &RgstaParams,
    cfg: &RgstaConfig,
    frames: Var,
) -> Result<(Var, MergeTrace, Var)> {
    let t = g.shape(frames)[0];
    let ranges = group_ranges(t, cfg.rate)?;
    let scores = score_frames(g, store, params, cfg, frames)?;
    let kept: Vec<usize> = ranges
        .iter()
        .map(|r| r.start + argmax(&scores.s_mix[r.clone()]))
        .collect();
    let pathway = g.index_select(frames, 0, &kept)?;
    let groups = ranges
        .iter()
        .zip(&kept)
        .map(|(r, &k)| GroupTrace {
            kept: k,
            rest: r.clone().filter(|&i| i != k).collect(),
            attention: Vec::new(),
        })
        .collect();
    let trace = MergeTrace {
        rate: cfg.rate,
        groups,
        s_pred: g.value(scores.s_pred).data().to_vec(),
        s_norm: scores.s_norm,
        s_mix: scores.s_mix,
        s_tgt: target_scores(g.value(frames), cfg.rate)?,
    };
    Ok((pathway, trace, scores.s_pred))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

/// Channelwise mean or max over each group, bypassing scoring.
pub fn pool_groups(g: &mut Graph, frames: Var, rate: usize, kind: PoolKind) -> Result<Var> {
    let t = g.shape(frames)[0];
    let mut out = Vec::new();
    for range in group_ranges(t, rate)? {
        let group = g.slice(frames, 0, range.start, rate)?;
        out.push(match kind {
            PoolKind::Mean => g.mean(group, 0)?,
            PoolKind::Max => g.max(group, 0)?,
        });
    }
    g.concat(&out, 0)
}

/// Ranking targets: `‖c_i‖₂ + (1/r)·Σ_j cos(c_i, c_j)` over the frames `j`
/// of frame `i`'s group (self included). Plain values, outside any graph.
pub fn target_scores(frames: &Tensor, rate: usize) -> Result<Vec<f64>> {
    let norms = frame_norms(frames);
    let mut out = vec![0.0; frames.rows()];
    for range in group_ranges(frames.rows(), rate)? {
        for i in range.clone() {
            let sim: f64 = range
                .clone()
                .map(|j| {
                    let dot: f64 = frames.row(i).iter().zip(frames.row(j)).map(|(a, b)| a * b).sum();
                    dot / (norms[i] * norms[j] + 1e-8)
                })
                .sum();
            out[i] = norms[i] + sim / rate as f64;
        }
    }
    Ok(out)
}
