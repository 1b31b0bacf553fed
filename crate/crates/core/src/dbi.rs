//! Gated bidirectional interaction between pathways of different rates.
//!
//! Every unordered pathway pair `(i, j)` owns a small gate network that
//! scores the pair from the time-averaged summaries of both pathways. A pair
//! whose score reaches the threshold exchanges information in both
//! directions:
//!
//! * slow → fast: linearly interpolate the slow pathway to the fast length,
//!   project channels, scale by the gate score, add to the fast pathway;
//! * fast → slow: strided temporal convolution (stride = ratio of the
//!   lengths) of the fast pathway, scaled and added to the slow pathway.
//!
//! All updates read the pre-interaction features and are summed into each
//! destination in ascending source order.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    None,
    #[serde(alias = "slow2fast")]
    SlowToFast,
    #[serde(alias = "fast2slow")]
    FastToSlow,
    Bidirectional,
}

impl Interaction {
    fn allows_slow_to_fast(self) -> bool {
        matches!(self, Interaction::SlowToFast | Interaction::Bidirectional)
    }

    fn allows_fast_to_slow(self) -> bool {
        matches!(self, Interaction::FastToSlow | Interaction::Bidirectional)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbiConfig {
    pub threshold: f64,
    pub kernel: usize,
    pub interaction: Interaction,
}

impl Default for DbiConfig {
    fn default() -> Self {
        DbiConfig {
            threshold: 0.5,
            kernel: 3,
            interaction: Interaction::Bidirectional,
        }
    }
}

/// Pathways of one clip, fastest (smallest rate) first.
#[derive(Clone, Debug)]
pub struct PathwaySet {
    pub pathways: Vec<Var>,
    pub rates: Vec<usize>,
}

impl PathwaySet {
    pub fn new(g: &Graph, pathways: Vec<Var>, rates: Vec<usize>) -> Result<Self> {
        let set = PathwaySet { pathways, rates };
        set.validate(g)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.pathways.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pathways.is_empty()
    }

    pub fn validate(&self, g: &Graph) -> Result<()> {
        if self.pathways.len() != self.rates.len() || self.pathways.is_empty() {
            return Err(Error::Pathway(format!(
                "{} pathways for {} rates",
                self.pathways.len(),
                self.rates.len()
            )));
        }
        let s0 = g.shape(self.pathways[0]);
        let (d, t) = (s0[1], s0[0] * self.rates[0]);
        for (i, (&p, &r)) in self.pathways.iter().zip(&self.rates).enumerate() {
            let s = g.shape(p);
            if s.len() != 2 || s[1] != d || s[0] * r != t {
                return Err(Error::Pathway(format!(
                    "pathway {i} has shape {:?} at rate {r}; expected {}×{d}",
                    s,
                    t / r.max(1)
                )));
            }
            for (j, &r2) in self.rates.iter().enumerate().skip(i + 1) {
                if r2 <= r || r2 % r != 0 {
                    return Err(Error::Pathway(format!(
                        "rates must increase and divide each other: r{i}={r}, r{j}={r2}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Position of unordered pair `(i, j)`, `i < j`, in row-major upper-triangle order.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// One `2D → D → 1` gate per unordered pathway pair.
#[derive(Clone, Debug)]
pub struct GateNet {
    pub n: usize,
    pub gates: Vec<Mlp>,
}

impl GateNet {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, dim: usize) -> Self {
        let mut gates = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                gates.push(Mlp::new(store, &format!("{name}.gate_{i}_{j}"), 2 * dim, dim, 1));
            }
        }
        GateNet { n, gates }
    }
}

/// Symmetric pair scores with zero diagonal and the threshold mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateMatrix {
    pub scores: Vec<Vec<f64>>,
    pub active: Vec<Vec<bool>>,
    pub threshold: f64,
}

/// Per-direction fusion maps for one ordered pair.
#[derive(Clone, Debug)]
pub enum DirectionalMap {
    /// Channel projection applied after interpolation.
    SlowToFast(Linear),
    /// Temporal convolution weight `[k × D × D]` and bias `[D]`.
    FastToSlow {
        weight: ParamId,
        bias: ParamId,
        kernel: usize,
    },
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub n: usize,
    /// Indexed `src * n + dst`; the diagonal is `None`.
    pub maps: Vec<Option<DirectionalMap>>,
}

impl FusionParams {
    /// Pathways are ordered fastest first, so `src > dst` is slow→fast.
    pub fn new(store: &mut ParamStore, name: &str, n: usize, dim: usize, kernel: usize) -> Self {
        let mut maps = Vec::with_capacity(n * n);
        for src in 0..n {
            for dst in 0..n {
                maps.push(if src == dst {
                    None
                } else if src > dst {
                    Some(DirectionalMap::SlowToFast(Linear::new(
                        store,
                        &format!("{name}.s2f_{src}_{dst}"),
                        dim,
                        dim,
                    )))
                } else {
                    let prefix = format!("{name}.f2s_{src}_{dst}");
                    Some(DirectionalMap::FastToSlow {
                        weight: store.glorot(
                            &format!("{prefix}.weight"),
                            &[kernel, dim, dim],
                            kernel * dim,
                            kernel * dim,
                        ),
                        bias: store.zeros(&format!("{prefix}.bias"), &[dim]),
                        kernel,
                    })
                });
            }
        }
        FusionParams { n, maps }
    }

    pub fn map(&self, src: usize, dst: usize) -> Option<&DirectionalMap> {
        self.maps[src * self.n + dst].as_ref()
    }
}

/// Pair scores `s_{i↔j} = σ(MLP_{i↔j}([mean_t F_i ; mean_t F_j]))`, the
/// lower index's summary first. Returns the differentiable scores in
/// [`pair_index`] order and the thresholded matrix.
pub fn gate_scores(
    g: &mut Graph,
    store: &ParamStore,
    pset: &PathwaySet,
    gates: &GateNet,
    threshold: f64,
) -> Result<(Vec<Var>, GateMatrix)> {
    let n = pset.len();
    if gates.n != n {
        return Err(Error::Pathway(format!("gate net for {} pathways, got {n}", gates.n)));
    }
    let summaries: Vec<Var> = pset.pathways.iter().map(|&p| g.mean(p, 0)).collect::<Result<_>>()?;
    let mut vars = Vec::with_capacity(gates.gates.len());
    let mut scores = vec![vec![0.0; n]; n];
    let mut active = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let joined = g.concat(&[summaries[i], summaries[j]], 1)?;
            let logit = gates.gates[pair_index(n, i, j)].forward(g, store, joined)?;
            let s = g.sigmoid(logit);
            let v = g.value(s).item();
            scores[i][j] = v;
            scores[j][i] = v;
            active[i][j] = v >= threshold;
            active[j][i] = v >= threshold;
            vars.push(s);
        }
    }
    Ok((
        vars,
        GateMatrix {
            scores,
            active,
            threshold,
        },
    ))
}

/// `s · Proj(Interp(F_slow → T_fast))`.
pub fn slow_to_fast_update(
    g: &mut Graph,
    store: &ParamStore,
    f_slow: Var,
    fast_len: usize,
    s: Var,
    proj: &Linear,
) -> Result<Var> {
    if fast_len < g.shape(f_slow)[0] {
        return Err(Error::Pathway(format!(
            "slow→fast target length {fast_len} shorter than source {}",
            g.shape(f_slow)[0]
        )));
    }
    let up = g.interp_time(f_slow, fast_len)?;
    let projected = proj.forward(g, store, up)?;
    g.mul(projected, s)
}

/// `s · TConv(F_fast)` with stride `T_fast / T_slow`, output length `T_slow`.
#[allow(clippy::too_many_arguments)]
pub fn fast_to_slow_update(
    g: &mut Graph,
    store: &ParamStore,
    f_fast: Var,
    slow_len: usize,
    s: Var,
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
) -> Result<Var> {
    let fast_len = g.shape(f_fast)[0];
    if slow_len == 0 || !fast_len.is_multiple_of(slow_len) {
        return Err(Error::Pathway(format!(
            "fast length {fast_len} is not a multiple of slow length {slow_len}"
        )));
    }
    let stride = fast_len / slow_len;
    let pad_left = (kernel - 1) / 2;
    let w = g.param(store, weight);
    let b = g.param(store, bias);
    let conv = g.conv1d_time(f_fast, w, b, stride, pad_left, slow_len)?;
    g.mul(conv, s)
}

/// `F_fast + s·Proj(Interp(F_slow))`, or `F_fast` when `s` is below `threshold`.
pub fn slow_to_fast(
    g: &mut Graph,
    store: &ParamStore,
    f_slow: Var,
    f_fast: Var,
    s: Var,
    proj: &Linear,
    threshold: f64,
) -> Result<Var> {
    if g.value(s).item() < threshold {
        return Ok(f_fast);
    }
    let len = g.shape(f_fast)[0];
    let upd = slow_to_fast_update(g, store, f_slow, len, s, proj)?;
    g.add(f_fast, upd)
}

/// `F_slow + s·TConv(F_fast)`, or `F_slow` when `s` is below `threshold`.
#[allow(clippy::too_many_arguments)]
pub fn fast_to_slow(
    g: &mut Graph,
    store: &ParamStore,
    f_fast: Var,
    f_slow: Var,
    s: Var,
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
    threshold: f64,
) -> Result<Var> {
    if g.value(s).item() < threshold {
        return Ok(f_slow);
    }
    let len = g.shape(f_slow)[0];
    let upd = fast_to_slow_update(g, store, f_fast, len, s, weight, bias, kernel)?;
    g.add(f_slow, upd)
}

/// One gated exchange round over all pathway pairs.
pub fn interact(
    g: &mut Graph,
    store: &ParamStore,
    pset: &PathwaySet,
    gates: &GateNet,
    fusion: &FusionParams,
    cfg: &DbiConfig,
) -> Result<(PathwaySet, GateMatrix)> {
    pset.validate(g)?;
    let n = pset.len();
    let (svars, mut matrix) = gate_scores(g, store, pset, gates, cfg.threshold)?;
    if cfg.interaction == Interaction::None {
        for row in &mut matrix.active {
            row.fill(false);
        }
    }
    let mut out = Vec::with_capacity(n);
    for dst in 0..n {
        let mut acc = pset.pathways[dst];
        let dst_len = g.shape(acc)[0];
        for src in 0..n {
            if src == dst || !matrix.active[src][dst] {
                continue;
            }
            let s = svars[pair_index(n, src.min(dst), src.max(dst))];
            let f_src = pset.pathways[src];
            let upd = match fusion.map(src, dst) {
                Some(DirectionalMap::SlowToFast(proj)) if cfg.interaction.allows_slow_to_fast() => {
                    slow_to_fast_update(g, store, f_src, dst_len, s, proj)?
                }
                Some(&DirectionalMap::FastToSlow { weight, bias, kernel }) if cfg.interaction.allows_fast_to_slow() => {
                    fast_to_slow_update(g, store, f_src, dst_len, s, weight, bias, kernel)?
                }
                _ => continue,
            };
            acc = g.add(acc, upd)?;
        }
        out.push(acc);
    }
    Ok((
        PathwaySet {
            pathways: out,
            rates: pset.rates.clone(),
        },
        matrix,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn pair_indices_are_dense() {
        let n = 4;
        let mut seen = vec![];
        for i in 0..n {
            for j in i + 1..n {
                seen.push(pair_index(n, i, j));
            }
        }
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn zero_gate_weights_give_half() {
        let mut store = ParamStore::new(0);
        let gates = GateNet::new(&mut store, "dbi", 3, 2);
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let f0 = g.constant(Tensor::new(&[4, 2], vec![1.0; 8]).unwrap());
        let f1 = g.constant(Tensor::new(&[2, 2], vec![2.0; 4]).unwrap());
        let f2 = g.constant(Tensor::new(&[1, 2], vec![-1.0, 3.0]).unwrap());
        let pset = PathwaySet::new(&g, vec![f0, f1, f2], vec![2, 4, 8]).unwrap();
        let (_, m) = gate_scores(&mut g, &store, &pset, &gates, 0.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.scores[i][j], if i == j { 0.0 } else { 0.5 });
                assert_eq!(m.active[i][j], i != j);
            }
        }
    }

    #[test]
    fn gate_scalar_oracle() {
        // D=2, two pathways; hidden width 2.
        let mut store = ParamStore::new(0);
        let gates = GateNet::new(&mut store, "dbi", 2, 2);
        let m = &gates.gates[0];
        let w1 = [0.1, -0.2, 0.3, 0.05, -0.1, 0.2, 0.4, -0.3]; // 4×2
        let b1 = [0.01, -0.02];
        let w2 = [0.5, -0.7];
        let b2 = [0.1];
        store.value_mut(m.fc1.weight).data_mut().copy_from_slice(&w1);
        store.value_mut(m.fc1.bias.unwrap()).data_mut().copy_from_slice(&b1);
        store.value_mut(m.fc2.weight).data_mut().copy_from_slice(&w2);
        store.value_mut(m.fc2.bias.unwrap()).data_mut().copy_from_slice(&b2);

        let fast = [[1.0, 2.0], [3.0, -1.0]];
        let slow = [[0.5, 0.25]];
        let mut g = Graph::new();
        let f0 = g.constant(Tensor::new(&[2, 2], fast.concat()).unwrap());
        let f1 = g.constant(Tensor::new(&[1, 2], slow.concat()).unwrap());
        let pset = PathwaySet::new(&g, vec![f0, f1], vec![2, 4]).unwrap();
        let (_, mat) = gate_scores(&mut g, &store, &pset, &gates, 0.5).unwrap();

        let x = [2.0, 0.5, 0.5, 0.25]; // [mean fast ; mean slow]
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let h: Vec<f64> = (0..2)
            .map(|c| gelu((0..4).map(|r| x[r] * w1[r * 2 + c]).sum::<f64>() + b1[c]))
            .collect();
        let logit = h[0] * w2[0] + h[1] * w2[1] + b2[0];
        let s = 1.0 / (1.0 + (-logit).exp());
        assert!((mat.scores[0][1] - s).abs() < 1e-12);
        assert_eq!(mat.scores[1][0], mat.scores[0][1]);
    }

    #[test]
    fn single_frame_summary_is_the_frame() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let m = g.mean(f, 0).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn pathway_validation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[4, 2]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let c = g.constant(Tensor::zeros(&[1, 2]));
        assert!(PathwaySet::new(&g, vec![a, b, c], vec![2, 4, 8]).is_ok());
        assert!(PathwaySet::new(&g, vec![a, c], vec![2, 4]).is_err());
        assert!(PathwaySet::new(&g, vec![b, a], vec![4, 2]).is_err());
    }

    #[test]
    fn fast_to_slow_rejects_indivisible() {
        let mut store = ParamStore::new(0);
        let w = store.zeros("w", &[3, 2, 2]);
        let b = store.zeros("b", &[2]);
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[6, 2]));
        let s = g.scalar(1.0);
        assert!(matches!(
            fast_to_slow_update(&mut g, &store, f, 4, s, w, b, 3),
            Err(Error::Pathway(_))
        ));
    }
}
