//! The full clip classifier: aggregation → interaction → experts → readout.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dbi::{self, DbiConfig, FusionParams, GateMatrix, GateNet, PathwaySet};
use crate::error::{Error, Result};
use crate::hmoe::{Combination, ExpertLayer, Readout};
use crate::params::ParamStore;
use crate::rgsta::{self, MergeTrace, PoolKind, RgstaConfig, RgstaParams, ScoreMixing};
use crate::tensor::Tensor;

/// How each pathway is formed from the raw frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Keep the top-scored frame of each group, merge nothing.
    Hard,
    /// Channelwise mean of each group.
    Mean,
    /// Channelwise max of each group.
    Max,
    /// Keep the top-scored frame and soft-merge the rest into it.
    Rgsta,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Hard,
        Aggregation::Mean,
        Aggregation::Max,
        Aggregation::Rgsta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Hard => "hard",
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
            Aggregation::Rgsta => "rgsta",
        }
    }

    /// Whether pathways come from learned frame scores.
    pub fn is_scored(self) -> bool {
        matches!(self, Aggregation::Hard | Aggregation::Rgsta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_classes: usize,
    /// Strictly increasing; each rate divides every larger one.
    pub rates: Vec<usize>,
    pub heads: usize,
    pub ffn_mult: usize,
    pub alpha: f64,
    pub tau: f64,
    pub delta: f64,
    pub metric_dim: usize,
    pub mixing: ScoreMixing,
    pub aggregation: Aggregation,
    pub dbi: DbiConfig,
    pub combination: Combination,
    /// Seed of the parameter initialisation.
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for width `dim` and `num_classes` classes.
    pub fn new(dim: usize, num_classes: usize) -> Self {
        let r = RgstaConfig::new(1, dim);
        ModelConfig {
            dim,
            num_classes,
            rates: vec![2, 4, 8, 16],
            heads: 4,
            ffn_mult: 4,
            alpha: r.alpha,
            tau: r.tau,
            delta: r.delta,
            metric_dim: r.metric_dim,
            mixing: r.mixing,
            aggregation: Aggregation::Rgsta,
            dbi: DbiConfig::default(),
            combination: Combination::GlobalAttn,
            seed: 0,
        }
    }

    pub fn rgsta(&self, rate: usize) -> RgstaConfig {
        RgstaConfig {
            rate,
            alpha: self.alpha,
            tau: self.tau,
            delta: self.delta,
            metric_dim: self.metric_dim,
            mixing: self.mixing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes == 0 {
            return Err(Error::config("dim and num_classes must be positive"));
        }
        if self.rates.is_empty() {
            return Err(Error::config("at least one rate is required"));
        }
        for (i, &r) in self.rates.iter().enumerate() {
            if r == 0 {
                return Err(Error::config("rates must be positive"));
            }
            for &r2 in &self.rates[i + 1..] {
                if r2 <= r || r2 % r != 0 {
                    return Err(Error::config(format!(
                        "rates must be strictly increasing and divide each other, got {:?}",
                        self.rates
                    )));
                }
            }
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("ffn_mult must be positive"));
        }
        if self.dbi.kernel == 0 || !self.dbi.threshold.is_finite() {
            return Err(Error::config("dbi kernel must be positive and threshold finite"));
        }
        self.rgsta(self.rates[0]).validate()
    }

    /// Whether a clip of `t` frames is compatible with every rate.
    pub fn check_len(&self, t: usize) -> Result<()> {
        for &r in &self.rates {
            if !t.is_multiple_of(r) || t == 0 {
                return Err(Error::Rate { t, rate: r });
            }
        }
        Ok(())
    }
}

/// Parameters and structure of the whole model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub rgsta: Vec<RgstaParams>,
    pub gates: GateNet,
    pub fusion: FusionParams,
    pub experts: Vec<ExpertLayer>,
    pub readout: Readout,
}

/// Everything one clip's forward pass produces.
pub struct ClipForward {
    /// `1 × C`.
    pub logits: Var,
    /// `1 × N` readout mass.
    pub weights: Var,
    /// Expert outputs, `T/r_i × D`.
    pub expert_outputs: Vec<Var>,
    /// Pathways after interaction, before the experts.
    pub pathways: Vec<Var>,
    /// Learned frame scores `[T]` per rate; empty for pooled aggregation.
    pub s_pred: Vec<Var>,
    /// Merge traces per rate; empty for pooled aggregation.
    pub traces: Vec<MergeTrace>,
    pub gates: GateMatrix,
}

impl Model {
    /// Builds and initialises every parameter. Creation order is fixed, so
    /// variants that differ only in one component share the initial values
    /// of all others.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let (d, n) = (config.dim, config.rates.len());
        let rgsta = config
            .rates
            .iter()
            .map(|r| RgstaParams::new(&mut store, &format!("rgsta_r{r}"), d, config.metric_dim))
            .collect();
        let gates = GateNet::new(&mut store, "dbi", n, d);
        let fusion = FusionParams::new(&mut store, "dbi", n, d, config.dbi.kernel);
        let experts = config
            .rates
            .iter()
            .map(|r| ExpertLayer::new(&mut store, &format!("expert_r{r}"), d, config.heads, config.ffn_mult))
            .collect::<Result<_>>()?;
        let readout = Readout::new(
            &mut store,
            "readout",
            config.combination,
            n,
            d,
            config.heads,
            config.num_classes,
        )?;
        Ok(Model {
            config,
            params: store,
            rgsta,
            gates,
            fusion,
            experts,
            readout,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.config.rates.len()
    }

    /// Forward pass of one clip `frames[T×D]`.
    pub fn forward(&self, g: &mut Graph, frames: &Tensor) -> Result<ClipForward> {
        let cfg = &self.config;
        if frames.rank() != 2 || frames.cols() != cfg.dim {
            return Err(Error::shape(format!(
                "clip has shape {:?}, model expects T×{}",
                frames.shape(),
                cfg.dim
            )));
        }
        cfg.check_len(frames.rows())?;
        let store = &self.params;
        let x = g.constant(frames.clone());

        let mut pathways = Vec::with_capacity(cfg.rates.len());
        let mut s_pred = Vec::new();
        let mut traces = Vec::new();
        for (&rate, params) in cfg.rates.iter().zip(&self.rgsta) {
            let rc = cfg.rgsta(rate);
            let scored = match cfg.aggregation {
                Aggregation::Rgsta => Some(rgsta::aggregate(g, store, params, &rc, x)?),
                Aggregation::Hard => Some(rgsta::hard_sample(g, store, params, &rc, x)?),
                Aggregation::Mean => {
                    pathways.push(rgsta::pool_groups(g, x, rate, PoolKind::Mean)?);
                    None
                }
                Aggregation::Max => {
                    pathways.push(rgsta::pool_groups(g, x, rate, PoolKind::Max)?);
                    None
                }
            };
            if let Some((p, trace, sp)) = scored {
                pathways.push(p);
                traces.push(trace);
                s_pred.push(sp);
            }
        }

        let pset = PathwaySet::new(g, pathways, cfg.rates.clone())?;
        let (pset, gates) = dbi::interact(g, store, &pset, &self.gates, &self.fusion, &cfg.dbi)?;

        let expert_outputs = pset
            .pathways
            .iter()
            .zip(&self.experts)
            .map(|(&p, e)| crate::hmoe::expert_forward(g, store, p, e))
            .collect::<Result<Vec<_>>>()?;
        let ro = self.readout.forward(g, store, &expert_outputs)?;
        Ok(ClipForward {
            logits: ro.logits,
            weights: ro.weights,
            expert_outputs,
            pathways: pset.pathways,
            s_pred,
            traces,
            gates,
        })
    }

    /// Class scores and readout mass of one clip, without keeping a graph.
    pub fn predict(&self, frames: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, frames)?;
        Ok((
            g.value(out.logits).data().to_vec(),
            g.value(out.weights).data().to_vec(),
        ))
    }
}
