//! Finite-difference checks of every module's parameters on small seeded
//! inputs: D=8, T=8, rates {2, 4}.

#![allow(dead_code)]

use vidprism::dbi::{self, DbiConfig, FusionParams, GateNet, PathwaySet};
use vidprism::feature_io::{generate_synthetic, SyntheticSpec};
use vidprism::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use vidprism::hmoe::{Combination, ExpertLayer, Readout};
use vidprism::model::{Aggregation, Model, ModelConfig};
use vidprism::objectives::{self, LossWeights};
use vidprism::rgsta::{self, RgstaConfig, RgstaParams};
use vidprism::trainer::batch_forward;
use vidprism::{Graph, ParamStore, Result, Tensor, Var};

use super::oracles::{random_tensor, randomize};

pub const D: usize = 8;
pub const T: usize = 8;
pub const RATES: [usize; 2] = [2, 4];

fn probe_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let p = g.constant(random_tensor(seed, g.shape(y), 1.0));
    let m = g.mul(y, p)?;
    Ok(g.sum_all(m))
}

fn check(store: &mut ParamStore, f: impl FnMut(&mut Graph, &ParamStore) -> Result<Var>) -> GradCheckReport {
    grad_check(store, f, &GradCheckOptions::default()).expect("finite gradients")
}

/// Aggregation at both rates: probe-weighted pathways plus the ranking loss,
/// so the score path receives gradient.
pub fn rgsta_report(seed: u64) -> GradCheckReport {
    let mut store = ParamStore::new(seed);
    let params: Vec<RgstaParams> = RATES
        .iter()
        .map(|r| RgstaParams::new(&mut store, &format!("r{r}"), D, D / 2))
        .collect();
    randomize(&mut store, seed, 0.5);
    let frames = random_tensor(seed + 1, &[T, D], 1.0);
    check(&mut store, |g, s| {
        let x = g.constant(frames.clone());
        let mut terms = Vec::new();
        for (&rate, p) in RATES.iter().zip(&params) {
            let cfg = RgstaConfig::new(rate, D);
            let (path, trace, s_pred) = rgsta::aggregate(g, s, p, &cfg, x)?;
            terms.push(probe_sum(g, path, seed + rate as u64)?);
            let tgt = g.constant(Tensor::from_vec(trace.s_tgt));
            terms.push(objectives::loss_rank(g, &[s_pred], &[tgt], 1.0)?);
            // The ranking loss ignores a constant shift of s_pred; probing
            // the scores directly covers the score-path biases too.
            terms.push(probe_sum(g, s_pred, seed + 40 + rate as u64)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok(total)
    })
}

/// Interaction with every pair active.
pub fn dbi_report(seed: u64) -> GradCheckReport {
    let mut store = ParamStore::new(seed);
    let gates = GateNet::new(&mut store, "dbi", 2, D);
    let fusion = FusionParams::new(&mut store, "dbi", 2, D, 3);
    randomize(&mut store, seed, 0.5);
    let inputs: Vec<Tensor> = RATES
        .iter()
        .map(|r| random_tensor(seed + *r as u64, &[T / r, D], 1.0))
        .collect();
    let cfg = DbiConfig {
        threshold: 0.0,
        ..Default::default()
    };
    check(&mut store, |g, s| {
        let vars = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let pset = PathwaySet::new(g, vars, RATES.to_vec())?;
        let (out, _) = dbi::interact(g, s, &pset, &gates, &fusion, &cfg)?;
        let a = probe_sum(g, out.pathways[0], seed + 10)?;
        let b = probe_sum(g, out.pathways[1], seed + 11)?;
        g.add(a, b)
    })
}

pub fn expert_report(seed: u64) -> GradCheckReport {
    let mut store = ParamStore::new(seed);
    let e = ExpertLayer::new(&mut store, "e", D, 2, 4).unwrap();
    randomize(&mut store, seed, 0.5);
    let f = random_tensor(seed + 2, &[T / RATES[0], D], 1.0);
    check(&mut store, |g, s| {
        let x = g.constant(f.clone());
        let y = vidprism::hmoe::expert_forward(g, s, x, &e)?;
        probe_sum(g, y, seed + 3)
    })
}

/// Global-query readout: logits and readout mass.
pub fn readout_report(seed: u64) -> GradCheckReport {
    let mut store = ParamStore::new(seed);
    let ro = Readout::new(&mut store, "ro", Combination::GlobalAttn, 2, D, 2, 4).unwrap();
    randomize(&mut store, seed, 0.5);
    let experts: Vec<Tensor> = RATES
        .iter()
        .map(|r| random_tensor(seed + 20 + *r as u64, &[T / r, D], 1.0))
        .collect();
    check(&mut store, |g, s| {
        let vars: Vec<Var> = experts.iter().map(|t| g.constant(t.clone())).collect();
        let out = ro.forward(g, s, &vars)?;
        let a = probe_sum(g, out.logits, seed + 4)?;
        let b = probe_sum(g, out.weights, seed + 5)?;
        g.add(a, b)
    })
}

/// Every loss term with respect to the parameters producing its inputs.
pub fn objectives_report(seed: u64) -> GradCheckReport {
    let mut store = ParamStore::new(seed);
    let logits = store.zeros("logits", &[3, 4]);
    let s_pred = store.zeros("s_pred", &[T]);
    let e1 = store.zeros("expert_a", &[4, D]);
    let e2 = store.zeros("expert_b", &[2, D]);
    let w_logits = store.zeros("w_logits", &[3, 2]);
    randomize(&mut store, seed, 1.0);
    let s_tgt = random_tensor(seed + 6, &[T], 1.0);
    check(&mut store, |g, s| {
        let l = g.param(s, logits);
        let cls = objectives::loss_cls(g, l, &[0, 3, 1])?;
        let sp = g.param(s, s_pred);
        let st = g.constant(s_tgt.clone());
        let rank = objectives::loss_rank(g, &[sp], &[st], 0.7)?;
        let (a, b) = (g.param(s, e1), g.param(s, e2));
        let div = objectives::loss_div(g, &[vec![a, b]])?;
        let wl = g.param(s, w_logits);
        let w = g.softmax(wl, 1)?;
        let gate = objectives::loss_gate(g, w)?;
        let terms = objectives::LossTerms { cls, rank, div, gate };
        let weights = LossWeights {
            lambda_rank: 0.5,
            lambda_div: 0.3,
            lambda_gate: 0.2,
            rank_temperature: 0.7,
        };
        Ok(objectives::loss_total(g, terms, &weights)?.0)
    })
}

/// The whole model on a 2-clip batch with the default loss weights.
pub fn model_report(seed: u64) -> GradCheckReport {
    model_report_with(seed, &GradCheckOptions::default())
}

pub fn model_report_with(seed: u64, opts: &GradCheckOptions) -> GradCheckReport {
    let spec = SyntheticSpec {
        num_classes: 4,
        clips_per_class: 1,
        t: T,
        d: D,
        content_axis_count: 2,
        seed,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let mut mc = ModelConfig::new(D, 4);
    mc.rates = RATES.to_vec();
    mc.heads = 2;
    mc.seed = seed;
    mc.aggregation = Aggregation::Rgsta;
    mc.dbi.threshold = 0.0;
    let mut model = Model::new(mc).unwrap();
    randomize(&mut model.params, seed, 0.5);
    let mut store = model.params.clone();
    let clips = [&ds.clips[0], &ds.clips[3]];
    let weights = LossWeights::default();
    grad_check(
        &mut store,
        |g, s| {
            model.params = s.clone();
            Ok(batch_forward(g, &model, &clips, &weights)?.loss)
        },
        opts,
    )
    .expect("finite gradients")
}

pub fn all_reports(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("rgsta", rgsta_report(seed)),
        ("dbi", dbi_report(seed)),
        ("expert", expert_report(seed)),
        ("readout", readout_report(seed)),
        ("objectives", objectives_report(seed)),
        ("model", model_report(seed)),
    ]
}
