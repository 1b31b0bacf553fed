//! One seeded instance per call of each operation compared against its loop
//! reference. Every function returns the largest absolute disagreement.

#![allow(dead_code)]

use vidprism::dbi;
use vidprism::hmoe::{Combination, ExpertLayer, Readout};
use vidprism::rgsta::{self, RgstaConfig, RgstaParams};
use vidprism::{Graph, ParamStore};

use super::oracles::*;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Group of 4 frames, D=6, with seed-dependent temperature and strength.
/// Also checks that every merge-weight row sums to one.
pub fn soft_merge_error(seed: u64) -> f64 {
    let mut store = ParamStore::new(seed);
    let params = RgstaParams::new(&mut store, "m", 6, 3);
    randomize(&mut store, seed, 1.0);
    let mut cfg = RgstaConfig::new(4, 6);
    cfg.tau = 0.5 + seed as f64 * 0.1;
    cfg.delta = 0.25 * (seed % 5) as f64;
    let group = random_tensor(seed, &[4, 6], 2.0);
    let s_mix: Vec<f64> = random_tensor(seed + 100, &[4], 1.0).into_data();

    let mut g = Graph::new();
    let x = g.constant(group.clone());
    let (merged, trace) = rgsta::soft_merge_group(&mut g, &store, &params, &cfg, x, &s_mix).unwrap();
    let oracle = soft_merge(
        &mat(&group),
        &s_mix,
        &linear_params(&store, &params.metric_proj),
        cfg.tau,
        cfg.delta,
    );
    let row_err = trace
        .attention
        .iter()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    max_abs_diff(&mat(g.value(merged)), &vec![oracle]).max(row_err)
}

/// Expert output and every head's attention probabilities.
pub fn expert_error(seed: u64) -> f64 {
    let mut store = ParamStore::new(seed);
    let e = ExpertLayer::new(&mut store, "e", 4, 2, 4).unwrap();
    randomize(&mut store, seed, 0.8);
    let f = random_tensor(seed, &[3, 4], 1.5);
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let (out, probs) = e.forward_traced(&mut g, &store, x).unwrap();
    let (oracle, oracle_probs) = expert(&store, &e, &mat(&f));
    let mut err = max_abs_diff(&mat(g.value(out)), &oracle);
    for (p, q) in probs.iter().zip(&oracle_probs) {
        err = err.max(max_abs_diff(&mat(g.value(*p)), q));
    }
    err
}

/// Three experts of lengths 4, 2, 1 with D=4, two heads, five classes.
pub fn readout_case(seed: u64) -> (ParamStore, Readout, Vec<Mat>) {
    let mut store = ParamStore::new(seed);
    let ro = Readout::new(&mut store, "ro", Combination::GlobalAttn, 3, 4, 2, 5).unwrap();
    randomize(&mut store, seed, 1.0);
    let experts = [4, 2, 1]
        .iter()
        .enumerate()
        .map(|(i, &t)| mat(&random_tensor(seed * 10 + i as u64, &[t, 4], 1.5)))
        .collect();
    (store, ro, experts)
}

/// `(v_fused, W, logits)` from the library.
pub fn run_readout(store: &ParamStore, ro: &Readout, experts: &[Mat]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let vars: Vec<_> = experts.iter().map(|e| g.constant(tensor(e))).collect();
    let out = ro.forward(&mut g, store, &vars).unwrap();
    let v = |x| g.value(x).data().to_vec();
    (v(out.v_fused), v(out.weights), v(out.logits))
}

pub fn readout_error(seed: u64) -> f64 {
    let (store, ro, experts) = readout_case(seed);
    let (v, w, logits) = run_readout(&store, &ro, &experts);
    let (ov, ow, ol) = readout(&store, &ro, &experts);
    max_diff(&v, &ov).max(max_diff(&w, &ow)).max(max_diff(&logits, &ol))
}

/// Residual fast→slow update over varying kernels and length ratios.
pub fn fast_to_slow_error(seed: u64) -> f64 {
    let mut store = ParamStore::new(seed);
    let kernel = [1, 3, 5][seed as usize % 3];
    let w = store.glorot("w", &[kernel, 4, 3], 4, 3);
    let b = store.zeros("b", &[3]);
    randomize(&mut store, seed, 1.0);
    let (t_fast, t_slow) = [(8, 4), (8, 2), (16, 2), (4, 1)][seed as usize % 4];
    let fast = random_tensor(seed, &[t_fast, 4], 1.0);
    let slow = random_tensor(seed + 50, &[t_slow, 3], 1.0);
    let s_val = 0.5 + 0.02 * seed as f64;
    let mut g = Graph::new();
    let xf = g.constant(fast.clone());
    let xs = g.constant(slow.clone());
    let s = g.scalar(s_val);
    let out = dbi::fast_to_slow(&mut g, &store, xf, xs, s, w, b, kernel, 0.5).unwrap();
    let upd = conv_time(
        &mat(&fast),
        store.value(w),
        store.value(b).data(),
        t_fast / t_slow,
        (kernel - 1) / 2,
        t_slow,
    );
    let scaled: Mat = upd.iter().map(|r| r.iter().map(|v| v * s_val).collect()).collect();
    max_abs_diff(&mat(g.value(out)), &add(&mat(&slow), &scaled))
}
