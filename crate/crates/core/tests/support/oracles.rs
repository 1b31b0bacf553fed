//! Naive loop implementations used as independent references. Nothing
//! here touches the autodiff graph; parameters are read straight out of the
//! store as plain nested vectors.

#![allow(dead_code)]

use rand::Rng;
use vidprism::dbi::DirectionalMap;
use vidprism::hmoe::{Attention, ExpertLayer, Readout};
use vidprism::nn::{LayerNorm, Linear, Mlp};
use vidprism::params::rng_stream;
use vidprism::{ParamId, ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_tensor(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut rng = rng_stream(seed, 777);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]`
/// (layer-norm gains around 1) so that no parameter sits at its
/// structured initial value.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = rng_stream(seed, 778);
    for p in store.iter_mut() {
        let gain = p.name.ends_with(".gain");
        for v in p.value.data_mut() {
            *v = rng.random_range(-scale..scale) + if gain { 1.0 } else { 0.0 };
        }
    }
}

fn vec_of(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

pub fn linear_params(store: &ParamStore, l: &Linear) -> (Mat, Vec<f64>) {
    (
        mat(store.value(l.weight)),
        l.bias.map_or_else(|| vec![0.0; l.out_dim], |b| vec_of(store, b)),
    )
}

pub fn apply_linear(x: &Mat, (w, b): &(Mat, Vec<f64>)) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|o| b[o] + row.iter().enumerate().map(|(k, xv)| xv * w[k][o]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(c, v)| gain[c] * (v - mean) / (var + 1e-5).sqrt() + bias[c])
                .collect()
        })
        .collect()
}

pub fn ln_params(store: &ParamStore, ln: &LayerNorm) -> (Vec<f64>, Vec<f64>) {
    (vec_of(store, ln.gain), vec_of(store, ln.bias))
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &Mat) -> Mat {
    let h = apply_linear(x, &linear_params(store, &m.fc1));
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    apply_linear(&h, &linear_params(store, &m.fc2))
}

/// Multi-head attention computed one head, one query and one key at a time.
/// Returns the projected output and `probs[head][query][key]`.
pub fn attention(store: &ParamStore, a: &Attention, xq: &Mat, xkv: &Mat) -> (Mat, Vec<Mat>) {
    let q = apply_linear(xq, &linear_params(store, &a.q));
    let k = apply_linear(xkv, &linear_params(store, &a.k));
    let v = apply_linear(xkv, &linear_params(store, &a.v));
    let d = q[0].len();
    let dh = d / a.heads;
    let mut concat = vec![vec![0.0; d]; xq.len()];
    let mut probs = Vec::new();
    for h in 0..a.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut ph = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for c in cols.clone() {
                concat[i][c] = p.iter().zip(&v).map(|(pj, vj)| pj * vj[c]).sum();
            }
            ph.push(p);
        }
        probs.push(ph);
    }
    (apply_linear(&concat, &linear_params(store, &a.o)), probs)
}

pub fn expert(store: &ParamStore, e: &ExpertLayer, f: &Mat) -> (Mat, Vec<Mat>) {
    let (attn, probs) = attention(store, &e.attn, f, f);
    let (g1, b1) = ln_params(store, &e.ln1);
    let h = layer_norm(&add(f, &attn), &g1, &b1);
    let ff = mlp(store, &e.ffn, &h);
    let (g2, b2) = ln_params(store, &e.ln2);
    (layer_norm(&add(&h, &ff), &g2, &b2), probs)
}

/// Global-query readout: `(v_fused, W, logits)`.
pub fn readout(store: &ParamStore, ro: &Readout, experts: &[Mat]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let q = mat(store.value(ro.query().expect("attention readout")));
    let concat: Mat = experts.iter().flat_map(|e| e.iter().cloned()).collect();
    let (out, probs) = attention(store, ro.attention().unwrap(), &q, &concat);
    let heads = probs.len() as f64;
    let mut w = Vec::new();
    let mut offset = 0;
    for e in experts {
        let mass: f64 = probs
            .iter()
            .map(|ph| ph[0][offset..offset + e.len()].iter().sum::<f64>())
            .sum();
        w.push(mass / heads);
        offset += e.len();
    }
    let logits = apply_linear(&out, &linear_params(store, &ro.classifier));
    (out[0].clone(), w, logits[0].clone())
}

/// Keep-one soft merge of a group, written directly from the definition.
pub fn soft_merge(group: &Mat, s_mix: &[f64], proj: &(Mat, Vec<f64>), tau: f64, delta: f64) -> Vec<f64> {
    let mut kept = 0;
    for i in 1..s_mix.len() {
        if s_mix[i] > s_mix[kept] {
            kept = i;
        }
    }
    let z: Mat = apply_linear(group, proj)
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-12;
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut merged = group[kept].clone();
    for (i, row) in group.iter().enumerate() {
        if i == kept {
            continue;
        }
        let s: f64 = z[i].iter().zip(&z[kept]).map(|(a, b)| a * b).sum::<f64>() / tau;
        // Softmax over a single kept column.
        let a = softmax(&[s])[0];
        for (m, x) in merged.iter_mut().zip(row) {
            *m += delta * a * x;
        }
    }
    merged
}

/// Zero-padded strided convolution with weight `w[k][din][dout]`.
pub fn conv_time(x: &Mat, w: &Tensor, b: &[f64], stride: usize, pad_left: usize, out_len: usize) -> Mat {
    let (k, din, dout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let wd = w.data();
    (0..out_len)
        .map(|o| {
            (0..dout)
                .map(|c| {
                    let mut acc = b[c];
                    for j in 0..k {
                        let t = (o * stride + j) as isize - pad_left as isize;
                        if t >= 0 && (t as usize) < x.len() {
                            for i in 0..din {
                                acc += wd[(j * din + i) * dout + c] * x[t as usize][i];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Endpoint-aligned linear resampling along time.
pub fn interp(x: &Mat, out_len: usize) -> Mat {
    let src = x.len();
    (0..out_len)
        .map(|t| {
            if src == 1 || out_len == 1 {
                return x[0].clone();
            }
            let pos = t as f64 * (src - 1) as f64 / (out_len - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let f = pos - lo as f64;
            x[lo].iter().zip(&x[hi]).map(|(a, b)| (1.0 - f) * a + f * b).collect()
        })
        .collect()
}

/// Update pathway `src` sends to pathway `dst` at gate score `s`.
pub fn directional_update(store: &ParamStore, map: &DirectionalMap, f_src: &Mat, dst_len: usize, s: f64) -> Mat {
    let upd = match map {
        DirectionalMap::SlowToFast(lin) => apply_linear(&interp(f_src, dst_len), &linear_params(store, lin)),
        DirectionalMap::FastToSlow { weight, bias, kernel } => conv_time(
            f_src,
            store.value(*weight),
            store.value(*bias).data(),
            f_src.len() / dst_len,
            (kernel - 1) / 2,
            dst_len,
        ),
    };
    upd.into_iter()
        .map(|r| r.into_iter().map(|v| v * s).collect())
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
