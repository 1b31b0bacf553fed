//! Reverse-mode differentiation over a per-step tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation
//! evaluates eagerly, appends a node holding its value, and remembers
//! enough to push gradients back to its inputs. Parameters enter the
//! graph once per tape via [`Graph::param`]; after [`Graph::backward`]
//! their gradients are accumulated into the owning [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_split, broadcast_index, broadcast_shape, matmul_raw, transpose_raw, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        input: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Sum {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    Max {
        input: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    L2Norm {
        input: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    InterpTime {
        input: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_left: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not influence
    /// the loss or is untracked.
    pub fn get(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(graph.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate(&self, graph: &Graph, store: &mut ParamStore) {
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                let p = store.get_mut(*id);
                for (acc, x) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Source positions for piecewise-linear resampling of `src` steps onto
/// `dst` steps with endpoints aligned: `(lo, hi, frac)` per output step.
pub(crate) fn interp_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|t| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = t as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// An input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is recorded (retrievable via [`Gradients::get`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    /// A gradient-blocking copy.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise binary with broadcasting ----

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let (ia, ib) = (broadcast_index(&sa, &out_shape), broadcast_index(&sb, &out_shape));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(&out_shape, data)?, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let tracked = self.tracked(a);
        self.push(t, Op::Scale(a, c), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let tracked = self.tracked(a);
        self.push(t, Op::AddScalar(a), tracked)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ---- linear algebra and layout ----

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs rank 2, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let data = transpose_raw(self.value(a).data(), m, n);
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(&[n, m], data)?, Op::Transpose(a), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let tracked = self.tracked(a);
        Ok(self.push(t, Op::Reshape(a), tracked))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {:?}", base)));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d]) {
                return Err(Error::shape(format!("concat {:?} with {:?} on axis {axis}", base, s)));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} of axis {axis} in {:?}",
                start + len,
                s
            )));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&d[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Slice { input: a, axis, start },
            tracked,
        ))
    }

    /// Gathers entries along `axis` (indices may repeat).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || indices.iter().any(|&i| i >= s[axis]) {
            return Err(Error::shape(format!(
                "index_select {:?} on axis {axis} of {:?}",
                indices, s
            )));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * n + i) * inner;
                data.extend_from_slice(&d[base..base + inner]);
            }
        }
        let mut out_shape = s;
        out_shape[axis] = indices.len();
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::IndexSelect {
                input: a,
                axis,
                indices: indices.to_vec(),
            },
            tracked,
        ))
    }

    // ---- reductions (axis reductions keep the reduced axis with extent 1) ----

    fn check_axis(&self, a: Var, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {:?}", s)));
        }
        Ok(s)
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.check_axis(a, axis)?;
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    data[o * inner + j] += d[(o * n + i) * inner + j];
                }
            }
        }
        let mut out_shape = s;
        out_shape[axis] = 1;
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Sum { input: a, axis }, tracked))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.check_axis(a, axis)?[axis];
        let s = self.sum(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), tracked)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.check_axis(a, axis)?;
        let (outer, n, inner) = axis_split(&s, axis);
        if n == 0 {
            return Err(Error::shape("max over an empty axis"));
        }
        let d = self.value(a).data();
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    let x = d[(o * n + i) * inner + j];
                    if x > data[o * inner + j] {
                        data[o * inner + j] = x;
                        argmax[o * inner + j] = i;
                    }
                }
            }
        }
        let mut out_shape = s;
        out_shape[axis] = 1;
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Max { input: a, axis, argmax },
            tracked,
        ))
    }

    /// Euclidean norm along `axis`. The gradient at a zero vector is zero.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.check_axis(a, axis)?;
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut acc = 0.0;
                for i in 0..n {
                    let x = d[(o * n + i) * inner + j];
                    acc += x * x;
                }
                data[o * inner + j] = acc.sqrt();
            }
        }
        let mut out_shape = s;
        out_shape[axis] = 1;
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::L2Norm { input: a, axis }, tracked))
    }

    // ---- pointwise nonlinearities ----

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let tracked = self.tracked(a);
        self.push(t, op, tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `max(a, lo)`; the gradient is passed only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    // ---- normalizers ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.check_axis(a, axis)?;
        let data = softmax_raw(self.value(a).data(), &s, axis);
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(&s, data)?, Op::Softmax { input: a, axis }, tracked))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.check_axis(a, axis)?;
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut data = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let m = (0..n).map(|i| d[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|i| (d[at(i)] - m).exp()).sum::<f64>().ln();
                for i in 0..n {
                    data[at(i)] = d[at(i)] - lse;
                }
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(&s, data)?, Op::LogSoftmax { input: a, axis }, tracked))
    }

    /// Layer normalization over the last axis with the biased variance
    /// estimator, followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "layer_norm over last axis {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = self.value(x).numel() / d;
        let (xd, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    // ---- temporal resampling ----

    /// Piecewise-linear resampling of `a[T×D]` along time to `out_len`
    /// steps, endpoints mapped to endpoints. A single source step broadcasts.
    pub fn interp_time(&mut self, a: Var, out_len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] == 0 || out_len == 0 {
            return Err(Error::shape(format!("interp_time {:?} -> {out_len}", s)));
        }
        let (src, d) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut data = vec![0.0; out_len * d];
        for (t, (lo, hi, w)) in interp_taps(src, out_len).into_iter().enumerate() {
            for c in 0..d {
                data[t * d + c] = (1.0 - w) * x[lo * d + c] + w * x[hi * d + c];
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(&[out_len, d], data)?, Op::InterpTime { input: a }, tracked))
    }

    /// Strided temporal convolution of `x[T×Din]` with `w[k×Din×Dout]` and
    /// bias `b[Dout]`. Output step `o` reads input steps
    /// `o·stride − pad_left .. o·stride − pad_left + k`; out-of-range steps
    /// are zero.
    pub fn conv1d_time(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_left: usize,
        out_len: usize,
    ) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] || sb != [sw[2]] || stride == 0 {
            return Err(Error::shape(format!(
                "conv1d_time x {:?} w {:?} b {:?} stride {stride}",
                sx, sw, sb
            )));
        }
        let (t_in, din) = (sx[0], sx[1]);
        let (k, dout) = (sw[0], sw[2]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; out_len * dout];
        for o in 0..out_len {
            let orow = &mut out[o * dout..(o + 1) * dout];
            orow.copy_from_slice(bd);
            for j in 0..k {
                let t = (o * stride + j) as isize - pad_left as isize;
                if t < 0 || t as usize >= t_in {
                    continue;
                }
                let xrow = &xd[t as usize * din..(t as usize + 1) * din];
                for (i, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[(j * din + i) * dout..(j * din + i + 1) * dout];
                    for (ov, wv) in orow.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(
            Tensor::new(&[out_len, dout], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            },
            tracked,
        ))
    }

    // ---- composites ----

    /// `x · w + b` for `x[n×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Cosine similarity along `axis`: `Σ a·b / max(‖a‖·‖b‖, eps)`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, axis: usize, eps: f64) -> Result<Var> {
        let ab = self.mul(a, b)?;
        let dot = self.sum(ab, axis)?;
        let na = self.l2_norm(a, axis)?;
        let nb = self.l2_norm(b, axis)?;
        let den = self.mul(na, nb)?;
        let den = self.clamp_min(den, eps);
        self.div(dot, den)
    }

    // ---- reverse pass ----

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::contract("backward from a non-finite loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].tracked {
                self.push_back(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Back-propagates and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate(self, store);
        Ok(grads)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Sums an output-shaped gradient down to the broadcast source shape.
    fn unbroadcast(&self, g: &[f64], out_shape: &[usize], v: Var) -> Vec<f64> {
        let src = self.shape(v);
        if src == out_shape {
            return g.to_vec();
        }
        let idx = broadcast_index(src, out_shape);
        let mut r = vec![0.0; self.value(v).numel()];
        for (k, &j) in idx.iter().enumerate() {
            r[j] += g[k];
        }
        r
    }

    fn push_back(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, self.unbroadcast(g, out.shape(), *a));
                self.acc(grads, *b, self.unbroadcast(g, out.shape(), *b));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, self.unbroadcast(g, out.shape(), *a));
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc(grads, *b, self.unbroadcast(&neg, out.shape(), *b));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ia, ib) = (
                    broadcast_index(self.shape(*a), out.shape()),
                    broadcast_index(self.shape(*b), out.shape()),
                );
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    let ga: Vec<f64> = (0..g.len())
                        .map(|k| if is_div { g[k] / db[ib[k]] } else { g[k] * db[ib[k]] })
                        .collect();
                    self.acc(grads, *a, self.unbroadcast(&ga, out.shape(), *a));
                }
                if self.tracked(*b) {
                    let gb: Vec<f64> = (0..g.len())
                        .map(|k| {
                            if is_div {
                                -g[k] * da[ia[k]] / (db[ib[k]] * db[ib[k]])
                            } else {
                                g[k] * da[ia[k]]
                            }
                        })
                        .collect();
                    self.acc(grads, *b, self.unbroadcast(&gb, out.shape(), *b));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => self.acc(grads, *a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.tracked(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    self.acc(grads, *a, matmul_raw(g, &bt, m, n, k));
                }
                if self.tracked(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    self.acc(grads, *b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = out.shape();
                self.acc(grads, *a, transpose_raw(g, s[0], s[1]));
            }
            Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[base..base + len * inner]);
                    }
                    self.acc(grads, v, gv);
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let len = out.shape()[*axis];
                let mut gi = vec![0.0; self.value(*input).numel()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = (o * n + start) * inner;
                    gi[base..base + len * inner].copy_from_slice(src);
                }
                self.acc(grads, *input, gi);
            }
            Op::IndexSelect { input, axis, indices } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let mut gi = vec![0.0; self.value(*input).numel()];
                for o in 0..outer {
                    for (p, &idx) in indices.iter().enumerate() {
                        let src = (o * indices.len() + p) * inner;
                        let dst = (o * n + idx) * inner;
                        for j in 0..inner {
                            gi[dst + j] += g[src + j];
                        }
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::Sum { input, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let mut gi = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for j in 0..inner {
                            gi[(o * n + k) * inner + j] = g[o * inner + j];
                        }
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::Max { input, axis, argmax } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let mut gi = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        gi[(o * n + argmax[o * inner + j]) * inner + j] = g[o * inner + j];
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::L2Norm { input, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let x = self.value(*input).data();
                let nrm = out.data();
                let mut gi = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let r = nrm[o * inner + j];
                        if r == 0.0 {
                            continue;
                        }
                        let scale = g[o * inner + j] / r;
                        for k in 0..n {
                            let at = (o * n + k) * inner + j;
                            gi[at] = x[at] * scale;
                        }
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.acc(grads, *a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let gi = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .collect();
                self.acc(grads, *a, gi);
            }
            Op::Exp(a) => {
                self.acc(grads, *a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::ClampMin(a, lo) => {
                let x = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(g, &x)| if x > *lo { *g } else { 0.0 }).collect(),
                );
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + j;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            gi[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + j;
                        let gsum: f64 = (0..n).map(|k| g[at(k)]).sum();
                        for k in 0..n {
                            gi[at(k)] = g[at(k)] - y[at(k)].exp() * gsum;
                        }
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let rows = rstd.len();
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..d {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        let dh = gr[c] * gv[c];
                        m1 += dh;
                        m2 += dh * hr[c];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = rstd[r] * (gr[c] * gv[c] - m1 - hr[c] * m2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dgain);
                self.acc(grads, *bias, dbias);
            }
            Op::InterpTime { input } => {
                let (src, d) = (self.shape(*input)[0], self.shape(*input)[1]);
                let mut gi = vec![0.0; src * d];
                for (t, (lo, hi, w)) in interp_taps(src, out.shape()[0]).into_iter().enumerate() {
                    for c in 0..d {
                        gi[lo * d + c] += (1.0 - w) * g[t * d + c];
                        gi[hi * d + c] += w * g[t * d + c];
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            } => {
                let (t_in, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (k, dout) = (self.shape(*w)[0], self.shape(*w)[2]);
                let out_len = out.shape()[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; t_in * din];
                let mut dw = vec![0.0; k * din * dout];
                let mut db = vec![0.0; dout];
                for o in 0..out_len {
                    let grow = &g[o * dout..(o + 1) * dout];
                    for (acc, gv) in db.iter_mut().zip(grow) {
                        *acc += gv;
                    }
                    for j in 0..k {
                        let t = (o * stride + j) as isize - *pad_left as isize;
                        if t < 0 || t as usize >= t_in {
                            continue;
                        }
                        let t = t as usize;
                        for i in 0..din {
                            let base = (j * din + i) * dout;
                            let xv = xd[t * din + i];
                            let mut s = 0.0;
                            for c in 0..dout {
                                s += grow[c] * wd[base + c];
                                dw[base + c] += xv * grow[c];
                            }
                            dx[t * din + i] += s;
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax along `axis` of a raw buffer.
pub(crate) fn softmax_raw(d: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let m = (0..n).map(|i| d[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..n {
                let e = (d[at(i)] - m).exp();
                out[at(i)] = e;
                z += e;
            }
            for i in 0..n {
                out[at(i)] /= z;
            }
        }
    }
    out
}

/// Softmax of a 1-D slice.
pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    softmax_raw(x, &[x.len()], 0)
}
