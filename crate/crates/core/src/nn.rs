//! Parameterized building blocks shared by the model stages.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// `y = x · W + b` with `W[in×out]`; `b` may be absent.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: store.glorot(&format!("{name}.weight"), &[in_dim, out_dim], in_dim, out_dim),
            bias: Some(store.zeros(&format!("{name}.bias"), &[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: store.glorot(&format!("{name}.weight"), &[in_dim, out_dim], in_dim, out_dim),
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.linear(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.ones(&format!("{name}.gain"), &[dim]),
            bias: store.zeros(&format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two linear maps with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}
