//! Small layer building blocks shared by the encoders and the decoder.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnMask, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Float;

pub const LN_EPS: Float = 1e-5;

/// `x · W + b` with `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_linear_weight(&format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add_const(&format!("{name}.b"), &[1, fan_out], 0.0));
        Self { w, b }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let y = s.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.p(b);
                s.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_const(&format!("{name}.gamma"), &[1, dim], 1.0),
            beta: store.add_const(&format!("{name}.beta"), &[1, dim], 0.0),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.layer_norm(x, g, b, LN_EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Two linear layers with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.gelu(h);
        self.fc2.forward(s, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.fc1.params(), self.fc2.params()].concat()
    }
}

/// Multi-head attention with separate query and memory inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    /// Returns the output and the raw attention node (for inspecting weights).
    pub fn forward(&self, s: &mut Session<'_>, x: Var, memory: Var, mask: AttnMask) -> Result<(Var, Var)> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, memory)?;
        let v = self.v.forward(s, memory)?;
        let a = s.attention(q, k, v, self.heads, mask)?;
        Ok((self.o.forward(s, a)?, a))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.q.params(), self.k.params(), self.v.params(), self.o.params()].concat()
    }
}
