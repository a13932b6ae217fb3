//! Temporal encoding of graph tokens and the query-token compressor.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnMask, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Float, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum TemporalKind {
    /// Learnable `cos(t·ω + φ)` added to each token.
    #[serde(rename = "te", alias = "TE")]
    Te,
    /// Fixed sinusoid added to each token.
    #[serde(rename = "ape", alias = "APE")]
    Ape,
    /// Rotation of consecutive feature pairs by `t·θ_j`.
    #[default]
    #[serde(rename = "rope", alias = "RoPE")]
    Rope,
}

impl TemporalKind {
    pub const ALL: [TemporalKind; 3] = [TemporalKind::Te, TemporalKind::Ape, TemporalKind::Rope];

    pub fn as_str(self) -> &'static str {
        match self {
            TemporalKind::Te => "te",
            TemporalKind::Ape => "ape",
            TemporalKind::Rope => "rope",
        }
    }
}

impl fmt::Display for TemporalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemporalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "te" => Ok(TemporalKind::Te),
            "ape" => Ok(TemporalKind::Ape),
            "rope" => Ok(TemporalKind::Rope),
            other => Err(Error::Config(format!("unknown temporal encoding {other:?}"))),
        }
    }
}

fn frequency(j: usize, d: usize) -> f64 {
    ROPE_BASE.powf(-2.0 * j as f64 / d as f64)
}

/// Sinusoid at position `t`: sin on even columns, cos on odd columns, pair
/// `j` at frequency `base^(−2j/d)`.
pub fn sinusoid(t: u64, d: usize) -> Vec<Float> {
    (0..d)
        .map(|i| {
            let a = t as f64 * frequency(i / 2, d);
            (if i % 2 == 0 { a.sin() } else { a.cos() }) as Float
        })
        .collect()
}

/// Cos/sin tables for rotating an `m × d` matrix at positions `t`.
pub fn rope_tables(t: &[u64], d: usize) -> (Vec<Float>, Vec<Float>) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(t.len() * half);
    let mut sin = Vec::with_capacity(t.len() * half);
    for &ti in t {
        for j in 0..half {
            let a = ti as f64 * frequency(j, d);
            cos.push(a.cos() as Float);
            sin.push(a.sin() as Float);
        }
    }
    (cos, sin)
}

#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub kind: TemporalKind,
    pub d: usize,
    omega: Option<ParamId>,
    phi: Option<ParamId>,
}

impl TemporalEncoder {
    pub fn new(store: &mut ParamStore, kind: TemporalKind, d: usize) -> Result<Self> {
        if kind == TemporalKind::Rope && d % 2 != 0 {
            return Err(Error::Config(format!("rotary encoding needs an even width, got {d}")));
        }
        let (omega, phi) = if kind == TemporalKind::Te {
            // start at the sinusoid frequencies, zero phase
            let w: Vec<Float> = (0..d).map(|i| frequency(i / 2, d) as Float).collect();
            (
                Some(store.add("te.omega", crate::params::Group::Base, Tensor::matrix(1, d, w))),
                Some(store.add_const("te.phi", &[1, d], 0.0)),
            )
        } else {
            (None, None)
        };
        Ok(Self { kind, d, omega, phi })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.omega.into_iter().chain(self.phi).collect()
    }

    pub fn apply(&self, s: &mut Session<'_>, m: Var, t: &[u64]) -> Result<Var> {
        let shape = s.shape(m).to_vec();
        if shape.len() != 2 || shape[0] != t.len() || shape[1] != self.d {
            return Err(Error::shape("temporal encoding", &shape, &[t.len(), self.d]));
        }
        match self.kind {
            TemporalKind::Ape => {
                let pe: Vec<Float> = t.iter().flat_map(|&ti| sinusoid(ti, self.d)).collect();
                let pe = s.constant(Tensor::matrix(t.len(), self.d, pe));
                s.add(m, pe)
            }
            TemporalKind::Te => {
                let tcol = s.constant(Tensor::matrix(t.len(), 1, t.iter().map(|&x| x as Float).collect()));
                let omega = s.p(self.omega.expect("te has frequencies"));
                let phi = s.p(self.phi.expect("te has phases"));
                let a = s.matmul(tcol, omega)?;
                let a = s.add_row(a, phi)?;
                let pe = s.cos(a);
                s.add(m, pe)
            }
            TemporalKind::Rope => {
                let (cos, sin) = rope_tables(t, self.d);
                s.rotate_pairs(m, cos, sin)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QFormerConfig {
    pub d_g: usize,
    pub k: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self { d_g: 64, k: 1, layers: 2, heads: 4 }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    ln_mem: LayerNorm,
    cross: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

/// `k` learnable queries that cross-attend to the graph-token sequence.
#[derive(Clone, Debug)]
pub struct QFormer {
    pub config: QFormerConfig,
    queries: ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
}

/// Cross-attention weights of one head: `k × m`, rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub weights: Tensor,
}

impl QFormer {
    pub fn new(store: &mut ParamStore, config: QFormerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = config.d_g;
        if config.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!("{} heads must divide d_g={d}", config.heads)));
        }
        let queries = store.add_normal("qf.queries", &[config.k, d], 0.02, rng);
        let blocks = (0..config.layers)
            .map(|i| {
                let n = |s: &str| format!("qf.l{i}.{s}");
                Block {
                    ln_self: LayerNorm::new(store, &n("ln_self"), d),
                    self_attn: MultiHeadAttention::new(store, &n("self"), d, config.heads, rng),
                    ln_cross: LayerNorm::new(store, &n("ln_cross"), d),
                    ln_mem: LayerNorm::new(store, &n("ln_mem"), d),
                    cross: MultiHeadAttention::new(store, &n("cross"), d, config.heads, rng),
                    ln_ffn: LayerNorm::new(store, &n("ln_ffn"), d),
                    ffn: Mlp::new(store, &n("ffn"), d, 4 * d, d, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(store, "qf.ln_out", d);
        Ok(Self { config, queries, blocks, ln_out })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.queries];
        for b in &self.blocks {
            out.extend(b.ln_self.params());
            out.extend(b.self_attn.params());
            out.extend(b.ln_cross.params());
            out.extend(b.ln_mem.params());
            out.extend(b.cross.params());
            out.extend(b.ln_ffn.params());
            out.extend(b.ffn.params());
        }
        out.extend(self.ln_out.params());
        out
    }

    /// Compress `m × d_g` to `k × d_g`. Also returns the cross-attention
    /// nodes, one per layer.
    pub fn forward(&self, s: &mut Session<'_>, tokens: Var) -> Result<(Var, Vec<Var>)> {
        let shape = s.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_g || shape[0] == 0 {
            return Err(Error::shape("qformer input", &shape, &[0, self.config.d_g]));
        }
        if self.config.k > shape[0] {
            log::warn!("{} query tokens exceed sequence length {}", self.config.k, shape[0]);
        }
        let mut x = s.p(self.queries);
        let mut cross_nodes = Vec::new();
        for b in &self.blocks {
            let h = b.ln_self.forward(s, x)?;
            let (a, _) = b.self_attn.forward(s, h, h, AttnMask::None)?;
            x = s.add(x, a)?;
            let h = b.ln_cross.forward(s, x)?;
            let mem = b.ln_mem.forward(s, tokens)?;
            let (a, probs) = b.cross.forward(s, h, mem, AttnMask::None)?;
            cross_nodes.push(probs);
            x = s.add(x, a)?;
            let h = b.ln_ffn.forward(s, x)?;
            let f = b.ffn.forward(s, h)?;
            x = s.add(x, f)?;
        }
        let out = self.ln_out.forward(s, x)?;
        Ok((out, cross_nodes))
    }

    pub fn compress(&self, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(store);
        let t = s.constant(tokens.clone());
        let (out, _) = self.forward(&mut s, t)?;
        Ok(s.value(out).clone())
    }

    pub fn attention_maps(&self, store: &ParamStore, tokens: &Tensor) -> Result<Vec<AttentionMap>> {
        let mut s = Session::new(store);
        let t = s.constant(tokens.clone());
        let (_, nodes) = self.forward(&mut s, t)?;
        let (k, m) = (self.config.k, tokens.rows());
        let mut maps = Vec::new();
        for (layer, node) in nodes.iter().enumerate() {
            let (heads, probs) = s.attention_probs(*node).expect("cross-attention node");
            for head in 0..heads {
                let w = probs[head * k * m..(head + 1) * k * m].to_vec();
                maps.push(AttentionMap { layer, head, weights: Tensor::matrix(k, m, w) });
            }
        }
        Ok(maps)
    }
}

/// CSV with columns `layer,head,query_index,frame_index,weight`; frame
/// indices are the original `t` values.
pub fn write_attention_csv(maps: &[AttentionMap], t: &[u64], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "layer,head,query_index,frame_index,weight")?;
    for map in maps {
        let (k, m) = map.weights.dims2();
        for q in 0..k {
            for f in 0..m {
                writeln!(out, "{},{},{},{},{}", map.layer, map.head, q, t[f], map.weights.at(q, f))?;
            }
        }
    }
    Ok(())
}
