//! Per-frame graph encoder: edge-aware attention message passing over each
//! scene graph, mean pooling to one graph token per frame.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Message, Var};
use crate::embed::EmbeddedGraph;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphEncoderConfig {
    /// Width of node input rows (text dim + positional dim).
    pub node_dim: usize,
    pub edge_dim: usize,
    pub hidden: usize,
    pub d_g: usize,
    pub layers: usize,
    pub heads: usize,
    /// `false` skips message passing: a frame token is the pooled
    /// projection of its node rows alone.
    pub message_passing: bool,
}

impl Default for GraphEncoderConfig {
    fn default() -> Self {
        Self {
            node_dim: 68,
            edge_dim: 64,
            hidden: 64,
            d_g: 64,
            layers: 2,
            heads: 4,
            message_passing: true,
        }
    }
}

impl GraphEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "graph encoder: {} heads must divide hidden width {}",
                self.heads, self.hidden
            )));
        }
        if self.d_g == 0 || self.node_dim == 0 || self.edge_dim == 0 {
            return Err(Error::Config("graph encoder dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    edge_fwd: Linear,
    edge_rev: Linear,
    o: Linear,
    ln1: LayerNorm,
    ffn: Mlp,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub config: GraphEncoderConfig,
    input: Linear,
    layers: Vec<Layer>,
    output: Linear,
}

/// Several graphs laid out as one block-diagonal graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub nodes: Tensor,
    pub edges: Tensor,
    pub messages: Rc<Vec<Message>>,
    pub segments: Rc<Vec<usize>>,
    pub n_graphs: usize,
}

impl GraphBatch {
    /// Message list: every edge in both directions (reverse messages use the
    /// second half of the edge rows) plus a self-loop per node, so nodes
    /// without edges attend only to themselves.
    pub fn new(graphs: &[&EmbeddedGraph]) -> Result<Self> {
        let width = graphs.first().map_or(0, |g| g.node_matrix.cols());
        let edge_width = graphs
            .iter()
            .find(|g| g.edge_matrix.numel() > 0)
            .map_or(0, |g| g.edge_matrix.cols());
        let total_edges: usize = graphs.iter().map(|g| g.edge_index.len()).sum();
        let mut nodes = Vec::new();
        let mut edges = Vec::with_capacity(total_edges * edge_width);
        let mut messages = Vec::new();
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut edge_offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            let n = g.num_nodes();
            if n == 0 {
                return Err(Error::EmptyGraph);
            }
            if g.node_matrix.cols() != width {
                return Err(Error::shape("graph batch", g.node_matrix.shape(), &[n, width]));
            }
            nodes.extend_from_slice(g.node_matrix.data());
            edges.extend_from_slice(g.edge_matrix.data());
            for (i, &(s, d)) in g.edge_index.iter().enumerate() {
                let e = edge_offset + i;
                messages.push(Message { src: offset + s, dst: offset + d, edge: Some(e) });
                messages.push(Message { src: offset + d, dst: offset + s, edge: Some(total_edges + e) });
            }
            for i in 0..n {
                messages.push(Message { src: offset + i, dst: offset + i, edge: None });
            }
            segments.extend(std::iter::repeat(gi).take(n));
            offset += n;
            edge_offset += g.edge_index.len();
        }
        Ok(Self {
            nodes: Tensor::matrix(offset, width, nodes),
            edges: Tensor::matrix(total_edges, edge_width, edges),
            messages: Rc::new(messages),
            segments: Rc::new(segments),
            n_graphs: graphs.len(),
        })
    }
}

impl GraphEncoder {
    pub fn new(store: &mut ParamStore, config: GraphEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let input = Linear::new(store, "ge.in", config.node_dim, h, true, rng);
        let layers = (0..config.layers)
            .map(|i| {
                let n = |s: &str| format!("ge.l{i}.{s}");
                Layer {
                    q: Linear::new(store, &n("q"), h, h, true, rng),
                    k: Linear::new(store, &n("k"), h, h, true, rng),
                    v: Linear::new(store, &n("v"), h, h, true, rng),
                    edge_fwd: Linear::new(store, &n("edge_fwd"), config.edge_dim, h, false, rng),
                    edge_rev: Linear::new(store, &n("edge_rev"), config.edge_dim, h, false, rng),
                    o: Linear::new(store, &n("o"), h, h, true, rng),
                    ln1: LayerNorm::new(store, &n("ln1"), h),
                    ffn: Mlp::new(store, &n("ffn"), h, 2 * h, h, rng),
                    ln2: LayerNorm::new(store, &n("ln2"), h),
                }
            })
            .collect();
        let output = Linear::new(store, "ge.out", h, config.d_g, true, rng);
        Ok(Self { config, input, layers, output })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.input.params();
        for l in &self.layers {
            for lin in [&l.q, &l.k, &l.v, &l.edge_fwd, &l.edge_rev, &l.o] {
                out.extend(lin.params());
            }
            out.extend(l.ln1.params());
            out.extend(l.ffn.params());
            out.extend(l.ln2.params());
        }
        out.extend(self.output.params());
        out
    }

    /// One graph token per graph in the batch: `n_graphs × d_g`.
    pub fn forward(&self, s: &mut Session<'_>, batch: &GraphBatch) -> Result<Var> {
        if batch.nodes.cols() != self.config.node_dim {
            return Err(Error::shape("graph encoder input", batch.nodes.shape(), &[0, self.config.node_dim]));
        }
        let x = s.constant(batch.nodes.clone());
        let mut x = self.input.forward(s, x)?;
        if self.config.message_passing {
            let has_edges = batch.edges.numel() > 0;
            let e_raw = s.constant(batch.edges.clone());
            for l in &self.layers {
                let q = l.q.forward(s, x)?;
                let k = l.k.forward(s, x)?;
                let v = l.v.forward(s, x)?;
                let e = if has_edges {
                    let f = l.edge_fwd.forward(s, e_raw)?;
                    let r = l.edge_rev.forward(s, e_raw)?;
                    s.concat(&[f, r], crate::autodiff::Axis::Rows)?
                } else {
                    s.constant(Tensor::zeros(&[0, self.config.hidden]))
                };
                let a = s.graph_attention(q, k, v, e, self.config.heads, batch.messages.clone())?;
                let a = l.o.forward(s, a)?;
                let r = s.add(x, a)?;
                let h = l.ln1.forward(s, r)?;
                let f = l.ffn.forward(s, h)?;
                let r = s.add(h, f)?;
                x = l.ln2.forward(s, r)?;
            }
        }
        // mean pooling commutes with the affine output map, so pool first
        let pooled = s.segment_mean(x, batch.segments.clone(), batch.n_graphs)?;
        self.output.forward(s, pooled)
    }

    pub fn encode_graph(&self, store: &ParamStore, g: &EmbeddedGraph) -> Result<Vec<crate::tensor::Float>> {
        let batch = GraphBatch::new(&[g])?;
        let mut s = Session::new(store);
        let out = self.forward(&mut s, &batch)?;
        Ok(s.value(out).data().to_vec())
    }
}
