//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as it executes. Values are stored on
//! the tape, [`Var`] is an index into it, and [`Tape::backward`] walks the
//! records in reverse to accumulate gradients. One tape serves one forward
//! pass; build a new tape per sample.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, Tensor, View};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masking rule for [`Tape::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
}

/// One message in a graph attention layer: node `src` sends to `dst`,
/// optionally through row `edge` of the edge-feature matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub edge: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// matrix + broadcast row vector
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, Float),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Float>,
        inv_std: Vec<Float>,
    },
    Gelu(Var),
    Cos(Var),
    Dropout {
        x: Var,
        mask: Vec<Float>,
    },
    Concat {
        parts: Vec<Var>,
        axis: Axis,
    },
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
    },
    Mean {
        x: Var,
        axis: Axis,
    },
    Sum(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<Float>,
        count: usize,
    },
    Rotate {
        x: Var,
        cos: Vec<Float>,
        sin: Vec<Float>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Float>,
    },
    GraphAttention {
        q: Var,
        k: Var,
        v: Var,
        e: Var,
        heads: usize,
        messages: Rc<Vec<Message>>,
        alpha: Vec<Float>,
    },
    SegmentMean {
        x: Var,
        segments: Rc<Vec<usize>>,
        counts: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

const GELU_C: Float = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Float = 0.044715;

fn gelu(x: Float) -> Float {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: Float) -> Float {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [Float]) {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [Float])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Gradients are only computed for leaves with
    /// `requires_grad` and whatever depends on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2();
        let (k2, n) = vb.dims2();
        if k != k2 || va.shape().len() > 2 || vb.shape().len() > 2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::new(va.data(), k, 1), View::new(vb.data(), n, 1), 0.0, &mut out, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`, with `a: m × k` and `b: n × k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2();
        let (n, k2) = vb.dims2();
        if k != k2 {
            return Err(Error::shape("matmul_t", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::new(va.data(), k, 1), View::transposed(vb.data(), k), 0.0, &mut out, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Add a `1 × n` (or length-`n`) row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let n = va.cols();
        if vr.numel() != n {
            return Err(Error::shape("add_row", va.shape(), vr.shape()));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *x += *b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: Float) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (length = cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Float) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.dims2();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.numel() != cols || vb.numel() != cols {
            return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<Float>() / cols as Float;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / cols as Float;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).map(Float::cos);
        self.push(out, Op::Cos(a), &[a])
    }

    /// Inverted dropout with a mask drawn from `seed`. `p == 0` is identity.
    pub fn dropout(&mut self, a: Var, p: Float, seed: u64) -> Var {
        if p <= 0.0 {
            return a;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<Float> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < p as f64 { 0.0 } else { keep })
            .collect();
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )
        .expect("mask matches input");
        self.push(out, Op::Dropout { x: a, mask }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let (_, cols0) = self.value(first).dims2();
        let (rows0, _) = self.value(first).dims2();
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.cols() != cols0 {
                        return Err(Error::shape("concat", self.value(first).shape(), v.shape()));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::matrix(rows, cols0, data)
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.rows() != rows0 {
                        return Err(Error::shape("concat", self.value(first).shape(), v.shape()));
                    }
                    cols += v.cols();
                }
                let mut data = Vec::with_capacity(rows0 * cols);
                for r in 0..rows0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::matrix(rows0, cols, data)
            }
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Rows or columns `start..start + len`.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.dims2();
        let out = match axis {
            Axis::Rows => {
                if start + len > rows {
                    return Err(Error::shape("slice", v.shape(), &[start, len]));
                }
                Tensor::matrix(len, cols, v.data()[start * cols..(start + len) * cols].to_vec())
            }
            Axis::Cols => {
                if start + len > cols {
                    return Err(Error::shape("slice", v.shape(), &[start, len]));
                }
                Tensor::from_fn(rows, len, |r, c| v.data()[r * cols + start + c])
            }
        };
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Mean over rows (→ `1 × cols`) or over columns (→ `rows × 1`).
    pub fn mean(&mut self, x: Var, axis: Axis) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.dims2();
        let out = match axis {
            Axis::Rows => Tensor::from_fn(1, cols, |_, c| {
                (0..rows).map(|r| v.data()[r * cols + c]).sum::<Float>() / rows as Float
            }),
            Axis::Cols => Tensor::from_fn(rows, 1, |r, _| v.row(r).iter().sum::<Float>() / cols as Float),
        };
        self.push(out, Op::Mean { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = t.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", t.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            Tensor::matrix(ids.len(), d, data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean token cross-entropy over the rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = self.value(logits);
        let (rows, vocab) = v.dims2();
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", v.shape(), &[targets.len()]));
        }
        let mut probs = v.data().to_vec();
        let mut loss = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            softmax_in_place(row);
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(Error::shape("cross_entropy", v.shape(), &[t]));
                }
                loss -= row[t].max(Float::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Config("cross_entropy without any target".into()));
        }
        let value = Tensor::scalar(loss / count as Float);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Rotate consecutive column pairs `(2j, 2j+1)` of row `r` by
    /// `angles[r][j]`, supplied as flattened cos/sin tables of size
    /// `rows × cols/2`.
    pub fn rotate_pairs(&mut self, x: Var, cos: Vec<Float>, sin: Vec<Float>) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.dims2();
        if cols % 2 != 0 || cos.len() != rows * cols / 2 || sin.len() != cos.len() {
            return Err(Error::shape("rotate_pairs", v.shape(), &[cos.len()]));
        }
        let half = cols / 2;
        let mut out = v.clone();
        for r in 0..rows {
            let row = out.row_mut(r);
            for j in 0..half {
                let (c, s) = (cos[r * half + j], sin[r * half + j]);
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                row[2 * j] = a * c - b * s;
                row[2 * j + 1] = a * s + b * c;
            }
        }
        Ok(self.push(out, Op::Rotate { x, cos, sin }, &[x]))
    }

    /// Scaled dot-product attention with `heads` heads splitting the columns.
    /// `q: n × D`, `k, v: m × D`; returns `n × D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = vq.dims2();
        let (m, dk) = vk.dims2();
        if dk != d || vv.dims2() != (m, d) {
            return Err(Error::shape("attention", vq.shape(), vk.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        if mask == AttnMask::Causal && n != m {
            return Err(Error::shape("attention(causal)", vq.shape(), vk.shape()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as Float).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                n,
                dh,
                m,
                scale,
                View::new(&vq.data()[h * dh..], d, 1),
                View::new(&vk.data()[h * dh..], 1, d),
                0.0,
                p,
                m,
            );
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                if mask == AttnMask::Causal {
                    for x in &mut row[i + 1..] {
                        *x = Float::NEG_INFINITY;
                    }
                }
                softmax_in_place(row);
            }
            gemm(n, m, dh, 1.0, View::new(p, m, 1), View::new(&vv.data()[h * dh..], d, 1), 0.0, &mut out[h * dh..], d);
        }
        Ok(self.push(
            Tensor::matrix(n, d, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights of an [`Tape::attention`] node as `heads × n × m`.
    pub fn attention_probs(&self, v: Var) -> Option<(usize, &[Float])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs)),
            _ => None,
        }
    }

    /// Edge-aware neighbourhood attention. For each message `s → d` through
    /// edge row `e`, head `h` scores `q_d · (k_s + e) / √dh`; scores are
    /// normalised over the messages arriving at `d`, and `d` receives the
    /// weighted sum of `v_s + e`. Nodes without incoming messages get zeros.
    pub fn graph_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        e: Var,
        heads: usize,
        messages: Rc<Vec<Message>>,
    ) -> Result<Var> {
        let (vq, vk, vv, ve) = (self.value(q), self.value(k), self.value(v), self.value(e));
        let (n, d) = vq.dims2();
        if vk.dims2() != (n, d) || vv.dims2() != (n, d) || (ve.numel() > 0 && ve.cols() != d) {
            return Err(Error::shape("graph_attention", vq.shape(), ve.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let n_edges = if ve.numel() == 0 { 0 } else { ve.rows() };
        for msg in messages.iter() {
            if msg.src >= n || msg.dst >= n || msg.edge.is_some_and(|r| r >= n_edges) {
                return Err(Error::shape("graph_attention", vq.shape(), &[msg.src, msg.dst]));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as Float).sqrt();
        let key = |msg: &Message, c: usize| -> (Float, Float) {
            let ef = msg.edge.map_or(0.0, |r| ve.data()[r * d + c]);
            (vk.data()[msg.src * d + c] + ef, vv.data()[msg.src * d + c] + ef)
        };
        let mut scores = vec![0.0; messages.len() * heads];
        for (i, msg) in messages.iter().enumerate() {
            for h in 0..heads {
                let mut s = 0.0;
                for c in h * dh..(h + 1) * dh {
                    s += vq.data()[msg.dst * d + c] * key(msg, c).0;
                }
                scores[i * heads + h] = s * scale;
            }
        }
        // normalise per (dst, head)
        let mut max = vec![Float::NEG_INFINITY; n * heads];
        for (i, msg) in messages.iter().enumerate() {
            for h in 0..heads {
                let slot = &mut max[msg.dst * heads + h];
                *slot = slot.max(scores[i * heads + h]);
            }
        }
        let mut denom = vec![0.0; n * heads];
        for (i, msg) in messages.iter().enumerate() {
            for h in 0..heads {
                let w = (scores[i * heads + h] - max[msg.dst * heads + h]).exp();
                scores[i * heads + h] = w;
                denom[msg.dst * heads + h] += w;
            }
        }
        let mut out = vec![0.0; n * d];
        for (i, msg) in messages.iter().enumerate() {
            for h in 0..heads {
                let a = scores[i * heads + h] / denom[msg.dst * heads + h];
                scores[i * heads + h] = a;
                for c in h * dh..(h + 1) * dh {
                    out[msg.dst * d + c] += a * key(msg, c).1;
                }
            }
        }
        Ok(self.push(
            Tensor::matrix(n, d, out),
            Op::GraphAttention {
                q,
                k,
                v,
                e,
                heads,
                messages,
                alpha: scores,
            },
            &[q, k, v, e],
        ))
    }

    /// Mean of the rows sharing a segment id; returns `n_segments × cols`.
    pub fn segment_mean(&mut self, x: Var, segments: Rc<Vec<usize>>, n_segments: usize) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.dims2();
        if segments.len() != rows {
            return Err(Error::shape("segment_mean", v.shape(), &[segments.len()]));
        }
        let mut counts = vec![0usize; n_segments];
        let mut out = vec![0.0; n_segments * cols];
        for (r, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::shape("segment_mean", v.shape(), &[s, n_segments]));
            }
            counts[s] += 1;
            for (o, x) in out[s * cols..(s + 1) * cols].iter_mut().zip(v.row(r)) {
                *o += *x;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(Error::EmptyGraph);
            }
            for o in &mut out[s * cols..(s + 1) * cols] {
                *o /= c as Float;
            }
        }
        Ok(self.push(
            Tensor::matrix(n_segments, cols, out),
            Op::SegmentMean { x, segments, counts },
            &[x],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.cols();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], va.shape(), |da| {
                        gemm(m, n, k, 1.0, View::new(gd, n, 1), View::transposed(vb.data(), n), 1.0, da, k)
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], vb.shape(), |db| {
                        gemm(k, m, n, 1.0, View::transposed(va.data(), k), View::new(gd, n, 1), 1.0, db, n)
                    });
                }
            }
            Op::MatMulT(a, b) => {
                // out = a · bᵀ, a: m×k, b: n×k
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.rows();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], va.shape(), |da| {
                        gemm(m, n, k, 1.0, View::new(gd, n, 1), View::new(vb.data(), k, 1), 1.0, da, k)
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], vb.shape(), |db| {
                        gemm(n, m, k, 1.0, View::transposed(gd, n), View::new(va.data(), k, 1), 1.0, db, k)
                    });
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], g.shape(), |d| add_into(d, gd));
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.shape(), |d| add_into(d, gd));
                }
                if self.wants(*row) {
                    let cols = g.cols();
                    accumulate(&mut grads[row.0], self.shape(*row), |d| {
                        for r in 0..g.rows() {
                            add_into(d, &gd[r * cols..(r + 1) * cols]);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], va.shape(), |d| {
                        for ((d, g), y) in d.iter_mut().zip(gd).zip(vb.data()) {
                            *d += g * y;
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], vb.shape(), |d| {
                        for ((d, g), x) in d.iter_mut().zip(gd).zip(va.data()) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.shape(), |d| {
                        for (d, g) in d.iter_mut().zip(gd) {
                            *d += g * s;
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let cols = y.cols();
                    accumulate(&mut grads[a.0], y.shape(), |d| {
                        for r in 0..y.rows() {
                            let (yr, gr) = (y.row(r), &gd[r * cols..(r + 1) * cols]);
                            let dot: Float = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                            for c in 0..cols {
                                d[r * cols + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = node.value.dims2();
                let vg = self.value(*gamma).data();
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], self.shape(*x), |dx| {
                        let mut gh = vec![0.0; cols];
                        for r in 0..rows {
                            let gr = &gd[r * cols..(r + 1) * cols];
                            let hr = &xhat[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                gh[c] = gr[c] * vg[c];
                            }
                            let mean_g = gh.iter().sum::<Float>() / cols as Float;
                            let mean_gh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<Float>() / cols as Float;
                            for c in 0..cols {
                                dx[r * cols + c] += inv_std[r] * (gh[c] - mean_g - hr[c] * mean_gh);
                            }
                        }
                    });
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], self.shape(*gamma), |dg| {
                        for r in 0..rows {
                            for c in 0..cols {
                                dg[c] += gd[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], self.shape(*beta), |db| {
                        for r in 0..rows {
                            add_into(db, &gd[r * cols..(r + 1) * cols]);
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let va = self.value(*a);
                    accumulate(&mut grads[a.0], va.shape(), |d| {
                        for ((d, g), x) in d.iter_mut().zip(gd).zip(va.data()) {
                            *d += g * gelu_grad(*x);
                        }
                    });
                }
            }
            Op::Cos(a) => {
                if self.wants(*a) {
                    let va = self.value(*a);
                    accumulate(&mut grads[a.0], va.shape(), |d| {
                        for ((d, g), x) in d.iter_mut().zip(gd).zip(va.data()) {
                            *d -= g * x.sin();
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.shape(), |d| {
                        for ((d, g), m) in d.iter_mut().zip(gd).zip(mask) {
                            *d += g * m;
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.value(*p).dims2();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], self.shape(*p), |d| match axis {
                            Axis::Rows => add_into(d, &gd[offset * cols..(offset + pr) * cols]),
                            Axis::Cols => {
                                for r in 0..pr {
                                    add_into(
                                        &mut d[r * pc..(r + 1) * pc],
                                        &gd[r * cols + offset..r * cols + offset + pc],
                                    );
                                }
                            }
                        });
                    }
                    offset += match axis {
                        Axis::Rows => pr,
                        Axis::Cols => pc,
                    };
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let (rows, cols) = self.value(*x).dims2();
                    let (gr, gc) = g.dims2();
                    accumulate(&mut grads[x.0], self.shape(*x), |d| match axis {
                        Axis::Rows => add_into(&mut d[start * cols..(start + gr) * cols], gd),
                        Axis::Cols => {
                            for r in 0..rows {
                                add_into(&mut d[r * cols + start..r * cols + start + gc], &gd[r * gc..(r + 1) * gc]);
                            }
                        }
                    });
                }
            }
            Op::Mean { x, axis } => {
                if self.wants(*x) {
                    let (rows, cols) = self.value(*x).dims2();
                    accumulate(&mut grads[x.0], self.shape(*x), |d| {
                        for r in 0..rows {
                            for c in 0..cols {
                                d[r * cols + c] += match axis {
                                    Axis::Rows => gd[c] / rows as Float,
                                    Axis::Cols => gd[r] / cols as Float,
                                };
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], self.shape(*x), |d| d.iter_mut().for_each(|v| *v += gd[0]));
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let cols = g.cols();
                    accumulate(&mut grads[table.0], self.shape(*table), |d| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut d[id * cols..(id + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let vocab = self.value(*logits).cols();
                    let s = gd[0] / *count as Float;
                    accumulate(&mut grads[logits.0], self.shape(*logits), |d| {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for c in 0..vocab {
                                d[r * vocab + c] += s * probs[r * vocab + c];
                            }
                            d[r * vocab + t] -= s;
                        }
                    });
                }
            }
            Op::Rotate { x, cos, sin } => {
                if self.wants(*x) {
                    let (rows, cols) = g.dims2();
                    let half = cols / 2;
                    accumulate(&mut grads[x.0], g.shape(), |d| {
                        for r in 0..rows {
                            for j in 0..half {
                                let (c, s) = (cos[r * half + j], sin[r * half + j]);
                                let (g0, g1) = (gd[r * cols + 2 * j], gd[r * cols + 2 * j + 1]);
                                d[r * cols + 2 * j] += g0 * c + g1 * s;
                                d[r * cols + 2 * j + 1] += -g0 * s + g1 * c;
                            }
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                ..
            } => self.attention_backward(gd, *q, *k, *v, *heads, probs, grads),
            Op::GraphAttention {
                q,
                k,
                v,
                e,
                heads,
                messages,
                alpha,
            } => self.graph_attention_backward(gd, [*q, *k, *v, *e], *heads, messages, alpha, grads),
            Op::SegmentMean { x, segments, counts } => {
                if self.wants(*x) {
                    let cols = g.cols();
                    accumulate(&mut grads[x.0], self.shape(*x), |d| {
                        for (r, &s) in segments.iter().enumerate() {
                            let inv = 1.0 / counts[s] as Float;
                            for c in 0..cols {
                                d[r * cols + c] += gd[s * cols + c] * inv;
                            }
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gd: &[Float],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Float],
        grads: &mut [Option<Tensor>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = vq.dims2();
        let m = vk.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as Float).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut dp = vec![0.0; n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            let go = View::new(&gd[h * dh..], d, 1);
            // dV_h = Pᵀ · dO_h
            gemm(m, n, dh, 1.0, View::transposed(p, m), go, 0.0, &mut dv[h * dh..], d);
            // dP = dO_h · V_hᵀ
            gemm(n, dh, m, 1.0, go, View::new(&vv.data()[h * dh..], 1, d), 0.0, &mut dp, m);
            // dS = P ∘ (dP − rowsum(dP ∘ P)), scaled
            for i in 0..n {
                let (pr, dr) = (&p[i * m..(i + 1) * m], &mut dp[i * m..(i + 1) * m]);
                let dot: Float = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            gemm(n, m, dh, 1.0, View::new(&dp, m, 1), View::new(&vk.data()[h * dh..], d, 1), 0.0, &mut dq[h * dh..], d);
            gemm(m, n, dh, 1.0, View::transposed(&dp, m), View::new(&vq.data()[h * dh..], d, 1), 0.0, &mut dk[h * dh..], d);
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                accumulate(&mut grads[var.0], self.shape(var), |d| add_into(d, &buf));
            }
        }
    }

    fn graph_attention_backward(
        &self,
        gd: &[Float],
        [q, k, v, e]: [Var; 4],
        heads: usize,
        messages: &[Message],
        alpha: &[Float],
        grads: &mut [Option<Tensor>],
    ) {
        let (vq, vk, vv, ve) = (self.value(q), self.value(k), self.value(v), self.value(e));
        let (n, d) = vq.dims2();
        let dh = d / heads;
        let scale = 1.0 / (dh as Float).sqrt();
        let ef = |msg: &Message, c: usize| msg.edge.map_or(0.0, |r| ve.data()[r * d + c]);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut de = vec![0.0; ve.numel()];
        // dα for each (message, head), then Σ_j α dα per (dst, head)
        let mut dalpha = vec![0.0; messages.len() * heads];
        let mut dot = vec![0.0; n * heads];
        for (i, msg) in messages.iter().enumerate() {
            for h in 0..heads {
                let a = alpha[i * heads + h];
                let mut s = 0.0;
                for c in h * dh..(h + 1) * dh {
                    let go = gd[msg.dst * d + c];
                    s += go * (vv.data()[msg.src * d + c] + ef(msg, c));
                    dv[msg.src * d + c] += a * go;
                    if let Some(r) = msg.edge {
                        de[r * d + c] += a * go;
                    }
                }
                dalpha[i * heads + h] = s;
                dot[msg.dst * heads + h] += a * s;
            }
        }
        for (i, msg) in messages.iter().enumerate() {
            for h in 0..heads {
                let a = alpha[i * heads + h];
                let ds = a * (dalpha[i * heads + h] - dot[msg.dst * heads + h]) * scale;
                for c in h * dh..(h + 1) * dh {
                    let qd = vq.data()[msg.dst * d + c];
                    dq[msg.dst * d + c] += ds * (vk.data()[msg.src * d + c] + ef(msg, c));
                    dk[msg.src * d + c] += ds * qd;
                    if let Some(r) = msg.edge {
                        de[r * d + c] += ds * qd;
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv), (e, de)] {
            if self.wants(var) {
                accumulate(&mut grads[var.0], self.shape(var), |d| add_into(d, &buf));
            }
        }
    }
}

fn add_into(dst: &mut [Float], src: &[Float]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_rule_and_error() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]), false);
        let b = t.leaf(Tensor::zeros(&[3, 4]), false);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 4]);
        match t.matmul(b, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![3, 4]);
                assert_eq!(rhs, vec![3, 4]);
            }
            _ => panic!("expected shape error"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(3, 5, |i, j| (i as Float) * 3.0 - (j * j) as Float), false);
        let y = t.softmax(x);
        for r in 0..3 {
            let s: Float = t.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_zero_is_identity_and_masks_reproduce() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(4, 8, |i, j| (i * 8 + j) as Float), true);
        assert_eq!(t.dropout(x, 0.0, 9), x);
        let a = t.dropout(x, 0.5, 9);
        let b = t.dropout(x, 0.5, 9);
        let c = t.dropout(x, 0.5, 10);
        assert_eq!(t.value(a), t.value(b));
        assert_ne!(t.value(a), t.value(c));
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::from_fn(3, 4, |i, j| if i == j { 40.0 } else { 0.0 }), true);
        let loss = t.cross_entropy(logits, &[Some(0), Some(1), Some(2)]).unwrap();
        assert!(t.value(loss).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_fn(2, 3, |i, j| (i + j) as Float), false);
        let b = t.leaf(Tensor::from_fn(2, 3, |i, j| if i == 0 { (i + j) as Float } else { 99.0 * j as Float }), false);
        let la = t.cross_entropy(a, &[Some(1), None]).unwrap();
        let lb = t.cross_entropy(b, &[Some(1), None]).unwrap();
        assert_eq!(t.value(la).item(), t.value(lb).item());
        assert!(t.cross_entropy(a, &[None, None]).is_err());
    }

    #[test]
    fn causal_attention_first_row_sees_only_itself() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as Float * 0.1), false);
        let y = t.attention(x, x, x, 2, AttnMask::Causal).unwrap();
        assert_eq!(t.value(y).row(0), t.value(x).row(0));
        let (heads, p) = t.attention_probs(y).unwrap();
        assert_eq!(heads, 2);
        assert_eq!(p[1], 0.0);
    }
}
