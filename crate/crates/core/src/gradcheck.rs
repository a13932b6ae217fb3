//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Float,
    pub worst: String,
    pub entries_checked: usize,
}

/// Relative error with a floor so vanishing gradients do not divide by
/// zero. Central differences at h=1e-5 carry roundoff of order eps·|f|/h
/// (~1e-10 here), so below 1e-5 the comparison is effectively absolute.
pub fn relative_error(analytic: Float, numeric: Float) -> Float {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Reduce any output to a scalar through a fixed random projection, so every
/// output entry contributes to the checked gradient.
pub fn projection_loss(sess: &mut Session<'_>, out: Var, seed: u64) -> Result<Var> {
    let shape = sess.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w: Vec<Float> = (0..n)
        .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
        .collect();
    let w = sess.constant(Tensor::new(shape, w)?);
    let y = sess.mul(out, w)?;
    Ok(sess.sum(y))
}

/// Compare the tape gradient of `loss_fn` against central differences for up
/// to `per_param` randomly chosen entries of each listed parameter.
///
/// `loss_fn` must be deterministic and must not use dropout unless the
/// session seed fixes the masks.
pub fn check_params(
    store: &mut ParamStore,
    params: &[ParamId],
    h: Float,
    per_param: usize,
    seed: u64,
    loss_fn: impl Fn(&mut Session<'_>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut sess = Session::new(store);
        let loss = loss_fn(&mut sess)?;
        let mut grads = sess.backward(loss)?;
        sess.param_grads(&mut grads)
    };
    let eval = |store: &ParamStore| -> Result<Float> {
        let mut sess = Session::new(store);
        let loss = loss_fn(&mut sess)?;
        Ok(sess.value(loss).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        entries_checked: 0,
    };
    for &id in params {
        let grad = analytic
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let n = store.get(id).numel();
        for idx in sample(&mut rng, n, per_param.min(n)) {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[idx] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data()[idx], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = format!(
                        "{}[{idx}] analytic={:.6e} numeric={:.6e}",
                        store.name(id),
                        grad.data()[idx],
                        numeric
                    );
                }
            }
        }
    }
    Ok(report)
}

/// Same check over every trainable parameter.
pub fn check_all(
    store: &mut ParamStore,
    h: Float,
    per_param: usize,
    seed: u64,
    loss_fn: impl Fn(&mut Session<'_>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    check_params(store, &ids, h, per_param, seed, loss_fn)
}

/// One finite-difference check per trainable component: graph encoder,
/// temporal encoding + compressor for each temporal kind, projector, and the
/// decoder with low-rank adapters (adapter `B` perturbed away from zero so
/// both factors receive gradient).
pub fn module_checks(seed: u64, h: Float, per_param: usize) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::embed::EmbeddedGraph;
    use crate::encoder::{GraphBatch, GraphEncoder, GraphEncoderConfig};
    use crate::lm::{LmConfig, LoraConfig, Projector, ToyDecoderLM, Tokenizer};
    use crate::seqenc::{QFormer, QFormerConfig, TemporalEncoder, TemporalKind};
    use rand_distr::{Distribution, StandardNormal};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |r: usize, c: usize, rng: &mut ChaCha8Rng| -> Tensor {
        let v: Vec<Float> = (0..r * c).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::matrix(r, c, v)
    };
    let mut out = Vec::new();

    // graph encoder over two small graphs
    {
        let cfg = GraphEncoderConfig { node_dim: 6, edge_dim: 5, hidden: 8, d_g: 6, layers: 2, heads: 2, message_passing: true };
        let g1 = EmbeddedGraph { node_matrix: normal(4, 6, &mut rng), edge_index: vec![(0, 1), (1, 2), (3, 1)], edge_matrix: normal(3, 5, &mut rng) };
        let g2 = EmbeddedGraph { node_matrix: normal(2, 6, &mut rng), edge_index: vec![(1, 0)], edge_matrix: normal(1, 5, &mut rng) };
        let batch = GraphBatch::new(&[&g1, &g2])?;
        let mut store = ParamStore::new();
        let enc = GraphEncoder::new(&mut store, cfg, &mut rng)?;
        let r = check_all(&mut store, h, per_param, seed, |s| {
            let y = enc.forward(s, &batch)?;
            projection_loss(s, y, seed)
        })?;
        out.push(("graph-encoder".to_string(), r));
    }

    // temporal encoding followed by the compressor
    for kind in TemporalKind::ALL {
        let d = 8;
        let tokens = normal(5, d, &mut rng);
        let t = [0u64, 2, 3, 7, 11];
        let mut store = ParamStore::new();
        let te = TemporalEncoder::new(&mut store, kind, d)?;
        let qf = QFormer::new(&mut store, QFormerConfig { d_g: d, k: 2, layers: 2, heads: 2 }, &mut rng)?;
        let input = store.add("input", crate::params::Group::Base, tokens);
        let r = check_all(&mut store, h, per_param, seed, |s| {
            let x = s.p(input);
            let x = te.apply(s, x, &t)?;
            let (y, _) = qf.forward(s, x)?;
            projection_loss(s, y, seed)
        })?;
        out.push((format!("seq-encoder/{kind}"), r));
    }

    // projector
    {
        let mut store = ParamStore::new();
        let proj = Projector::new(&mut store, 6, 10, &mut rng);
        let input = store.add("input", crate::params::Group::Base, normal(3, 6, &mut rng));
        let r = check_all(&mut store, h, per_param, seed, |s| {
            let x = s.p(input);
            let y = proj.forward(s, x)?;
            projection_loss(s, y, seed)
        })?;
        out.push(("projector".to_string(), r));
    }

    // decoder with adapters, through the answer loss
    {
        let tok = Tokenizer::build(["which object did the person hold first ?", "cup", "book"]);
        let cfg = LmConfig { d_llm: 8, layers: 2, heads: 2, max_len: 32, dropout: 0.0, lora: LoraConfig { rank: 2, ..LoraConfig::default() } };
        let mut store = ParamStore::new();
        let lm = ToyDecoderLM::new(&mut store, cfg, tok.clone(), &mut rng)?;
        for id in lm.adapter_params() {
            let shape = store.get(id).shape().to_vec();
            let mut noise = normal(shape[0], shape[1], &mut rng);
            noise.scale_assign(0.1);
            store.get_mut(id).add_assign(&noise);
        }
        let soft = store.add("soft", crate::params::Group::Base, normal(1, 8, &mut rng));
        let q = tok.tokenize("which object did the person hold first ?");
        let a = tok.tokenize("cup");
        let r = check_all(&mut store, h, per_param, seed, |s| {
            let x = s.p(soft);
            lm.loss(s, x, &q, &a)
        })?;
        out.push(("toy-lm+lora".to_string(), r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Axis, AttnMask, Message};
    use std::rc::Rc;

    fn store(seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let ids = vec![
            s.add_normal("x", &[4, 6], 1.0, &mut rng),
            s.add_normal("w", &[6, 6], 0.5, &mut rng),
            s.add_normal("b", &[1, 6], 0.5, &mut rng),
            s.add_normal("g", &[1, 6], 1.0, &mut rng),
            s.add_normal("e", &[3, 6], 0.5, &mut rng),
            s.add_normal("table", &[5, 6], 1.0, &mut rng),
        ];
        (s, ids)
    }

    /// Every primitive with a hand-written backward, chained together.
    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..3 {
            let (mut s, ids) = store(seed);
            let [x, w, b, g, e, table] = ids[..] else { unreachable!() };
            let msgs = Rc::new(vec![
                Message { src: 0, dst: 1, edge: Some(0) },
                Message { src: 2, dst: 1, edge: Some(1) },
                Message { src: 1, dst: 0, edge: Some(2) },
                Message { src: 3, dst: 3, edge: None },
                Message { src: 0, dst: 0, edge: None },
            ]);
            let report = check_all(&mut s, 1e-5, 12, seed, |sess| {
                let (x, w, b, g, e, table) = (sess.p(x), sess.p(w), sess.p(b), sess.p(g), sess.p(e), sess.p(table));
                let h = sess.matmul(x, w)?;
                let h = sess.add_row(h, b)?;
                let h = sess.layer_norm(h, g, b, 1e-5)?;
                let h = sess.gelu(h);
                let a = sess.attention(h, x, h, 2, AttnMask::Causal)?;
                let ga = sess.graph_attention(a, h, x, e, 3, msgs.clone())?;
                let c = sess.cos(ga);
                let r = sess.rotate_pairs(c, vec![0.3; 12], vec![0.8; 12])?;
                let cat = sess.concat(&[r, x], Axis::Rows)?;
                let sl = sess.slice(cat, Axis::Cols, 1, 4)?;
                let seg = sess.segment_mean(sl, Rc::new(vec![0, 0, 1, 1, 2, 2, 2, 0]), 3)?;
                let emb = sess.embedding(table, &[1, 4, 1])?;
                let emb = sess.slice(emb, Axis::Cols, 0, 4)?;
                let prod = sess.mul(seg, emb)?;
                let sm = sess.softmax(prod);
                let tsl = sess.slice(table, Axis::Cols, 2, 4)?;
                let mm = sess.matmul_t(sm, tsl)?;
                let m = sess.mean(mm, Axis::Rows);
                let m2 = sess.mean(mm, Axis::Cols);
                let s1 = sess.sum(m);
                let s2 = sess.sum(m2);
                let tot = sess.add(s1, s2)?;
                let logits = sess.scale(mm, 2.0);
                let ce = sess.cross_entropy(logits, &[Some(1), None, Some(4)])?;
                sess.add(tot, ce)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn components_match_finite_differences() {
        for (name, r) in module_checks(1, 1e-5, 6).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{name}: {} ({})", r.max_rel_error, r.worst);
        }
    }
}
