use dygenc::autodiff::AttnMask;
use dygenc::embed::{embed_graph, EmbeddedGraph, TextEmbedder};
use dygenc::encoder::{GraphBatch, GraphEncoder, GraphEncoderConfig};
use dygenc::graph::SceneGraph;
use dygenc::params::{ParamStore, Session};
use dygenc::seqenc::{sinusoid, QFormer, QFormerConfig, TemporalEncoder, TemporalKind};
use dygenc::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn encoder(seed: u64) -> (ParamStore, GraphEncoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = GraphEncoder::new(&mut store, GraphEncoderConfig::default(), &mut rng).unwrap();
    (store, enc)
}

fn kitchen() -> SceneGraph {
    SceneGraph::from_parts(
        &[(0, "person"), (1, "cup"), (2, "table"), (3, "fridge")],
        &[(0, 1, "holds"), (1, 2, "on"), (0, 3, "near"), (2, 3, "near")],
    )
    .unwrap()
}

#[test]
fn graph_token_ignores_node_order() {
    let (store, enc) = encoder(3);
    let e = TextEmbedder::hashed(64, 0);
    let g = kitchen();
    let perm = [2u32, 0, 3, 1];
    let h = g.relabeled(|id| perm[id as usize]).unwrap();
    let a = enc.encode_graph(&store, &embed_graph(&g, &e, 4).unwrap()).unwrap();
    let b = enc.encode_graph(&store, &embed_graph(&h, &e, 4).unwrap()).unwrap();
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "max difference {diff}");
}

#[test]
fn identical_isolated_nodes_pool_to_their_own_transform() {
    let (store, enc) = encoder(5);
    let row = random(1, 68, 9);
    let single = EmbeddedGraph { node_matrix: row.clone(), edge_index: vec![], edge_matrix: Tensor::zeros(&[0, 64]) };
    let mut rows = Vec::new();
    for _ in 0..3 {
        rows.extend_from_slice(row.data());
    }
    let triple = EmbeddedGraph { node_matrix: Tensor::matrix(3, 68, rows), edge_index: vec![], edge_matrix: Tensor::zeros(&[0, 64]) };
    let a = enc.encode_graph(&store, &single).unwrap();
    let b = enc.encode_graph(&store, &triple).unwrap();
    assert_eq!(a.len(), 64);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn batching_matches_one_graph_at_a_time() {
    let (store, enc) = encoder(1);
    let e = TextEmbedder::hashed(64, 0);
    let g1 = embed_graph(&kitchen(), &e, 4).unwrap();
    let g2 = embed_graph(&SceneGraph::from_parts(&[(0, "person"), (1, "sofa")], &[(0, 1, "sits_on")]).unwrap(), &e, 4).unwrap();
    let batch = GraphBatch::new(&[&g1, &g2]).unwrap();
    let mut s = Session::new(&store);
    let out = enc.forward(&mut s, &batch).unwrap();
    let out = s.value(out).clone();
    for (i, g) in [&g1, &g2].into_iter().enumerate() {
        let one = enc.encode_graph(&store, g).unwrap();
        for (c, v) in one.iter().enumerate() {
            assert!((out.at(i, c) - v).abs() < 1e-12);
        }
    }
}

fn apply(kind: TemporalKind, x: &Tensor, t: &[u64]) -> Tensor {
    let mut store = ParamStore::new();
    let te = TemporalEncoder::new(&mut store, kind, x.cols()).unwrap();
    let mut s = Session::new(&store);
    let v = s.constant(x.clone());
    let y = te.apply(&mut s, v, t).unwrap();
    s.value(y).clone()
}

#[test]
fn rope_is_a_rotation() {
    let x = random(6, 64, 2);
    let same = apply(TemporalKind::Rope, &random(1, 64, 2), &[0]); // first row of x
    assert_eq!(same.data(), &x.data()[..64]);
    let y = apply(TemporalKind::Rope, &x, &[0, 3, 17, 40, 99, 1000]);
    for r in 0..6 {
        let n0: f64 = (0..64).map(|c| x.at(r, c).powi(2)).sum::<f64>().sqrt();
        let n1: f64 = (0..64).map(|c| y.at(r, c).powi(2)).sum::<f64>().sqrt();
        assert!((n0 - n1).abs() < 1e-12);
    }
    assert!(TemporalEncoder::new(&mut ParamStore::new(), TemporalKind::Rope, 7).is_err());
}

#[test]
fn rope_dot_products_depend_on_offset_only() {
    let u = random(1, 64, 4);
    let v = random(1, 64, 5);
    let dot = |i: u64, j: u64| -> f64 {
        let a = apply(TemporalKind::Rope, &u, &[i]);
        let b = apply(TemporalKind::Rope, &v, &[j]);
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    };
    assert!((dot(3, 5) - dot(10, 12)).abs() < 1e-10);
}

#[test]
fn ape_adds_the_sinusoid() {
    let x = random(2, 16, 8);
    let y = apply(TemporalKind::Ape, &x, &[4, 9]);
    let (p4, p9) = (sinusoid(4, 16), sinusoid(9, 16));
    for c in 0..16 {
        let d = (y.at(1, c) - y.at(0, c)) - (x.at(1, c) - x.at(0, c));
        assert!((d - (p9[c] - p4[c])).abs() < 1e-12);
    }
}

fn qformer(k: usize) -> (ParamStore, QFormer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let qf = QFormer::new(&mut store, QFormerConfig { k, ..QFormerConfig::default() }, &mut rng).unwrap();
    (store, qf)
}

#[test]
fn compressor_output_has_k_rows_for_any_length() {
    for k in [1, 4] {
        let (store, qf) = qformer(k);
        for m in [1, 7, 46] {
            let out = qf.compress(&store, &random(m, 64, m as u64)).unwrap();
            assert_eq!(out.shape(), &[k, 64]);
        }
    }
}

#[test]
fn attention_maps_are_distributions() {
    let (store, qf) = qformer(2);
    let maps = qf.attention_maps(&store, &random(9, 64, 1)).unwrap();
    assert_eq!(maps.len(), 8);
    for m in &maps {
        for r in 0..2 {
            let sum: f64 = (0..9).map(|c| m.weights.at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
    let single = qf.attention_maps(&store, &random(1, 64, 2)).unwrap();
    assert!(single.iter().all(|m| m.weights.data().iter().all(|&w| w == 1.0)));
}

#[test]
fn duplicating_every_token_changes_nothing() {
    let (store, qf) = qformer(2);
    let x = random(5, 64, 3);
    let mut doubled = Vec::new();
    for r in 0..5 {
        for _ in 0..2 {
            doubled.extend((0..64).map(|c| x.at(r, c)));
        }
    }
    let a = qf.compress(&store, &x).unwrap();
    let b = qf.compress(&store, &Tensor::matrix(10, 64, doubled)).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn equal_logits_average_the_values() {
    let store = ParamStore::new();
    let mut s = Session::new(&store);
    let q = s.constant(Tensor::zeros(&[1, 8]));
    let kv = random(5, 8, 6);
    let k = s.constant(kv.clone());
    let v = s.constant(kv.clone());
    let out = s.attention(q, k, v, 2, AttnMask::None).unwrap();
    for c in 0..8 {
        let mean: f64 = (0..5).map(|r| kv.at(r, c)).sum::<f64>() / 5.0;
        assert!((s.value(out).at(0, c) - mean).abs() < 1e-12);
    }
}
