use dygenc::embed::TextEmbedder;
use dygenc::graph::{compact, DynamicGraph, SceneGraph};
use dygenc::pcst::{assign_prizes, pcst_solve, retrieve_frames, score_frames, PcstConfig, PrizedGraph, SolveMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best tree by enumerating every edge subset (plus single nodes and the
/// empty selection).
fn brute_force(pg: &PrizedGraph) -> f64 {
    let n = pg.num_nodes();
    let mut best = pg.prizes.iter().copied().fold(0.0, f64::max);
    for mask in 1u32..(1 << pg.edges.len()) {
        let edges: Vec<usize> = (0..pg.edges.len()).filter(|e| mask >> e & 1 == 1).collect();
        let mut touched = vec![false; n];
        for &e in &edges {
            touched[pg.edges[e].0] = true;
            touched[pg.edges[e].1] = true;
        }
        let nodes: Vec<usize> = (0..n).filter(|&v| touched[v]).collect();
        if pg.is_tree(&nodes, &edges) {
            best = best.max(pg.objective(&nodes, &edges));
        }
    }
    best
}

/// Dyadic prizes and costs so every sum is exact in floating point.
fn random_graph(rng: &mut ChaCha8Rng) -> PrizedGraph {
    let n = rng.gen_range(2..=9);
    let m = rng.gen_range(1..=15usize);
    let prizes = (0..n)
        .map(|_| if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(0..=32) as f64 / 8.0 })
        .collect();
    let edges: Vec<_> = (0..m)
        .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(1..=24) as f64 / 8.0))
        .collect();
    PrizedGraph::new(prizes, edges).unwrap()
}

#[test]
fn exact_mode_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = PcstConfig::default();
    for _ in 0..100 {
        let pg = random_graph(&mut rng);
        let s = pcst_solve(&pg, &cfg, SolveMode::Exact);
        assert!(pg.is_tree(&s.nodes, &s.edges));
        assert_eq!(s.objective, brute_force(&pg), "{pg:?}");
    }
}

#[test]
fn approximation_returns_trees_close_to_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = PcstConfig::default();
    for _ in 0..100 {
        let pg = random_graph(&mut rng);
        let a = pcst_solve(&pg, &cfg, SolveMode::Approx);
        let e = pcst_solve(&pg, &cfg, SolveMode::Exact);
        assert!(pg.is_tree(&a.nodes, &a.edges), "{pg:?} -> {a:?}");
        assert!(a.objective <= e.objective);
        assert!(a.objective >= 0.5 * e.objective, "{pg:?}: {} vs {}", a.objective, e.objective);
    }
}

#[test]
fn scaling_prizes_and_costs_keeps_the_tree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = PcstConfig::default();
    for _ in 0..50 {
        let pg = random_graph(&mut rng);
        let scaled = PrizedGraph {
            prizes: pg.prizes.iter().map(|p| p * 4.0).collect(),
            edges: pg.edges.iter().map(|&(u, v, c)| (u, v, c * 4.0)).collect(),
        };
        let (a, b) = (pcst_solve(&pg, &cfg, SolveMode::Exact), pcst_solve(&scaled, &cfg, SolveMode::Exact));
        assert_eq!((a.nodes, a.edges), (b.nodes, b.edges));
        assert_eq!(b.objective, 4.0 * a.objective);
    }
}

#[test]
fn prizes_follow_similarity_rank() {
    let e = TextEmbedder::hashed(64, 0);
    let g = SceneGraph::from_parts(
        &[(0, "person"), (1, "fridge"), (2, "cup"), (3, "table"), (4, "sofa")],
        &[(0, 1, "opens"), (2, 3, "on")],
    )
    .unwrap();
    let pg = assign_prizes(&g, "fridge", &e, &PcstConfig::default()).unwrap();
    assert_eq!(pg.prizes[1], 4.0);
    assert_eq!(pg.prizes.iter().filter(|&&p| p > 0.0).count(), 4);
    let all = assign_prizes(&g, "fridge", &e, &PcstConfig { top_n: 9, ..PcstConfig::default() }).unwrap();
    assert!(all.prizes.iter().all(|&p| p > 0.0));
    assert!(pg.edges.iter().all(|&(_, _, c)| (0.05..=0.5).contains(&c)));
}

fn frames() -> DynamicGraph {
    let near = |o: &str| SceneGraph::from_parts(&[(0, "person"), (1, o)], &[(0, 1, "near")]).unwrap();
    compact(vec![
        near("table"),
        near("sofa"),
        near("door"),
        SceneGraph::from_parts(&[(0, "person"), (1, "laptop")], &[(0, 1, "opens")]).unwrap(),
        near("shelf"),
        near("bed"),
    ])
    .unwrap()
}

#[test]
fn retrieval_finds_the_only_matching_frame() {
    let e = TextEmbedder::hashed(64, 0);
    let cfg = PcstConfig::default();
    let dg = frames();
    let q = "did the person ever open the laptop ?";
    let kept = retrieve_frames(&dg, q, 1, &e, &cfg).unwrap();
    assert_eq!(kept.indices(), vec![3]);
    // exhaustive scoring agrees
    let scores = score_frames(&dg, q, &e, &cfg).unwrap();
    let best = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).unwrap();
    assert_eq!(best, 3);
}

#[test]
fn retrieval_keeps_order_and_identity() {
    let e = TextEmbedder::hashed(64, 0);
    let cfg = PcstConfig::default();
    let dg = frames();
    assert_eq!(retrieve_frames(&dg, "sofa", 6, &e, &cfg).unwrap(), dg);
    let kept = retrieve_frames(&dg, "person near the bed", 3, &e, &cfg).unwrap();
    let t = kept.indices();
    assert_eq!(t.len(), 3);
    assert!(t.windows(2).all(|w| w[0] < w[1]));
    assert!(retrieve_frames(&dg, "sofa", 0, &e, &cfg).is_err());
}
