use dygenc::graph::{compact, CompactionMode, DynamicGraph, Frame, QaSample, SceneGraph, Split};
use dygenc::io::{read_jsonl, write_jsonl};
use proptest::prelude::*;

const LABELS: [&str; 5] = ["person", "cup", "table", "door", "sofa"];
const PREDICATES: [&str; 3] = ["on", "holds", "near"];

fn graph() -> impl Strategy<Value = SceneGraph> {
    (1usize..5, proptest::collection::vec((0usize..5, 0usize..5, 0usize..3), 0..6)).prop_map(|(n, edges)| {
        let nodes: Vec<(u32, &str)> = (0..n).map(|i| (i as u32 * 3, LABELS[i])).collect();
        let mut seen = std::collections::HashSet::new();
        let edges: Vec<(u32, u32, &str)> = edges
            .into_iter()
            .filter(|&(s, d, _)| s < n && d < n && s != d)
            .filter(|&(s, d, p)| seen.insert((s, d, p)))
            .map(|(s, d, p)| (s as u32 * 3, d as u32 * 3, PREDICATES[p]))
            .collect();
        SceneGraph::from_parts(&nodes, &edges).unwrap()
    })
}

fn frames() -> impl Strategy<Value = Vec<SceneGraph>> {
    // few distinct graphs so runs and repeats occur
    (proptest::collection::vec(graph(), 1..4), proptest::collection::vec(0usize..4, 1..12))
        .prop_map(|(pool, picks)| picks.into_iter().map(|i| pool[i % pool.len()].clone()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn jsonl_round_trip_is_byte_stable(fs in frames(), split in 0usize..3) {
        let dg = compact(fs).unwrap();
        let split = [Split::Train, Split::Val, Split::Test][split];
        let s = QaSample::new(dg, "did the person ever hold the cup ?", "yes", "exists", split).unwrap();
        let mut first = Vec::new();
        write_jsonl(&mut first, std::slice::from_ref(&s)).unwrap();
        let back = read_jsonl(first.as_slice()).unwrap();
        prop_assert_eq!(&back[0], &s);
        let mut second = Vec::new();
        write_jsonl(&mut second, &back).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn compaction_is_idempotent(fs in frames()) {
        for mode in [CompactionMode::Runs, CompactionMode::Global] {
            let once = dygenc::graph::compact_with(fs.clone(), mode).unwrap();
            prop_assert_eq!(once.recompact(mode), once.clone());
            prop_assert!(once.indices().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn canonical_form_ignores_ids(g in graph(), shift in 1u32..50) {
        let h = g.relabeled(|id| id + shift).unwrap();
        prop_assert_eq!(g.canonical_form(), h.canonical_form());
    }
}

#[test]
fn run_collapse_examples() {
    let a = SceneGraph::from_parts(&[(0, "person")], &[] as &[(u32, u32, &str)]).unwrap();
    let b = SceneGraph::from_parts(&[(0, "cup")], &[] as &[(u32, u32, &str)]).unwrap();
    let dg = compact(vec![a.clone(), a.clone(), b.clone(), a.clone()]).unwrap();
    let want = DynamicGraph::new(vec![
        Frame { graph: a.clone(), t: 0 },
        Frame { graph: b, t: 2 },
        Frame { graph: a.clone(), t: 3 },
    ])
    .unwrap();
    assert_eq!(dg, want);
    assert_eq!(compact(vec![a.clone(); 30]).unwrap().indices(), vec![0]);
}
