//! Query-conditioned retrieval with a prize-collecting Steiner tree.

use std::collections::{BTreeMap, HashMap};

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine, TextEmbedder};
use crate::error::{Error, Result};
use crate::graph::{DynamicGraph, SceneGraph};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcstConfig {
    /// Nodes ranked `1..=top_n` by similarity get prizes `top_n..1`.
    pub top_n: usize,
    pub edge_cost: Float,
    /// Lowest cost an edge can reach after its similarity bonus.
    pub min_edge_cost: Float,
    /// Components with at most this many edges are solved exactly.
    pub exact_max_edges: usize,
}

impl Default for PcstConfig {
    fn default() -> Self {
        Self { top_n: 4, edge_cost: 0.5, min_edge_cost: 0.05, exact_max_edges: 15 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMode {
    /// Exact for small components, approximate otherwise.
    Auto,
    Exact,
    Approx,
}

/// Undirected graph with node prizes and edge costs.
#[derive(Clone, Debug, PartialEq)]
pub struct PrizedGraph {
    pub prizes: Vec<Float>,
    /// `(u, v, cost)` with `u < v`, no duplicates.
    pub edges: Vec<(usize, usize, Float)>,
}

impl PrizedGraph {
    /// Parallel and antiparallel edges merge, keeping the cheapest cost;
    /// self-loops are dropped.
    pub fn new(prizes: Vec<Float>, edges: impl IntoIterator<Item = (usize, usize, Float)>) -> Result<Self> {
        if let Some(p) = prizes.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Config(format!("prize {p} must be finite and non-negative")));
        }
        let n = prizes.len();
        let mut merged: BTreeMap<(usize, usize), Float> = BTreeMap::new();
        for (u, v, c) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidGraph(format!("edge ({u}, {v}) outside {n} nodes")));
            }
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("edge cost {c} must be positive")));
            }
            if u == v {
                continue;
            }
            let key = (u.min(v), u.max(v));
            let e = merged.entry(key).or_insert(c);
            *e = e.min(c);
        }
        Ok(Self { prizes, edges: merged.into_iter().map(|((u, v), c)| (u, v, c)).collect() })
    }

    pub fn num_nodes(&self) -> usize {
        self.prizes.len()
    }

    /// Prize of `nodes` minus cost of `edges`, summed in index order.
    pub fn objective(&self, nodes: &[usize], edges: &[usize]) -> Float {
        let mut nodes = nodes.to_vec();
        nodes.sort_unstable();
        let mut edges = edges.to_vec();
        edges.sort_unstable();
        let p: Float = nodes.iter().map(|&v| self.prizes[v]).sum();
        let c: Float = edges.iter().map(|&e| self.edges[e].2).sum();
        p - c
    }

    /// Whether `edges` form a tree spanning exactly `nodes` (the empty and
    /// single-node selections count as trees).
    pub fn is_tree(&self, nodes: &[usize], edges: &[usize]) -> bool {
        if nodes.is_empty() {
            return edges.is_empty();
        }
        if edges.len() + 1 != nodes.len() {
            return false;
        }
        let mut uf = UnionFind::<usize>::new(self.num_nodes());
        for &e in edges {
            let (u, v, _) = self.edges[e];
            if !nodes.contains(&u) || !nodes.contains(&v) || !uf.union(u, v) {
                return false;
            }
        }
        nodes.iter().all(|&v| uf.equiv(v, nodes[0]))
    }

    fn components(&self) -> Vec<Vec<usize>> {
        let mut uf = UnionFind::<usize>::new(self.num_nodes());
        for &(u, v, _) in &self.edges {
            uf.union(u, v);
        }
        let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for v in 0..self.num_nodes() {
            by.entry(uf.find(v)).or_default().push(v);
        }
        by.into_values().collect()
    }
}

/// Selected subtree. `edges` index into [`PrizedGraph::edges`].
#[derive(Clone, Debug, PartialEq)]
pub struct PcstSolution {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    pub objective: Float,
}

impl PcstSolution {
    fn empty() -> Self {
        Self { nodes: Vec::new(), edges: Vec::new(), objective: 0.0 }
    }

    fn finish(pg: &PrizedGraph, mut nodes: Vec<usize>, mut edges: Vec<usize>) -> Self {
        nodes.sort_unstable();
        edges.sort_unstable();
        let objective = pg.objective(&nodes, &edges);
        Self { nodes, edges, objective }
    }
}

/// Rank-based prizes for the nodes of `g` and similarity-discounted edge
/// costs. Edges are scored on their `subject predicate object` text.
pub fn assign_prizes(g: &SceneGraph, query: &str, emb: &TextEmbedder, cfg: &PcstConfig) -> Result<PrizedGraph> {
    let q = emb.embed_text(query)?;
    let sims = g
        .nodes()
        .iter()
        .map(|n| Ok(cosine(&q, &emb.embed_text(&n.label)?)))
        .collect::<Result<Vec<_>>>()?;
    let prizes = rank_prizes(&sims, cfg.top_n);
    let edges = edge_costs(g, &q, emb, cfg)?;
    PrizedGraph::new(prizes, edges)
}

/// Prizes `top_n..1` by descending score; ties go to the lower index.
fn rank_prizes(scores: &[Float], top_n: usize) -> Vec<Float> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut prizes = vec![0.0; scores.len()];
    for (rank, &i) in order.iter().take(top_n).enumerate() {
        prizes[i] = (top_n - rank) as Float;
    }
    prizes
}

fn edge_costs(g: &SceneGraph, q: &[Float], emb: &TextEmbedder, cfg: &PcstConfig) -> Result<Vec<(usize, usize, Float)>> {
    let pos = g.position_map();
    g.edges()
        .iter()
        .map(|e| {
            let text = format!(
                "{} {} {}",
                g.label_of(e.src).unwrap_or_default(),
                e.predicate,
                g.label_of(e.dst).unwrap_or_default()
            );
            let sim = cosine(q, &emb.embed_text(&text)?).clamp(0.0, 1.0);
            let cost = (cfg.edge_cost - cfg.edge_cost * sim).max(cfg.min_edge_cost);
            Ok((pos[&e.src], pos[&e.dst], cost))
        })
        .collect()
}

/// Best subtree over all components; empty when nothing has positive value.
pub fn pcst_solve(pg: &PrizedGraph, cfg: &PcstConfig, mode: SolveMode) -> PcstSolution {
    let mut best = PcstSolution::empty();
    for comp in pg.components() {
        let in_comp: Vec<usize> = (0..pg.edges.len())
            .filter(|&e| comp.binary_search(&pg.edges[e].0).is_ok())
            .collect();
        let exact = match mode {
            SolveMode::Exact => true,
            SolveMode::Approx => false,
            SolveMode::Auto => in_comp.len() <= cfg.exact_max_edges,
        };
        let sol = if exact {
            solve_exact(pg, &comp, &in_comp)
        } else {
            solve_gw(pg, &comp, &in_comp)
        };
        if sol.objective > best.objective {
            best = sol;
        }
    }
    best
}

/// Every connected node subset, spanned by its minimum spanning tree.
/// Exponential in the component size; meant for components of ≤ ~16 nodes.
fn solve_exact(pg: &PrizedGraph, comp: &[usize], edges: &[usize]) -> PcstSolution {
    let n = comp.len();
    assert!(n <= 24, "exact search over {n} nodes");
    let local: HashMap<usize, usize> = comp.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut sorted = edges.to_vec();
    sorted.sort_by(|&a, &b| pg.edges[a].2.total_cmp(&pg.edges[b].2).then(a.cmp(&b)));
    let mut best = PcstSolution::empty();
    for mask in 1u32..(1u32 << n) {
        let nodes: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| comp[i]).collect();
        let mut uf = UnionFind::<usize>::new(n);
        let mut tree = Vec::with_capacity(nodes.len() - 1);
        for &e in &sorted {
            let (u, v, _) = pg.edges[e];
            let (a, b) = (local[&u], local[&v]);
            if mask >> a & 1 == 1 && mask >> b & 1 == 1 && uf.union(a, b) {
                tree.push(e);
            }
        }
        if tree.len() + 1 != nodes.len() {
            continue;
        }
        let objective = pg.objective(&nodes, &tree);
        if objective > best.objective {
            best = PcstSolution::finish(pg, nodes, tree);
        }
    }
    best
}

/// Goemans–Williamson moat growing without a root, followed by strong
/// pruning of each resulting tree.
fn solve_gw(pg: &PrizedGraph, comp: &[usize], edges: &[usize]) -> PcstSolution {
    const EPS: Float = 1e-12;
    let n = pg.num_nodes();
    let mut cluster: Vec<usize> = (0..n).collect();
    let mut growth = vec![0.0 as Float; n]; // Σ moats containing each node
    let mut slack: HashMap<usize, Float> = comp.iter().map(|&v| (v, pg.prizes[v])).collect();
    let mut active: HashMap<usize, bool> = comp.iter().map(|&v| (v, pg.prizes[v] > 0.0)).collect();
    let mut forest: Vec<usize> = Vec::new();
    loop {
        let mut step = Float::INFINITY;
        let mut event: Option<usize> = None;
        for (&c, &a) in &active {
            if a && slack[&c] < step {
                step = slack[&c];
                event = None;
            }
        }
        for &e in edges {
            let (u, v, cost) = pg.edges[e];
            let (cu, cv) = (cluster[u], cluster[v]);
            if cu == cv {
                continue;
            }
            let rate = active[&cu] as u8 + active[&cv] as u8;
            if rate == 0 {
                continue;
            }
            let t = ((cost - growth[u] - growth[v]) / rate as Float).max(0.0);
            if t < step - EPS || (event.is_none() && t <= step + EPS) {
                step = t;
                event = Some(e);
            }
        }
        if !step.is_finite() {
            break;
        }
        for &v in comp {
            if active[&cluster[v]] {
                growth[v] += step;
            }
        }
        for (c, a) in active.iter_mut() {
            if *a {
                *slack.get_mut(c).expect("cluster slack") -= step;
            }
        }
        match event {
            Some(e) => {
                let (u, v, _) = pg.edges[e];
                let (keep, gone) = (cluster[u].min(cluster[v]), cluster[u].max(cluster[v]));
                for c in cluster.iter_mut() {
                    if *c == gone {
                        *c = keep;
                    }
                }
                let s = slack.remove(&gone).unwrap_or(0.0) + slack[&keep];
                slack.insert(keep, s.max(0.0));
                active.remove(&gone);
                active.insert(keep, s > EPS);
                forest.push(e);
            }
            None => {
                for (c, a) in active.iter_mut() {
                    if *a && slack[c] <= EPS {
                        *a = false;
                    }
                }
            }
        }
    }
    strong_prune(pg, comp, &forest)
}

/// Best connected subtree of a forest (exact by dynamic programming).
fn strong_prune(pg: &PrizedGraph, comp: &[usize], forest: &[usize]) -> PcstSolution {
    let mut adj: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    for &e in forest {
        let (u, v, _) = pg.edges[e];
        adj.entry(u).or_default().push((v, e));
        adj.entry(v).or_default().push((u, e));
    }
    let mut visited: HashMap<usize, bool> = HashMap::new();
    let mut best = PcstSolution::empty();
    for &root in comp {
        if visited.contains_key(&root) {
            continue;
        }
        // iterative DFS order
        let mut order = Vec::new();
        let mut parent: HashMap<usize, (usize, usize)> = HashMap::new();
        let mut stack = vec![root];
        visited.insert(root, true);
        while let Some(v) = stack.pop() {
            order.push(v);
            for &(w, e) in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                if !visited.contains_key(&w) {
                    visited.insert(w, true);
                    parent.insert(w, (v, e));
                    stack.push(w);
                }
            }
        }
        let mut value: HashMap<usize, Float> = HashMap::new();
        for &v in order.iter().rev() {
            let mut total = pg.prizes[v];
            for &(w, e) in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                if parent.get(&w).is_some_and(|&(p, _)| p == v) {
                    total += (value[&w] - pg.edges[e].2).max(0.0);
                }
            }
            value.insert(v, total);
        }
        for &top in &order {
            if value[&top] <= best.objective {
                continue;
            }
            let mut nodes = vec![top];
            let mut edges = Vec::new();
            let mut stack = vec![top];
            while let Some(v) = stack.pop() {
                for &(w, e) in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                    let child = parent.get(&w).is_some_and(|&(p, _)| p == v);
                    if child && value[&w] - pg.edges[e].2 > 0.0 {
                        nodes.push(w);
                        edges.push(e);
                        stack.push(w);
                    }
                }
            }
            let sol = PcstSolution::finish(pg, nodes, edges);
            if sol.objective > best.objective {
                best = sol;
            }
        }
    }
    best
}

/// Objective of each frame's best subtree. Prizes rank the distinct node
/// labels of the whole sequence, so frames are scored on a common scale.
pub fn score_frames(dg: &DynamicGraph, query: &str, emb: &TextEmbedder, cfg: &PcstConfig) -> Result<Vec<Float>> {
    if query.trim().is_empty() {
        return Err(Error::Embed("empty query".into()));
    }
    let q = emb.embed_text(query)?;
    let mut labels: Vec<&str> = dg.graphs().flat_map(|g| g.nodes().iter().map(|n| n.label.as_str())).collect();
    labels.sort_unstable();
    labels.dedup();
    let sims = labels
        .iter()
        .map(|l| Ok(cosine(&q, &emb.embed_text(l)?)))
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank_prizes(&sims, cfg.top_n);
    let prize_of: HashMap<&str, Float> = labels.iter().copied().zip(ranked).collect();
    dg.graphs()
        .map(|g| {
            let prizes = g.nodes().iter().map(|n| prize_of[n.label.as_str()]).collect();
            let pg = PrizedGraph::new(prizes, edge_costs(g, &q, emb, cfg)?)?;
            Ok(pcst_solve(&pg, cfg, SolveMode::Auto).objective)
        })
        .collect()
}

/// Keep the `budget` best-scoring frames (ties to the earlier frame) in
/// their original order and with their original indices.
pub fn retrieve_frames(
    dg: &DynamicGraph,
    query: &str,
    budget: usize,
    emb: &TextEmbedder,
    cfg: &PcstConfig,
) -> Result<DynamicGraph> {
    if budget == 0 {
        return Err(Error::Config("retrieval budget must be at least 1".into()));
    }
    if budget >= dg.len() {
        return Ok(dg.clone());
    }
    let scores = score_frames(dg, query, emb, cfg)?;
    let mut order: Vec<usize> = (0..dg.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(budget);
    dg.select(&order)
}
