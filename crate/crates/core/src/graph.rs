//! Textual scene graphs and time-ordered sequences of them.
//!
//! A [`SceneGraph`] is one frame: objects as labelled nodes, relations as
//! directed predicate-labelled edges. A [`DynamicGraph`] keeps the frames of
//! an episode together with the index each frame had in the raw, uncompacted
//! stream, so that durations survive duplicate-frame removal.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub predicate: String,
}

/// One frame. Always directed; never contains self-loops.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct SceneGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(nodes.len());
        for n in &nodes {
            if n.label.is_empty() {
                return Err(Error::InvalidGraph(format!("node {} has an empty label", n.id)));
            }
            if !seen.insert(n.id) {
                return Err(Error::InvalidGraph(format!("duplicate node id {}", n.id)));
            }
        }
        for e in &edges {
            if e.predicate.is_empty() {
                return Err(Error::InvalidGraph(format!(
                    "edge {}->{} has an empty predicate",
                    e.src, e.dst
                )));
            }
            if !seen.contains(&e.src) || !seen.contains(&e.dst) {
                return Err(Error::InvalidGraph(format!(
                    "edge {}->{} references a missing node",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(Error::InvalidGraph(format!("self-loop on node {}", e.src)));
            }
        }
        Ok(Self { nodes, edges })
    }

    /// Convenience constructor from `(id, label)` and `(src, dst, predicate)` tuples.
    pub fn from_parts<L, P>(nodes: &[(NodeId, L)], edges: &[(NodeId, NodeId, P)]) -> Result<Self>
    where
        L: AsRef<str>,
        P: AsRef<str>,
    {
        Self::new(
            nodes
                .iter()
                .map(|(id, l)| Node {
                    id: *id,
                    label: l.as_ref().to_owned(),
                })
                .collect(),
            edges
                .iter()
                .map(|(s, d, p)| Edge {
                    src: *s,
                    dst: *d,
                    predicate: p.as_ref().to_owned(),
                })
                .collect(),
        )
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Map from node id to its position in [`Self::nodes`].
    pub fn position_map(&self) -> HashMap<NodeId, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    /// Edge endpoints as node positions rather than ids.
    pub fn edge_positions(&self) -> Vec<(usize, usize)> {
        let pos = self.position_map();
        self.edges.iter().map(|e| (pos[&e.src], pos[&e.dst])).collect()
    }

    pub fn label_of(&self, id: NodeId) -> Option<&str> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.label.as_str())
    }

    /// Relabel node ids through `f`, keeping labels and edges.
    pub fn relabeled(&self, mut f: impl FnMut(NodeId) -> NodeId) -> Result<Self> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                id: f(n.id),
                label: n.label.clone(),
            })
            .collect::<Vec<_>>();
        let map: HashMap<NodeId, NodeId> =
            self.nodes.iter().zip(&nodes).map(|(a, b)| (a.id, b.id)).collect();
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: map[&e.src],
                dst: map[&e.dst],
                predicate: e.predicate.clone(),
            })
            .collect();
        Self::new(nodes, edges)
    }

    /// Deterministic text that is identical for graphs equal up to node-id
    /// relabelling.
    ///
    /// Nodes are keyed by `(label, degree, sorted incident-edge signature)`,
    /// each node is replaced by the dense rank of its key, and the edge list
    /// is rendered in sorted order over those ranks. Nodes that share a key
    /// share a rank, so the text never depends on ids. Distinct graphs whose
    /// keyed edge multisets agree collide; that only makes compaction more
    /// aggressive.
    pub fn canonical_form(&self) -> String {
        if self.nodes.is_empty() {
            return "∅".to_owned();
        }
        let pos = self.position_map();
        let mut sig: Vec<Vec<(u8, &str, &str)>> = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let (s, d) = (pos[&e.src], pos[&e.dst]);
            sig[s].push((0, e.predicate.as_str(), self.nodes[d].label.as_str()));
            sig[d].push((1, e.predicate.as_str(), self.nodes[s].label.as_str()));
        }
        for s in &mut sig {
            s.sort_unstable();
        }
        let keys: Vec<(&str, usize, &Vec<(u8, &str, &str)>)> = self
            .nodes
            .iter()
            .zip(&sig)
            .map(|(n, s)| (n.label.as_str(), s.len(), s))
            .collect();
        let mut distinct: Vec<_> = keys.clone();
        distinct.sort();
        distinct.dedup();
        let rank_of: BTreeMap<_, usize> =
            distinct.iter().enumerate().map(|(r, k)| (k.clone(), r)).collect();
        let ranks: Vec<usize> = keys.iter().map(|k| rank_of[k]).collect();

        let mut node_part: Vec<(usize, &str)> = ranks
            .iter()
            .zip(&self.nodes)
            .map(|(r, n)| (*r, n.label.as_str()))
            .collect();
        node_part.sort_unstable();
        let mut edge_part: Vec<(usize, &str, usize)> = self
            .edges
            .iter()
            .map(|e| (ranks[pos[&e.src]], e.predicate.as_str(), ranks[pos[&e.dst]]))
            .collect();
        edge_part.sort_unstable();
        serde_json::to_string(&(node_part, edge_part)).expect("canonical form serializes")
    }
}

impl fmt::Display for SceneGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: HashMap<NodeId, &str> =
            self.nodes.iter().map(|n| (n.id, n.label.as_str())).collect();
        for (i, e) in self.edges.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{} {} {}.", labels[&e.src], e.predicate, labels[&e.dst])?;
        }
        Ok(())
    }
}

/// A frame together with its index in the original stream.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    pub graph: SceneGraph,
    pub t: u64,
}

/// Time-ordered sequence of frames. Frame indices are strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DynamicGraph {
    frames: Vec<Frame>,
}

/// Which duplicates [`compact_with`] removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompactionMode {
    /// Collapse runs of consecutive equal frames (default).
    #[default]
    Runs,
    /// Keep only the first occurrence of every distinct frame.
    Global,
}

impl DynamicGraph {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        for w in frames.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::InvalidGraph(format!(
                    "frame indices must increase strictly, got {} then {}",
                    w[0].t, w[1].t
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.t).collect()
    }

    pub fn graphs(&self) -> impl Iterator<Item = &SceneGraph> {
        self.frames.iter().map(|f| &f.graph)
    }

    /// Same graphs played backwards; frame `i` moves to index `t_max - t_i`,
    /// so spacing between frames is kept.
    pub fn time_reversed(&self) -> Self {
        let t_max = self.frames.last().map(|f| f.t).unwrap_or(0);
        let t_min = self.frames.first().map(|f| f.t).unwrap_or(0);
        let frames = self
            .frames
            .iter()
            .rev()
            .map(|f| Frame {
                graph: f.graph.clone(),
                t: t_max - f.t + t_min,
            })
            .collect();
        Self { frames }
    }

    /// Keep only the frames whose position is in `keep` (positions, not `t`).
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        Self::new(keep.iter().map(|&i| self.frames[i].clone()).collect())
    }

    /// Re-run compaction over the kept frames, preserving their indices.
    pub fn recompact(&self, mode: CompactionMode) -> Self {
        let kept = compact_indexed(self.frames.clone(), mode);
        Self { frames: kept }
    }
}

/// Collapse consecutive duplicate frames; each kept frame carries the raw
/// index of the first frame of its run.
pub fn compact(frames: Vec<SceneGraph>) -> Result<DynamicGraph> {
    compact_with(frames, CompactionMode::Runs)
}

pub fn compact_with(frames: Vec<SceneGraph>, mode: CompactionMode) -> Result<DynamicGraph> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let indexed = frames
        .into_iter()
        .enumerate()
        .map(|(t, graph)| Frame { graph, t: t as u64 })
        .collect();
    Ok(DynamicGraph {
        frames: compact_indexed(indexed, mode),
    })
}

fn compact_indexed(frames: Vec<Frame>, mode: CompactionMode) -> Vec<Frame> {
    let mut out: Vec<Frame> = Vec::with_capacity(frames.len());
    match mode {
        CompactionMode::Runs => {
            let mut last: Option<String> = None;
            for f in frames {
                let key = f.graph.canonical_form();
                if last.as_deref() != Some(key.as_str()) {
                    out.push(f);
                    last = Some(key);
                }
            }
        }
        CompactionMode::Global => {
            let mut seen = HashSet::new();
            for f in frames {
                if seen.insert(f.graph.canonical_form()) {
                    out.push(f);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One question about one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaSample {
    pub dg: DynamicGraph,
    pub question: String,
    pub answer: String,
    pub template_id: String,
    pub split: Split,
}

impl QaSample {
    pub fn new(
        dg: DynamicGraph,
        question: impl Into<String>,
        answer: impl Into<String>,
        template_id: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        let (question, answer) = (question.into(), answer.into());
        if question.trim().is_empty() || answer.trim().is_empty() {
            return Err(Error::InvalidGraph("question and answer must be non-empty".into()));
        }
        Ok(Self {
            dg,
            question,
            answer,
            template_id: template_id.into(),
            split,
        })
    }
}
