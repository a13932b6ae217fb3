//! Text attribute embeddings and Laplacian positional encodings.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use petgraph::unionfind::UnionFind;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::tensor::{Float, Tensor};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_LPE: usize = 4;

#[derive(Clone, Debug)]
enum Mode {
    Hashed { seed: u64 },
    File(HashMap<String, Vec<Float>>),
}

/// Maps attribute strings to unit vectors. Hashed mode needs no weights;
/// file mode serves precomputed vectors.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    dim: usize,
    mode: Mode,
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // final avalanche so low bits (the bucket) depend on every byte
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}

#[derive(Deserialize)]
struct FileEntry {
    text: String,
    vector: Vec<Float>,
}

fn normalized(mut v: Vec<Float>) -> Result<Vec<Float>> {
    let n = v.iter().map(|x| x * x).sum::<Float>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Embed("vector has zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

impl TextEmbedder {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            mode: Mode::Hashed { seed },
        }
    }

    /// Load `{"text": ..., "vector": [...]}` lines. Every vector must have
    /// the same length; vectors are normalized on load.
    pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FileEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let d = *dim.get_or_insert(entry.vector.len());
            if entry.vector.len() != d || d == 0 {
                return Err(Error::Embed(format!(
                    "line {}: vector length {} differs from {d}",
                    i + 1,
                    entry.vector.len()
                )));
            }
            table.insert(entry.text.trim().to_string(), normalized(entry.vector)?);
        }
        let dim = dim.ok_or_else(|| Error::Embed(format!("{} holds no vectors", path.display())))?;
        Ok(Self {
            dim,
            mode: Mode::File(table),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<Float>> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Embed("cannot embed empty text".into()));
        }
        match &self.mode {
            Mode::File(table) => table
                .get(text)
                .cloned()
                .ok_or_else(|| Error::Embed(format!("no stored vector for {text:?}"))),
            Mode::Hashed { seed } => {
                let lower = text.to_lowercase();
                let mut features = Vec::new();
                for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
                    features.push(format!("w:{word}"));
                    let padded: Vec<char> = format!("#{word}#").chars().collect();
                    for tri in padded.windows(3) {
                        features.push(format!("t:{}", tri.iter().collect::<String>()));
                    }
                }
                // punctuation-only strings still get a vector
                if features.is_empty() {
                    features.push(format!("s:{lower}"));
                }
                let mut v = vec![0.0; self.dim];
                for f in &features {
                    let h = fnv1a(*seed, f.as_bytes());
                    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                    v[(h % self.dim as u64) as usize] += sign;
                }
                // colliding features can cancel; fall back to the whole string
                if v.iter().all(|&x| x == 0.0) {
                    v[(fnv1a(*seed, lower.as_bytes()) % self.dim as u64) as usize] = 1.0;
                }
                normalized(v)
            }
        }
    }
}

pub fn cosine(a: &[Float], b: &[Float]) -> Float {
    let dot: Float = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<Float>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<Float>().sqrt();
    dot / (na * nb)
}

/// Symmetric normalized Laplacian `I - D^-1/2 A D^-1/2` of the undirected
/// skeleton restricted to `members` (positions into the graph's node list).
pub fn normalized_laplacian(adj: &[Vec<bool>], members: &[usize]) -> DMatrix<f64> {
    let n = members.len();
    let deg: Vec<f64> = members
        .iter()
        .map(|&i| members.iter().filter(|&&j| adj[i][j]).count() as f64)
        .collect();
    DMatrix::from_fn(n, n, |r, c| {
        let a = if adj[members[r]][members[c]] { 1.0 } else { 0.0 };
        let id = if r == c && deg[r] > 0.0 { 1.0 } else { 0.0 };
        if deg[r] == 0.0 || deg[c] == 0.0 {
            id
        } else {
            id - a / (deg[r] * deg[c]).sqrt()
        }
    })
}

/// Per-node spectral position: eigenvectors 2..=d_lpe+1 of the normalized
/// Laplacian, solved per connected component so that identical components
/// get identical rows. Singleton components get zero rows.
pub fn laplacian_pe(g: &SceneGraph, d_lpe: usize) -> Tensor {
    let n = g.num_nodes();
    let mut out = Tensor::zeros(&[n, d_lpe]);
    if n == 0 || d_lpe == 0 {
        return out;
    }
    let mut adj = vec![vec![false; n]; n];
    let mut uf = UnionFind::<usize>::new(n);
    for (s, d) in g.edge_positions() {
        adj[s][d] = true;
        adj[d][s] = true;
        uf.union(s, d);
    }
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let root = uf.find(i);
        let c = *slot.entry(root).or_insert_with(|| {
            components.push(Vec::new());
            components.len() - 1
        });
        components[c].push(i);
    }
    for members in components.iter().filter(|m| m.len() > 1) {
        let lap = normalized_laplacian(&adj, members);
        let eig = SymmetricEigen::new(lap);
        let mut order: Vec<usize> = (0..members.len()).collect();
        // stable sort keeps the solver's order among exact ties
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        for (col, &e) in order.iter().skip(1).take(d_lpe).enumerate() {
            let v = eig.eigenvectors.column(e);
            let sign = v
                .iter()
                .find(|x| x.abs() > 1e-10)
                .map_or(1.0, |x| x.signum());
            for (r, &node) in members.iter().enumerate() {
                out.row_mut(node)[col] = (sign * v[r]) as Float;
            }
        }
    }
    out
}

/// Text-attributed graph with positional columns appended to node rows.
#[derive(Clone, Debug)]
pub struct EmbeddedGraph {
    pub node_matrix: Tensor,
    pub edge_index: Vec<(usize, usize)>,
    pub edge_matrix: Tensor,
}

impl EmbeddedGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_matrix.rows()
    }
}

/// Memoizes text vectors; labels repeat heavily across frames.
#[derive(Clone, Debug)]
pub struct GraphEmbedder {
    pub text: TextEmbedder,
    pub d_lpe: usize,
    cache: HashMap<String, Vec<Float>>,
}

impl GraphEmbedder {
    pub fn new(text: TextEmbedder, d_lpe: usize) -> Self {
        Self {
            text,
            d_lpe,
            cache: HashMap::new(),
        }
    }

    pub fn node_width(&self) -> usize {
        self.text.dim() + self.d_lpe
    }

    fn vector(&mut self, s: &str) -> Result<&[Float]> {
        if !self.cache.contains_key(s) {
            let v = self.text.embed_text(s)?;
            self.cache.insert(s.to_string(), v);
        }
        Ok(&self.cache[s])
    }

    pub fn embed_graph(&mut self, g: &SceneGraph) -> Result<EmbeddedGraph> {
        let d = self.text.dim();
        let width = self.node_width();
        let pe = laplacian_pe(g, self.d_lpe);
        let mut nodes = Vec::with_capacity(g.num_nodes() * width);
        for (i, node) in g.nodes().iter().enumerate() {
            nodes.extend_from_slice(self.vector(&node.label)?);
            nodes.extend_from_slice(pe.row(i));
        }
        let mut edges = Vec::with_capacity(g.edges().len() * d);
        for e in g.edges() {
            edges.extend_from_slice(self.vector(&e.predicate)?);
        }
        Ok(EmbeddedGraph {
            node_matrix: Tensor::matrix(g.num_nodes(), width, nodes),
            edge_index: g.edge_positions(),
            edge_matrix: Tensor::matrix(g.edges().len(), d, edges),
        })
    }
}

pub fn embed_graph(g: &SceneGraph, emb: &TextEmbedder, d_lpe: usize) -> Result<EmbeddedGraph> {
    GraphEmbedder::new(emb.clone(), d_lpe).embed_graph(g)
}
