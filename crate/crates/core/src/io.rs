//! JSONL interchange: one [`QaSample`] per line.
//!
//! ```text
//! {"frames":[{"t":0,"nodes":[[0,"person"],[1,"cup"]],"edges":[[0,1,"holds"]]}],
//!  "question":"...","answer":"...","template_id":"after","split":"train"}
//! ```
//!
//! `t` is the raw frame index and may be omitted, in which case the frame's
//! position in the list is used.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DynamicGraph, Edge, Frame, Node, NodeId, QaSample, SceneGraph, Split};

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<u64>,
    nodes: Vec<(NodeId, String)>,
    edges: Vec<(NodeId, NodeId, String)>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    frames: Vec<FrameRecord>,
    question: String,
    answer: String,
    template_id: String,
    split: Split,
}

impl From<&SceneGraph> for FrameRecord {
    fn from(g: &SceneGraph) -> Self {
        FrameRecord {
            t: None,
            nodes: g.nodes().iter().map(|n| (n.id, n.label.clone())).collect(),
            edges: g
                .edges()
                .iter()
                .map(|e| (e.src, e.dst, e.predicate.clone()))
                .collect(),
        }
    }
}

fn to_record(s: &QaSample) -> SampleRecord {
    SampleRecord {
        frames: s
            .dg
            .frames()
            .iter()
            .map(|f| FrameRecord {
                t: Some(f.t),
                ..FrameRecord::from(&f.graph)
            })
            .collect(),
        question: s.question.clone(),
        answer: s.answer.clone(),
        template_id: s.template_id.clone(),
        split: s.split,
    }
}

fn from_record(r: SampleRecord, line: usize) -> Result<QaSample> {
    let schema = |message: String| Error::Schema { line, message };
    let mut frames = Vec::with_capacity(r.frames.len());
    for (i, fr) in r.frames.into_iter().enumerate() {
        let graph = SceneGraph::new(
            fr.nodes
                .into_iter()
                .map(|(id, label)| Node { id, label })
                .collect(),
            fr.edges
                .into_iter()
                .map(|(src, dst, predicate)| Edge { src, dst, predicate })
                .collect(),
        )
        .map_err(|e| schema(e.to_string()))?;
        frames.push(Frame {
            graph,
            t: fr.t.unwrap_or(i as u64),
        });
    }
    let dg = DynamicGraph::new(frames).map_err(|e| schema(e.to_string()))?;
    QaSample::new(dg, r.question, r.answer, r.template_id, r.split).map_err(|e| schema(e.to_string()))
}

/// Serialize one sample as a single JSON line (no trailing newline).
pub fn sample_to_line(s: &QaSample) -> String {
    serde_json::to_string(&to_record(s)).expect("sample serializes")
}

/// Parse one line; `line` is the 1-based line number used in errors.
pub fn sample_from_line(text: &str, line: usize) -> Result<QaSample> {
    let record: SampleRecord = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => Error::Schema {
                line,
                message: e.to_string(),
            },
            _ => Error::Parse {
                line,
                message: e.to_string(),
            },
        }
    })?;
    from_record(record, line)
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<QaSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        out.push(sample_from_line(&text, line_no)?);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, samples: &[QaSample]) -> std::io::Result<()> {
    for s in samples {
        writer.write_all(sample_to_line(s).as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<QaSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file))
}

pub fn save_jsonl(samples: &[QaSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(BufWriter::new(file), samples).map_err(|e| Error::io(path, e))
}
