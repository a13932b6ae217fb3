//! The full pipeline: scene graphs → graph tokens → temporal encoding →
//! query-token compression → projection → soft prompt → answer.

use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::embed::{GraphEmbedder, TextEmbedder};
use crate::encoder::{GraphBatch, GraphEncoder, GraphEncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{DynamicGraph, QaSample, SceneGraph};
use crate::lm::{LmConfig, Projector, ToyDecoderLM, Tokenizer};
use crate::params::{Group, ParamId, ParamStore, Session};
use crate::seqenc::{AttentionMap, QFormer, QFormerConfig, TemporalEncoder, TemporalKind};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub text_dim: usize,
    pub d_lpe: usize,
    pub embed_seed: u64,
    pub gnn_hidden: usize,
    pub gnn_layers: usize,
    pub gnn_heads: usize,
    pub d_g: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
    pub k_tokens: usize,
    pub temporal_kind: TemporalKind,
    pub enable_ge: bool,
    pub enable_te: bool,
    pub enable_se: bool,
    pub lm: LmConfig,
    /// Longest answer the decoder may produce.
    pub max_answer_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text_dim: crate::embed::DEFAULT_DIM,
            d_lpe: crate::embed::DEFAULT_LPE,
            embed_seed: 0,
            gnn_hidden: 64,
            gnn_layers: 2,
            gnn_heads: 4,
            d_g: 64,
            qformer_layers: 2,
            qformer_heads: 4,
            k_tokens: 1,
            temporal_kind: TemporalKind::Rope,
            enable_ge: true,
            enable_te: true,
            enable_se: true,
            lm: LmConfig::default(),
            max_answer_tokens: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_tokens == 0 {
            return Err(Error::Config("k_tokens must be at least 1".into()));
        }
        if self.enable_te && self.temporal_kind == TemporalKind::Rope && self.d_g % 2 != 0 {
            return Err(Error::Config(format!("rotary encoding needs an even d_g, got {}", self.d_g)));
        }
        Ok(())
    }

    pub fn graph_config(&self) -> GraphEncoderConfig {
        GraphEncoderConfig {
            node_dim: self.text_dim + self.d_lpe,
            edge_dim: self.text_dim,
            hidden: self.gnn_hidden,
            d_g: self.d_g,
            layers: self.gnn_layers,
            heads: self.gnn_heads,
            message_passing: self.enable_ge,
        }
    }

    /// Soft-prompt positions for a sequence of `m` graph tokens.
    pub fn soft_tokens(&self, m: usize) -> usize {
        if self.enable_se {
            self.k_tokens
        } else {
            m
        }
    }
}

/// A dynamic graph with its text embedding done once: unique frame graphs
/// laid out as a batch, plus the frame → unique-graph map.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub batch: GraphBatch,
    pub frame_graph: Vec<usize>,
    pub t: Vec<u64>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Tokenized question/answer pointing at a shared encoded sequence.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sequence: Rc<EncodedSequence>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub gold: String,
    pub template_id: String,
}

pub struct DygencModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedder: GraphEmbedder,
    pub graph: GraphEncoder,
    pub temporal: Option<TemporalEncoder>,
    pub qformer: Option<QFormer>,
    pub projector: Projector,
    pub lm: ToyDecoderLM,
}

/// Forward products kept for inspection.
pub struct SoftPrompt {
    pub soft: Var,
    pub graph_tokens: Var,
    pub cross_attention: Vec<Var>,
}

impl DygencModel {
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let graph = GraphEncoder::new(&mut store, config.graph_config(), &mut rng)?;
        let temporal = if config.enable_te {
            Some(TemporalEncoder::new(&mut store, config.temporal_kind, config.d_g)?)
        } else {
            None
        };
        let qformer = if config.enable_se {
            let qc = QFormerConfig {
                d_g: config.d_g,
                k: config.k_tokens,
                layers: config.qformer_layers,
                heads: config.qformer_heads,
            };
            Some(QFormer::new(&mut store, qc, &mut rng)?)
        } else {
            None
        };
        let projector = Projector::new(&mut store, config.d_g, config.lm.d_llm, &mut rng);
        let lm = ToyDecoderLM::new(&mut store, config.lm.clone(), tokenizer, &mut rng)?;
        let embedder = GraphEmbedder::new(TextEmbedder::hashed(config.text_dim, config.embed_seed), config.d_lpe);
        Ok(Self { config, store, embedder, graph, temporal, qformer, projector, lm })
    }

    /// Tokenizer over every question, answer, label and predicate.
    pub fn build_tokenizer(samples: &[QaSample]) -> Tokenizer {
        let mut texts: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for s in samples {
            texts.push(s.question.clone());
            texts.push(s.answer.clone());
            for g in s.dg.graphs() {
                for n in g.nodes() {
                    if seen.insert(n.label.clone()) {
                        texts.push(n.label.clone());
                    }
                }
                for e in g.edges() {
                    if seen.insert(e.predicate.clone()) {
                        texts.push(e.predicate.clone());
                    }
                }
            }
        }
        Tokenizer::build(texts.iter().map(String::as_str))
    }

    /// Trainable parameters per component, for freezing and reporting.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut v = self.graph.params();
        if let Some(t) = &self.temporal {
            v.extend(t.params());
        }
        if let Some(q) = &self.qformer {
            v.extend(q.params());
        }
        v.extend(self.projector.params());
        v
    }

    /// Freeze or unfreeze the base language-model weights.
    pub fn set_base_frozen(&mut self, frozen: bool) {
        for id in self.lm.base_params() {
            self.store.set_trainable(id, !frozen);
        }
    }

    pub fn encode_sequence(&mut self, dg: &DynamicGraph) -> Result<EncodedSequence> {
        if dg.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut unique: Vec<&SceneGraph> = Vec::new();
        let mut slot: HashMap<&SceneGraph, usize> = HashMap::new();
        let mut frame_graph = Vec::with_capacity(dg.len());
        for g in dg.graphs() {
            let i = *slot.entry(g).or_insert_with(|| {
                unique.push(g);
                unique.len() - 1
            });
            frame_graph.push(i);
        }
        let embedded = unique
            .iter()
            .map(|g| self.embedder.embed_graph(g))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = embedded.iter().collect();
        Ok(EncodedSequence {
            batch: GraphBatch::new(&refs)?,
            frame_graph,
            t: dg.indices(),
        })
    }

    /// Embed and tokenize samples, sharing the encoded sequence between
    /// samples about the same dynamic graph.
    pub fn prepare(&mut self, samples: &[QaSample]) -> Result<Vec<PreparedSample>> {
        let mut cache: HashMap<&DynamicGraph, Rc<EncodedSequence>> = HashMap::new();
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let seq = match cache.get(&s.dg) {
                Some(seq) => seq.clone(),
                None => {
                    let seq = Rc::new(self.encode_sequence(&s.dg)?);
                    cache.insert(&s.dg, seq.clone());
                    seq
                }
            };
            let question = self.lm.tokenizer.tokenize(&s.question);
            if question.iter().all(|&i| i == self.lm.tokenizer.id(crate::lm::UNK)) {
                log::warn!("question {:?} has only unknown words", s.question);
            }
            out.push(PreparedSample {
                sequence: seq,
                question,
                answer: self.lm.tokenizer.tokenize(&s.answer),
                gold: s.answer.clone(),
                template_id: s.template_id.clone(),
            });
        }
        Ok(out)
    }

    /// Graph tokens (m × d_g, before temporal encoding).
    pub fn graph_tokens(&self, s: &mut Session<'_>, seq: &EncodedSequence) -> Result<Var> {
        let unique = self.graph.forward(s, &seq.batch)?;
        s.embedding(unique, &seq.frame_graph)
    }

    pub fn soft_prompt(&self, s: &mut Session<'_>, seq: &EncodedSequence) -> Result<SoftPrompt> {
        let tokens = self.graph_tokens(s, seq)?;
        let mut x = tokens;
        if let Some(te) = &self.temporal {
            x = te.apply(s, x, &seq.t)?;
        }
        let mut cross_attention = Vec::new();
        if let Some(qf) = &self.qformer {
            let (c, maps) = qf.forward(s, x)?;
            x = c;
            cross_attention = maps;
        }
        let soft = self.projector.forward(s, x)?;
        Ok(SoftPrompt { soft, graph_tokens: tokens, cross_attention })
    }

    pub fn soft_prompt_value(&self, seq: &EncodedSequence) -> Result<Tensor> {
        let mut s = Session::new(&self.store);
        let sp = self.soft_prompt(&mut s, seq)?;
        Ok(s.value(sp.soft).clone())
    }

    /// Cross-attention weights per layer and head; `None` without the
    /// query-token compressor.
    pub fn attention_maps(&self, seq: &EncodedSequence) -> Result<Option<Vec<AttentionMap>>> {
        if self.qformer.is_none() {
            return Ok(None);
        }
        let mut s = Session::new(&self.store);
        let sp = self.soft_prompt(&mut s, seq)?;
        let (k, m) = (self.config.k_tokens, seq.len());
        let mut maps = Vec::new();
        for (layer, node) in sp.cross_attention.iter().enumerate() {
            let (heads, probs) = s.attention_probs(*node).expect("cross-attention node");
            for head in 0..heads {
                let w = probs[head * k * m..(head + 1) * k * m].to_vec();
                maps.push(AttentionMap { layer, head, weights: Tensor::matrix(k, m, w) });
            }
        }
        Ok(Some(maps))
    }

    /// Greedy answer for one sample.
    pub fn answer(&self, seq: &EncodedSequence, question: &[usize]) -> Result<String> {
        let soft = self.soft_prompt_value(seq)?;
        self.lm.generate(&self.store, &soft, question, self.config.max_answer_tokens)
    }

    /// Greedy answers, computing each distinct sequence's soft prompt once.
    pub fn answer_all(&self, samples: &[PreparedSample]) -> Result<Vec<String>> {
        let mut soft_cache: HashMap<*const EncodedSequence, Tensor> = HashMap::new();
        samples
            .iter()
            .map(|p| {
                let key = Rc::as_ptr(&p.sequence);
                if !soft_cache.contains_key(&key) {
                    soft_cache.insert(key, self.soft_prompt_value(&p.sequence)?);
                }
                self.lm
                    .generate(&self.store, &soft_cache[&key], &p.question, self.config.max_answer_tokens)
            })
            .collect()
    }

    /// Sum of per-sample answer losses, each scaled by `weight`, for samples
    /// sharing one sequence. Returns the loss node and the unscaled losses.
    pub fn group_loss(
        &self,
        s: &mut Session<'_>,
        seq: &EncodedSequence,
        samples: &[&PreparedSample],
        weight: Float,
    ) -> Result<(Var, Vec<Float>)> {
        let sp = self.soft_prompt(s, seq)?;
        let mut total: Option<Var> = None;
        let mut values = Vec::with_capacity(samples.len());
        for p in samples {
            let l = self.lm.loss(s, sp.soft, &p.question, &p.answer)?;
            values.push(s.value(l).item());
            let l = s.scale(l, weight);
            total = Some(match total {
                Some(t) => s.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| Error::Config("empty sample group".into()))?;
        Ok((total, values))
    }

    pub fn count_params(&self, group: Option<Group>) -> usize {
        self.store
            .ids()
            .filter(|&id| group.is_none_or(|g| self.store.group(id) == g))
            .map(|id| self.store.get(id).numel())
            .sum()
    }
}
