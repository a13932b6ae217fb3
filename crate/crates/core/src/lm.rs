//! Word-level tokenizer, soft-prompt projector, and a small decoder-only
//! language model with low-rank adapters on the attention projections.

use std::collections::BTreeSet;
use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, AttnMask, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{Group, ParamId, ParamStore, Session};
use crate::tensor::{Float, Tensor};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const GRAPH_OPEN: &str = "<graph>";
pub const GRAPH_CLOSE: &str = "</graph>";
pub const UNK: &str = "<unk>";
pub const SPECIALS: [&str; 6] = [PAD, BOS, EOS, GRAPH_OPEN, GRAPH_CLOSE, UNK];
/// Literal text before the graph delimiters.
pub const PROMPT_PREFIX: &str = "based on scene graph ,";

/// Lowercase, split punctuation into its own words, collapse whitespace.
pub fn normalize_text(s: &str) -> String {
    words(s).join(" ")
}

fn words(s: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(s.len() + 8);
    for c in s.to_lowercase().chars() {
        if matches!(c, '?' | ',' | '.' | '!' | ';' | ':') {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Specials first, then every word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for w in words(PROMPT_PREFIX) {
            set.insert(w);
        }
        for t in texts {
            set.extend(words(t));
        }
        let vocab = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_vocab(vocab)
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.index[UNK])
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn tokenize(&self, s: &str) -> Vec<usize> {
        words(s).iter().map(|w| self.id(w)).collect()
    }

    /// Number of words `s` splits into, known or not.
    pub fn count(s: &str) -> usize {
        words(s).len()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.vocab.get(i).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: Float,
    pub dropout: Float,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { enabled: true, rank: 8, alpha: 16.0, dropout: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: Float,
    pub lora: LoraConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_llm: 128,
            layers: 4,
            heads: 4,
            max_len: 160,
            dropout: 0.0,
            lora: LoraConfig::default(),
        }
    }
}

/// Low-rank update `x · A · B · α/r` added to a frozen projection. `B`
/// starts at zero so the adapted layer initially equals the base layer.
#[derive(Clone, Debug)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: Float,
    pub dropout: Float,
}

impl Lora {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut ChaCha8Rng) -> Self {
        let a = store.add_linear_weight(&format!("{name}.lora_a"), d_in, cfg.rank, rng);
        let b = store.add_const(&format!("{name}.lora_b"), &[cfg.rank, d_out], 0.0);
        store.set_group(a, Group::Adapter);
        store.set_group(b, Group::Adapter);
        Self { a, b, scale: cfg.alpha / cfg.rank as Float, dropout: cfg.dropout }
    }

    fn delta(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let x = s.dropout(x, self.dropout);
        let (a, b) = (s.p(self.a), s.p(self.b));
        let h = s.matmul(x, a)?;
        let h = s.matmul(h, b)?;
        Ok(s.scale(h, self.scale))
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    lora_q: Option<Lora>,
    lora_v: Option<Lora>,
    ln2: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct ToyDecoderLM {
    pub config: LmConfig,
    pub tokenizer: Tokenizer,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
}

impl ToyDecoderLM {
    pub fn new(store: &mut ParamStore, config: LmConfig, tokenizer: Tokenizer, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = config.d_llm;
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!("{} heads must divide d_llm={d}", config.heads)));
        }
        if config.lora.enabled && config.lora.rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        let embed = store.add_normal("lm.embed", &[tokenizer.len(), d], 0.02, rng);
        let pos = store.add_normal("lm.pos", &[config.max_len, d], 0.02, rng);
        let blocks = (0..config.layers)
            .map(|i| {
                let n = |s: &str| format!("lm.l{i}.{s}");
                let lora = |store: &mut ParamStore, rng: &mut ChaCha8Rng, s: &str| {
                    config.lora.enabled.then(|| Lora::new(store, &n(s), d, d, &config.lora, rng))
                };
                let q = Linear::new(store, &n("q"), d, d, true, rng);
                let k = Linear::new(store, &n("k"), d, d, true, rng);
                let v = Linear::new(store, &n("v"), d, d, true, rng);
                let o = Linear::new(store, &n("o"), d, d, true, rng);
                DecoderBlock {
                    ln1: LayerNorm::new(store, &n("ln1"), d),
                    lora_q: lora(store, rng, "q"),
                    lora_v: lora(store, rng, "v"),
                    q,
                    k,
                    v,
                    o,
                    ln2: LayerNorm::new(store, &n("ln2"), d),
                    ffn: Mlp::new(store, &n("ffn"), d, 4 * d, d, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, "lm.ln_f", d);
        Ok(Self { config, tokenizer, embed, pos, blocks, ln_f })
    }

    /// Every base (non-adapter) tensor of the language model.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut out = vec![self.embed, self.pos];
        for b in &self.blocks {
            out.extend(b.ln1.params());
            for l in [&b.q, &b.k, &b.v, &b.o] {
                out.extend(l.params());
            }
            out.extend(b.ln2.params());
            out.extend(b.ffn.params());
        }
        out.extend(self.ln_f.params());
        out
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.lora_q.iter().chain(&b.lora_v))
            .flat_map(|l| [l.a, l.b])
            .collect()
    }

    /// Token embeddings for `ids`.
    pub fn embed_tokens(&self, s: &mut Session<'_>, ids: &[usize]) -> Result<Var> {
        let table = s.p(self.embed);
        s.embedding(table, ids)
    }

    /// Causal decoder over already-embedded inputs; returns `n × vocab`
    /// logits from the tied output head.
    pub fn forward_embedded(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let n = s.shape(x)[0];
        if n > self.config.max_len {
            return Err(Error::Config(format!(
                "sequence of {n} positions exceeds the model's {} positions",
                self.config.max_len
            )));
        }
        let pos_table = s.p(self.pos);
        let pos = s.slice(pos_table, Axis::Rows, 0, n)?;
        let mut x = s.add(x, pos)?;
        for b in &self.blocks {
            let h = b.ln1.forward(s, x)?;
            let mut q = b.q.forward(s, h)?;
            if let Some(l) = &b.lora_q {
                let d = l.delta(s, h)?;
                q = s.add(q, d)?;
            }
            let k = b.k.forward(s, h)?;
            let mut v = b.v.forward(s, h)?;
            if let Some(l) = &b.lora_v {
                let d = l.delta(s, h)?;
                v = s.add(v, d)?;
            }
            let a = s.attention(q, k, v, self.config.heads, AttnMask::Causal)?;
            let a = b.o.forward(s, a)?;
            let a = s.dropout(a, self.config.dropout);
            x = s.add(x, a)?;
            let h = b.ln2.forward(s, x)?;
            let f = b.ffn.forward(s, h)?;
            let f = s.dropout(f, self.config.dropout);
            x = s.add(x, f)?;
        }
        let h = self.ln_f.forward(s, x)?;
        let table = s.p(self.embed);
        s.matmul_t(h, table)
    }

    /// Prefix tokens, `<graph>`, the soft vectors, `</graph>`, a comma and
    /// the question. Returns the embedded sequence.
    pub fn assemble_prompt(&self, s: &mut Session<'_>, soft: Var, question: &[usize]) -> Result<Var> {
        let d = self.config.d_llm;
        let soft_shape = s.shape(soft).to_vec();
        if soft_shape.len() != 2 || soft_shape[1] != d {
            return Err(Error::shape("assemble_prompt", &soft_shape, &[0, d]));
        }
        let t = &self.tokenizer;
        let mut head = t.tokenize(PROMPT_PREFIX);
        head.push(t.id(GRAPH_OPEN));
        let mut tail = vec![t.id(GRAPH_CLOSE), t.id(",")];
        tail.extend_from_slice(question);
        let head = self.embed_tokens(s, &head)?;
        let tail = self.embed_tokens(s, &tail)?;
        s.concat(&[head, soft, tail], Axis::Rows)
    }

    pub fn prompt_len(&self, k: usize, question_len: usize) -> usize {
        Tokenizer::count(PROMPT_PREFIX) + 1 + k + 2 + question_len
    }

    /// Teacher-forced mean cross-entropy over the answer tokens (answer
    /// followed by `<eos>`).
    pub fn loss(&self, s: &mut Session<'_>, soft: Var, question: &[usize], answer: &[usize]) -> Result<Var> {
        let prompt = self.assemble_prompt(s, soft, question)?;
        let p = s.shape(prompt)[0];
        let x = if answer.is_empty() {
            prompt
        } else {
            let a = self.embed_tokens(s, answer)?;
            s.concat(&[prompt, a], Axis::Rows)?
        };
        let logits = self.forward_embedded(s, x)?;
        let eos = self.tokenizer.id(EOS);
        let n = p + answer.len();
        let mut targets = vec![None; n];
        for (i, &tok) in answer.iter().chain(std::iter::once(&eos)).enumerate() {
            targets[p - 1 + i] = Some(tok);
        }
        let loss = s.cross_entropy(logits, &targets)?;
        if !s.value(loss).item().is_finite() {
            return Err(Error::Numerics("non-finite language-model loss".into()));
        }
        Ok(loss)
    }

    /// Greedy decoding until `<eos>` or `max_new` tokens. Specials other
    /// than `<eos>` are never emitted.
    pub fn generate(&self, store: &ParamStore, soft: &Tensor, question: &[usize], max_new: usize) -> Result<String> {
        let eos = self.tokenizer.id(EOS);
        let mut out: Vec<usize> = Vec::new();
        for _ in 0..max_new {
            let mut s = Session::new(store);
            let soft_v = s.constant(soft.clone());
            let prompt = self.assemble_prompt(&mut s, soft_v, question)?;
            let x = if out.is_empty() {
                prompt
            } else {
                let a = self.embed_tokens(&mut s, &out)?;
                s.concat(&[prompt, a], Axis::Rows)?
            };
            if s.shape(x)[0] >= self.config.max_len {
                break;
            }
            let logits = self.forward_embedded(&mut s, x)?;
            let lv = s.value(logits);
            let last = lv.row(lv.rows() - 1);
            let next = last
                .iter()
                .enumerate()
                .filter(|&(i, _)| i == eos || !self.tokenizer.is_special(i))
                .fold((eos, Float::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            if next == eos {
                break;
            }
            out.push(next);
        }
        Ok(self.tokenizer.detokenize(&out))
    }
}

/// Maps compressed graph tokens into the language model's embedding space.
#[derive(Clone, Debug)]
pub struct Projector {
    pub mlp: Mlp,
}

impl Projector {
    pub fn new(store: &mut ParamStore, d_g: usize, d_llm: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { mlp: Mlp::new(store, "proj", d_g, d_llm, d_llm, rng) }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.mlp.forward(s, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// Containment check: the normalized gold answer contains the normalized
/// prediction.
pub fn accuracy(pred: &str, gold: &str) -> bool {
    let (p, g) = (normalize_text(pred), normalize_text(gold));
    !p.is_empty() && !g.is_empty() && g.contains(&p)
}
