//! Training, evaluation, compression accounting and the ablation grid.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{QaSample, SceneGraph, Split};
use crate::lm::{accuracy, Tokenizer};
use crate::model::{DygencModel, ModelConfig, PreparedSample};
use crate::optim::{cosine_schedule, AdamW, AdamWConfig};
use crate::params::{ParamStore, Session};
use crate::seqenc::TemporalKind;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// The published recipe (learning rate 2e-5).
    Paper,
    /// Same recipe with a learning rate and epoch budget suited to a
    /// language model trained from scratch.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: Float,
    pub weight_decay: Float,
    pub patience: usize,
    /// Training sequences with more compacted frames than this are dropped.
    pub max_seq_len: usize,
    pub seed: u64,
    pub temporal_kind: TemporalKind,
    pub k_tokens: usize,
    pub enable_ge: bool,
    pub enable_te: bool,
    pub enable_se: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<Float>,
    /// Freeze the base language model after this many epochs and keep
    /// training adapters, projector and encoders.
    pub freeze_base_after: Option<usize>,
    /// Stop after the first epoch that ends past this many seconds.
    pub time_budget_secs: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 32,
            epochs: 5,
            warmup_epochs: 1,
            lr: 2e-5,
            weight_decay: 0.05,
            patience: 2,
            max_seq_len: 60,
            seed: 0,
            temporal_kind: TemporalKind::Rope,
            k_tokens: 1,
            enable_ge: true,
            enable_te: true,
            enable_se: true,
            grad_clip: Some(1.0),
            freeze_base_after: None,
            time_budget_secs: None,
            model: ModelConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self {
            lr: 3e-4,
            ..Self::paper()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Parse TOML. A top-level `profile = "paper" | "desk"` picks the base
    /// values that the remaining keys override.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let profile = match table.remove("profile") {
            None => Profile::Desk,
            Some(v) => v
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("profile: {e}")))?,
        };
        let mut base = toml::Table::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, table);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.patience > self.epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup longer than training".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.model_config().validate()
    }

    /// Model settings with the ablation switches applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            temporal_kind: self.temporal_kind,
            k_tokens: self.k_tokens,
            enable_ge: self.enable_ge,
            enable_te: self.enable_te,
            enable_se: self.enable_se,
            ..self.model.clone()
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Stops when validation accuracy has not strictly improved for `patience`
/// consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<Float>,
    pub best_epoch: usize,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: 0, stale: 0 }
    }

    /// Record the accuracy of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, acc: Float) -> StopDecision {
        if self.best.is_none_or(|b| acc > b) {
            self.best = Some(acc);
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: Float,
    pub val_accuracy: Float,
    pub lr: Float,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: Float,
    pub stopped_early: bool,
    pub train_samples: usize,
    pub dropped_long: usize,
    pub seconds: f64,
}

impl TrainReport {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,steps,train_loss,val_accuracy,lr")?;
        for e in &self.epochs {
            writeln!(out, "{},{},{},{},{}", e.epoch, e.steps, e.train_loss, e.val_accuracy, e.lr)?;
        }
        Ok(())
    }
}

/// Samples of one split.
pub fn split_of(corpus: &[QaSample], split: Split) -> Vec<QaSample> {
    corpus.iter().filter(|s| s.split == split).cloned().collect()
}

/// Groups of consecutive positions that share one encoded sequence.
fn sequence_runs(samples: &[&PreparedSample]) -> Vec<std::ops::Range<usize>> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        if i == samples.len() || !Rc::ptr_eq(&samples[i].sequence, &samples[start].sequence) {
            runs.push(start..i);
            start = i;
        }
    }
    runs
}

fn add_into(acc: &mut [Option<Tensor>], grads: Vec<(crate::params::ParamId, Tensor)>) {
    for (id, g) in grads {
        match &mut acc[id.index()] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

fn clip(grads: &mut [Option<Tensor>], max_norm: Float) -> Float {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<Float>())
        .sum::<Float>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.scale_assign(s));
    }
    norm
}

/// One optimizer step on a batch (mean loss over its samples). Samples that
/// share a sequence should be adjacent; each run of them is encoded once.
/// Returns the per-sample losses.
pub fn train_step(
    model: &mut DygencModel,
    opt: &mut AdamW,
    samples: &[&PreparedSample],
    lr: Float,
    seed: u64,
    grad_clip: Option<Float>,
) -> Result<Vec<Float>> {
    let weight = 1.0 / samples.len() as Float;
    let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
    let mut losses = Vec::with_capacity(samples.len());
    for (r, run) in sequence_runs(samples).into_iter().enumerate() {
        let mut s = Session::training(&model.store, seed ^ (r as u64) << 40);
        let (loss, values) = model.group_loss(&mut s, &samples[run.start].sequence, &samples[run.clone()], weight)?;
        losses.extend(values);
        let mut g = s.backward(loss)?;
        add_into(&mut grads, s.param_grads(&mut g));
    }
    if let Some(c) = grad_clip {
        let norm = clip(&mut grads, c);
        if !norm.is_finite() {
            return Err(Error::Numerics(format!("gradient norm is {norm}")));
        }
    }
    let ids: Vec<_> = model.store.ids().collect();
    let grads: Vec<_> = grads.into_iter().zip(ids).filter_map(|(g, id)| g.map(|g| (id, g))).collect();
    opt.step(&mut model.store, &grads, lr)?;
    Ok(losses)
}

/// Events reported while training runs.
pub enum Progress<'a> {
    Epoch(&'a EpochLog, f64),
}

/// Train on the corpus's train split, select by validation accuracy.
/// Returns the model holding the best validation weights.
pub fn train(cfg: &TrainConfig, corpus: &[QaSample]) -> Result<(DygencModel, TrainReport)> {
    train_with(cfg, corpus, |_| {})
}

pub fn train_with(
    cfg: &TrainConfig,
    corpus: &[QaSample],
    mut progress: impl FnMut(Progress<'_>),
) -> Result<(DygencModel, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let train_raw: Vec<QaSample> = split_of(corpus, Split::Train);
    let val_raw: Vec<QaSample> = split_of(corpus, Split::Val);
    let kept: Vec<QaSample> = train_raw
        .iter()
        .filter(|s| s.dg.len() <= cfg.max_seq_len)
        .cloned()
        .collect();
    let dropped_long = train_raw.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    if val_raw.is_empty() {
        return Err(Error::Config("val split is empty".into()));
    }
    let tokenizer = DygencModel::build_tokenizer(corpus);
    let mut model = DygencModel::new(cfg.model_config(), tokenizer, cfg.seed)?;
    let train_set = model.prepare(&kept)?;
    let val_set = model.prepare(&val_raw)?;
    log::info!(
        "training on {} samples ({} dropped as longer than {}), {} validation, {} parameters",
        train_set.len(),
        dropped_long,
        cfg.max_seq_len,
        val_set.len(),
        model.count_params(None)
    );

    // samples about one episode stay adjacent so its graphs are encoded once
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: std::collections::HashMap<*const crate::model::EncodedSequence, usize> = Default::default();
    for (i, p) in train_set.iter().enumerate() {
        let g = *slot.entry(Rc::as_ptr(&p.sequence)).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs as u64;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.store,
    );
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store: Option<ParamStore> = None;
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        if cfg.freeze_base_after == Some(epoch - 1) && epoch > 1 {
            log::info!("freezing base language model from epoch {epoch}");
            model.set_base_frozen(true);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        let mut order = groups.clone();
        order.shuffle(&mut rng);
        let flat: Vec<usize> = order.into_iter().flatten().collect();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in flat.chunks(cfg.batch_size) {
            let samples: Vec<&PreparedSample> = batch.iter().map(|&i| &train_set[i]).collect();
            lr = cosine_schedule(step, warmup_steps, total_steps, cfg.lr)?;
            let seed = cfg.seed ^ step.wrapping_mul(1_000_003);
            let losses = train_step(&mut model, &mut opt, &samples, lr, seed, cfg.grad_clip)?;
            loss_sum += losses.iter().sum::<Float>();
            step += 1;
        }
        let train_loss = loss_sum / train_set.len() as Float;
        let val_accuracy = evaluate_prepared(&model, &val_set)?.overall;
        let entry = EpochLog { epoch, steps: step, train_loss, val_accuracy, lr };
        let elapsed = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: loss {train_loss:.4} val acc {val_accuracy:.4} ({elapsed:.0}s)"
        );
        progress(Progress::Epoch(&entry, elapsed));
        log.push(entry);
        let decision = stopper.observe(epoch, val_accuracy);
        if decision == StopDecision::Improved {
            best_store = Some(model.store.clone());
        }
        if decision == StopDecision::Stop {
            stopped_early = epoch < cfg.epochs;
            break;
        }
        if cfg.time_budget_secs.is_some_and(|b| elapsed > b) {
            log::warn!("time budget exhausted after epoch {epoch}");
            break;
        }
    }
    if let Some(best) = best_store {
        model.store = best;
    }
    let report = TrainReport {
        epochs: log,
        best_epoch: stopper.best_epoch,
        best_val_accuracy: stopper.best.unwrap_or(0.0),
        stopped_early,
        train_samples: train_set.len(),
        dropped_long,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateScore {
    pub template_id: String,
    pub n: usize,
    pub correct: usize,
}

impl TemplateScore {
    pub fn accuracy(&self) -> Float {
        if self.n == 0 {
            0.0
        } else {
            self.correct as Float / self.n as Float
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_template: Vec<TemplateScore>,
    pub overall: Float,
    pub predictions: Vec<String>,
}

impl EvalReport {
    pub fn accuracy_of(&self, template: &str) -> Option<Float> {
        self.per_template
            .iter()
            .find(|t| t.template_id == template)
            .map(TemplateScore::accuracy)
    }

    /// Pooled accuracy over several templates.
    pub fn pooled(&self, templates: &[&str]) -> Float {
        let (n, c) = self
            .per_template
            .iter()
            .filter(|t| templates.contains(&t.template_id.as_str()))
            .fold((0, 0), |(n, c), t| (n + t.n, c + t.correct));
        if n == 0 {
            0.0
        } else {
            c as Float / n as Float
        }
    }

    /// One row per template plus `all`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "template,n,correct,accuracy")?;
        let mut n = 0;
        let mut c = 0;
        for t in &self.per_template {
            writeln!(out, "{},{},{},{}", t.template_id, t.n, t.correct, t.accuracy())?;
            n += t.n;
            c += t.correct;
        }
        writeln!(out, "all,{n},{c},{}", self.overall)
    }
}

pub fn evaluate_prepared(model: &DygencModel, samples: &[PreparedSample]) -> Result<EvalReport> {
    let predictions = model.answer_all(samples)?;
    let mut by: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (p, pred) in samples.iter().zip(&predictions) {
        let ok = accuracy(pred, &p.gold);
        let e = by.entry(p.template_id.as_str()).or_default();
        e.0 += 1;
        e.1 += ok as usize;
        correct += ok as usize;
    }
    Ok(EvalReport {
        per_template: by
            .into_iter()
            .map(|(t, (n, c))| TemplateScore { template_id: t.to_string(), n, correct: c })
            .collect(),
        overall: if samples.is_empty() { 0.0 } else { correct as Float / samples.len() as Float },
        predictions,
    })
}

/// Accuracy per template on the given samples (no length cap).
pub fn evaluate(model: &mut DygencModel, samples: &[QaSample]) -> Result<EvalReport> {
    let prepared = model.prepare(samples)?;
    evaluate_prepared(model, &prepared)
}

/// Sentences `subject predicate object.` per edge plus `label.` per node
/// without edges.
pub fn textualize(g: &SceneGraph) -> String {
    let mut parts = Vec::new();
    if !g.edges().is_empty() {
        parts.push(g.to_string());
    }
    let pos = g.position_map();
    let mut touched = vec![false; g.num_nodes()];
    for e in g.edges() {
        touched[pos[&e.src]] = true;
        touched[pos[&e.dst]] = true;
    }
    for (n, t) in g.nodes().iter().zip(touched) {
        if !t {
            parts.push(format!("{}.", n.label));
        }
    }
    parts.join(" ")
}

/// Mean over samples of soft-prompt positions divided by the word count of
/// the fully textualized frame sequence.
pub fn compression_report(corpus: &[QaSample], cfg: &ModelConfig) -> Result<Float> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in corpus {
        let words: usize = s.dg.graphs().map(|g| Tokenizer::count(&textualize(g))).sum();
        if words == 0 {
            continue;
        }
        total += cfg.soft_tokens(s.dg.len()) as Float / words as Float;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("no sample has any textualized content".into()));
    }
    Ok(total / n as Float)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub temporal_kind: TemporalKind,
    pub k_tokens: usize,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub seconds: f64,
}

/// Train and test every (temporal kind, k) cell.
pub fn ablate(
    base: &TrainConfig,
    corpus: &[QaSample],
    kinds: &[TemporalKind],
    ks: &[usize],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let test = split_of(corpus, Split::Test);
    let mut rows = Vec::new();
    for &kind in kinds {
        for &k in ks {
            let cfg = TrainConfig { temporal_kind: kind, k_tokens: k, ..base.clone() };
            let (mut model, rep) = train(&cfg, corpus)?;
            let report = evaluate(&mut model, &test)?;
            let row = AblationRow { temporal_kind: kind, k_tokens: k, report, best_epoch: rep.best_epoch, seconds: rep.seconds };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Table with one row per cell and one column per template plus `all`.
pub fn write_ablation_csv(rows: &[AblationRow], mut out: impl Write) -> std::io::Result<()> {
    let templates: Vec<String> = rows
        .iter()
        .flat_map(|r| r.report.per_template.iter().map(|t| t.template_id.clone()))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    write!(out, "temporal_kind,num_tokens")?;
    for t in &templates {
        write!(out, ",{t}")?;
    }
    writeln!(out, ",all")?;
    for r in rows {
        write!(out, "{},{}", r.temporal_kind, r.k_tokens)?;
        for t in &templates {
            write!(out, ",{}", r.report.accuracy_of(t).unwrap_or(0.0))?;
        }
        writeln!(out, ",{}", r.report.overall)?;
    }
    Ok(())
}

/// Replace every train-split answer with another train answer of the same
/// template (a fixed permutation), destroying the question–graph link while
/// keeping each template's answer distribution.
pub fn shuffle_train_answers(corpus: &[QaSample], seed: u64) -> Vec<QaSample> {
    let mut out = corpus.to_vec();
    let mut by: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        if s.split == Split::Train {
            by.entry(s.template_id.clone()).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in by.values() {
        let mut answers: Vec<String> = idx.iter().map(|&i| corpus[i].answer.clone()).collect();
        answers.shuffle(&mut rng);
        for (&i, a) in idx.iter().zip(answers) {
            out[i].answer = a;
        }
    }
    out
}

/// Checkpoint = parameter store plus the config and vocabulary in the
/// manifest's metadata.
pub fn save_checkpoint(model: &DygencModel, cfg: &TrainConfig, dir: impl AsRef<Path>) -> Result<()> {
    let meta = serde_json::json!({
        "train_config": cfg,
        "vocab": model.lm.tokenizer.vocab(),
    });
    model.store.save(dir, &meta)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(DygencModel, TrainConfig)> {
    let dir = dir.as_ref();
    let meta = crate::params::checkpoint_meta(dir)?;
    let cfg: TrainConfig = serde_json::from_value(meta["train_config"].clone())
        .map_err(|e| Error::Checkpoint(format!("train_config: {e}")))?;
    let vocab: Vec<String> = serde_json::from_value(meta["vocab"].clone())
        .map_err(|e| Error::Checkpoint(format!("vocab: {e}")))?;
    let mut model = DygencModel::new(cfg.model_config(), Tokenizer::from_vocab(vocab), cfg.seed)?;
    model
        .store
        .load_into(dir, &[crate::params::Group::Base, crate::params::Group::Adapter])?;
    Ok((model, cfg))
}
