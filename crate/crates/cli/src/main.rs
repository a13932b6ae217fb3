use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use dygenc::graph::{CompactionMode, QaSample, Split};
use dygenc::pcst::{retrieve_frames, PcstConfig};
use dygenc::seqenc::{write_attention_csv, TemporalKind};
use dygenc::synth::{generate_corpus, WorldSpec};
use dygenc::trainer::{
    ablate, compression_report, evaluate, load_checkpoint, save_checkpoint, split_of, train, write_ablation_csv,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "dygenc", version, about = "Dynamic scene graph question answering")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus as JSONL.
    Generate {
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// World description (TOML); built-in world when omitted.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Train and keep the best-validation checkpoint.
    Train {
        /// TOML with TrainConfig fields, plus `corpus`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Keep only the first occurrence of each distinct frame.
        #[arg(long)]
        global_dedup: bool,
    },
    /// Per-template accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Play every episode backwards before answering.
        #[arg(long)]
        reverse_time: bool,
        #[arg(long)]
        global_dedup: bool,
    },
    /// Train and test a grid of temporal encodings × query-token counts.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// e.g. `k=1,2,4,16` or `k=1,16;temporal=rope,ape`
        #[arg(long, default_value = "k=1,2,4,16")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compression ratio of the soft prompt against the textualized frames.
    Compression {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Soft-prompt vectors and cross-attention maps for each sample.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the frames most relevant to a query.
    Retrieve {
        /// Defaults to each sample's own question.
        #[arg(long)]
        query: Option<String>,
        #[arg(long)]
        budget: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    seed: Option<u64>,
    config: serde_json::Value,
    corpus_sha256: Option<String>,
    checkpoint: Option<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            seed: None,
            config: serde_json::Value::Null,
            corpus_sha256: None,
            checkpoint: None,
            artifacts: Vec::new(),
        }
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// `<dir>/manifest.json` for directory outputs, `<file>.manifest.json` otherwise.
fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run_manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

/// `--ckpt` accepts either a `train --out` directory or the checkpoint inside it.
fn checkpoint_dir(p: &Path) -> PathBuf {
    let inner = p.join("checkpoint");
    if inner.join("manifest.json").exists() {
        inner
    } else {
        p.to_path_buf()
    }
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var("DYGENC_SEED") {
        Ok(v) => Ok(Some(v.trim().parse().map_err(|_| anyhow!("DYGENC_SEED={v:?} is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

/// Train config plus the corpus path it may name.
fn load_config(path: Option<&Path>, corpus_flag: Option<PathBuf>) -> anyhow::Result<(TrainConfig, PathBuf)> {
    let (mut cfg, from_file) = match path {
        None => (TrainConfig::desk(), None),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let mut table: toml::Table =
                toml::from_str(&text).map_err(|e| anyhow!("config {}: {e}", p.display()))?;
            let corpus = match table.remove("corpus") {
                Some(toml::Value::String(s)) => Some(p.parent().unwrap_or(Path::new("")).join(s)),
                Some(other) => return Err(anyhow!("config {}: field `corpus` must be a path, got {other}", p.display())),
                None => None,
            };
            let rest = toml::to_string(&table)?;
            let cfg = TrainConfig::from_toml(&rest).with_context(|| format!("config {}", p.display()))?;
            (cfg, corpus)
        }
    };
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    let corpus = corpus_flag
        .or(from_file)
        .ok_or_else(|| anyhow!("missing field `corpus`: pass --corpus or set `corpus` in the config"))?;
    Ok((cfg, corpus))
}

fn load_corpus(path: &Path, global_dedup: bool) -> anyhow::Result<Vec<QaSample>> {
    let mut samples = dygenc::io::load_jsonl(path)?;
    if global_dedup {
        for s in &mut samples {
            s.dg = s.dg.recompact(CompactionMode::Global);
        }
    }
    Ok(samples)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn parse_grid(grid: &str) -> anyhow::Result<(Vec<TemporalKind>, Vec<usize>)> {
    let mut kinds = vec![TemporalKind::Rope];
    let mut ks = vec![1, 2, 4, 16];
    for part in grid.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part.split_once('=').ok_or_else(|| anyhow!("grid entry {part:?} needs key=values"))?;
        let values = values.split(',').map(str::trim);
        match key.trim() {
            "k" => ks = values.map(|v| v.parse().map_err(|_| anyhow!("bad k {v:?}"))).collect::<anyhow::Result<_>>()?,
            "temporal" => kinds = values.map(|v| v.parse().map_err(anyhow::Error::from)).collect::<anyhow::Result<_>>()?,
            other => return Err(anyhow!("unknown grid axis {other:?}")),
        }
    }
    Ok((kinds, ks))
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Generate { episodes, seed, out, world } => {
            let spec = match &world {
                Some(p) => WorldSpec::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("world {}", p.display()))?,
                None => WorldSpec::default(),
            };
            let seed = env_seed()?.or(seed).unwrap_or(0);
            let corpus = generate_corpus(&spec, episodes, seed)?;
            dygenc::io::write_jsonl(create(&out)?, &corpus)?;
            let mut m = RunManifest::new("generate");
            m.seed = Some(seed);
            m.config = serde_json::json!({ "episodes": episodes, "world": spec });
            m.corpus_sha256 = Some(sha256_file(&out)?);
            m.artifacts.push(out.clone());
            m.write(&manifest_path(&out, false))?;
            log::info!("wrote {} samples to {}", corpus.len(), out.display());
        }
        Cmd::Train { config, corpus, out, global_dedup } => {
            let (cfg, corpus_path) = load_config(config.as_deref(), corpus)?;
            let samples = load_corpus(&corpus_path, global_dedup)?;
            let (model, report) = train(&cfg, &samples)?;
            fs::create_dir_all(&out)?;
            let ckpt = out.join("checkpoint");
            save_checkpoint(&model, &cfg, &ckpt)?;
            let metrics = out.join("metrics.csv");
            report.write_csv(create(&metrics)?)?;
            let mut m = RunManifest::new("train");
            m.seed = Some(cfg.seed);
            m.config = serde_json::to_value(&cfg)?;
            m.corpus_sha256 = Some(sha256_file(&corpus_path)?);
            m.checkpoint = Some(ckpt);
            m.artifacts.push(metrics);
            m.write(&manifest_path(&out, true))?;
            log::info!(
                "best epoch {} with val accuracy {:.4}",
                report.best_epoch,
                report.best_val_accuracy
            );
        }
        Cmd::Eval { ckpt, corpus, split, out, reverse_time, global_dedup } => {
            let (mut model, cfg) = load_checkpoint(checkpoint_dir(&ckpt))?;
            let mut samples = split_of(&load_corpus(&corpus, global_dedup)?, split);
            if reverse_time {
                for s in &mut samples {
                    s.dg = s.dg.time_reversed();
                }
            }
            let report = evaluate(&mut model, &samples)?;
            let mut w = create(&out)?;
            report.write_csv(&mut w)?;
            w.flush()?;
            let mut m = RunManifest::new("eval");
            m.seed = Some(cfg.seed);
            m.config = serde_json::json!({ "split": split.as_str(), "reverse_time": reverse_time });
            m.corpus_sha256 = Some(sha256_file(&corpus)?);
            m.checkpoint = Some(ckpt);
            m.artifacts.push(out.clone());
            m.write(&manifest_path(&out, false))?;
            println!("{}", report.overall);
        }
        Cmd::Ablate { config, corpus, grid, out } => {
            let (cfg, corpus_path) = load_config(config.as_deref(), corpus)?;
            let (kinds, ks) = parse_grid(&grid)?;
            let samples = load_corpus(&corpus_path, false)?;
            let digest = sha256_file(&corpus_path)?;
            fs::create_dir_all(&out)?;
            let mut failed: Option<anyhow::Error> = None;
            let rows = ablate(&cfg, &samples, &kinds, &ks, |row| {
                let dir = out.join(format!("{}_k{}", row.temporal_kind, row.k_tokens));
                let res = (|| -> anyhow::Result<()> {
                    fs::create_dir_all(&dir)?;
                    let csv = dir.join("eval.csv");
                    row.report.write_csv(create(&csv)?)?;
                    let mut m = RunManifest::new("ablate");
                    m.seed = Some(cfg.seed);
                    m.config = serde_json::to_value(TrainConfig {
                        temporal_kind: row.temporal_kind,
                        k_tokens: row.k_tokens,
                        ..cfg.clone()
                    })?;
                    m.corpus_sha256 = Some(digest.clone());
                    m.artifacts.push(csv);
                    m.write(&manifest_path(&dir, true))
                })();
                if let Err(e) = res {
                    failed.get_or_insert(e);
                }
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
            let table = out.join("table.csv");
            write_ablation_csv(&rows, create(&table)?)?;
            let mut m = RunManifest::new("ablate");
            m.seed = Some(cfg.seed);
            m.config = serde_json::json!({ "grid": grid, "base": cfg });
            m.corpus_sha256 = Some(digest);
            m.artifacts.push(table);
            m.write(&manifest_path(&out, true))?;
        }
        Cmd::Compression { config, corpus, out } => {
            let (cfg, _) = load_config(config.as_deref(), Some(corpus.clone()))?;
            let samples = load_corpus(&corpus, false)?;
            let mut w = create(&out)?;
            writeln!(w, "configuration,ratio")?;
            for (name, se) in [("ge+se", true), ("ge", false)] {
                let mc = dygenc::model::ModelConfig { enable_se: se, ..cfg.model_config() };
                writeln!(w, "{name},{}", compression_report(&samples, &mc)?)?;
            }
            w.flush()?;
            let mut m = RunManifest::new("compression");
            m.config = serde_json::to_value(&cfg)?;
            m.corpus_sha256 = Some(sha256_file(&corpus)?);
            m.artifacts.push(out.clone());
            m.write(&manifest_path(&out, false))?;
        }
        Cmd::Encode { ckpt, input, out } => {
            let (mut model, cfg) = load_checkpoint(checkpoint_dir(&ckpt))?;
            let samples = load_corpus(&input, false)?;
            fs::create_dir_all(&out)?;
            let soft_path = out.join("soft_prompts.csv");
            let attn_path = out.join("attention.csv");
            let mut soft = create(&soft_path)?;
            let mut attn = create(&attn_path)?;
            writeln!(soft, "sample,token,values")?;
            writeln!(attn, "sample,layer,head,query_index,frame_index,weight")?;
            for (i, s) in samples.iter().enumerate() {
                let seq = model.encode_sequence(&s.dg)?;
                let v = model.soft_prompt_value(&seq)?;
                let (rows, cols) = v.dims2();
                for r in 0..rows {
                    let vals: Vec<String> = (0..cols).map(|c| v.at(r, c).to_string()).collect();
                    writeln!(soft, "{i},{r},{}", vals.join(" "))?;
                }
                if let Some(maps) = model.attention_maps(&seq)? {
                    let mut buf = Vec::new();
                    write_attention_csv(&maps, &seq.t, &mut buf)?;
                    for line in String::from_utf8(buf)?.lines().skip(1) {
                        writeln!(attn, "{i},{line}")?;
                    }
                }
            }
            soft.flush()?;
            attn.flush()?;
            let mut m = RunManifest::new("encode");
            m.seed = Some(cfg.seed);
            m.corpus_sha256 = Some(sha256_file(&input)?);
            m.checkpoint = Some(ckpt);
            m.artifacts = vec![soft_path, attn_path];
            m.write(&manifest_path(&out, true))?;
        }
        Cmd::Retrieve { query, budget, input, out } => {
            let mut samples = load_corpus(&input, false)?;
            let emb = dygenc::embed::TextEmbedder::hashed(dygenc::embed::DEFAULT_DIM, 0);
            let pcst = PcstConfig::default();
            for s in &mut samples {
                let q = query.clone().unwrap_or_else(|| s.question.clone());
                s.dg = retrieve_frames(&s.dg, &q, budget, &emb, &pcst)?;
            }
            dygenc::io::write_jsonl(create(&out)?, &samples)?;
            let mut m = RunManifest::new("retrieve");
            m.config = serde_json::json!({ "query": query, "budget": budget, "pcst": pcst });
            m.corpus_sha256 = Some(sha256_file(&input)?);
            m.artifacts.push(out.clone());
            m.write(&manifest_path(&out, false))?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<dygenc::Error>() {
        Some(dygenc::Error::Numerics(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
