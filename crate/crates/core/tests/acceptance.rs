//! End-to-end acceptance checks. One line per criterion; exits non-zero if
//! any fails. The learning criteria train on a 2,000-episode corpus and take
//! roughly an hour on one core.
use std::collections::BTreeMap;
use std::time::Instant;

use dygenc::embed::{embed_graph, TextEmbedder};
use dygenc::encoder::{GraphEncoder, GraphEncoderConfig};
use dygenc::gradcheck::module_checks;
use dygenc::graph::{compact_with, CompactionMode, DynamicGraph, QaSample, SceneGraph, Split};
use dygenc::io::{read_jsonl, write_jsonl};
use dygenc::lm::{LmConfig, LoraConfig, ToyDecoderLM, Tokenizer};
use dygenc::model::{DygencModel, ModelConfig};
use dygenc::params::{ParamStore, Session};
use dygenc::pcst::{pcst_solve, retrieve_frames, score_frames, PcstConfig, PrizedGraph, SolveMode};
use dygenc::seqenc::{QFormer, QFormerConfig, TemporalEncoder, TemporalKind};
use dygenc::synth::{generate_corpus, Query, WorldSpec};
use dygenc::tensor::Tensor;
use dygenc::trainer::{
    ablate, compression_report, evaluate, load_checkpoint, save_checkpoint, shuffle_train_answers, split_of, train,
    write_ablation_csv, EvalReport, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPISODES: usize = 2000;
const CORPUS_SEED: u64 = 7;
const LEARN_BUDGET_SECS: f64 = 30.0 * 60.0;
// per-cell budget for the k grid and for the shuffled control
const CELL_BUDGET_SECS: f64 = 6.0 * 60.0;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- 1 ---------------------------------------------------------------------

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut modules = std::collections::BTreeSet::new();
    for seed in 0..5 {
        for (name, rep) in module_checks(seed, 1e-5, 6)? {
            modules.insert(name.clone());
            if rep.max_rel_error > worst.0 {
                worst = (rep.max_rel_error, format!("{name} seed {seed} {}", rep.worst));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst.0 < 1e-4 && secs < 120.0 && modules.len() >= 6,
        format!("{} modules x 5 seeds, max rel err {:.2e} ({}), {secs:.1}s", modules.len(), worst.0, worst.1),
    ))
}

// ---- 2 ---------------------------------------------------------------------

fn invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, pass: bool, detail: String| {
        ok &= pass;
        if !pass {
            notes.push(format!("{name}: {detail}"));
        }
    };

    // mean-pool permutation invariance
    let mut store = ParamStore::new();
    let enc = GraphEncoder::new(&mut store, GraphEncoderConfig::default(), &mut rng)?;
    let emb = TextEmbedder::hashed(64, 0);
    let g = SceneGraph::from_parts(
        &[(0, "person"), (1, "cup"), (2, "table"), (3, "fridge"), (4, "sofa")],
        &[(0, 1, "holds"), (1, 2, "on"), (0, 3, "near"), (2, 3, "near")],
    )?;
    let perm = [3u32, 0, 4, 1, 2];
    let h = g.relabeled(|id| perm[id as usize])?;
    let d = max_diff(
        &enc.encode_graph(&store, &embed_graph(&g, &emb, 4)?)?,
        &enc.encode_graph(&store, &embed_graph(&h, &emb, 4)?)?,
    );
    check("permutation", d < 1e-10, format!("{d:e}"));

    // RoPE norm preservation and relative-position property
    let rope = |x: &Tensor, t: &[u64]| -> dygenc::Result<Tensor> {
        let mut st = ParamStore::new();
        let te = TemporalEncoder::new(&mut st, TemporalKind::Rope, x.cols())?;
        let mut s = Session::new(&st);
        let v = s.constant(x.clone());
        let y = te.apply(&mut s, v, t)?;
        Ok(s.value(y).clone())
    };
    let x = random(6, 64, &mut rng);
    let y = rope(&x, &[0, 3, 17, 40, 99, 1000])?;
    let norm_err = (0..6)
        .map(|r| {
            let n = |m: &Tensor| (0..64).map(|c| m.at(r, c).powi(2)).sum::<f64>().sqrt();
            (n(&x) - n(&y)).abs()
        })
        .fold(0.0, f64::max);
    check("rope norm", norm_err < 1e-12, format!("{norm_err:e}"));
    let (u, v) = (random(1, 64, &mut rng), random(1, 64, &mut rng));
    let dot = |i: u64, j: u64| -> dygenc::Result<f64> {
        let (a, b) = (rope(&u, &[i])?, rope(&v, &[j])?);
        Ok(a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum())
    };
    let rel = (dot(3, 5)? - dot(10, 12)?).abs().max((dot(0, 7)? - dot(93, 100)?).abs());
    check("rope relative", rel < 1e-10, format!("{rel:e}"));

    // softmax rows of every cross-attention map
    let mut qs = ParamStore::new();
    let qf = QFormer::new(&mut qs, QFormerConfig { k: 4, ..QFormerConfig::default() }, &mut rng)?;
    let maps = qf.attention_maps(&qs, &random(11, 64, &mut rng))?;
    let row_err = maps
        .iter()
        .flat_map(|m| (0..m.weights.rows()).map(move |r| (0..m.weights.cols()).map(|c| m.weights.at(r, c)).sum::<f64>()))
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    check("softmax rows", row_err < 1e-9, format!("{row_err:e}"));

    // zero-initialised adapters leave the base model unchanged
    let tok = Tokenizer::build(["which object did the person hold first ?", "cup book yes no"]);
    let lm = |lora: bool| -> dygenc::Result<(ParamStore, ToyDecoderLM)> {
        let mut st = ParamStore::new();
        let cfg = LmConfig { lora: LoraConfig { enabled: lora, ..LoraConfig::default() }, ..LmConfig::default() };
        let m = ToyDecoderLM::new(&mut st, cfg, tok.clone(), &mut ChaCha8Rng::seed_from_u64(4))?;
        Ok((st, m))
    };
    let ((with, lm_a), (mut without, lm_b)) = (lm(true)?, lm(false)?);
    for id in without.ids().collect::<Vec<_>>() {
        let src = with.find(without.name(id)).ok_or("base parameter missing")?;
        *without.get_mut(id) = with.get(src).clone();
    }
    let q = tok.tokenize("which object did the person hold first ?");
    let soft = random(1, lm_a.config.d_llm, &mut rng);
    let logits = |m: &ToyDecoderLM, st: &ParamStore| -> dygenc::Result<Tensor> {
        let mut s = Session::new(st);
        let h = s.constant(soft.clone());
        let p = m.assemble_prompt(&mut s, h, &q)?;
        let y = m.forward_embedded(&mut s, p)?;
        Ok(s.value(y).clone())
    };
    let lora = max_diff(logits(&lm_a, &with)?.data(), logits(&lm_b, &without)?.data());
    check("lora identity", lora < 1e-12, format!("{lora:e}"));

    // compaction idempotence and serialization round trips
    let corpus = generate_corpus(&WorldSpec::default(), 20, 3)?;
    for mode in [CompactionMode::Runs, CompactionMode::Global] {
        let idem = corpus.iter().all(|s| s.dg.recompact(mode) == s.dg.recompact(mode).recompact(mode));
        check("compaction", idem, format!("{mode:?}"));
    }
    let raw: Vec<SceneGraph> = corpus[0].dg.graphs().cloned().collect();
    let once = compact_with(raw, CompactionMode::Runs)?;
    check("compaction", once.recompact(CompactionMode::Runs) == once, "re-compaction".into());
    let mut a = Vec::new();
    write_jsonl(&mut a, &corpus)?;
    let back = read_jsonl(a.as_slice())?;
    let mut b = Vec::new();
    write_jsonl(&mut b, &back)?;
    check("jsonl", back == corpus && a == b, "round trip".into());
    let dir = tempfile::tempdir()?;
    let mut cfg = TrainConfig::desk();
    cfg.model.d_g = 16;
    cfg.model.gnn_hidden = 16;
    cfg.model.text_dim = 16;
    let model = DygencModel::new(cfg.model_config(), DygencModel::build_tokenizer(&corpus), 1)?;
    save_checkpoint(&model, &cfg, dir.path())?;
    let (loaded, cfg2) = load_checkpoint(dir.path())?;
    let same = loaded.store.ids().all(|id| loaded.store.get(id).data() == model.store.get(id).data());
    check("checkpoint", same && cfg2 == cfg, "round trip".into());

    Ok((ok, if ok { "all invariants hold".into() } else { notes.join("; ") }))
}

// ---- shared corpus and the learning criteria ------------------------------

fn learning_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 40;
    cfg.patience = 6;
    cfg.time_budget_secs = Some(LEARN_BUDGET_SECS - 150.0);
    cfg
}

fn fmt_report(r: &EvalReport) -> String {
    let mut s: Vec<String> = r.per_template.iter().map(|t| format!("{} {:.3}", t.template_id, t.accuracy())).collect();
    s.push(format!("all {:.3}", r.overall));
    s.join(", ")
}

struct Learned {
    model: DygencModel,
    test: Vec<QaSample>,
    forward: EvalReport,
}

fn learnability(corpus: &[QaSample]) -> Result<((bool, String), Learned), Box<dyn std::error::Error>> {
    let cfg = learning_config();
    let (mut model, rep) = train(&cfg, corpus)?;
    let test = split_of(corpus, Split::Test);
    let forward = evaluate(&mut model, &test)?;
    let key: BTreeMap<&str, f64> =
        ["after", "before", "exists"].iter().map(|t| (*t, forward.accuracy_of(t).unwrap_or(0.0))).collect();
    let key_ok = key.values().all(|&a| a >= 0.85);
    let main_ok = key_ok && forward.overall >= 0.75 && rep.seconds <= LEARN_BUDGET_SECS;

    let mut control_cfg = cfg.clone();
    control_cfg.time_budget_secs = Some(CELL_BUDGET_SECS);
    let shuffled = shuffle_train_answers(corpus, 99);
    let (mut control, _) = train(&control_cfg, &shuffled)?;
    let ctrl = evaluate(&mut control, &test)?;

    let ok = main_ok && ctrl.overall <= 0.40;
    let detail = format!(
        "{} epochs in {:.0}s (best {}); test {}; shuffled control all {:.3}",
        rep.epochs.len(),
        rep.seconds,
        rep.best_epoch,
        fmt_report(&forward),
        ctrl.overall
    );
    Ok(((ok, detail), Learned { model, test, forward }))
}

fn order_sensitivity(l: &mut Learned) -> Outcome {
    let ab: Vec<QaSample> = l
        .test
        .iter()
        .filter(|s| s.template_id == "after" || s.template_id == "before")
        .cloned()
        .collect();
    let reversed: Vec<QaSample> =
        ab.iter().map(|s| QaSample { dg: s.dg.time_reversed(), ..s.clone() }).collect();
    let fwd = l.forward.pooled(&["after", "before"]);
    let rev = evaluate(&mut l.model, &reversed)?.overall;
    let ok = fwd > 0.0 && rev <= 0.5 * fwd;
    Ok((ok, format!("after/before forward {fwd:.3}, reversed {rev:.3} (ratio {:.2})", rev / fwd.max(1e-12))))
}

fn compression(corpus: &[QaSample]) -> Outcome {
    let base = TrainConfig::desk().model_config();
    let k1 = ModelConfig { k_tokens: 1, ..base.clone() };
    let with_se = compression_report(corpus, &k1)?;
    let ge_only = compression_report(corpus, &ModelConfig { enable_se: false, ..k1 })?;
    Ok((with_se <= 0.10 && with_se < ge_only, format!("ge+se {with_se:.4}, ge only {ge_only:.4}")))
}

fn token_grid(corpus: &[QaSample]) -> Outcome {
    let mut cfg = learning_config();
    cfg.time_budget_secs = Some(CELL_BUDGET_SECS);
    let rows = ablate(&cfg, corpus, &[TemporalKind::Rope], &[1, 2, 4, 16], |_| {})?;
    let path = std::env::temp_dir().join("dygenc_acceptance_grid.csv");
    write_ablation_csv(&rows, std::fs::File::create(&path)?)?;
    let cells: Vec<String> = rows.iter().map(|r| format!("k={} {:.3}", r.k_tokens, r.report.overall)).collect();
    let ok = rows.len() == 4 && rows.iter().all(|r| r.report.overall >= 0.6);
    Ok((ok, format!("{} ({}s/cell budget, table {})", cells.join(", "), CELL_BUDGET_SECS, path.display())))
}

// ---- 7 ---------------------------------------------------------------------

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

fn pcst_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cfg = PcstConfig::default();
    let (mut mismatches, mut non_trees, mut ratio_sum) = (0, 0, 0.0);
    let trials = 200;
    for _ in 0..trials {
        let n = rng.gen_range(2..=10);
        let m = rng.gen_range(1..=15usize);
        // dyadic values keep every sum exact
        let prizes = (0..n).map(|_| if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(0..=32) as f64 / 8.0 }).collect();
        let edges: Vec<_> =
            (0..m).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(1..=24) as f64 / 8.0)).collect();
        let pg = PrizedGraph::new(prizes, edges)?;
        let exact = pcst_solve(&pg, &cfg, SolveMode::Exact);
        let approx = pcst_solve(&pg, &cfg, SolveMode::Approx);
        if exact.objective != brute_force(&pg) {
            mismatches += 1;
        }
        if !pg.is_tree(&approx.nodes, &approx.edges) || !pg.is_tree(&exact.nodes, &exact.edges) {
            non_trees += 1;
        }
        ratio_sum += if exact.objective > 0.0 { approx.objective / exact.objective } else { 1.0 };
    }
    let mean = ratio_sum / trials as f64;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        mismatches == 0 && non_trees == 0 && mean >= 0.95 && secs < 60.0,
        format!("{trials} graphs: {mismatches} exact mismatches, {non_trees} non-trees, approx/exact {mean:.4}, {secs:.1}s"),
    ))
}

// ---- 8 ---------------------------------------------------------------------

/// Frames containing the person–verb–object edge the question asks about.
fn evidence_frames(dg: &DynamicGraph, question: &str) -> Option<Vec<usize>> {
    let Query::Exists { verb, object } = Query::parse(question)? else {
        return None;
    };
    let hits = dg
        .graphs()
        .enumerate()
        .filter(|(_, g)| {
            g.edges().iter().any(|e| {
                e.predicate == verb.predicate()
                    && g.label_of(e.src) == Some("person")
                    && g.label_of(e.dst) == Some(object.as_str())
            })
        })
        .map(|(i, _)| i)
        .collect();
    Some(hits)
}

fn retrieval(corpus: &[QaSample]) -> Outcome {
    let emb = TextEmbedder::hashed(dygenc::embed::DEFAULT_DIM, 0);
    let cfg = PcstConfig::default();
    let (mut n, mut kept, mut oracle_agree) = (0usize, 0usize, 0usize);
    for s in corpus.iter().filter(|s| s.template_id == "exists" && s.answer == "yes" && s.dg.len() >= 4) {
        let Some(ev) = evidence_frames(&s.dg, &s.question) else { continue };
        if ev.len() != 1 {
            continue;
        }
        let m = s.dg.len();
        let budget = m.div_ceil(4);
        let out = retrieve_frames(&s.dg, &s.question, budget, &emb, &cfg)?;
        let target = s.dg.frames()[ev[0]].t;
        n += 1;
        if out.indices().contains(&target) {
            kept += 1;
        }
        // exhaustive scoring: the evidence frame ranks within the budget
        let scores = score_frames(&s.dg, &s.question, &emb, &cfg)?;
        let better = (0..m).filter(|&i| scores[i] > scores[ev[0]] || (scores[i] == scores[ev[0]] && i < ev[0])).count();
        if better < budget {
            oracle_agree += 1;
        }
    }
    let rate = kept as f64 / n.max(1) as f64;
    Ok((
        n > 0 && rate >= 0.95 && oracle_agree == kept,
        format!("{kept}/{n} evidence frames kept ({rate:.3}); exhaustive ranking agrees on {oracle_agree}"),
    ))
}

// ---- 9 ---------------------------------------------------------------------

fn determinism() -> Outcome {
    let corpus = generate_corpus(&WorldSpec::default(), 30, 5)?;
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.model.d_g = 16;
    cfg.model.gnn_hidden = 16;
    cfg.model.text_dim = 16;
    let dir = tempfile::tempdir()?;
    let mut runs = Vec::new();
    for i in 0..2 {
        let (model, rep) = train(&cfg, &corpus)?;
        let mut csv = Vec::new();
        rep.write_csv(&mut csv)?;
        let ck = dir.path().join(format!("run{i}"));
        save_checkpoint(&model, &cfg, &ck)?;
        runs.push((csv, std::fs::read(ck.join("tensors.bin"))?, std::fs::read(ck.join("manifest.json"))?));
    }
    let (a, b) = (&runs[0], &runs[1]);
    Ok((
        a == b,
        format!(
            "metrics {}, tensors {} ({} bytes), manifest {}",
            if a.0 == b.0 { "identical" } else { "differ" },
            if a.1 == b.1 { "identical" } else { "differ" },
            a.1.len(),
            if a.2 == b.2 { "identical" } else { "differ" }
        ),
    ))
}

fn report(id: u32, name: &str, outcome: Outcome, failures: &mut Vec<u32>) {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    if !ok {
        failures.push(id);
    }
    println!("criterion {id} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn main() {
    let mut failures = Vec::new();
    report(1, "gradient integrity", gradients(), &mut failures);
    report(2, "invariants", invariants(), &mut failures);
    report(7, "pcst oracle", pcst_oracle(), &mut failures);
    report(9, "determinism", determinism(), &mut failures);

    let corpus = match generate_corpus(&WorldSpec::default(), EPISODES, CORPUS_SEED) {
        Ok(c) => c,
        Err(e) => {
            for (id, name) in [(3, "learnability"), (4, "order sensitivity"), (5, "compression"), (6, "token grid"), (8, "retrieval")] {
                report(id, name, Err(format!("corpus: {e}").into()), &mut failures);
            }
            std::process::exit(1);
        }
    };
    println!("corpus: {EPISODES} episodes, {} samples", corpus.len());
    report(5, "compression", compression(&corpus), &mut failures);
    report(8, "retrieval", retrieval(&corpus), &mut failures);
    match learnability(&corpus) {
        Ok((outcome, mut learned)) => {
            report(3, "learnability", Ok(outcome), &mut failures);
            report(4, "order sensitivity", order_sensitivity(&mut learned), &mut failures);
        }
        Err(e) => {
            report(3, "learnability", Err(e.to_string().into()), &mut failures);
            report(4, "order sensitivity", Err("no trained model".into()), &mut failures);
        }
    }
    report(6, "token grid", token_grid(&corpus), &mut failures);

    failures.sort();
    if failures.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failures:?}");
        std::process::exit(1);
    }
}
