use dygenc::graph::{QaSample, SceneGraph, Split};
use dygenc::lm::Tokenizer;
use dygenc::model::{DygencModel, ModelConfig};
use dygenc::optim::{AdamW, AdamWConfig};
use dygenc::synth::{generate_corpus, WorldSpec};
use dygenc::trainer::{
    compression_report, evaluate, save_checkpoint, textualize, train, train_step, EarlyStopping, StopDecision,
    TrainConfig,
};
use proptest::prelude::*;

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.model.d_g = 16;
    cfg.model.gnn_hidden = 16;
    cfg.model.text_dim = 16;
    cfg.model.lm.d_llm = 32;
    cfg.model.lm.layers = 1;
    cfg
}

#[test]
fn thirty_two_samples_are_memorized() {
    let corpus: Vec<QaSample> = generate_corpus(&WorldSpec::default(), 12, 1).unwrap().into_iter().take(32).collect();
    assert_eq!(corpus.len(), 32);
    let mut model = DygencModel::new(ModelConfig::default(), DygencModel::build_tokenizer(&corpus), 0).unwrap();
    let prepared = model.prepare(&corpus).unwrap();
    let batch: Vec<_> = prepared.iter().collect();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() }, &model.store);
    let mut last = f64::INFINITY;
    for step in 0..300 {
        let losses = train_step(&mut model, &mut opt, &batch, 1e-3, step, Some(1.0)).unwrap();
        last = losses.iter().sum::<f64>() / losses.len() as f64;
        if last < 0.05 {
            break;
        }
    }
    assert!(last < 0.05, "loss after 300 steps: {last}");
}

#[test]
fn identical_runs_give_identical_artifacts() {
    let corpus = generate_corpus(&WorldSpec::default(), 30, 2).unwrap();
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let (model, report) = train(&cfg, &corpus).unwrap();
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let ckpt = dir.path().join(format!("run{run}"));
        save_checkpoint(&model, &cfg, &ckpt).unwrap();
        outputs.push((csv, std::fs::read(ckpt.join("tensors.bin")).unwrap(), std::fs::read(ckpt.join("manifest.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn checkpoint_reloads_to_the_same_answers() {
    let corpus = generate_corpus(&WorldSpec::default(), 20, 4).unwrap();
    let cfg = TrainConfig { epochs: 1, patience: 1, ..small_config() };
    let (mut model, _) = train(&cfg, &corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, &cfg, dir.path()).unwrap();
    let (mut back, cfg2) = dygenc::trainer::load_checkpoint(dir.path()).unwrap();
    assert_eq!(cfg, cfg2);
    let test: Vec<_> = corpus.iter().filter(|s| s.split == Split::Test).cloned().collect();
    assert_eq!(evaluate(&mut model, &test).unwrap(), evaluate(&mut back, &test).unwrap());
}

#[test]
fn report_has_a_row_per_template_and_all() {
    let corpus = generate_corpus(&WorldSpec::default(), 20, 6).unwrap();
    let cfg = TrainConfig { epochs: 1, patience: 1, ..small_config() };
    let (mut model, _) = train(&cfg, &corpus).unwrap();
    let r = evaluate(&mut model, &corpus).unwrap();
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "template,n,correct,accuracy");
    assert!(lines.last().unwrap().starts_with("all,"));
    assert_eq!(lines.len(), r.per_template.len() + 2);
    let correct = r.predictions.iter().zip(&corpus).filter(|(p, s)| dygenc::lm::accuracy(p, &s.answer)).count();
    assert_eq!(r.overall, correct as f64 / corpus.len() as f64);
}

#[test]
fn empty_splits_are_config_errors() {
    let corpus: Vec<_> = generate_corpus(&WorldSpec::default(), 20, 6)
        .unwrap()
        .into_iter()
        .filter(|s| s.split != Split::Val)
        .collect();
    assert!(matches!(train(&small_config(), &corpus), Err(dygenc::Error::Config(_))));
}

#[test]
fn compression_grows_with_k_and_shrinks_with_the_compressor() {
    let corpus = generate_corpus(&WorldSpec::default(), 50, 0).unwrap();
    let ratio = |k: usize, se: bool| {
        compression_report(&corpus, &ModelConfig { k_tokens: k, enable_se: se, ..ModelConfig::default() }).unwrap()
    };
    let ks: Vec<f64> = [1, 2, 4, 16].iter().map(|&k| ratio(k, true)).collect();
    assert!(ks.windows(2).all(|w| w[0] < w[1]), "{ks:?}");
    assert!(ratio(1, true) < ratio(1, false));
    assert_eq!(Tokenizer::count(&textualize(&SceneGraph::empty())), 0);
    let g = SceneGraph::from_parts(&[(0, "person"), (1, "cup"), (2, "sofa")], &[(0, 1, "holds")]).unwrap();
    assert_eq!(textualize(&g), "person holds cup. sofa.");
}

proptest! {
    #[test]
    fn early_stopping_keeps_the_best_seen(accs in proptest::collection::vec(0.0f64..1.0, 1..12), patience in 1usize..4) {
        let mut es = EarlyStopping::new(patience);
        let mut seen = Vec::new();
        for (i, &a) in accs.iter().enumerate() {
            seen.push(a);
            if es.observe(i + 1, a) == StopDecision::Stop {
                break;
            }
        }
        let best = es.best.unwrap();
        prop_assert!(seen.iter().all(|&a| a <= best));
        prop_assert_eq!(seen[es.best_epoch - 1], best);
    }
}
