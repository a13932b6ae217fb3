//! Train on a generated corpus and print per-template test accuracy.
//! usage: probe key=value ... (episodes, epochs, lr, temp, k, batch, se, ge,
//! te, only, d_g, d_llm, lm_layers, gnn_layers, qf_layers, warmup)
use std::collections::HashMap;

use dygenc::synth::{generate_corpus, WorldSpec};
use dygenc::trainer::{evaluate, split_of, train_with, Progress, TrainConfig};

fn main() {
    let kv: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: &str| kv.get(k).cloned().unwrap_or_else(|| d.to_string());
    let episodes: usize = get("episodes", "2000").parse().unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.epochs = get("epochs", "5").parse().unwrap();
    cfg.warmup_epochs = get("warmup", "1").parse().unwrap();
    cfg.lr = get("lr", "3e-4").parse().unwrap();
    cfg.temporal_kind = get("temp", "rope").parse().unwrap();
    cfg.k_tokens = get("k", "1").parse().unwrap();
    cfg.batch_size = get("batch", "32").parse().unwrap();
    cfg.enable_se = get("se", "1") == "1";
    cfg.enable_ge = get("ge", "1") == "1";
    cfg.enable_te = get("te", "1") == "1";
    cfg.model.d_g = get("d_g", "64").parse().unwrap();
    cfg.model.lm.d_llm = get("d_llm", "128").parse().unwrap();
    cfg.model.lm.layers = get("lm_layers", "4").parse().unwrap();
    cfg.model.gnn_layers = get("gnn_layers", "2").parse().unwrap();
    cfg.model.qformer_layers = get("qf_layers", "2").parse().unwrap();
    cfg.patience = cfg.epochs;
    let mut corpus = generate_corpus(&WorldSpec::default(), episodes, 7).unwrap();
    if let Some(only) = kv.get("only") {
        let keep: Vec<&str> = only.split(',').collect();
        corpus.retain(|s| keep.contains(&s.template_id.as_str()));
    }
    let t0 = std::time::Instant::now();
    let (mut model, rep) = train_with(&cfg, &corpus, |p| match p {
        Progress::Epoch(e, s) => println!(
            "epoch {} loss {:.4} val {:.4} lr {:.2e} {:.0}s",
            e.epoch, e.train_loss, e.val_accuracy, e.lr, s
        ),
    })
    .unwrap();
    println!("trained {} samples in {:.0}s", rep.train_samples, t0.elapsed().as_secs_f64());
    let test = split_of(&corpus, dygenc::graph::Split::Test);
    let r = evaluate(&mut model, &test).unwrap();
    r.write_csv(std::io::stdout()).unwrap();
}
