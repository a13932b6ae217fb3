use dygenc::lm::{accuracy, LmConfig, LoraConfig, ToyDecoderLM, Tokenizer};
use dygenc::model::{DygencModel, ModelConfig};
use dygenc::params::{ParamStore, Session};
use dygenc::synth::{generate_corpus, WorldSpec};
use dygenc::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tokenizer() -> Tokenizer {
    Tokenizer::build(["which object did the person hold first ?", "cup book yes no"])
}

fn lm(lora: bool, seed: u64) -> (ParamStore, ToyDecoderLM) {
    let mut store = ParamStore::new();
    let cfg = LmConfig { lora: LoraConfig { enabled: lora, ..LoraConfig::default() }, ..LmConfig::default() };
    let lm = ToyDecoderLM::new(&mut store, cfg, tokenizer(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, lm)
}

fn soft(k: usize) -> Tensor {
    Tensor::matrix(k, 128, (0..k * 128).map(|i| ((i * 37 % 11) as f64 - 5.0) / 10.0).collect())
}

fn prompt_rows(lm: &ToyDecoderLM, store: &ParamStore, k: usize, q: &[usize]) -> Tensor {
    let mut s = Session::new(store);
    let h = s.constant(soft(k));
    let p = lm.assemble_prompt(&mut s, h, q).unwrap();
    s.value(p).clone()
}

#[test]
fn prompt_length_arithmetic() {
    let (store, lm) = lm(true, 0);
    let q = lm.tokenizer.tokenize("did the person hold cup");
    assert_eq!(q.len(), 5);
    let prefix = Tokenizer::count("based on scene graph ,");
    let one = prompt_rows(&lm, &store, 1, &q);
    assert_eq!(one.rows(), prefix + 1 + 1 + 1 + 1 + 5);
    assert_eq!(lm.prompt_len(1, 5), one.rows());
    assert_eq!(prompt_rows(&lm, &store, 16, &q).rows(), one.rows() + 15);
}

#[test]
fn different_questions_share_the_graph_segment() {
    let (store, lm) = lm(true, 0);
    let a = prompt_rows(&lm, &store, 2, &lm.tokenizer.tokenize("hold cup"));
    let b = prompt_rows(&lm, &store, 2, &lm.tokenizer.tokenize("which object did the person hold first ?"));
    let head = lm.prompt_len(2, 0);
    assert_eq!(&a.data()[..head * 128], &b.data()[..head * 128]);
}

#[test]
fn zero_adapters_leave_logits_unchanged() {
    let (with, lm_a) = lm(true, 4);
    let (mut without, lm_b) = lm(false, 4);
    for id in without.ids().collect::<Vec<_>>() {
        let name = without.name(id).to_string();
        let src = with.find(&name).expect("same base names");
        let t = with.get(src).clone();
        *without.get_mut(id) = t;
    }
    let q = lm_a.tokenizer.tokenize("which object did the person hold first ?");
    let logits = |lm: &ToyDecoderLM, store: &ParamStore| {
        let mut s = Session::new(store);
        let h = s.constant(soft(1));
        let p = lm.assemble_prompt(&mut s, h, &q).unwrap();
        let y = lm.forward_embedded(&mut s, p).unwrap();
        s.value(y).clone()
    };
    let (a, b) = (logits(&lm_a, &with), logits(&lm_b, &without));
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn untrained_generation_is_clean_and_repeatable() {
    let (store, lm) = lm(true, 9);
    let q = lm.tokenizer.tokenize("which object did the person hold first ?");
    let a = lm.generate(&store, &soft(1), &q, 16).unwrap();
    assert_eq!(a, lm.generate(&store, &soft(1), &q, 16).unwrap());
    assert!(a.split_whitespace().count() <= 16);
    assert!(!a.contains('<'), "special token in {a:?}");
}

#[test]
fn containment_accuracy() {
    assert!(accuracy("dish", "the dish"));
    assert!(!accuracy("the dish", "dish"));
    assert!(accuracy("Dish ", "dish"));
}

#[test]
fn answer_loss_reaches_the_graph_encoder() {
    let corpus = generate_corpus(&WorldSpec::default(), 3, 0).unwrap();
    let tok = DygencModel::build_tokenizer(&corpus);
    let mut model = DygencModel::new(ModelConfig::default(), tok, 0).unwrap();
    let prepared = model.prepare(&corpus[..1]).unwrap();
    let mut s = Session::new(&model.store);
    let (loss, _) = model.group_loss(&mut s, &prepared[0].sequence, &[&prepared[0]], 1.0).unwrap();
    let mut g = s.backward(loss).unwrap();
    let grads = s.param_grads(&mut g);
    let enc: Vec<_> = model.graph.params();
    let norm: f64 = grads
        .iter()
        .filter(|(id, _)| enc.contains(id))
        .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    assert!(norm > 0.0 && norm.is_finite());
}

#[test]
fn without_compressor_every_frame_is_a_soft_token() {
    let corpus = generate_corpus(&WorldSpec::default(), 2, 3).unwrap();
    let tok = DygencModel::build_tokenizer(&corpus);
    for (se, k) in [(true, 4), (false, 4)] {
        let cfg = ModelConfig { enable_se: se, k_tokens: k, ..ModelConfig::default() };
        let mut model = DygencModel::new(cfg.clone(), tok.clone(), 0).unwrap();
        let seq = model.encode_sequence(&corpus[0].dg).unwrap();
        let soft = model.soft_prompt_value(&seq).unwrap();
        let m = corpus[0].dg.len();
        assert_eq!(soft.rows(), if se { k } else { m });
        assert_eq!(soft.rows(), cfg.soft_tokens(m));
    }
}
