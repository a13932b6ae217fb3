use dygenc::graph::Split;
use dygenc::io::write_jsonl;
use dygenc::model::DygencModel;
use dygenc::synth::{answer_question, compacted_lengths, generate_corpus, WorldSpec};

fn bytes(seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    write_jsonl(&mut out, &generate_corpus(&WorldSpec::default(), 40, seed).unwrap()).unwrap();
    out
}

#[test]
fn same_seed_same_bytes() {
    assert_eq!(bytes(3), bytes(3));
    assert_ne!(bytes(3), bytes(4));
}

#[test]
fn answers_survive_their_own_extractor() {
    for s in generate_corpus(&WorldSpec::default(), 200, 11).unwrap() {
        assert_eq!(answer_question(&s.dg, &s.question).as_deref(), Some(s.answer.as_str()), "{}", s.question);
    }
}

#[test]
fn sequence_questions_flip_under_time_reversal() {
    for s in generate_corpus(&WorldSpec::default(), 300, 5).unwrap() {
        if s.template_id == "after" || s.template_id == "before" {
            let reversed = answer_question(&s.dg.time_reversed(), &s.question);
            assert_ne!(reversed.as_deref(), Some(s.answer.as_str()), "{}", s.question);
        }
    }
}

#[test]
fn length_percentiles_near_targets() {
    let mut l = compacted_lengths(&WorldSpec::default(), 2000, 7);
    l.sort_unstable();
    let p = |q: f64| l[((l.len() - 1) as f64 * q).round() as usize] as f64;
    for (q, target) in [(0.05, 7.0), (0.5, 20.0), (0.95, 46.0)] {
        let got = p(q);
        assert!((got - target).abs() <= 0.2 * target, "p{} = {got}, target {target}", q * 100.0);
    }
}

#[test]
fn every_answer_word_is_in_the_vocabulary() {
    let corpus = generate_corpus(&WorldSpec::default(), 100, 2).unwrap();
    let tok = DygencModel::build_tokenizer(&corpus);
    let unk = tok.id("<unk>");
    for w in WorldSpec::default().answer_vocabulary() {
        assert!(tok.tokenize(&w).iter().all(|&i| i != unk), "{w}");
    }
}

#[test]
fn splits_follow_episodes() {
    let corpus = generate_corpus(&WorldSpec::default(), 50, 0).unwrap();
    let n = |s: Split| corpus.iter().filter(|x| x.split == s).count();
    assert!(n(Split::Train) > n(Split::Val) && n(Split::Val) > 0 && n(Split::Test) > 0);
}
