use proptest::prelude::*;

use flowcot::io::{read_jsonl, write_jsonl};
use flowcot::lm::Role;
use flowcot::tasks::{execute, generate, synthesize_corpus, verify_answer, TaskFamilyConfig, TaskInstance, TaskVocab};

/// Start value plus the operation deltas, read straight off the query.
fn arithmetic_answer(tv: &TaskVocab, inst: &TaskInstance) -> usize {
    let start = tv.value_of(inst.query[0]).unwrap();
    let sum: usize = inst.query[1..].iter().map(|&t| tv.op_of(t).unwrap()).sum();
    (start + sum) % tv.modulus
}

#[test]
fn regeneration_with_the_same_seed_is_identical() {
    let cfg = TaskFamilyConfig {
        seed: 7,
        ..TaskFamilyConfig::default()
    };
    let (_, a) = generate(&cfg, 100).unwrap();
    let (_, b) = generate(&cfg, 100).unwrap();
    assert_eq!(a, b);
    let (_, c) = generate(&TaskFamilyConfig { seed: 8, ..cfg }, 100).unwrap();
    assert_ne!(a.iter().map(|i| &i.id).collect::<Vec<_>>(), c.iter().map(|i| &i.id).collect::<Vec<_>>());
}

#[test]
fn gold_answers_follow_modular_arithmetic() {
    let (tv, instances) = generate(&TaskFamilyConfig::default(), 500).unwrap();
    for inst in &instances {
        assert_eq!(inst.gold_answer, tv.answer_for_value(arithmetic_answer(&tv, inst)));
        assert!(inst.gold_chain.iter().all(|&t| tv.vocab.role(t) != Role::Filler));
        assert_eq!(*inst.gold_chain.last().unwrap(), tv.eot());
        assert!(verify_answer(&tv.vocab, inst, inst.gold_answer).unwrap());
    }
}

#[test]
fn corpus_mean_length_matches_geometric_insertion() {
    let cfg = TaskFamilyConfig {
        min_ops: 3,
        max_ops: 3,
        ..TaskFamilyConfig::default()
    };
    let (tv, instances) = generate(&cfg, 10_000).unwrap();
    assert!(instances.iter().all(|i| i.gold_chain.len() == 4));
    let corpus = synthesize_corpus(&tv, &instances, 0.5, 17).unwrap();
    let mean = corpus.iter().map(|t| t.len()).sum::<usize>() as f64 / corpus.len() as f64;
    assert!((mean - 8.0).abs() <= 0.2, "mean length {mean}");
    assert!(corpus.iter().zip(&instances).all(|(t, i)| t.answer == i.gold_answer));
}

#[test]
fn placeholder_is_not_an_answer() {
    let (tv, instances) = generate(&TaskFamilyConfig::default(), 1).unwrap();
    assert!(verify_answer(&tv.vocab, &instances[0], tv.placeholder()).is_err());
}

#[test]
fn dataset_lines_keep_field_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let (_, instances) = generate(&TaskFamilyConfig::default(), 20).unwrap();
    write_jsonl(&path, &instances).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    for line in text.lines() {
        let keys: Vec<usize> = ["\"id\"", "\"query\"", "\"gold_answer\"", "\"gold_chain\""]
            .iter()
            .map(|k| line.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]), "{line}");
    }
    let back: Vec<TaskInstance> = read_jsonl(&path).unwrap();
    assert_eq!(back, instances);
}

proptest! {
    #[test]
    fn fillers_never_change_the_answer(seed in 0u64..500, rate in 0.0f64..0.9, fillers in 1usize..4) {
        let cfg = TaskFamilyConfig { num_fillers: fillers, seed, ..TaskFamilyConfig::default() };
        let (tv, instances) = generate(&cfg, 20).unwrap();
        let corpus = synthesize_corpus(&tv, &instances, rate, seed).unwrap();
        for (t, inst) in corpus.iter().zip(&instances) {
            let content: Vec<_> = t.state.thought.iter().copied().filter(|&x| tv.vocab.role(x) != Role::Filler).collect();
            prop_assert_eq!(&content, &inst.gold_chain);
            prop_assert_eq!(execute(&tv, &inst.query, &t.state.thought), inst.gold_answer);
            prop_assert_eq!(inst.gold_answer, tv.answer_for_value(arithmetic_answer(&tv, inst)));
        }
        let again = synthesize_corpus(&tv, &instances, rate, seed).unwrap();
        prop_assert_eq!(corpus, again);
    }
}
