use flowcot::decode::{candidate_set, decode_step, rollout, rollout_batch, CandidateRule, DecodeConfig, Strategy};
use flowcot::flow::{PosteriorMode, PosteriorView};
use flowcot::lm::{fit_mle, CondSeqModel, Role, State, TabularPolicy, TabularView, Vocab};
use flowcot::reference::DecodeSetup;
use flowcot::rng;
use flowcot::tasks::{generate, synthesize_corpus, TaskFamilyConfig};

const FULL: CandidateRule = CandidateRule::LogprobThreshold { tau: f64::NEG_INFINITY };

/// Content, filler, end-of-thought, two answers; one row at the empty thought.
fn one_row(content: f64, filler: f64) -> TabularPolicy {
    use Role::*;
    let v = Vocab::new(vec![Content, Filler, EndOfThought, Answer, Answer]).unwrap();
    let view = TabularView {
        order: 1,
        answer_order: 1,
        use_query: false,
        use_label: false,
    };
    let mut p = TabularPolicy::new(v, view);
    p.set_row(&State::new(vec![]), &[content.ln(), filler.ln(), f64::NEG_INFINITY]).unwrap();
    p
}

fn step(prior: &TabularPolicy, post: &TabularPolicy, strategy: Strategy) -> (usize, Vec<f64>) {
    let view = PosteriorView::Label { model: post, label: 3 };
    let cfg = DecodeConfig {
        strategy,
        candidate_rule: FULL,
        posterior_mode: PosteriorMode::GoldLabel,
        ..DecodeConfig::default()
    };
    let mut r = rng::stream(0, &[]);
    let (t, d) = decode_step(prior, Some(&view), &State::new(vec![]), &cfg, &mut r).unwrap();
    (t, d.velocities)
}

#[test]
fn flow_prefers_the_token_the_posterior_promotes() {
    let prior = one_row(0.4, 0.6);
    let post = one_row(0.8, 0.2);
    assert_eq!(step(&prior, &post, Strategy::StandardGreedy).0, 1);
    let (t, v) = step(&prior, &post, Strategy::FlowGreedy);
    assert_eq!(t, 0);
    assert!((v[0] - 2f64.ln()).abs() < 1e-12);
    assert!((v[1] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    assert_eq!(step(&prior, &post, Strategy::PosteriorOnly).0, 0);
}

#[test]
fn equal_posterior_ties_go_to_the_lowest_id() {
    let prior = one_row(0.3, 0.7);
    let (t, v) = step(&prior, &prior, Strategy::FlowGreedy);
    assert_eq!(t, 0);
    assert!(v.iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn candidate_set_examples() {
    let p: Vec<f64> = [0.5, 0.3, 0.15, 0.05].iter().map(|x: &f64| x.ln()).collect();
    assert_eq!(candidate_set(&p, FULL), vec![0, 1, 2, 3]);
    assert_eq!(candidate_set(&p, CandidateRule::TopP { p: 0.8 }), vec![0, 1]);
    assert_eq!(candidate_set(&p, CandidateRule::LogprobThreshold { tau: 0.5 }), vec![0]);
}

#[test]
fn deterministic_prior_reproduces_gold_chains() {
    let cfg = TaskFamilyConfig {
        min_ops: 2,
        max_ops: 2,
        ..TaskFamilyConfig::default()
    };
    let (tv, instances) = generate(&cfg, 300).unwrap();
    let corpus = synthesize_corpus(&tv, &instances, 0.0, 0).unwrap();
    let p = fit_mle(&tv.vocab, TabularView::default(), &corpus, 1e-6).unwrap();
    let dc = DecodeConfig {
        strategy: Strategy::StandardGreedy,
        ..DecodeConfig::default()
    };
    for inst in &instances {
        let r = rollout(&p, None, inst, &dc).unwrap();
        assert_eq!(r.trajectory.state.thought, inst.gold_chain);
        assert!(r.correct && r.trajectory.terminated);
    }
}

fn small() -> flowcot::reference::DecodeAssets {
    DecodeSetup {
        task: TaskFamilyConfig {
            min_ops: 1,
            max_ops: 2,
            ..TaskFamilyConfig::default()
        },
        corpus_size: 3000,
        eval_size: 30,
        ..DecodeSetup::default()
    }
    .build()
    .unwrap()
}

#[test]
fn rollouts_are_deterministic_per_seed() {
    let a = small();
    for strategy in [Strategy::StandardSample, Strategy::FlowGreedy, Strategy::PosteriorOnly] {
        let cfg = DecodeConfig {
            strategy,
            posterior_mode: PosteriorMode::GoldLabel,
            seed: 3,
            ..DecodeConfig::default()
        };
        let x = rollout_batch(&a.prior, Some(&a.posterior), &a.eval, &cfg).unwrap();
        let y = rollout_batch(&a.prior, Some(&a.posterior), &a.eval, &cfg).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn flow_choices_are_optimal_among_candidates() {
    let a = small();
    let prior: &dyn CondSeqModel = &a.prior;
    let cfg = DecodeConfig::default();
    for inst in a.eval.iter().take(10) {
        let view = PosteriorView::exact(prior, inst.gold_answer, cfg.budget()).unwrap();
        let mut r = rng::stream(0, &[]);
        let mut s = inst.initial_state();
        while !s.ends_with_eot(prior.vocab()) && s.step_index() < cfg.horizon {
            let (t, d) = decode_step(prior, Some(&view), &s, &cfg, &mut r).unwrap();
            let i = d.candidates.iter().position(|&c| c == t).unwrap();
            assert!(d.velocities.iter().all(|&v| v <= d.velocities[i]));
            s.thought.push(t);
        }
    }
}

#[test]
fn horizon_cut_is_flagged_and_scored() {
    let a = small();
    let cfg = DecodeConfig {
        strategy: Strategy::StandardGreedy,
        horizon: 1,
        ..DecodeConfig::default()
    };
    let rs = rollout_batch(&a.prior, None, &a.eval, &cfg).unwrap();
    assert!(rs.iter().any(|r| !r.trajectory.terminated));
    for r in &rs {
        assert_eq!(r.len(), 1);
        assert_eq!(a.tv.vocab.role(r.trajectory.answer), Role::Answer);
    }
}
