mod common;

use proptest::prelude::*;

use common::assert_close;
use flowcot::lm::{answer_logprob, next_token_logprobs, Role, State, TabularPolicy, TabularView, Vocab};
use flowcot::oracle::{
    exact_bayes_posterior, exact_objective_and_gradient, expected_velocity, marginal_answer_logprob, max_velocity,
    monte_carlo_marginal, AnswerOracle, EnumerationBudget,
};
use flowcot::reference::tiny_instance;

const VIEW1: TabularView = TabularView {
    order: 1,
    answer_order: 1,
    use_query: false,
    use_label: false,
};

fn thought(t: &[usize]) -> State {
    State {
        query: vec![],
        label: None,
        thought: t.to_vec(),
    }
}

/// Tokens a, b, end-of-thought, answers y, z. One uniform step over {a, b}
/// then the horizon cuts; p(y|a) = pa, p(y|b) = pb.
fn one_step(pa: f64, pb: f64) -> (TabularPolicy, EnumerationBudget) {
    use Role::*;
    let v = Vocab::new(vec![Content, Content, EndOfThought, Answer, Answer]).unwrap();
    let mut p = TabularPolicy::new(v, VIEW1);
    p.set_row(&thought(&[]), &[0.0, 0.0, -1e9]).unwrap();
    p.set_answer_row(&thought(&[0]), &[pa.ln(), (1.0 - pa).ln()]).unwrap();
    p.set_answer_row(&thought(&[1]), &[pb.ln(), (1.0 - pb).ln()]).unwrap();
    p.set_answer_row(&thought(&[]), &[0.0, 0.0]).unwrap();
    (p, EnumerationBudget::with_horizon(1))
}

#[test]
fn posterior_of_a_half_half_prior() {
    let (p, b) = one_step(0.9, 0.1);
    let s = thought(&[]);
    let post = exact_bayes_posterior(&p, &s, 3, b).unwrap();
    assert_close(post[0].exp(), 0.9, 1e-9);
    assert_close(post[1].exp(), 0.1, 1e-9);

    let hand = 0.5 * (0.9f64 / 0.5).ln() + 0.5 * (0.1f64 / 0.5).ln();
    assert_close(hand, -0.51083, 1e-5);
    let e = expected_velocity(&p, &s, 3, b).unwrap();
    assert_close(e.expected, hand, 1e-12);
    assert_close(e.neg_kl, hand, 1e-12);

    let (tok, v) = max_velocity(&p, &s, 3, b, &[0, 1]).unwrap();
    assert_eq!(tok, 0);
    assert_close(v, (1.8f64).ln(), 1e-12);
    assert_close(v, 0.58779, 1e-5);
}

#[test]
fn independent_answer_leaves_the_prior_unchanged() {
    let (p, b) = one_step(0.3, 0.3);
    let s = thought(&[]);
    let prior = next_token_logprobs(&p, &s).unwrap();
    let post = exact_bayes_posterior(&p, &s, 3, b).unwrap();
    for t in [0, 1] {
        assert_close(prior[t].exp(), post[t].exp(), 1e-12);
    }
    assert!(expected_velocity(&p, &s, 3, b).unwrap().expected.abs() < 1e-12);
    let (tok, v) = max_velocity(&p, &s, 3, b, &[0, 1]).unwrap();
    assert_eq!(tok, 0);
    assert!(v.abs() < 1e-12);
}

#[test]
fn unreachable_answer_is_an_error() {
    let (mut p, b) = one_step(1.0, 1.0);
    p.set_answer_row(&thought(&[]), &[0.0, f64::NEG_INFINITY]).unwrap();
    let r = exact_bayes_posterior(&p, &thought(&[]), 4, b);
    assert!(matches!(r, Err(flowcot::FlowError::ZeroProbabilityConditioning { .. })), "{r:?}");
}

#[test]
fn marginal_agrees_with_monte_carlo() {
    use Role::*;
    let v = Vocab::new(vec![Content, Filler, EndOfThought, Answer, Answer]).unwrap();
    let p = TabularPolicy::random(v, TabularView::default(), 31, 1.0);
    let s = State::new(vec![0]);
    let exact = marginal_answer_logprob(&p, &s, 3, EnumerationBudget::with_horizon(4)).unwrap().exp();
    let (mean, se) = monte_carlo_marginal(&p, &s, 3, 4, 1_000_000, 5).unwrap();
    assert!((mean - exact).abs() <= 3.0 * se, "exact {exact} mc {mean} se {se}");
}

#[test]
fn terminal_marginal_equals_the_answer_head() {
    let p = TabularPolicy::random(
        Vocab::new(vec![Role::Content, Role::Filler, Role::EndOfThought, Role::Answer, Role::Answer]).unwrap(),
        TabularView::default(),
        3,
        1.0,
    );
    let s = State {
        query: vec![0],
        label: None,
        thought: vec![0, 1, 2],
    };
    for y in [3, 4] {
        assert_eq!(
            marginal_answer_logprob(&p, &s, y, EnumerationBudget::default()).unwrap(),
            answer_logprob(&p, &s, y).unwrap()
        );
    }
}

#[test]
fn single_trajectory_has_no_term_a() {
    let mut t = tiny_instance(9).unwrap();
    let s0 = State::new(t.query.clone());
    t.policy.set_row(&s0, &[60.0, -60.0, -60.0, -60.0]).unwrap();
    t.policy.set_row(&s0.child(0), &[-60.0, -60.0, -60.0, 60.0]).unwrap();
    let g = exact_objective_and_gradient(&t.policy, &t.query, t.answer, t.budget).unwrap();
    let norm = g.term_a.iter().map(|x| x.abs()).fold(0.0, f64::max);
    assert!(norm < 1e-12, "term A {norm}");
}

#[test]
fn gradient_paths_agree_on_the_tiny_instance() {
    let t = tiny_instance(4).unwrap();
    let g = exact_objective_and_gradient(&t.policy, &t.query, t.answer, t.budget).unwrap();
    let scale = g.direct.iter().map(|x| x.abs()).fold(0.0, f64::max);
    for (d, c) in g.direct.iter().zip(g.decomposed()) {
        assert!((d - c).abs() <= 1e-9 * scale, "{d} vs {c}");
    }
}

fn seeded(seed: u64) -> TabularPolicy {
    use Role::*;
    let v = Vocab::new(vec![Content, Content, Filler, EndOfThought, Answer, Answer, Answer]).unwrap();
    TabularPolicy::random(v, TabularView::default(), seed, 1.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn velocity_identities_hold(seed in 0u64..10_000, prefix in prop::collection::vec(0usize..3, 0..3), y in 4usize..7) {
        let p = seeded(seed);
        let b = EnumerationBudget::with_horizon(5);
        let s = State { query: vec![0, 1], label: None, thought: prefix };
        let o = AnswerOracle::new(&p, y, b).unwrap();
        let prior = next_token_logprobs(&p, &s).unwrap();
        let post = o.exact_bayes_posterior(&s).unwrap();
        let base = o.log_marginal(&s).unwrap();

        let mut total = 0.0;
        for &t in p.vocab().thought_tokens() {
            let child = o.log_marginal(&s.child(t)).unwrap();
            prop_assert!(((child - base) - (post[t] - prior[t])).abs() < 1e-9);
            total += prior[t].exp() * child.exp();
        }
        prop_assert!((total - base.exp()).abs() < 1e-9);

        let e = o.expected_velocity(&s).unwrap();
        prop_assert!(e.expected <= 1e-12);
        prop_assert!((e.expected - e.neg_kl).abs() < 1e-9);
        let (_, vmax) = o.max_velocity(&s, p.vocab().thought_tokens()).unwrap();
        prop_assert!(vmax >= -1e-12 && vmax >= e.expected - 1e-12);
    }
}
