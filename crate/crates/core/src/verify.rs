//! Identity suite: exact relations between velocities, marginals, gradients
//! and estimators, checked numerically on small reference policies.

use rand::Rng as _;
use serde::Serialize;
use std::time::Instant;

use crate::error::Result;
use crate::eval::{pass_at_k_brute_force, pass_at_k_exact};
use crate::flow::{kl_divergence, profile, velocities, PosteriorView};
use crate::lm::{
    normalization_error, CondSeqModel, Differentiable, FeatureSpec, LinearSoftmaxPolicy, Policy, State, TabularPolicy,
    TabularView, TokenId,
};
use crate::numeric::{logsumexp, max_relative_error};
use crate::oracle::{
    exact_objective_and_gradient, frozen_baseline_objective, is_terminal, sample_logprobs, AnswerOracle,
    EnumerationBudget,
};
use crate::reference::tiny_instance;
use crate::rl::{exact_weight_estimate, global_reward, group_gradient, sample_trajectory, GateKind, GradientConfig, RewardBackend};
use crate::rng;
use crate::tasks::{generate, TaskFamilyConfig, TaskInstance};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} measured {:.3e} tolerance {:.1e}  {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A policy with the (query, answer) pairs it is checked on.
pub struct ReferencePolicy {
    pub name: &'static str,
    pub model: Policy,
    pub cases: Vec<(Vec<TokenId>, TokenId)>,
    pub horizon: usize,
}

fn small_task() -> Result<(crate::tasks::TaskVocab, Vec<TaskInstance>)> {
    let cfg = TaskFamilyConfig {
        modulus: 3,
        min_ops: 1,
        max_ops: 2,
        seed: 5,
        ..TaskFamilyConfig::default()
    };
    generate(&cfg, 6)
}

/// The shipped set: the tiny tabular instance, a random tabular policy and a
/// random linear policy on a small task vocabulary.
pub fn reference_policies() -> Result<Vec<ReferencePolicy>> {
    let tiny = tiny_instance(3)?;
    let other = tiny.policy.vocab().answer_token(1);
    let (tv, inst) = small_task()?;
    let cases: Vec<(Vec<TokenId>, TokenId)> = inst.iter().map(|i| (i.query.clone(), i.gold_answer)).collect();
    let tab = TabularPolicy::random(
        tv.vocab.clone(),
        TabularView {
            order: 2,
            ..TabularView::default()
        },
        17,
        1.5,
    );
    let lin = LinearSoftmaxPolicy::random(
        tv.vocab.clone(),
        FeatureSpec {
            order: 2,
            step_buckets: vec![2],
            ..FeatureSpec::default()
        },
        23,
        1.0,
    );
    Ok(vec![
        ReferencePolicy {
            name: "tiny",
            cases: vec![(tiny.query.clone(), tiny.answer), (tiny.query.clone(), other)],
            model: tiny.policy.into(),
            horizon: tiny.budget.horizon,
        },
        ReferencePolicy {
            name: "tabular",
            model: tab.into(),
            cases: cases.clone(),
            horizon: 5,
        },
        ReferencePolicy {
            name: "linear",
            model: lin.into(),
            cases,
            horizon: 5,
        },
    ])
}

struct Sampled<'a> {
    policy: &'a ReferencePolicy,
    answer: TokenId,
    state: State,
}

/// `count` open states, spread round robin over policies and cases; each is
/// a uniformly chosen open prefix of a prior rollout.
fn sample_open_states<'a>(set: &'a [ReferencePolicy], count: usize, seed: u64) -> Result<Vec<Sampled<'a>>> {
    let pairs: Vec<(usize, usize)> = set
        .iter()
        .enumerate()
        .flat_map(|(p, rp)| (0..rp.cases.len()).map(move |c| (p, c)))
        .collect();
    let mut r = rng::stream(seed, &[rng::label("verify-states")]);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let (p, c) = pairs[k % pairs.len()];
        let rp = &set[p];
        let (q, a) = &rp.cases[c];
        let mut s = State::new(q.clone());
        while !is_terminal(&rp.model, &s, rp.horizon) {
            let lp = rp.model.next_token_logprobs(&s)?;
            s.thought.push(sample_logprobs(&lp, &mut r));
        }
        let cut = r.gen_range(0..s.step_index());
        out.push(Sampled {
            policy: rp,
            answer: *a,
            state: s.prefix(cut),
        });
    }
    Ok(out)
}

fn oracle_for<'a>(s: &Sampled<'a>) -> Result<AnswerOracle<'a, Policy>> {
    AnswerOracle::new(&s.policy.model, s.answer, EnumerationBudget::with_horizon(s.policy.horizon))
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> Result<(f64, String)>) -> CheckResult {
    let t = Instant::now();
    let (measured, detail) = match f() {
        Ok(v) => v,
        Err(e) => (f64::INFINITY, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed: measured <= tolerance,
        measured,
        tolerance,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn check_neg_kl(set: &[ReferencePolicy]) -> CheckResult {
    timed("expected_velocity_is_neg_kl", 1e-9, || {
        let mut worst: f64 = 0.0;
        let states = sample_open_states(set, 200, 1)?;
        for s in &states {
            let view = PosteriorView::Exact(AnswerOracle::new(
                &s.policy.model as &dyn CondSeqModel,
                s.answer,
                EnumerationBudget::with_horizon(s.policy.horizon),
            )?);
            let prior = s.policy.model.next_token_logprobs(&s.state)?;
            let post = view.posterior_logprobs(&s.state)?;
            let v = velocities(&s.policy.model, &view, &s.state)?;
            let ev: f64 = prior
                .iter()
                .zip(&v)
                .filter(|(p, _)| **p > f64::NEG_INFINITY)
                .map(|(p, v)| p.exp() * v.value)
                .sum();
            worst = worst.max((ev + kl_divergence(&prior, &post)).abs());
        }
        Ok((worst, format!("{} states", states.len())))
    })
}

fn check_signs(set: &[ReferencePolicy]) -> CheckResult {
    timed("velocity_sign_bounds", 1e-12, || {
        let mut worst: f64 = 0.0;
        let states = sample_open_states(set, 200, 2)?;
        for s in &states {
            let o = oracle_for(s)?;
            let e = o.expected_velocity(&s.state)?;
            let thought = s.policy.model.vocab().thought_tokens();
            let all = o.max_velocity(&s.state, thought)?.1;
            // V_ref <= 0, V_flow >= 0, V_flow >= V_ref
            worst = worst.max(e.expected).max(-all).max(e.expected - all);
        }
        Ok((worst.max(0.0), format!("{} states, full vocabulary", states.len())))
    })
}

fn check_two_forms(set: &[ReferencePolicy]) -> CheckResult {
    timed("ratio_equals_difficulty_drop", 1e-9, || {
        let mut worst: f64 = 0.0;
        let states = sample_open_states(set, 200, 3)?;
        for s in &states {
            let o = oracle_for(s)?;
            let prior = s.policy.model.next_token_logprobs(&s.state)?;
            let post = o.exact_bayes_posterior(&s.state)?;
            for &t in s.policy.model.vocab().thought_tokens() {
                worst = worst.max(((post[t] - prior[t]) - o.difficulty_delta(&s.state, t)?).abs());
            }
        }
        Ok((worst, format!("{} states x thought vocabulary", states.len())))
    })
}

fn check_telescoping(set: &[ReferencePolicy]) -> CheckResult {
    timed("telescoping", 1e-9, || {
        let mut worst: f64 = 0.0;
        let mut r = rng::stream(4, &[rng::label("verify-telescoping")]);
        let pairs: Vec<(&ReferencePolicy, &(Vec<TokenId>, TokenId))> =
            set.iter().flat_map(|p| p.cases.iter().map(move |c| (p, c))).collect();
        for k in 0..500 {
            let (rp, (q, a)) = pairs[k % pairs.len()];
            let oracle = AnswerOracle::new(&rp.model as &dyn CondSeqModel, *a, EnumerationBudget::with_horizon(rp.horizon))?;
            let traj = sample_trajectory(&rp.model, q, rp.horizon, 1.0, &mut r)?;
            let ends = oracle.log_marginal(&traj.state)? - oracle.log_marginal(&traj.state.prefix(0))?;
            let view = PosteriorView::Exact(oracle);
            let p = profile(&rp.model, &view, &traj)?;
            let reward = global_reward(&rp.model, &traj, *a, RewardBackend::Exact, EnumerationBudget::with_horizon(rp.horizon))?;
            worst = worst.max((p.cumulative - ends).abs()).max((reward.global - ends).abs());
        }
        Ok((worst, "500 trajectories".into()))
    })
}

fn check_total_probability(set: &[ReferencePolicy]) -> CheckResult {
    timed("total_probability", 1e-9, || {
        let mut worst: f64 = 0.0;
        let states = sample_open_states(set, 200, 5)?;
        for s in &states {
            let o = oracle_for(s)?;
            let prior = s.policy.model.next_token_logprobs(&s.state)?;
            let mut terms = Vec::new();
            for &t in s.policy.model.vocab().thought_tokens() {
                terms.push(prior[t] + o.log_marginal(&s.state.child(t))?);
            }
            let lhs = logsumexp(&terms).exp();
            worst = worst.max((lhs - o.log_marginal(&s.state)?.exp()).abs());
        }
        Ok((worst, format!("{} states", states.len())))
    })
}

fn check_gradient_decomposition() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let tiny = match tiny_instance(3) {
        Ok(t) => t,
        Err(e) => {
            return vec![timed("gradient_vs_finite_diff", 1e-4, || Err(e))];
        }
    };
    let exact = exact_objective_and_gradient(&tiny.policy, &tiny.query, tiny.answer, tiny.budget);
    out.push(timed("gradient_vs_finite_diff", 1e-4, || {
        let g = exact.as_ref().map_err(clone_err)?;
        let h = 1e-5;
        let mut fd = vec![0.0; tiny.policy.num_params()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let mut up = tiny.policy.clone();
            up.params_mut()[k] += h;
            let mut dn = tiny.policy.clone();
            dn.params_mut()[k] -= h;
            let jp = frozen_baseline_objective(&up, &tiny.policy, &tiny.query, tiny.answer, tiny.budget)?;
            let jm = frozen_baseline_objective(&dn, &tiny.policy, &tiny.query, tiny.answer, tiny.budget)?;
            *slot = (jp - jm) / (2.0 * h);
        }
        Ok((
            max_relative_error(&g.decomposed(), &fd, 1e-6),
            format!("{} parameters, Term A + Term B vs central differences", fd.len()),
        ))
    }));
    out.push(timed("direct_vs_decomposed", 1e-9, || {
        let g = exact.as_ref().map_err(clone_err)?;
        let worst = g
            .direct
            .iter()
            .zip(g.decomposed())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok((worst, format!("{} enumerated trajectories", g.num_trajectories)))
    }));
    out
}

fn clone_err(e: &crate::error::FlowError) -> crate::error::FlowError {
    crate::error::FlowError::InvalidConfig(e.to_string())
}

fn check_stop_gradient() -> CheckResult {
    timed("stop_gradient_contract", 0.0, || {
        let tiny = tiny_instance(3)?;
        let mut r = rng::stream(6, &[rng::label("verify-stop-gradient")]);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let trajs = (0..8)
                .map(|_| sample_trajectory(&tiny.policy, &tiny.query, 3, 1.0, &mut r))
                .collect::<Result<Vec<_>>>()?;
            let rewards = trajs
                .iter()
                .map(|t| global_reward(&tiny.policy, t, tiny.answer, RewardBackend::Exact, tiny.budget))
                .collect::<Result<Vec<_>>>()?;
            let correct: Vec<bool> = trajs.iter().map(|t| t.answer == tiny.answer).collect();
            let mut perturbed = rewards.clone();
            for rw in &mut perturbed {
                for b in &mut rw.baselines {
                    *b += r.gen_range(-1.0..1.0);
                }
            }
            for gate in GateKind::ALL {
                let cfg = GradientConfig {
                    gate,
                    ..GradientConfig::default()
                };
                let a = group_gradient(&tiny.policy, &trajs, &rewards, &correct, tiny.answer, &cfg)?.total();
                let b = group_gradient(&tiny.policy, &trajs, &perturbed, &correct, tiny.answer, &cfg)?.total();
                worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
            }
        }
        Ok((worst, "20 groups x 4 gates, perturbed baselines".into()))
    })
}

/// Mean of `samples` single-trajectory estimates with exact importance
/// weights, against the oracle's Term B.
pub fn estimator_consistency(samples: usize, seed: u64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let tiny = tiny_instance(3)?;
    let exact = exact_objective_and_gradient(&tiny.policy, &tiny.query, tiny.answer, tiny.budget)?;
    let oracle = AnswerOracle::new(&tiny.policy, tiny.answer, tiny.budget)?;
    let mut r = rng::stream(seed, &[rng::label("verify-estimator")]);
    let d = tiny.policy.num_params();
    let mut mean = vec![0.0; d];
    for _ in 0..samples {
        let t = sample_trajectory(&tiny.policy, &tiny.query, tiny.budget.horizon, 1.0, &mut r)?;
        let est = exact_weight_estimate(&oracle, &t)?;
        for (m, e) in mean.iter_mut().zip(&est) {
            *m += e / samples as f64;
        }
    }
    let scale = exact.term_b.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    Ok((max_relative_error(&mean, &exact.term_b, 0.05 * scale), mean, exact.term_b))
}

fn check_estimator() -> CheckResult {
    timed("estimator_consistency", 0.05, || {
        let (err, _, _) = estimator_consistency(100_000, 7)?;
        Ok((err, "1e5 samples; per-coordinate error relative to max(|x|, 5% of largest)".into()))
    })
}

fn check_pass_at_k() -> CheckResult {
    timed("pass_at_k_brute_force", 0.0, || {
        let mut mismatches = 0usize;
        let mut cases = 0usize;
        for n in 1..=8 {
            for c in 0..=n {
                for k in 1..=n {
                    cases += 1;
                    let (a, b) = pass_at_k_exact(n, c, k)?;
                    let (h, t) = pass_at_k_brute_force(n, c, k)?;
                    if a * t != h * b {
                        mismatches += 1;
                    }
                }
            }
        }
        Ok((mismatches as f64, format!("{cases} (n, c, k) cases, exact rationals")))
    })
}

/// Normalisation of next-token and answer distributions on prior rollouts.
pub fn check_normalization(name: &str, model: &dyn CondSeqModel, queries: &[Vec<TokenId>], horizon: usize) -> CheckResult {
    timed(&format!("normalization[{name}]"), 1e-9, || {
        let mut worst: f64 = 0.0;
        let mut r = rng::stream(8, &[rng::label("verify-normalization")]);
        let mut n = 0;
        for q in queries.iter().cycle().take(200.max(queries.len())) {
            let mut s = State::new(q.clone());
            loop {
                worst = worst.max(normalization_error(&model.answer_logprobs(&s)?));
                if is_terminal(model, &s, horizon) {
                    break;
                }
                let lp = model.next_token_logprobs(&s)?;
                let e = normalization_error(&lp);
                worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
                n += 1;
                s.thought.push(sample_logprobs(&lp, &mut r));
            }
        }
        Ok((worst, format!("{n} states")))
    })
}

/// Runs every identity on the reference set.
pub fn run_identity_suite() -> Result<VerifyReport> {
    let set = reference_policies()?;
    let mut checks = Vec::new();
    for rp in &set {
        let queries: Vec<Vec<TokenId>> = rp.cases.iter().map(|c| c.0.clone()).collect();
        checks.push(check_normalization(rp.name, &rp.model, &queries, rp.horizon));
    }
    checks.push(check_neg_kl(&set));
    checks.push(check_signs(&set));
    checks.push(check_two_forms(&set));
    checks.push(check_telescoping(&set));
    checks.push(check_total_probability(&set));
    checks.extend(check_gradient_decomposition());
    checks.push(check_stop_gradient());
    checks.push(check_estimator());
    checks.push(check_pass_at_k());
    Ok(VerifyReport { checks })
}
