//! Exact ground truth by exhaustive summation over continuations.
//!
//! `p(y | I)` for a non-terminal prefix is the probability-weighted sum over
//! every continuation up to the horizon. Summation is a memoized recursion on
//! `(context key, step)`, which visits the same terms as brute-force
//! enumeration in the same order but shares identical sub-futures.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{FlowError, Result};
use crate::lm::{ContextKey, CondSeqModel, Differentiable, State, TokenId};
use crate::numeric::logsumexp;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnumerationBudget {
    /// Ceiling on distinct memoized nodes for the recursion, and on explicit
    /// trajectories for brute-force enumeration.
    pub max_trajectories: u64,
    /// Maximum number of thought tokens; longer chains are cut and answered
    /// from the cut state.
    pub horizon: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self {
            max_trajectories: 1_000_000,
            horizon: 12,
        }
    }
}

impl EnumerationBudget {
    pub fn with_horizon(horizon: usize) -> Self {
        Self {
            horizon,
            ..Self::default()
        }
    }
}

/// Whether the chain stops at `state`: it ended with end-of-thought or hit the horizon.
pub fn is_terminal<M: CondSeqModel + ?Sized>(model: &M, state: &State, horizon: usize) -> bool {
    state.ends_with_eot(model.vocab()) || state.step_index() >= horizon
}

/// Exact `log p(y | I)` for one fixed answer, memoized across calls.
pub struct AnswerOracle<'m, M: CondSeqModel + ?Sized> {
    model: &'m M,
    answer: TokenId,
    answer_idx: usize,
    budget: EnumerationBudget,
    memo: RefCell<HashMap<(ContextKey, usize), f64>>,
    nodes: Cell<u128>,
}

impl<'m, M: CondSeqModel + ?Sized> AnswerOracle<'m, M> {
    pub fn new(model: &'m M, answer: TokenId, budget: EnumerationBudget) -> Result<Self> {
        let answer_idx = model.vocab().answer_index(answer)?;
        Ok(Self {
            model,
            answer,
            answer_idx,
            budget,
            memo: RefCell::new(HashMap::new()),
            nodes: Cell::new(0),
        })
    }

    pub fn model(&self) -> &'m M {
        self.model
    }

    pub fn answer(&self) -> TokenId {
        self.answer
    }

    pub fn budget(&self) -> EnumerationBudget {
        self.budget
    }

    /// Distinct nodes evaluated so far.
    pub fn nodes(&self) -> u128 {
        self.nodes.get()
    }

    pub fn is_terminal(&self, state: &State) -> bool {
        is_terminal(self.model, state, self.budget.horizon)
    }

    /// `log p(y | I)`. Terminal states read the answer head directly.
    pub fn log_marginal(&self, state: &State) -> Result<f64> {
        let state = state.without_label();
        state.validate(self.model.vocab())?;
        if state.step_index() > self.budget.horizon {
            return Err(FlowError::InvalidState(format!(
                "state has {} thought tokens, beyond the horizon {}",
                state.step_index(),
                self.budget.horizon
            )));
        }
        self.log_marginal_inner(&state)
    }

    fn log_marginal_inner(&self, state: &State) -> Result<f64> {
        if self.is_terminal(state) {
            return Ok(self.model.answer_logprobs(state)?[self.answer_idx]);
        }
        let key = (self.model.context_key(state), state.step_index());
        if let Some(&v) = self.memo.borrow().get(&key) {
            return Ok(v);
        }
        let n = self.nodes.get() + 1;
        if n > self.budget.max_trajectories.into() {
            return Err(FlowError::BudgetExceeded {
                required: n,
                budget: self.budget.max_trajectories.into(),
            });
        }
        self.nodes.set(n);
        let prior = self.model.next_token_logprobs(state)?;
        let mut terms = Vec::with_capacity(self.model.vocab().thought_tokens().len());
        for &s in self.model.vocab().thought_tokens() {
            if prior[s] == f64::NEG_INFINITY {
                continue;
            }
            terms.push(prior[s] + self.log_marginal_inner(&state.child(s))?);
        }
        let v = logsumexp(&terms);
        self.memo.borrow_mut().insert(key, v);
        Ok(v)
    }

    fn require_open(&self, state: &State) -> Result<()> {
        if self.is_terminal(state) {
            return Err(FlowError::InvalidState(
                "state is terminal; there is no next token".into(),
            ));
        }
        Ok(())
    }

    /// Per-token difficulty decrease `log p(y | I∘s) − log p(y | I)`.
    pub fn difficulty_delta(&self, state: &State, token: TokenId) -> Result<f64> {
        self.require_open(state)?;
        Ok(self.log_marginal(&state.child(token))? - self.log_marginal(state)?)
    }

    /// `log p(s | I, y)` over the whole vocabulary; non-thought tokens are `-inf`.
    pub fn exact_bayes_posterior(&self, state: &State) -> Result<Vec<f64>> {
        self.require_open(state)?;
        let base = self.log_marginal(state)?;
        if base == f64::NEG_INFINITY {
            return Err(FlowError::ZeroProbabilityConditioning {
                answer: self.answer,
            });
        }
        let prior = self.model.next_token_logprobs(&state.without_label())?;
        let mut post = vec![f64::NEG_INFINITY; prior.len()];
        for &s in self.model.vocab().thought_tokens() {
            if prior[s] > f64::NEG_INFINITY {
                post[s] = prior[s] + self.log_marginal(&state.child(s))? - base;
            }
        }
        Ok(post)
    }

    /// `E_prior[v]` from difficulty deltas and `−KL(prior ‖ posterior)` from
    /// the posterior vector, computed separately.
    pub fn expected_velocity(&self, state: &State) -> Result<VelocityExpectation> {
        let post = self.exact_bayes_posterior(state)?;
        let prior = self.model.next_token_logprobs(&state.without_label())?;
        let base = self.log_marginal(state)?;
        let mut expected = 0.0;
        let mut kl = 0.0;
        for &s in self.model.vocab().thought_tokens() {
            if prior[s] == f64::NEG_INFINITY {
                continue;
            }
            let p = prior[s].exp();
            expected += p * (self.log_marginal(&state.child(s))? - base);
            kl += p * (prior[s] - post[s]);
        }
        Ok(VelocityExpectation {
            expected,
            neg_kl: -kl,
        })
    }

    /// Candidate with the largest `log post(s) − log prior(s)`; ties go to the lowest id.
    pub fn max_velocity(&self, state: &State, candidates: &[TokenId]) -> Result<(TokenId, f64)> {
        let post = self.exact_bayes_posterior(state)?;
        let prior = self.model.next_token_logprobs(&state.without_label())?;
        let mut sorted = candidates.to_vec();
        sorted.sort_unstable();
        let mut best: Option<(TokenId, f64)> = None;
        for s in sorted {
            if prior[s] == f64::NEG_INFINITY {
                continue;
            }
            let v = post[s] - prior[s];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((s, v));
            }
        }
        best.ok_or_else(|| FlowError::InvalidConfig("empty candidate set".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VelocityExpectation {
    pub expected: f64,
    pub neg_kl: f64,
}

/// One-shot `log p(y | I)`.
pub fn marginal_answer_logprob<M: CondSeqModel + ?Sized>(
    model: &M,
    state: &State,
    answer: TokenId,
    budget: EnumerationBudget,
) -> Result<f64> {
    AnswerOracle::new(model, answer, budget)?.log_marginal(state)
}

pub fn exact_bayes_posterior<M: CondSeqModel + ?Sized>(
    model: &M,
    state: &State,
    answer: TokenId,
    budget: EnumerationBudget,
) -> Result<Vec<f64>> {
    AnswerOracle::new(model, answer, budget)?.exact_bayes_posterior(state)
}

pub fn expected_velocity<M: CondSeqModel + ?Sized>(
    model: &M,
    state: &State,
    answer: TokenId,
    budget: EnumerationBudget,
) -> Result<VelocityExpectation> {
    AnswerOracle::new(model, answer, budget)?.expected_velocity(state)
}

pub fn max_velocity<M: CondSeqModel + ?Sized>(
    model: &M,
    state: &State,
    answer: TokenId,
    budget: EnumerationBudget,
    candidates: &[TokenId],
) -> Result<(TokenId, f64)> {
    AnswerOracle::new(model, answer, budget)?.max_velocity(state, candidates)
}

/// A complete continuation of some start state.
#[derive(Clone, Debug, PartialEq)]
pub struct Enumerated {
    pub state: State,
    /// Per-step `log π(s_t | I_{t−1})` of the appended tokens.
    pub log_probs: Vec<f64>,
}

impl Enumerated {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Every continuation of `state` to a terminal state, depth first in token-id order.
pub fn enumerate_continuations<M: CondSeqModel + ?Sized>(
    model: &M,
    state: &State,
    budget: EnumerationBudget,
) -> Result<Vec<Enumerated>> {
    let state = state.without_label();
    state.validate(model.vocab())?;
    let nt = model.vocab().thought_tokens().len() as u128;
    let remaining = budget.horizon.saturating_sub(state.step_index());
    let mut bound: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=remaining {
        bound = bound.saturating_add(level);
        level = level.saturating_mul(nt);
    }
    if bound > u128::from(budget.max_trajectories) {
        return Err(FlowError::BudgetExceeded {
            required: bound,
            budget: budget.max_trajectories.into(),
        });
    }
    let mut out = Vec::new();
    let mut stack = vec![(state, Vec::new())];
    while let Some((s, lps)) = stack.pop() {
        if is_terminal(model, &s, budget.horizon) {
            out.push(Enumerated {
                state: s,
                log_probs: lps,
            });
            continue;
        }
        let prior = model.next_token_logprobs(&s)?;
        for &t in model.vocab().thought_tokens().iter().rev() {
            if prior[t] == f64::NEG_INFINITY {
                continue;
            }
            let mut l = lps.clone();
            l.push(prior[t]);
            stack.push((s.child(t), l));
        }
    }
    Ok(out)
}

/// Monte-Carlo estimate of `p(y | I)`: mean of `p(y | x, s)` over sampled
/// continuations, with its standard error.
pub fn monte_carlo_marginal<M: CondSeqModel + ?Sized>(
    model: &M,
    state: &State,
    answer: TokenId,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let idx = model.vocab().answer_index(answer)?;
    let mut r = rng::stream(seed, &[rng::label("mc-marginal")]);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut s = state.without_label();
        while !is_terminal(model, &s, horizon) {
            let lp = model.next_token_logprobs(&s)?;
            s.thought.push(sample_logprobs(&lp, &mut r));
        }
        let p = model.answer_logprobs(&s)?[idx].exp();
        sum += p;
        sq += p * p;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Inverse-CDF draw from a normalized log-probability vector.
pub fn sample_logprobs(lp: &[f64], r: &mut rng::Rng) -> TokenId {
    let u: f64 = r.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (t, &l) in lp.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        acc += l.exp();
        last = t;
        if u < acc {
            return t;
        }
    }
    last
}

/// The stop-gradient objective `J(θ) = E_θ[Σ_i log p_θ(y|I_i) − log p_θ₀(y|I_{i−1})]`
/// and its gradient at `θ = θ₀`, computed two ways.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectiveGradient {
    pub objective: f64,
    /// Product rule on the enumerated sum, with `∇ log p(y|I_i)` from the
    /// differentiated recursion.
    pub direct: Vec<f64>,
    /// `E[∇ log π(s) · (R − E[R])]`.
    pub term_a: Vec<f64>,
    /// `E[Σ_i M_i (∇ log p(y|x,s) + Σ_{k>i} ∇ log π(s_k))]`, `M_i = p(y|x,s)/p(y|I_i)`.
    pub term_b: Vec<f64>,
    pub num_trajectories: usize,
}

impl ObjectiveGradient {
    pub fn decomposed(&self) -> Vec<f64> {
        self.term_a.iter().zip(&self.term_b).map(|(a, b)| a + b).collect()
    }
}

struct GradRecursion<'m, P: Differentiable + ?Sized> {
    oracle: AnswerOracle<'m, P>,
    memo: RefCell<HashMap<(ContextKey, usize), Vec<f64>>>,
}

impl<'m, P: Differentiable + ?Sized> GradRecursion<'m, P> {
    /// `∇ log p(y | I) = Σ_s post(s) (∇ log π(s|I) + ∇ log p(y | I∘s))`.
    fn grad(&self, state: &State) -> Result<Vec<f64>> {
        let model = self.oracle.model();
        let mut g = vec![0.0; model.num_params()];
        if self.oracle.is_terminal(state) {
            model.accumulate_answer_grad(state, self.oracle.answer(), 1.0, &mut g)?;
            return Ok(g);
        }
        let key = (model.context_key(state), state.step_index());
        if let Some(v) = self.memo.borrow().get(&key) {
            return Ok(v.clone());
        }
        let post = self.oracle.exact_bayes_posterior(state)?;
        for &s in model.vocab().thought_tokens() {
            if post[s] == f64::NEG_INFINITY {
                continue;
            }
            let w = post[s].exp();
            model.accumulate_token_grad(state, s, w, &mut g)?;
            let child = self.grad(&state.child(s))?;
            for (gi, ci) in g.iter_mut().zip(&child) {
                *gi += w * ci;
            }
        }
        self.memo.borrow_mut().insert(key, g.clone());
        Ok(g)
    }
}

pub fn exact_objective_and_gradient<P: Differentiable + ?Sized>(
    policy: &P,
    query: &[TokenId],
    answer: TokenId,
    budget: EnumerationBudget,
) -> Result<ObjectiveGradient> {
    let start = State::new(query.to_vec());
    let trajs = enumerate_continuations(policy, &start, budget)?;
    let rec = GradRecursion {
        oracle: AnswerOracle::new(policy, answer, budget)?,
        memo: RefCell::new(HashMap::new()),
    };
    let oracle = &rec.oracle;
    let d = policy.num_params();
    let log_p0 = oracle.log_marginal(&start)?;

    struct Scored {
        prob: f64,
        reward: f64,
        score: Vec<f64>,
        marginals: Vec<f64>,
    }
    let mut scored = Vec::with_capacity(trajs.len());
    for t in &trajs {
        let steps = t.state.step_index() - start.step_index();
        let mut score = vec![0.0; d];
        let mut marginals = Vec::with_capacity(steps);
        for i in 0..steps {
            let prefix = t.state.prefix(start.step_index() + i);
            policy.accumulate_token_grad(&prefix, t.state.thought[prefix.step_index()], 1.0, &mut score)?;
            marginals.push(oracle.log_marginal(&t.state.prefix(start.step_index() + i + 1))?);
        }
        let terminal = *marginals.last().unwrap_or(&log_p0);
        scored.push(Scored {
            prob: t.log_prob().exp(),
            reward: terminal - log_p0,
            score,
            marginals,
        });
    }
    let objective: f64 = scored.iter().map(|s| s.prob * s.reward).sum();

    let mut direct = vec![0.0; d];
    for (t, s) in trajs.iter().zip(&scored) {
        for k in 0..d {
            direct[k] += s.prob * s.score[k] * s.reward;
        }
        for i in 1..=s.marginals.len() {
            let g = rec.grad(&t.state.prefix(start.step_index() + i))?;
            for k in 0..d {
                direct[k] += s.prob * g[k];
            }
        }
    }

    let mut term_a = vec![0.0; d];
    let mut term_b = vec![0.0; d];
    for (t, s) in trajs.iter().zip(&scored) {
        for k in 0..d {
            term_a[k] += s.prob * s.score[k] * (s.reward - objective);
        }
        let steps = s.marginals.len();
        let terminal = t.state.clone();
        let log_py = *s.marginals.last().unwrap_or(&log_p0);
        let mut answer_grad = vec![0.0; d];
        policy.accumulate_answer_grad(&terminal, answer, 1.0, &mut answer_grad)?;
        // suffix[i] = Σ_{k>i} ∇ log π(s_k), built back to front
        let mut suffix = vec![0.0; d];
        for i in (1..=steps).rev() {
            let m_i = (log_py - s.marginals[i - 1]).exp();
            for k in 0..d {
                term_b[k] += s.prob * m_i * (answer_grad[k] + suffix[k]);
            }
            let prefix = t.state.prefix(start.step_index() + i - 1);
            policy.accumulate_token_grad(&prefix, t.state.thought[prefix.step_index()], 1.0, &mut suffix)?;
        }
    }

    Ok(ObjectiveGradient {
        objective,
        direct,
        term_a,
        term_b,
        num_trajectories: trajs.len(),
    })
}

/// `J` at `policy`'s parameters with every baseline `log p(y|I_{i−1})` taken
/// from `frozen` instead. Differentiating this by finite differences gives an
/// independent check of the stop-gradient gradient.
pub fn frozen_baseline_objective<P: CondSeqModel + ?Sized>(
    policy: &P,
    frozen: &P,
    query: &[TokenId],
    answer: TokenId,
    budget: EnumerationBudget,
) -> Result<f64> {
    let start = State::new(query.to_vec());
    let live = AnswerOracle::new(policy, answer, budget)?;
    let base = AnswerOracle::new(frozen, answer, budget)?;
    let mut j = 0.0;
    for t in enumerate_continuations(policy, &start, budget)? {
        let mut r = 0.0;
        for i in 1..=t.log_probs.len() {
            r += live.log_marginal(&t.state.prefix(i))? - base.log_marginal(&t.state.prefix(i - 1))?;
        }
        j += t.log_prob().exp() * r;
    }
    Ok(j)
}
