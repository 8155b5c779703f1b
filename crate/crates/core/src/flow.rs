//! Velocity `v(s) = log post(s) − log prior(s)`, velocity profiles along a
//! chain, and the label-slot posterior approximations.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{FlowError, Result};
use crate::lm::{CondSeqModel, CountTable, Role, State, TabularPolicy, TabularView, TokenId, Trajectory, Vocab};
use crate::numeric::LOG_FLOOR;
use crate::oracle::{is_terminal, sample_logprobs, AnswerOracle, EnumerationBudget};
use crate::rng;
use crate::tasks::TaskInstance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    ExactBayes,
    GoldLabel,
    RandomLabel,
    LatentLabel,
}

impl PosteriorMode {
    pub fn is_label_mode(self) -> bool {
        !matches!(self, PosteriorMode::ExactBayes)
    }
}

impl fmt::Display for PosteriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosteriorMode::ExactBayes => "exact_bayes",
            PosteriorMode::GoldLabel => "gold_label",
            PosteriorMode::RandomLabel => "random_label",
            PosteriorMode::LatentLabel => "latent_label",
        })
    }
}

impl FromStr for PosteriorMode {
    type Err = FlowError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_bayes" => Ok(PosteriorMode::ExactBayes),
            "gold_label" => Ok(PosteriorMode::GoldLabel),
            "random_label" => Ok(PosteriorMode::RandomLabel),
            "latent_label" => Ok(PosteriorMode::LatentLabel),
            other => Err(FlowError::InvalidConfig(format!("unknown posterior mode `{other}`"))),
        }
    }
}

/// The label injected for `mode`: the gold answer, a non-gold answer drawn
/// per instance from `seed`, or the placeholder. `None` for exact Bayes.
pub fn posterior_label(
    vocab: &Vocab,
    mode: PosteriorMode,
    instance: &TaskInstance,
    seed: u64,
) -> Result<Option<TokenId>> {
    Ok(match mode {
        PosteriorMode::ExactBayes => None,
        PosteriorMode::GoldLabel => Some(instance.gold_answer),
        PosteriorMode::LatentLabel => Some(vocab.placeholder().ok_or_else(|| {
            FlowError::InvalidVocab("latent mode needs a placeholder token".into())
        })?),
        PosteriorMode::RandomLabel => {
            let others: Vec<TokenId> = vocab
                .answer_range()
                .filter(|&a| a != instance.gold_answer)
                .collect();
            if others.is_empty() {
                return Err(FlowError::InvalidVocab(
                    "random mode needs at least two answers".into(),
                ));
            }
            let mut r = rng::stream(seed, &[rng::label("random-label"), rng::label(&instance.id)]);
            Some(others[r.gen_range(0..others.len())])
        }
    })
}

/// The state with its label slot set; applying it twice equals applying it once.
pub fn posterior_context(state: &State, label: TokenId) -> State {
    State {
        label: Some(label),
        ..state.clone()
    }
}

/// Where posterior next-token probabilities come from.
pub enum PosteriorView<'a> {
    /// Exact Bayes posterior of the prior itself, conditioned on `answer`.
    Exact(AnswerOracle<'a, dyn CondSeqModel + 'a>),
    /// A label-conditioned model read at the state with its slot filled.
    Label {
        model: &'a dyn CondSeqModel,
        label: TokenId,
    },
}

impl<'a> PosteriorView<'a> {
    pub fn exact(prior: &'a dyn CondSeqModel, answer: TokenId, budget: EnumerationBudget) -> Result<Self> {
        Ok(PosteriorView::Exact(AnswerOracle::new(prior, answer, budget)?))
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, PosteriorView::Exact(_))
    }

    pub fn posterior_logprobs(&self, state: &State) -> Result<Vec<f64>> {
        match self {
            PosteriorView::Exact(o) => o.exact_bayes_posterior(state),
            PosteriorView::Label { model, label } => {
                model.next_token_logprobs(&posterior_context(state, *label))
            }
        }
    }

    pub fn oracle(&self) -> Option<&AnswerOracle<'a, dyn CondSeqModel + 'a>> {
        match self {
            PosteriorView::Exact(o) => Some(o),
            PosteriorView::Label { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub value: f64,
    /// Set when either side was below the log floor and got clamped.
    pub clamped: bool,
}

/// Log-ratio of two log-probabilities. Exact views are used unclamped unless
/// both sides are `-inf`; approximate views clamp at [`LOG_FLOOR`], and two
/// clamped sides give 0.
pub fn velocity_from_logprobs(prior: f64, posterior: f64, exact: bool) -> Velocity {
    let p_low = prior < LOG_FLOOR;
    let q_low = posterior < LOG_FLOOR;
    if exact {
        if prior == f64::NEG_INFINITY && posterior == f64::NEG_INFINITY {
            return Velocity {
                value: 0.0,
                clamped: true,
            };
        }
        return Velocity {
            value: posterior - prior,
            clamped: false,
        };
    }
    if p_low && q_low {
        return Velocity {
            value: 0.0,
            clamped: true,
        };
    }
    Velocity {
        value: posterior.max(LOG_FLOOR) - prior.max(LOG_FLOOR),
        clamped: p_low || q_low,
    }
}

/// Velocity of every vocabulary token at `state`.
pub fn velocities(prior: &dyn CondSeqModel, view: &PosteriorView<'_>, state: &State) -> Result<Vec<Velocity>> {
    let state = state.without_label();
    let p = prior.next_token_logprobs(&state)?;
    let q = view.posterior_logprobs(&state)?;
    Ok(p.iter()
        .zip(&q)
        .map(|(&a, &b)| velocity_from_logprobs(a, b, view.is_exact()))
        .collect())
}

pub fn velocity(
    prior: &dyn CondSeqModel,
    view: &PosteriorView<'_>,
    state: &State,
    token: TokenId,
) -> Result<Velocity> {
    if token >= prior.vocab().len() {
        return Err(FlowError::InvalidState(format!("token {token} out of range")));
    }
    Ok(velocities(prior, view, state)?[token])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfile {
    pub tokens: Vec<TokenId>,
    pub roles: Vec<Role>,
    pub velocities: Vec<f64>,
    /// `D(I_0), .., D(I_T)`, present when an exact oracle backed the profile.
    pub difficulties: Option<Vec<f64>>,
    pub cumulative: f64,
    pub mean: f64,
    pub content_mean: Option<f64>,
    pub filler_mean: Option<f64>,
    pub clamped: usize,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-step velocities of a trajectory's thought tokens.
pub fn profile(prior: &dyn CondSeqModel, view: &PosteriorView<'_>, trajectory: &Trajectory) -> Result<VelocityProfile> {
    trajectory.validate(prior.vocab())?;
    let vocab = prior.vocab();
    let state = trajectory.state.without_label();
    let n = state.step_index();
    let mut vs = Vec::with_capacity(n);
    let mut clamped = 0;
    for i in 0..n {
        let v = velocity(prior, view, &state.prefix(i), state.thought[i])?;
        clamped += v.clamped as usize;
        vs.push(v.value);
    }
    let difficulties = match view.oracle() {
        Some(o) => Some(
            (0..=n)
                .map(|i| o.log_marginal(&state.prefix(i)).map(|l| -l))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let roles: Vec<Role> = state.thought.iter().map(|&t| vocab.role(t)).collect();
    let by_role = |role: Role| mean_of(vs.iter().zip(&roles).filter(|(_, r)| **r == role).map(|(v, _)| *v));
    Ok(VelocityProfile {
        cumulative: vs.iter().sum(),
        mean: mean_of(vs.iter().copied()).unwrap_or(0.0),
        content_mean: by_role(Role::Content),
        filler_mean: by_role(Role::Filler),
        tokens: state.thought.clone(),
        roles,
        velocities: vs,
        difficulties,
        clamped,
    })
}

/// One line of a profile dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub v: Vec<f64>,
    #[serde(rename = "D")]
    pub d: Option<Vec<f64>>,
    pub cumulative: f64,
    pub roles: Vec<Role>,
}

impl ProfileRecord {
    pub fn new(id: &str, p: &VelocityProfile) -> Self {
        Self {
            id: id.to_string(),
            tokens: p.tokens.clone(),
            v: p.velocities.clone(),
            d: p.difficulties.clone(),
            cumulative: p.cumulative,
            roles: p.roles.clone(),
        }
    }
}

/// `KL(p ‖ q)` over entries where `p > 0`, with `q` floored at [`LOG_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > f64::NEG_INFINITY)
        .map(|(&a, &b)| a.exp() * (a - b.max(LOG_FLOOR)))
        .sum()
}

/// Open prefixes drawn by sampling the prior: instances are visited round
/// robin, a chain is sampled to termination and one of its open prefixes is
/// picked uniformly.
pub fn sample_states(
    prior: &dyn CondSeqModel,
    instances: &[TaskInstance],
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<(usize, State)>> {
    let mut r = rng::stream(seed, &[rng::label("sample-states")]);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let idx = k % instances.len();
        let mut s = instances[idx].initial_state();
        while !is_terminal(prior, &s, horizon) {
            let lp = prior.next_token_logprobs(&s)?;
            s.thought.push(sample_logprobs(&lp, &mut r));
        }
        let cut = r.gen_range(0..s.step_index());
        out.push((idx, s.prefix(cut)));
    }
    Ok(out)
}

/// Mean `KL(exact Bayes ‖ mode posterior)` over sampled states; lower is
/// a better approximation. Exact mode scores 0 by definition.
pub fn posterior_quality(
    prior: &dyn CondSeqModel,
    posterior: Option<&dyn CondSeqModel>,
    mode: PosteriorMode,
    instances: &[TaskInstance],
    states: usize,
    budget: EnumerationBudget,
    seed: u64,
) -> Result<f64> {
    if instances.is_empty() || states == 0 {
        return Err(FlowError::InvalidConfig("posterior quality needs instances and states".into()));
    }
    let sampled = sample_states(prior, instances, states, budget.horizon, seed)?;
    let mut total = 0.0;
    let mut cache: Vec<Option<AnswerOracle<'_, dyn CondSeqModel>>> = (0..instances.len()).map(|_| None).collect();
    for (idx, state) in &sampled {
        let inst = &instances[*idx];
        if cache[*idx].is_none() {
            cache[*idx] = Some(AnswerOracle::new(prior, inst.gold_answer, budget)?);
        }
        let exact = cache[*idx].as_ref().unwrap().exact_bayes_posterior(state)?;
        let approx = match posterior_label(prior.vocab(), mode, inst, seed)? {
            None => exact.clone(),
            Some(label) => {
                let model = posterior.ok_or_else(|| {
                    FlowError::InvalidConfig(format!("{mode} needs a posterior model"))
                })?;
                model.next_token_logprobs(&posterior_context(state, label))?
            }
        };
        total += kl_divergence(&exact, &approx);
    }
    Ok(total / sampled.len() as f64)
}

/// Settings for fitting a label-conditioned posterior from the prior's own rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorFitConfig {
    pub samples_per_query: usize,
    pub horizon: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PosteriorFitConfig {
    fn default() -> Self {
        Self {
            samples_per_query: 1000,
            horizon: 12,
            alpha: 0.01,
            seed: 0,
        }
    }
}

/// Monte-Carlo fit of `p(s | x, label)`: chains are sampled from the prior
/// for each distinct query; every chain is counted under each answer label
/// with weight `p(answer | x, s)`, and under the placeholder with weight 1
/// when it reached end-of-thought. No gold answers are read.
pub fn fit_label_posterior(
    prior: &TabularPolicy,
    queries: &[Vec<TokenId>],
    config: &PosteriorFitConfig,
) -> Result<TabularPolicy> {
    let vocab = prior.vocab().clone();
    let placeholder = vocab
        .placeholder()
        .ok_or_else(|| FlowError::InvalidVocab("posterior fitting needs a placeholder token".into()))?;
    let view = TabularView {
        use_label: true,
        ..prior.view()
    };
    let mut distinct: Vec<&Vec<TokenId>> = queries.iter().collect();
    distinct.sort();
    distinct.dedup();
    if distinct.is_empty() {
        return Err(FlowError::EmptyCorpus);
    }
    let mut counts = CountTable::new(vocab.clone(), view);
    for q in distinct {
        let mut r = rng::stream(config.seed, &[rng::label("posterior-fit"), rng::label(&format!("{q:?}"))]);
        for _ in 0..config.samples_per_query {
            let mut s = State::new(q.clone());
            let mut log_probs = Vec::new();
            while !is_terminal(prior, &s, config.horizon) {
                let lp = prior.next_token_logprobs(&s)?;
                let t = sample_logprobs(&lp, &mut r);
                log_probs.push(lp[t]);
                s.thought.push(t);
            }
            let answers = prior.answer_logprobs(&s)?;
            let terminated = s.ends_with_eot(&vocab);
            let mut traj = Trajectory {
                state: s,
                answer: vocab.answer_token(0),
                log_probs,
                terminated,
            };
            for (a, la) in answers.iter().enumerate() {
                traj.state.label = Some(vocab.answer_token(a));
                traj.answer = vocab.answer_token(a);
                counts.add_trajectory(&traj, la.exp())?;
            }
            if terminated {
                traj.state.label = Some(placeholder);
                counts.add_trajectory(&traj, 1.0)?;
            }
        }
    }
    counts.build(config.alpha)
}
