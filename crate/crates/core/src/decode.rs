//! Greedy flow decoding with a prior-probability candidate restriction, and
//! the baselines it is compared against.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{FlowError, Result};
use crate::flow::{posterior_label, profile, velocities, PosteriorMode, PosteriorView, VelocityProfile};
use crate::lm::{CondSeqModel, State, TokenId, Trajectory};
use crate::numeric::{argmax, log_softmax};
use crate::oracle::{is_terminal, sample_logprobs, EnumerationBudget};
use crate::rng;
use crate::tasks::TaskInstance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    StandardGreedy,
    StandardSample,
    FlowGreedy,
    PosteriorOnly,
}

impl Strategy {
    pub fn uses_posterior(self) -> bool {
        matches!(self, Strategy::FlowGreedy | Strategy::PosteriorOnly)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::StandardGreedy => "standard_greedy",
            Strategy::StandardSample => "standard_sample",
            Strategy::FlowGreedy => "flow_greedy",
            Strategy::PosteriorOnly => "posterior_only",
        })
    }
}

impl FromStr for Strategy {
    type Err = FlowError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard_greedy" => Ok(Strategy::StandardGreedy),
            "standard_sample" => Ok(Strategy::StandardSample),
            "flow_greedy" => Ok(Strategy::FlowGreedy),
            "posterior_only" => Ok(Strategy::PosteriorOnly),
            other => Err(FlowError::InvalidConfig(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CandidateRule {
    LogprobThreshold { tau: f64 },
    TopP { p: f64 },
    TopK { k: usize },
}

impl Default for CandidateRule {
    fn default() -> Self {
        CandidateRule::TopP { p: 0.95 }
    }
}

impl CandidateRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CandidateRule::TopP { p } if !(p > 0.0 && p <= 1.0) => Err(FlowError::InvalidConfig(format!(
                "top_p must lie in (0, 1], got {p}"
            ))),
            CandidateRule::TopK { k: 0 } => Err(FlowError::InvalidConfig("top_k must be at least 1".into())),
            CandidateRule::LogprobThreshold { tau } if tau.is_nan() => {
                Err(FlowError::InvalidConfig("threshold is NaN".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub candidate_rule: CandidateRule,
    pub temperature: f64,
    pub posterior_mode: PosteriorMode,
    pub horizon: usize,
    pub seed: u64,
    /// Node ceiling for the exact posterior oracle.
    pub max_oracle_nodes: u64,
    /// Also compute a velocity profile for standard strategies.
    pub profile: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FlowGreedy,
            candidate_rule: CandidateRule::default(),
            temperature: 1.0,
            posterior_mode: PosteriorMode::ExactBayes,
            horizon: 12,
            seed: 0,
            max_oracle_nodes: 1_000_000,
            profile: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.candidate_rule.validate()?;
        if self.strategy == Strategy::StandardSample && !(self.temperature > 0.0) {
            return Err(FlowError::InvalidConfig(format!(
                "sampling temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.horizon == 0 {
            return Err(FlowError::InvalidConfig("horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> EnumerationBudget {
        EnumerationBudget {
            max_trajectories: self.max_oracle_nodes,
            horizon: self.horizon,
        }
    }
}

/// Tokens admitted by `rule`, in ascending id order. Never empty: when the
/// rule admits nothing, the prior's argmax is returned alone.
pub fn candidate_set(prior: &[f64], rule: CandidateRule) -> Vec<TokenId> {
    let finite: Vec<TokenId> = (0..prior.len()).filter(|&t| prior[t] > f64::NEG_INFINITY).collect();
    let mut ranked = finite.clone();
    ranked.sort_by(|&a, &b| prior[b].total_cmp(&prior[a]).then(a.cmp(&b)));
    let mut out: Vec<TokenId> = match rule {
        CandidateRule::LogprobThreshold { tau } => finite.into_iter().filter(|&t| prior[t] > tau).collect(),
        CandidateRule::TopK { k } => ranked.into_iter().take(k).collect(),
        CandidateRule::TopP { p } => {
            let mut acc = 0.0;
            let mut taken = Vec::new();
            for t in ranked {
                taken.push(t);
                acc += prior[t].exp();
                if acc >= p - 1e-12 {
                    break;
                }
            }
            taken
        }
    };
    if out.is_empty() {
        out.extend(argmax(prior));
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub candidates: Vec<TokenId>,
    /// Velocity of each candidate, in candidate order (flow strategies only).
    pub velocities: Vec<f64>,
    /// Posterior log-probability of each candidate (flow strategies only).
    pub posterior: Vec<f64>,
}

fn argmax_over(cands: &[TokenId], score: impl Fn(TokenId) -> f64) -> TokenId {
    let mut best = cands[0];
    for &t in &cands[1..] {
        if score(t) > score(best) {
            best = t;
        }
    }
    best
}

/// One decoding step. `rng` is used only by sampling.
pub fn decode_step(
    prior: &dyn CondSeqModel,
    posterior: Option<&PosteriorView<'_>>,
    state: &State,
    config: &DecodeConfig,
    rng: &mut rng::Rng,
) -> Result<(TokenId, StepDiagnostics)> {
    let state = state.without_label();
    let lp = prior.next_token_logprobs(&state)?;
    let mut diag = StepDiagnostics {
        candidates: Vec::new(),
        velocities: Vec::new(),
        posterior: Vec::new(),
    };
    let token = match config.strategy {
        Strategy::StandardGreedy => argmax(&lp).expect("non-empty vocabulary"),
        Strategy::StandardSample => {
            let scaled: Vec<f64> = lp.iter().map(|l| l / config.temperature).collect();
            sample_logprobs(&log_softmax(&scaled), rng)
        }
        Strategy::FlowGreedy | Strategy::PosteriorOnly => {
            let view = posterior.ok_or_else(|| {
                FlowError::InvalidConfig(format!("{} needs a posterior view", config.strategy))
            })?;
            let cands = candidate_set(&lp, config.candidate_rule);
            let q = view.posterior_logprobs(&state)?;
            let v = velocities(prior, view, &state)?;
            diag.velocities = cands.iter().map(|&t| v[t].value).collect();
            diag.posterior = cands.iter().map(|&t| q[t]).collect();
            let t = if config.strategy == Strategy::FlowGreedy {
                argmax_over(&cands, |t| v[t].value)
            } else {
                argmax_over(&cands, |t| q[t])
            };
            diag.candidates = cands;
            t
        }
    };
    Ok((token, diag))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rollout {
    pub instance_id: String,
    pub trajectory: Trajectory,
    pub profile: Option<VelocityProfile>,
    pub correct: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }
}

/// Decodes one instance to end-of-thought or the horizon, then answers from
/// the prior's answer head. Per-step log-probs are the prior's.
pub fn rollout(
    prior: &dyn CondSeqModel,
    posterior: Option<&dyn CondSeqModel>,
    instance: &TaskInstance,
    config: &DecodeConfig,
) -> Result<Rollout> {
    config.validate()?;
    let wants_view = config.strategy.uses_posterior() || config.profile;
    let view = if !wants_view {
        None
    } else {
        match posterior_label(prior.vocab(), config.posterior_mode, instance, config.seed)? {
            None => Some(PosteriorView::exact(prior, instance.gold_answer, config.budget())?),
            Some(label) => match posterior {
                Some(model) => Some(PosteriorView::Label { model, label }),
                None if config.strategy.uses_posterior() => {
                    return Err(FlowError::InvalidConfig(format!(
                        "{} needs a posterior model",
                        config.posterior_mode
                    )))
                }
                None => None,
            },
        }
    };
    let mut r = rng::stream(config.seed, &[rng::label("rollout"), rng::label(&instance.id)]);
    let mut state = instance.initial_state();
    let mut log_probs = Vec::new();
    while !is_terminal(prior, &state, config.horizon) {
        let (t, _) = decode_step(prior, view.as_ref(), &state, config, &mut r)?;
        log_probs.push(prior.next_token_logprobs(&state)?[t]);
        state.thought.push(t);
    }
    let alp = prior.answer_logprobs(&state)?;
    let idx = if config.strategy == Strategy::StandardSample {
        let scaled: Vec<f64> = alp.iter().map(|l| l / config.temperature).collect();
        sample_logprobs(&log_softmax(&scaled), &mut r)
    } else {
        argmax(&alp).expect("non-empty answer block")
    };
    let answer = prior.vocab().answer_token(idx);
    let trajectory = Trajectory {
        terminated: state.ends_with_eot(prior.vocab()),
        state,
        answer,
        log_probs,
    };
    let profile = match &view {
        Some(v) => Some(profile(prior, v, &trajectory)?),
        None => None,
    };
    Ok(Rollout {
        instance_id: instance.id.clone(),
        correct: answer == instance.gold_answer,
        trajectory,
        profile,
    })
}

/// Rollouts for every instance, in instance order.
pub fn rollout_batch(
    prior: &dyn CondSeqModel,
    posterior: Option<&dyn CondSeqModel>,
    instances: &[TaskInstance],
    config: &DecodeConfig,
) -> Result<Vec<Rollout>> {
    instances
        .par_iter()
        .map(|inst| rollout(prior, posterior, inst, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln(v: &[f64]) -> Vec<f64> {
        v.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn candidate_rules() {
        let p = ln(&[0.5, 0.3, 0.15, 0.05]);
        assert_eq!(candidate_set(&p, CandidateRule::TopP { p: 0.8 }), vec![0, 1]);
        assert_eq!(
            candidate_set(&p, CandidateRule::LogprobThreshold { tau: f64::NEG_INFINITY }),
            vec![0, 1, 2, 3]
        );
        assert_eq!(candidate_set(&p, CandidateRule::LogprobThreshold { tau: 0.1 }), vec![0]);
        assert_eq!(candidate_set(&p, CandidateRule::TopK { k: 3 }), vec![0, 1, 2]);
    }

    #[test]
    fn top_p_ties_prefer_low_ids() {
        let p = ln(&[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(candidate_set(&p, CandidateRule::TopP { p: 0.5 }), vec![0, 1]);
    }

    #[test]
    fn rule_validation() {
        assert!(CandidateRule::TopP { p: 0.0 }.validate().is_err());
        assert!(CandidateRule::TopP { p: 1.0 }.validate().is_ok());
        assert!(CandidateRule::TopK { k: 0 }.validate().is_err());
    }
}
