//! Flow-based policy optimisation: telescoping reward, group-relative
//! advantage, the REINFORCE term plus the time-weighted flow term, quality
//! gates, and an outcome-only baseline.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{FlowError, Result};
use crate::lm::{CondSeqModel, Differentiable, State, TokenId, Trajectory};
use crate::numeric::{l2_norm, log_softmax, LOG_FLOOR};
use crate::oracle::{is_terminal, sample_logprobs, AnswerOracle, EnumerationBudget};
use crate::rng;
use crate::tasks::TaskInstance;

/// `w_k = (k−1)/T` for `k = 1..=T`.
pub fn time_weights(t: usize) -> Vec<f64> {
    (0..t).map(|k| k as f64 / t as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    ReluRelative,
    BinaryRelative,
    /// `exp(log p − μ)`; unbounded.
    Ratio,
    Absolute,
}

impl GateKind {
    pub const ALL: [GateKind; 4] = [
        GateKind::ReluRelative,
        GateKind::BinaryRelative,
        GateKind::Ratio,
        GateKind::Absolute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateKind::ReluRelative => "relu_relative",
            GateKind::BinaryRelative => "binary_relative",
            GateKind::Ratio => "ratio",
            GateKind::Absolute => "absolute",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateKind {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        GateKind::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| FlowError::InvalidConfig(format!("unknown gate '{s}'")))
    }
}

pub fn quality_gate(log_p_answer: f64, mu: f64, kind: GateKind) -> f64 {
    match kind {
        GateKind::ReluRelative => (log_p_answer - mu).max(0.0),
        GateKind::BinaryRelative => {
            if log_p_answer > mu {
                1.0
            } else {
                0.0
            }
        }
        GateKind::Ratio => (log_p_answer - mu).exp(),
        GateKind::Absolute => log_p_answer.exp(),
    }
}

/// `(R_i − mean) / max(std, 1e-8)` with the population standard deviation.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(FlowError::InvalidConfig(format!(
            "group advantage needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Where `log p(y | I_i)` comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardBackend {
    /// Oracle marginal over continuations.
    Exact,
    /// Answer head read at the prefix as if the thought ended there.
    #[default]
    ForcedAnswer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowReward {
    /// `v_i = log p(y|I_i) − sg[log p(y|I_{i−1})]`.
    pub per_step: Vec<f64>,
    /// The stop-gradient terms `log p(y|I_{i−1})`, `i = 1..=T`.
    pub baselines: Vec<f64>,
    /// `log p(y|x,s)` at the end of the trajectory.
    pub terminal: f64,
    pub global: f64,
    pub clamped: bool,
}

fn clamp(lp: f64, clamped: &mut bool) -> f64 {
    if lp < LOG_FLOOR {
        *clamped = true;
        LOG_FLOOR
    } else {
        lp
    }
}

pub fn global_reward(
    model: &dyn CondSeqModel,
    trajectory: &Trajectory,
    answer: TokenId,
    backend: RewardBackend,
    budget: EnumerationBudget,
) -> Result<FlowReward> {
    trajectory.validate(model.vocab())?;
    let base = trajectory.state.step_index() - trajectory.len();
    let oracle = match backend {
        RewardBackend::Exact => Some(AnswerOracle::new(model, answer, budget)?),
        RewardBackend::ForcedAnswer => {
            model.vocab().answer_index(answer)?;
            None
        }
    };
    let mut clamped = false;
    let mut lps = Vec::with_capacity(trajectory.len() + 1);
    for i in 0..=trajectory.len() {
        let prefix = trajectory.state.prefix(base + i);
        let lp = match &oracle {
            Some(o) => o.log_marginal(&prefix)?,
            None => model.answer_logprobs(&prefix)?[model.vocab().answer_index(answer)?],
        };
        lps.push(clamp(lp, &mut clamped));
    }
    let per_step: Vec<f64> = lps.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(FlowReward {
        global: per_step.iter().sum(),
        per_step,
        terminal: lps[lps.len() - 1],
        baselines: lps[..lps.len() - 1].to_vec(),
        clamped,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    FlowDense,
    /// 0/1 verifier reward, REINFORCE term only.
    OutcomeSparse,
}

/// Normalisation of the answer term inside Term B.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermBScaling {
    /// `M (∇log p(y|x,s) + Σ_k (k−1)/T ∇log π(s_k))`.
    #[default]
    Displayed,
    /// As above with the answer term also divided by `T`.
    AnswerOverT,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientConfig {
    pub gate: GateKind,
    pub mode: RewardMode,
    pub scaling: TermBScaling,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            gate: GateKind::ReluRelative,
            mode: RewardMode::FlowDense,
            scaling: TermBScaling::Displayed,
        }
    }
}

/// One group's update, averaged over its trajectories.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowGradient {
    pub term_a: Vec<f64>,
    pub term_b: Vec<f64>,
    pub advantages: Vec<f64>,
    pub gates: Vec<f64>,
    pub mu: f64,
}

impl FlowGradient {
    pub fn total(&self) -> Vec<f64> {
        self.term_a.iter().zip(&self.term_b).map(|(a, b)| a + b).collect()
    }
}

/// Assembles the update for G rollouts of one prompt. Only the terminal
/// likelihoods and verifier outcomes enter; stored baselines are inert.
pub fn group_gradient<P: Differentiable + ?Sized>(
    policy: &P,
    trajectories: &[Trajectory],
    rewards: &[FlowReward],
    correct: &[bool],
    answer: TokenId,
    config: &GradientConfig,
) -> Result<FlowGradient> {
    let g = trajectories.len();
    if rewards.len() != g || correct.len() != g {
        return Err(FlowError::InvalidConfig(format!(
            "group of {g} trajectories with {} rewards and {} outcomes",
            rewards.len(),
            correct.len()
        )));
    }
    let terminal: Vec<f64> = rewards.iter().map(|r| r.terminal).collect();
    let mu = terminal.iter().sum::<f64>() / g as f64;
    let advantages = match config.mode {
        RewardMode::FlowDense => group_advantage(&terminal)?,
        RewardMode::OutcomeSparse => {
            group_advantage(&correct.iter().map(|&c| f64::from(u8::from(c))).collect::<Vec<_>>())?
        }
    };
    let gates: Vec<f64> = match config.mode {
        RewardMode::FlowDense => terminal.iter().map(|&lp| quality_gate(lp, mu, config.gate)).collect(),
        RewardMode::OutcomeSparse => vec![0.0; g],
    };
    let d = policy.num_params();
    let mut term_a = vec![0.0; d];
    let mut term_b = vec![0.0; d];
    let scale = 1.0 / g as f64;
    for (j, traj) in trajectories.iter().enumerate() {
        let t = traj.len();
        let base = traj.state.step_index() - t;
        let weights = time_weights(t);
        for (k, &w) in weights.iter().enumerate() {
            let prefix = traj.state.prefix(base + k);
            let tok = traj.state.thought[base + k];
            if advantages[j] != 0.0 {
                policy.accumulate_token_grad(&prefix, tok, scale * advantages[j], &mut term_a)?;
            }
            if gates[j] != 0.0 && w != 0.0 {
                policy.accumulate_token_grad(&prefix, tok, scale * gates[j] * w, &mut term_b)?;
            }
        }
        if gates[j] != 0.0 {
            let a_scale = match config.scaling {
                TermBScaling::Displayed => 1.0,
                TermBScaling::AnswerOverT => 1.0 / t.max(1) as f64,
            };
            policy.accumulate_answer_grad(&traj.state, answer, scale * gates[j] * a_scale, &mut term_b)?;
        }
    }
    Ok(FlowGradient {
        term_a,
        term_b,
        advantages,
        gates,
        mu,
    })
}

/// Single-trajectory Term B with exact importance weights
/// `M_i = p(y|x,s)/p(y|I_i)`: `Σ_i M_i (∇log p(y|x,s) + Σ_{k>i} ∇log π(s_k))`.
/// Its expectation under the policy is `E[Σ_i ∇log p(y|I_i)]`.
pub fn exact_weight_estimate<P: Differentiable + ?Sized>(
    oracle: &AnswerOracle<'_, P>,
    trajectory: &Trajectory,
) -> Result<Vec<f64>> {
    let policy = oracle.model();
    let d = policy.num_params();
    let t = trajectory.len();
    let base = trajectory.state.step_index() - t;
    let log_py = oracle.log_marginal(&trajectory.state)?;
    let mut answer_grad = vec![0.0; d];
    policy.accumulate_answer_grad(&trajectory.state, oracle.answer(), 1.0, &mut answer_grad)?;
    let mut out = vec![0.0; d];
    let mut suffix = vec![0.0; d];
    for i in (1..=t).rev() {
        let m_i = (log_py - oracle.log_marginal(&trajectory.state.prefix(base + i))?).exp();
        for k in 0..d {
            out[k] += m_i * (answer_grad[k] + suffix[k]);
        }
        let prefix = trajectory.state.prefix(base + i - 1);
        policy.accumulate_token_grad(&prefix, trajectory.state.thought[base + i - 1], 1.0, &mut suffix)?;
    }
    Ok(out)
}

/// Samples a thought at `temperature` until end-of-thought or the horizon,
/// then an answer from the answer head at the same temperature. Stored
/// log-probs are the untempered policy's.
pub fn sample_trajectory(
    policy: &dyn CondSeqModel,
    query: &[TokenId],
    horizon: usize,
    temperature: f64,
    r: &mut rng::Rng,
) -> Result<Trajectory> {
    let mut state = State::new(query.to_vec());
    let mut log_probs = Vec::new();
    let temper = |lp: &[f64]| -> Vec<f64> {
        if temperature == 1.0 {
            lp.to_vec()
        } else {
            log_softmax(&lp.iter().map(|l| l / temperature).collect::<Vec<_>>())
        }
    };
    while !is_terminal(policy, &state, horizon) {
        let lp = policy.next_token_logprobs(&state)?;
        let t = sample_logprobs(&temper(&lp), r);
        log_probs.push(lp[t]);
        state.thought.push(t);
    }
    let alp = policy.answer_logprobs(&state)?;
    let answer = policy.vocab().answer_token(sample_logprobs(&temper(&alp), r));
    Ok(Trajectory {
        terminated: state.ends_with_eot(policy.vocab()),
        state,
        answer,
        log_probs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub prompts_per_batch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub temperature: f64,
    pub gate: GateKind,
    pub reward_mode: RewardMode,
    pub backend: RewardBackend,
    pub term_b_scaling: TermBScaling,
    pub horizon: usize,
    pub max_oracle_nodes: u64,
    /// Held-out evaluation cadence in steps; the final step is always evaluated.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub eval_temperature: f64,
    pub divergence_limit: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            prompts_per_batch: 8,
            learning_rate: 0.05,
            steps: 100,
            temperature: 1.0,
            gate: GateKind::ReluRelative,
            reward_mode: RewardMode::FlowDense,
            backend: RewardBackend::ForcedAnswer,
            term_b_scaling: TermBScaling::Displayed,
            horizon: 12,
            max_oracle_nodes: 1_000_000,
            eval_every: 10,
            eval_samples: 8,
            eval_temperature: 1.0,
            divergence_limit: 1e6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// LLM-scale preset from the original experiments.
    pub fn llm_preset() -> Self {
        Self {
            learning_rate: 1e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlowError::InvalidConfig(m));
        if self.group_size < 2 {
            return bad(format!("group size must be at least 2, got {}", self.group_size));
        }
        if self.prompts_per_batch == 0 || self.eval_samples == 0 || self.eval_every == 0 {
            return bad("batch size, eval samples and eval cadence must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.temperature > 0.0 && self.eval_temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(self.divergence_limit > 0.0) {
            return bad("divergence limit must be positive".into());
        }
        Ok(())
    }

    fn gradient_config(&self) -> GradientConfig {
        GradientConfig {
            gate: self.gate,
            mode: self.reward_mode,
            scaling: self.term_b_scaling,
        }
    }

    fn budget(&self) -> EnumerationBudget {
        EnumerationBudget {
            max_trajectories: self.max_oracle_nodes,
            horizon: self.horizon,
        }
    }
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub step: usize,
    pub reward_mean: f64,
    /// Held-out pass@1; `NaN` on steps without evaluation.
    pub pass1: f64,
    /// Held-out mean thought length; `NaN` on steps without evaluation.
    pub length_mean: f64,
    pub gate_mean: f64,
    pub term_a_norm: f64,
    pub term_b_norm: f64,
}

impl CurveRecord {
    pub const CSV_HEADER: &'static str = "step,reward_mean,pass1,length_mean,gate_mean,term_a_norm,term_b_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.reward_mean,
            self.pass1,
            self.length_mean,
            self.gate_mean,
            self.term_a_norm,
            self.term_b_norm
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub step: usize,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub curve: Vec<CurveRecord>,
    pub divergence: Option<Divergence>,
}

impl TrainReport {
    pub fn check(&self, limit: f64) -> Result<()> {
        match self.divergence {
            Some(d) => Err(FlowError::Divergence {
                step: d.step,
                magnitude: d.magnitude,
                limit,
            }),
            None => Ok(()),
        }
    }

    pub fn last_evaluated(&self) -> Option<&CurveRecord> {
        self.curve.iter().rev().find(|r| !r.pass1.is_nan())
    }
}

/// Held-out pass@1 and mean thought length from `samples` sampled rollouts per instance.
pub fn evaluate_sampled(
    policy: &dyn CondSeqModel,
    instances: &[TaskInstance],
    samples: usize,
    temperature: f64,
    horizon: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let per: Vec<(f64, f64)> = instances
        .par_iter()
        .map(|inst| {
            let mut r = rng::stream(seed, &[rng::label("eval"), rng::label(&inst.id)]);
            let mut correct = 0.0;
            let mut len = 0.0;
            for _ in 0..samples {
                let t = sample_trajectory(policy, &inst.query, horizon, temperature, &mut r)?;
                correct += f64::from(u8::from(t.answer == inst.gold_answer));
                len += t.len() as f64;
            }
            Ok((correct / samples as f64, len / samples as f64))
        })
        .collect::<Result<_>>()?;
    let n = instances.len().max(1) as f64;
    Ok((
        per.iter().map(|p| p.0).sum::<f64>() / n,
        per.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

struct GroupOutcome {
    grad: FlowGradient,
    reward_mean: f64,
}

fn run_group<P: Differentiable>(
    policy: &P,
    inst: &TaskInstance,
    config: &TrainConfig,
    step: usize,
    slot: usize,
) -> Result<GroupOutcome> {
    let mut r = rng::stream(config.seed, &[rng::label("train"), step as u64, slot as u64]);
    let trajs = (0..config.group_size)
        .map(|_| sample_trajectory(policy, &inst.query, config.horizon, config.temperature, &mut r))
        .collect::<Result<Vec<_>>>()?;
    let rewards = trajs
        .iter()
        .map(|t| global_reward(policy, t, inst.gold_answer, config.backend, config.budget()))
        .collect::<Result<Vec<_>>>()?;
    let correct: Vec<bool> = trajs.iter().map(|t| t.answer == inst.gold_answer).collect();
    let grad = group_gradient(policy, &trajs, &rewards, &correct, inst.gold_answer, &config.gradient_config())?;
    Ok(GroupOutcome {
        grad,
        reward_mean: rewards.iter().map(|r| r.global).sum::<f64>() / trajs.len() as f64,
    })
}

/// One batch: rollouts against the frozen policy, then a single ascent step.
pub fn flow_gradient_step<P: Differentiable>(
    policy: &mut P,
    batch: &[TaskInstance],
    config: &TrainConfig,
    step: usize,
) -> Result<(Vec<FlowGradient>, CurveRecord)> {
    let frozen: &P = policy;
    let outcomes: Vec<GroupOutcome> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, inst)| run_group(frozen, inst, config, step, slot))
        .collect::<Result<_>>()?;
    let d = policy.num_params();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    let n = outcomes.len().max(1) as f64;
    for o in &outcomes {
        for k in 0..d {
            a[k] += o.grad.term_a[k] / n;
            b[k] += o.grad.term_b[k] / n;
        }
    }
    if config.learning_rate != 0.0 {
        for (w, (ga, gb)) in policy.params_mut().iter_mut().zip(a.iter().zip(&b)) {
            *w += config.learning_rate * (ga + gb);
        }
    }
    let gates: Vec<f64> = outcomes.iter().flat_map(|o| o.grad.gates.iter().copied()).collect();
    let record = CurveRecord {
        step,
        reward_mean: outcomes.iter().map(|o| o.reward_mean).sum::<f64>() / n,
        pass1: f64::NAN,
        length_mean: f64::NAN,
        gate_mean: gates.iter().sum::<f64>() / gates.len().max(1) as f64,
        term_a_norm: l2_norm(&a),
        term_b_norm: l2_norm(&b),
    };
    Ok((outcomes.into_iter().map(|o| o.grad).collect(), record))
}

fn max_magnitude(params: &[f64]) -> f64 {
    params
        .iter()
        .map(|w| if w.is_finite() { w.abs() } else { f64::INFINITY })
        .fold(0.0, f64::max)
}

/// Trains on prompts drawn from `train`, evaluating on `heldout`. Stops early
/// when any parameter magnitude exceeds the divergence limit.
pub fn train<P: Differentiable>(
    policy: &mut P,
    train: &[TaskInstance],
    heldout: &[TaskInstance],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(FlowError::InvalidConfig("no training instances".into()));
    }
    let mut curve = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut r = rng::stream(config.seed, &[rng::label("batch"), step as u64]);
        let batch: Vec<TaskInstance> = (0..config.prompts_per_batch)
            .map(|_| train.choose(&mut r).expect("non-empty").clone())
            .collect();
        let (_, mut record) = flow_gradient_step(policy, &batch, config, step)?;
        let magnitude = max_magnitude(policy.params());
        if magnitude > config.divergence_limit {
            curve.push(record);
            return Ok(TrainReport {
                curve,
                divergence: Some(Divergence { step, magnitude }),
            });
        }
        if !heldout.is_empty() && (step % config.eval_every == 0 || step == config.steps) {
            let (p, l) = evaluate_sampled(
                policy,
                heldout,
                config.eval_samples,
                config.eval_temperature,
                config.horizon,
                config.seed,
            )?;
            record.pass1 = p;
            record.length_mean = l;
        }
        curve.push(record);
    }
    Ok(TrainReport {
        curve,
        divergence: None,
    })
}
