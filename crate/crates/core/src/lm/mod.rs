//! Tokens, reasoning states, trajectories and the conditional sequence model
//! interface every other module consumes.

mod checkpoint;
mod linear;
mod tabular;

pub use checkpoint::{load_policy, save_policy, Checkpoint, CheckpointBody, Policy, CHECKPOINT_VERSION};
pub use linear::{FeatureSpec, LinearFitConfig, LinearSoftmaxPolicy};
pub use tabular::{fit_mle, CountTable, Fallback, TabularPolicy, TabularView};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Range;

use crate::error::{FlowError, Result};
use crate::numeric::logsumexp;

pub type TokenId = usize;

/// Window padding marker used in context keys.
pub const BOS: u64 = u64::MAX;
/// Marker for "no label slot" in context keys.
pub const NO_LABEL: u64 = u64::MAX - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Content,
    Filler,
    EndOfThought,
    Answer,
    Placeholder,
}

impl Role {
    /// Roles that may appear inside a thought.
    pub fn is_thought(self) -> bool {
        matches!(self, Role::Content | Role::Filler | Role::EndOfThought)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Content => "content",
            Role::Filler => "filler",
            Role::EndOfThought => "end-of-thought",
            Role::Answer => "answer",
            Role::Placeholder => "placeholder",
        };
        f.write_str(s)
    }
}

/// A vocabulary: one role per token id.
///
/// Exactly one token is end-of-thought, answer tokens form one contiguous
/// block, and there is at most one placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Role>", into = "Vec<Role>")]
pub struct Vocab {
    roles: Vec<Role>,
    eot: TokenId,
    answers: Range<usize>,
    placeholder: Option<TokenId>,
    thought_tokens: Vec<TokenId>,
    thought_column: Vec<Option<usize>>,
}

impl Vocab {
    pub fn new(roles: Vec<Role>) -> Result<Self> {
        let eots: Vec<_> = positions(&roles, Role::EndOfThought);
        if eots.len() != 1 {
            return Err(FlowError::InvalidVocab(format!(
                "expected exactly one end-of-thought token, found {}",
                eots.len()
            )));
        }
        let answers = positions(&roles, Role::Answer);
        if answers.is_empty() {
            return Err(FlowError::InvalidVocab("no answer tokens".into()));
        }
        let (lo, hi) = (answers[0], answers[answers.len() - 1] + 1);
        if hi - lo != answers.len() {
            return Err(FlowError::InvalidVocab(
                "answer tokens must form a contiguous block".into(),
            ));
        }
        let placeholders = positions(&roles, Role::Placeholder);
        if placeholders.len() > 1 {
            return Err(FlowError::InvalidVocab("more than one placeholder".into()));
        }
        let thought_tokens: Vec<_> = (0..roles.len()).filter(|&t| roles[t].is_thought()).collect();
        let mut thought_column = vec![None; roles.len()];
        for (col, &t) in thought_tokens.iter().enumerate() {
            thought_column[t] = Some(col);
        }
        Ok(Self {
            eot: eots[0],
            answers: lo..hi,
            placeholder: placeholders.first().copied(),
            thought_tokens,
            thought_column,
            roles,
        })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn role(&self, token: TokenId) -> Role {
        self.roles[token]
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn eot(&self) -> TokenId {
        self.eot
    }

    pub fn placeholder(&self) -> Option<TokenId> {
        self.placeholder
    }

    pub fn answer_range(&self) -> Range<usize> {
        self.answers.clone()
    }

    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }

    /// Position of `token` inside the answer block.
    pub fn answer_index(&self, token: TokenId) -> Result<usize> {
        if token < self.len() && self.answers.contains(&token) {
            Ok(token - self.answers.start)
        } else {
            Err(self.wrong_role(token, "answer"))
        }
    }

    pub fn answer_token(&self, index: usize) -> TokenId {
        self.answers.start + index
    }

    /// Tokens that may be emitted inside a thought, in id order.
    pub fn thought_tokens(&self) -> &[TokenId] {
        &self.thought_tokens
    }

    /// Column of `token` among the thought tokens.
    pub fn thought_column(&self, token: TokenId) -> Option<usize> {
        self.thought_column.get(token).copied().flatten()
    }

    pub fn tokens_with_role(&self, role: Role) -> Vec<TokenId> {
        positions(&self.roles, role)
    }

    pub(crate) fn wrong_role(&self, token: TokenId, expected: &'static str) -> FlowError {
        FlowError::WrongRole {
            token,
            role: self
                .roles
                .get(token)
                .map(|r| r.to_string())
                .unwrap_or_else(|| "out-of-range".into()),
            expected,
        }
    }
}

fn positions(roles: &[Role], role: Role) -> Vec<usize> {
    roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == role)
        .map(|(i, _)| i)
        .collect()
}

impl TryFrom<Vec<Role>> for Vocab {
    type Error = FlowError;
    fn try_from(roles: Vec<Role>) -> Result<Self> {
        Vocab::new(roles)
    }
}

impl From<Vocab> for Vec<Role> {
    fn from(v: Vocab) -> Self {
        v.roles
    }
}

/// A reasoning prefix: the query, an optional posterior label slot, and the
/// partial thought. The step index is the thought length.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub query: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<TokenId>,
    pub thought: Vec<TokenId>,
}

impl State {
    pub fn new(query: Vec<TokenId>) -> Self {
        Self {
            query,
            label: None,
            thought: Vec::new(),
        }
    }

    pub fn step_index(&self) -> usize {
        self.thought.len()
    }

    /// The state after emitting `token`.
    pub fn child(&self, token: TokenId) -> Self {
        let mut next = self.clone();
        next.thought.push(token);
        next
    }

    /// The same state with the label slot cleared.
    pub fn without_label(&self) -> Self {
        Self {
            label: None,
            ..self.clone()
        }
    }

    /// The prefix `I_i` holding the first `i` thought tokens.
    pub fn prefix(&self, i: usize) -> Self {
        Self {
            query: self.query.clone(),
            label: self.label,
            thought: self.thought[..i].to_vec(),
        }
    }

    pub fn ends_with_eot(&self, vocab: &Vocab) -> bool {
        self.thought.last() == Some(&vocab.eot())
    }

    /// Last `k` thought tokens, left-padded with [`BOS`].
    pub fn window(&self, k: usize) -> Vec<u64> {
        let n = self.thought.len();
        (0..k)
            .map(|j| {
                let back = k - j;
                if back <= n {
                    self.thought[n - back] as u64
                } else {
                    BOS
                }
            })
            .collect()
    }

    /// Last `k` content-role thought tokens, left-padded with [`BOS`].
    pub fn content_window(&self, vocab: &Vocab, k: usize) -> Vec<u64> {
        let content: Vec<u64> = self
            .thought
            .iter()
            .rev()
            .filter(|&&t| vocab.role(t) == Role::Content)
            .take(k)
            .map(|&t| t as u64)
            .collect();
        let mut out = vec![BOS; k - content.len()];
        out.extend(content.into_iter().rev());
        out
    }

    pub fn content_count(&self, vocab: &Vocab) -> usize {
        self.thought
            .iter()
            .filter(|&&t| vocab.role(t) == Role::Content)
            .count()
    }

    /// Checks the state invariants: thought tokens have thought roles and
    /// end-of-thought may only appear last.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        for (i, &t) in self.thought.iter().enumerate() {
            if t >= vocab.len() {
                return Err(FlowError::InvalidState(format!("token {t} out of range")));
            }
            let role = vocab.role(t);
            if !role.is_thought() {
                return Err(FlowError::InvalidState(format!(
                    "thought token {t} at step {} has role {role}",
                    i + 1
                )));
            }
            if role == Role::EndOfThought && i + 1 != self.thought.len() {
                return Err(FlowError::InvalidState(
                    "end-of-thought must be the final thought token".into(),
                ));
            }
        }
        if let Some(l) = self.label {
            if l >= vocab.len() {
                return Err(FlowError::InvalidState(format!("label {l} out of range")));
            }
        }
        Ok(())
    }
}

/// One decoded chain: terminal state, emitted answer and per-step log-probs
/// under the generating (prior) policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub state: State,
    pub answer: TokenId,
    pub log_probs: Vec<f64>,
    /// `true` when the chain ended with end-of-thought; `false` when it was
    /// cut at the horizon.
    pub terminated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.state.step_index()
    }

    pub fn is_empty(&self) -> bool {
        self.state.thought.is_empty()
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        self.state.validate(vocab)?;
        vocab.answer_index(self.answer)?;
        if self.log_probs.len() != self.state.step_index() {
            return Err(FlowError::InvalidState(format!(
                "{} log-probs for {} steps",
                self.log_probs.len(),
                self.state.step_index()
            )));
        }
        if let Some(lp) = self.log_probs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
            return Err(FlowError::InvalidState(format!("invalid log-prob {lp}")));
        }
        if self.terminated != self.state.ends_with_eot(vocab) {
            return Err(FlowError::InvalidState(
                "terminated flag disagrees with end-of-thought".into(),
            ));
        }
        Ok(())
    }
}

/// Opaque summary of everything a model reads from a state.
///
/// Two states with equal keys and equal step indices have identical
/// next-token distributions, identical answer distributions, and children
/// whose keys are again equal. The oracle memoizes on it.
pub type ContextKey = Vec<u64>;

/// An autoregressive conditional distribution over thought tokens and answers.
pub trait CondSeqModel: Send + Sync {
    fn vocab(&self) -> &Vocab;

    /// Log-probabilities over the whole vocabulary. Non-thought tokens get `-inf`.
    fn next_token_logprobs(&self, state: &State) -> Result<Vec<f64>>;

    /// Log-probabilities over the answer block, read out at `state` as if the
    /// thought ended there. Callers wanting the strict terminal contract use
    /// [`answer_logprob`].
    fn answer_logprobs(&self, state: &State) -> Result<Vec<f64>>;

    fn context_key(&self, state: &State) -> ContextKey;
}

/// Models with a flat parameter vector and analytic log-likelihood gradients.
pub trait Differentiable: CondSeqModel {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// `out += scale * d/dθ log π(token | state)`.
    fn accumulate_token_grad(
        &self,
        state: &State,
        token: TokenId,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()>;

    /// `out += scale * d/dθ log p(answer | state)`.
    fn accumulate_answer_grad(
        &self,
        state: &State,
        answer: TokenId,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()>;

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// Next-token log-probabilities after validating the state.
pub fn next_token_logprobs<M: CondSeqModel + ?Sized>(model: &M, state: &State) -> Result<Vec<f64>> {
    state.validate(model.vocab())?;
    if state.ends_with_eot(model.vocab()) {
        return Err(FlowError::InvalidState(
            "state already ended with end-of-thought".into(),
        ));
    }
    model.next_token_logprobs(state)
}

/// `log p(answer | state)` for a terminal state (one ending in end-of-thought).
pub fn answer_logprob<M: CondSeqModel + ?Sized>(
    model: &M,
    state: &State,
    answer: TokenId,
) -> Result<f64> {
    let vocab = model.vocab();
    let idx = vocab.answer_index(answer)?;
    state.validate(vocab)?;
    if !state.ends_with_eot(vocab) {
        return Err(FlowError::NonTerminalState);
    }
    Ok(model.answer_logprobs(state)?[idx])
}

/// Log-sum-exp of a log-probability vector; 0 for a normalized distribution.
pub fn normalization_error(logprobs: &[f64]) -> f64 {
    logsumexp(logprobs).abs()
}
