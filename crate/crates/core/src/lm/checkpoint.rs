use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use super::linear::{FeatureSpec, LinearSoftmaxPolicy};
use super::tabular::{Fallback, TabularPolicy, TabularView};
use super::{ContextKey, CondSeqModel, Differentiable, State, TokenId, Vocab};
use crate::error::{FlowError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Either policy backend behind one type.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Tabular(TabularPolicy),
    Linear(LinearSoftmaxPolicy),
}

impl From<TabularPolicy> for Policy {
    fn from(p: TabularPolicy) -> Self {
        Policy::Tabular(p)
    }
}

impl From<LinearSoftmaxPolicy> for Policy {
    fn from(p: LinearSoftmaxPolicy) -> Self {
        Policy::Linear(p)
    }
}

impl Policy {
    pub fn backend(&self) -> &'static str {
        match self {
            Policy::Tabular(_) => "tabular",
            Policy::Linear(_) => "linear",
        }
    }
}

macro_rules! dispatch {
    ($self:expr, $p:ident => $e:expr) => {
        match $self {
            Policy::Tabular($p) => $e,
            Policy::Linear($p) => $e,
        }
    };
}

impl CondSeqModel for Policy {
    fn vocab(&self) -> &Vocab {
        dispatch!(self, p => p.vocab())
    }

    fn next_token_logprobs(&self, state: &State) -> Result<Vec<f64>> {
        dispatch!(self, p => p.next_token_logprobs(state))
    }

    fn answer_logprobs(&self, state: &State) -> Result<Vec<f64>> {
        dispatch!(self, p => p.answer_logprobs(state))
    }

    fn context_key(&self, state: &State) -> ContextKey {
        dispatch!(self, p => p.context_key(state))
    }
}

impl Differentiable for Policy {
    fn params(&self) -> &[f64] {
        dispatch!(self, p => p.params())
    }

    fn params_mut(&mut self) -> &mut [f64] {
        dispatch!(self, p => p.params_mut())
    }

    fn accumulate_token_grad(&self, state: &State, token: TokenId, scale: f64, out: &mut [f64]) -> Result<()> {
        dispatch!(self, p => p.accumulate_token_grad(state, token, scale, out))
    }

    fn accumulate_answer_grad(&self, state: &State, answer: TokenId, scale: f64, out: &mut [f64]) -> Result<()> {
        dispatch!(self, p => p.accumulate_answer_grad(state, answer, scale, out))
    }
}

/// Serialized form of a [`Policy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab: Vocab,
    #[serde(flatten)]
    pub body: CheckpointBody,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum CheckpointBody {
    Tabular {
        view: TabularView,
        contexts: Vec<Vec<u64>>,
        answer_contexts: Vec<Vec<u64>>,
        fallback: Fallback,
        answer_fallback: Fallback,
        logits: Vec<f64>,
    },
    Linear {
        features: FeatureSpec,
        weights: Vec<f64>,
    },
}

impl From<&Policy> for Checkpoint {
    fn from(policy: &Policy) -> Self {
        let body = match policy {
            Policy::Tabular(p) => CheckpointBody::Tabular {
                view: p.view(),
                contexts: p.contexts().to_vec(),
                answer_contexts: p.answer_contexts().to_vec(),
                fallback: p.fallback().clone(),
                answer_fallback: p.answer_fallback().clone(),
                logits: p.params().to_vec(),
            },
            Policy::Linear(p) => CheckpointBody::Linear {
                features: p.spec().clone(),
                weights: p.params().to_vec(),
            },
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab: policy.vocab().clone(),
            body,
        }
    }
}

impl TryFrom<Checkpoint> for Policy {
    type Error = FlowError;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(FlowError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(match c.body {
            CheckpointBody::Tabular {
                view,
                contexts,
                answer_contexts,
                fallback,
                answer_fallback,
                logits,
            } => Policy::Tabular(TabularPolicy::from_parts(
                c.vocab,
                view,
                contexts,
                answer_contexts,
                logits,
                fallback,
                answer_fallback,
            )?),
            CheckpointBody::Linear { features, weights } => {
                Policy::Linear(LinearSoftmaxPolicy::from_params(c.vocab, features, weights)?)
            }
        })
    }
}

pub fn save_policy(policy: &Policy, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&Checkpoint::from(policy))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    let text = fs::read_to_string(path)?;
    let c: Checkpoint = serde_json::from_str(&text)?;
    Policy::try_from(c)
}
