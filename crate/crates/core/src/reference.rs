//! Seeded reference setups shared by the CLI, the identity suite and the
//! acceptance tests.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::{fit_label_posterior, PosteriorFitConfig};
use crate::lm::{
    fit_mle, FeatureSpec, LinearFitConfig, LinearSoftmaxPolicy, Role, State, TabularPolicy, TabularView, TokenId,
    Vocab,
};
use crate::oracle::EnumerationBudget;
use crate::rl::TrainConfig;
use crate::tasks::{generate, synthesize_corpus, TaskFamilyConfig, TaskInstance, TaskVocab};

/// Prior fitting, posterior fitting and evaluation set for decoding runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSetup {
    pub task: TaskFamilyConfig,
    pub filler_rate: f64,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub prior_view: TabularView,
    pub prior_alpha: f64,
    pub eval_size: usize,
    pub eval_seed: u64,
    pub posterior: PosteriorFitConfig,
}

impl Default for DecodeSetup {
    fn default() -> Self {
        Self {
            task: TaskFamilyConfig::default(),
            filler_rate: 0.5,
            corpus_size: 20_000,
            corpus_seed: 11,
            prior_view: TabularView::default(),
            prior_alpha: 0.01,
            eval_size: 500,
            eval_seed: 99,
            posterior: PosteriorFitConfig::default(),
        }
    }
}

pub struct DecodeAssets {
    pub tv: TaskVocab,
    pub corpus_instances: Vec<TaskInstance>,
    pub prior: TabularPolicy,
    /// Label-conditioned posterior fitted on the evaluation queries.
    pub posterior: TabularPolicy,
    pub eval: Vec<TaskInstance>,
}

impl DecodeSetup {
    pub fn eval_task(&self) -> TaskFamilyConfig {
        TaskFamilyConfig {
            seed: self.eval_seed,
            ..self.task.clone()
        }
    }

    pub fn fit_prior(&self) -> Result<(TaskVocab, Vec<TaskInstance>, TabularPolicy)> {
        let (tv, instances) = generate(&self.task, self.corpus_size)?;
        let corpus = synthesize_corpus(&tv, &instances, self.filler_rate, self.corpus_seed)?;
        let prior = fit_mle(&tv.vocab, self.prior_view, &corpus, self.prior_alpha)?;
        Ok((tv, instances, prior))
    }

    pub fn build(&self) -> Result<DecodeAssets> {
        let (tv, corpus_instances, prior) = self.fit_prior()?;
        let (_, eval) = generate(&self.eval_task(), self.eval_size)?;
        let queries: Vec<Vec<TokenId>> = eval.iter().map(|i| i.query.clone()).collect();
        let posterior = fit_label_posterior(&prior, &queries, &self.posterior)?;
        Ok(DecodeAssets {
            tv,
            corpus_instances,
            prior,
            posterior,
            eval,
        })
    }
}

/// Linear policy warm-started by maximum likelihood, then trained by RL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSetup {
    pub task: TaskFamilyConfig,
    pub filler_rate: f64,
    pub train_size: usize,
    pub heldout_size: usize,
    pub corpus_seed: u64,
    pub features: FeatureSpec,
    pub warm_start: LinearFitConfig,
    pub train: TrainConfig,
}

impl Default for RlSetup {
    fn default() -> Self {
        Self {
            task: TaskFamilyConfig::default(),
            filler_rate: 0.5,
            train_size: 200,
            heldout_size: 300,
            corpus_seed: 1,
            features: FeatureSpec::default(),
            warm_start: LinearFitConfig::default(),
            train: TrainConfig {
                learning_rate: 0.5,
                steps: 200,
                eval_every: 50,
                ..TrainConfig::default()
            },
        }
    }
}

pub struct RlAssets {
    pub tv: TaskVocab,
    pub policy: LinearSoftmaxPolicy,
    pub train: Vec<TaskInstance>,
    pub heldout: Vec<TaskInstance>,
}

impl RlSetup {
    pub fn build(&self) -> Result<RlAssets> {
        let (tv, mut all) = generate(&self.task, self.train_size + self.heldout_size)?;
        let heldout = all.split_off(self.train_size);
        let corpus = synthesize_corpus(&tv, &all, self.filler_rate, self.corpus_seed)?;
        let mut policy = LinearSoftmaxPolicy::zeros(tv.vocab.clone(), self.features.clone());
        policy.fit_mle(&corpus, &self.warm_start)?;
        Ok(RlAssets {
            tv,
            policy,
            train: all,
            heldout,
        })
    }
}

/// An enumerable instance small enough for finite differences.
pub struct TinyInstance {
    pub policy: TabularPolicy,
    pub query: Vec<TokenId>,
    pub answer: TokenId,
    pub budget: EnumerationBudget,
}

/// Two content tokens, one filler and end-of-thought; two answers; horizon 3.
/// Every reachable row is an explicit parameter (26 in total).
pub fn tiny_instance(seed: u64) -> Result<TinyInstance> {
    use Role::*;
    let vocab = Vocab::new(vec![Content, Content, Filler, EndOfThought, Answer, Answer])?;
    let view = TabularView {
        order: 1,
        answer_order: 1,
        use_query: false,
        use_label: false,
    };
    let mut policy = TabularPolicy::random(vocab.clone(), view, seed, 1.0);
    let budget = EnumerationBudget::with_horizon(3);
    let mut frontier = vec![State::new(vec![0])];
    while let Some(s) = frontier.pop() {
        policy.materialize(&s)?;
        if s.ends_with_eot(&vocab) || s.step_index() >= budget.horizon {
            continue;
        }
        for &t in vocab.thought_tokens() {
            frontier.push(s.child(t));
        }
    }
    policy.set_fallback(crate::lm::Fallback::None, crate::lm::Fallback::None);
    Ok(TinyInstance {
        policy,
        query: vec![0],
        answer: vocab.answer_token(0),
        budget,
    })
}
