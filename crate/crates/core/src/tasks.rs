//! Modular chain-arithmetic tasks with semantics-free filler tokens.
//!
//! A query is `[start, op_1, .., op_L]`; the gold thought writes the running
//! value after every operation and then end-of-thought. The answer is the
//! last value written.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{FlowError, Result};
use crate::io::stable_hash;
use crate::lm::{Role, State, TokenId, Trajectory, Vocab};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskFamilyConfig {
    pub modulus: usize,
    /// Requested vocabulary size; ids beyond the required minimum become
    /// spare content tokens. `None` uses the minimum.
    pub vocab_size: Option<usize>,
    pub min_ops: usize,
    pub max_ops: usize,
    pub num_fillers: usize,
    pub filler_rate: f64,
    pub seed: u64,
}

impl Default for TaskFamilyConfig {
    fn default() -> Self {
        Self {
            modulus: 5,
            vocab_size: None,
            min_ops: 2,
            max_ops: 4,
            num_fillers: 1,
            filler_rate: 0.5,
            seed: 7,
        }
    }
}

impl TaskFamilyConfig {
    /// Values, operations, fillers, end-of-thought, answers and the placeholder.
    pub fn required_vocab(&self) -> usize {
        let m = self.modulus;
        m + (m.saturating_sub(1)) + self.num_fillers + 1 + m + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(FlowError::InvalidConfig(format!(
                "modulus must be at least 2, got {}",
                self.modulus
            )));
        }
        if !(0.0..1.0).contains(&self.filler_rate) {
            return Err(FlowError::InvalidConfig(format!(
                "filler rate must lie in [0, 1), got {}",
                self.filler_rate
            )));
        }
        if self.min_ops == 0 || self.min_ops > self.max_ops {
            return Err(FlowError::InvalidConfig(format!(
                "operation count range {}..={} is empty",
                self.min_ops, self.max_ops
            )));
        }
        if self.filler_rate > 0.0 && self.num_fillers == 0 {
            return Err(FlowError::InvalidConfig(
                "a positive filler rate needs at least one filler token".into(),
            ));
        }
        if let Some(v) = self.vocab_size {
            if v < self.required_vocab() {
                return Err(FlowError::VocabTooSmall {
                    required: self.required_vocab(),
                    got: v,
                });
            }
        }
        Ok(())
    }
}

/// Token layout of the task family:
/// values, operations `+1..+(m-1)`, spare content, fillers, end-of-thought,
/// answers, placeholder.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVocab {
    pub modulus: usize,
    pub vocab: Vocab,
    values: Range<usize>,
    ops: Range<usize>,
    fillers: Range<usize>,
}

impl TaskVocab {
    pub fn new(config: &TaskFamilyConfig) -> Result<Self> {
        config.validate()?;
        let m = config.modulus;
        let total = config.vocab_size.unwrap_or(config.required_vocab());
        let spare = total - config.required_vocab();
        let values = 0..m;
        let ops = m..2 * m - 1;
        let fillers = ops.end + spare..ops.end + spare + config.num_fillers;
        let mut roles = vec![Role::Content; fillers.start];
        roles.extend(std::iter::repeat_n(Role::Filler, config.num_fillers));
        roles.push(Role::EndOfThought);
        roles.extend(std::iter::repeat_n(Role::Answer, m));
        roles.push(Role::Placeholder);
        Ok(Self {
            modulus: m,
            vocab: Vocab::new(roles)?,
            values,
            ops,
            fillers,
        })
    }

    pub fn value_token(&self, v: usize) -> TokenId {
        self.values.start + v % self.modulus
    }

    pub fn op_token(&self, delta: usize) -> TokenId {
        assert!(delta >= 1 && delta < self.modulus, "operation +{delta} out of range");
        self.ops.start + delta - 1
    }

    pub fn value_of(&self, token: TokenId) -> Option<usize> {
        self.values.contains(&token).then(|| token - self.values.start)
    }

    pub fn op_of(&self, token: TokenId) -> Option<usize> {
        self.ops.contains(&token).then(|| token - self.ops.start + 1)
    }

    pub fn fillers(&self) -> Range<usize> {
        self.fillers.clone()
    }

    pub fn eot(&self) -> TokenId {
        self.vocab.eot()
    }

    pub fn answer_for_value(&self, v: usize) -> TokenId {
        self.vocab.answer_token(v % self.modulus)
    }

    pub fn placeholder(&self) -> TokenId {
        self.vocab.placeholder().expect("task vocabularies have a placeholder")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub query: Vec<TokenId>,
    pub gold_answer: TokenId,
    pub gold_chain: Vec<TokenId>,
}

impl TaskInstance {
    /// Builds the instance for `start` followed by the given operations.
    pub fn from_ops(tv: &TaskVocab, start: usize, ops: &[usize]) -> Self {
        let mut query = vec![tv.value_token(start)];
        query.extend(ops.iter().map(|&d| tv.op_token(d)));
        let mut v = start % tv.modulus;
        let mut gold_chain = Vec::with_capacity(ops.len() + 1);
        for &d in ops {
            v = (v + d) % tv.modulus;
            gold_chain.push(tv.value_token(v));
        }
        gold_chain.push(tv.eot());
        Self {
            id: stable_hash(&query),
            gold_answer: tv.answer_for_value(v),
            query,
            gold_chain,
        }
    }

    pub fn initial_state(&self) -> State {
        State::new(self.query.clone())
    }

    /// Gold chain with end-of-thought, as a trajectory.
    pub fn gold_trajectory(&self) -> Trajectory {
        Trajectory {
            state: State {
                query: self.query.clone(),
                label: None,
                thought: self.gold_chain.clone(),
            },
            answer: self.gold_answer,
            log_probs: vec![0.0; self.gold_chain.len()],
            terminated: true,
        }
    }

    pub fn num_ops(&self) -> usize {
        self.query.len() - 1
    }
}

/// Replays a thought: the answer is the last value token written, or the
/// start value when none was written. Fillers and other tokens are ignored.
pub fn execute(tv: &TaskVocab, query: &[TokenId], thought: &[TokenId]) -> TokenId {
    let start = query.first().and_then(|&t| tv.value_of(t)).unwrap_or(0);
    let last = thought
        .iter()
        .rev()
        .find_map(|&t| tv.value_of(t))
        .unwrap_or(start);
    tv.answer_for_value(last)
}

/// `n` instances, a pure function of `(config, n)`. Queries may repeat; ids
/// are unique within a generated set.
pub fn generate(config: &TaskFamilyConfig, n: usize) -> Result<(TaskVocab, Vec<TaskInstance>)> {
    let tv = TaskVocab::new(config)?;
    if n == 0 {
        return Err(FlowError::InvalidConfig("instance count must be at least 1".into()));
    }
    let mut r = rng::stream(config.seed, &[rng::label("tasks")]);
    let m = config.modulus;
    let instances = (0..n)
        .map(|i| {
            let start = r.gen_range(0..m);
            let len = r.gen_range(config.min_ops..=config.max_ops);
            let ops: Vec<usize> = (0..len).map(|_| r.gen_range(1..m)).collect();
            let mut inst = TaskInstance::from_ops(&tv, start, &ops);
            inst.id = stable_hash(&(config.seed, i, &inst.query));
            inst
        })
        .collect();
    Ok((tv, instances))
}

/// Gold chains with fillers inserted: before each gold token (end-of-thought
/// included) a geometric number of fillers, each present with probability `ρ`
/// and drawn uniformly from the filler block. Stored log-probs are those of
/// this generating process.
pub fn synthesize_corpus(
    tv: &TaskVocab,
    instances: &[TaskInstance],
    rate: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(FlowError::InvalidConfig(format!(
            "filler rate must lie in [0, 1), got {rate}"
        )));
    }
    let fillers = tv.fillers();
    if rate > 0.0 && fillers.is_empty() {
        return Err(FlowError::InvalidConfig("no filler tokens in vocabulary".into()));
    }
    let lp_filler = (rate / fillers.len().max(1) as f64).ln();
    let lp_gold = (1.0 - rate).ln();
    let mut r = rng::stream(seed, &[rng::label("corpus")]);
    Ok(instances
        .iter()
        .map(|inst| {
            let mut thought = Vec::new();
            let mut log_probs = Vec::new();
            for &g in &inst.gold_chain {
                while rate > 0.0 && r.gen::<f64>() < rate {
                    thought.push(r.gen_range(fillers.clone()));
                    log_probs.push(lp_filler);
                }
                thought.push(g);
                log_probs.push(lp_gold);
            }
            Trajectory {
                state: State {
                    query: inst.query.clone(),
                    label: None,
                    thought,
                },
                answer: inst.gold_answer,
                log_probs,
                terminated: true,
            }
        })
        .collect())
}

/// Outcome correctness; errors when `answer` is not an answer token.
pub fn verify_answer(vocab: &Vocab, instance: &TaskInstance, answer: TokenId) -> Result<bool> {
    vocab.answer_index(answer)?;
    Ok(answer == instance.gold_answer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv() -> TaskVocab {
        TaskVocab::new(&TaskFamilyConfig::default()).unwrap()
    }

    #[test]
    fn small_chains_give_expected_answers() {
        let tv = tv();
        let a = TaskInstance::from_ops(&tv, 2, &[1, 1]);
        assert_eq!(a.gold_answer, tv.answer_for_value(4));
        let b = TaskInstance::from_ops(&tv, 4, &[3]);
        assert_eq!(b.gold_answer, tv.answer_for_value(2));
        assert_eq!(b.gold_chain, vec![tv.value_token(2), tv.eot()]);
    }

    #[test]
    fn layout_and_sizes() {
        let cfg = TaskFamilyConfig::default();
        let tv = tv();
        assert_eq!(tv.vocab.len(), cfg.required_vocab());
        assert_eq!(tv.vocab.len(), 5 + 4 + 1 + 1 + 5 + 1);
        assert_eq!(tv.vocab.role(tv.placeholder()), Role::Placeholder);
        let small = TaskFamilyConfig {
            vocab_size: Some(10),
            ..cfg.clone()
        };
        match TaskVocab::new(&small) {
            Err(FlowError::VocabTooSmall { required, got }) => assert_eq!((required, got), (17, 10)),
            other => panic!("unexpected {other:?}"),
        }
        let big = TaskVocab::new(&TaskFamilyConfig {
            vocab_size: Some(19),
            ..cfg
        })
        .unwrap();
        assert_eq!(big.vocab.role(9), Role::Content);
        assert_eq!(big.vocab.role(11), Role::Filler);
    }

    #[test]
    fn verify_rejects_non_answers() {
        let tv = tv();
        let inst = TaskInstance::from_ops(&tv, 0, &[2, 2]);
        assert!(verify_answer(&tv.vocab, &inst, inst.gold_answer).unwrap());
        assert!(!verify_answer(&tv.vocab, &inst, tv.answer_for_value(1)).unwrap());
        assert!(verify_answer(&tv.vocab, &inst, tv.placeholder()).is_err());
    }

    #[test]
    fn generated_ids_are_unique() {
        let (_, inst) = generate(&TaskFamilyConfig::default(), 2000).unwrap();
        let ids: std::collections::HashSet<_> = inst.iter().map(|i| &i.id).collect();
        assert_eq!(ids.len(), inst.len());
    }

    #[test]
    fn zero_rate_corpus_is_gold() {
        let cfg = TaskFamilyConfig::default();
        let (tv, inst) = generate(&cfg, 20).unwrap();
        let corpus = synthesize_corpus(&tv, &inst, 0.0, 1).unwrap();
        for (t, i) in corpus.iter().zip(&inst) {
            assert_eq!(t.state.thought, i.gold_chain);
            t.validate(&tv.vocab).unwrap();
        }
    }
}
