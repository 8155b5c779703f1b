use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::{ContextKey, CondSeqModel, Differentiable, State, TokenId, Trajectory, Vocab, NO_LABEL};
use crate::error::{FlowError, Result};
use crate::numeric::log_softmax_in_place;
use crate::rng;

const SEP: u64 = u64::MAX - 2;

/// Which parts of a state the tabular context reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularView {
    /// Markov window over thought tokens (fillers included).
    pub order: usize,
    /// Window over content tokens read by the answer head.
    pub answer_order: usize,
    pub use_query: bool,
    pub use_label: bool,
}

impl Default for TabularView {
    fn default() -> Self {
        Self {
            order: 2,
            answer_order: 1,
            use_query: true,
            use_label: false,
        }
    }
}

impl TabularView {
    pub fn thought_context(&self, state: &State) -> Vec<u64> {
        let mut key = Vec::with_capacity(state.query.len() + self.order + 2);
        if self.use_query {
            key.extend(state.query.iter().map(|&t| t as u64));
        }
        key.push(SEP);
        if self.use_label {
            key.push(state.label.map_or(NO_LABEL, |l| l as u64));
        }
        key.extend(state.window(self.order));
        key
    }

    pub fn answer_context(&self, vocab: &Vocab, state: &State) -> Vec<u64> {
        state.content_window(vocab, self.answer_order)
    }
}

/// Row source for contexts that have no explicit table entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Sparse table: a missing context is an error.
    None,
    /// Dense table: every missing context shares this row.
    Row(Vec<f64>),
    /// Dense pseudo-random table: logits derived from a hash of the context.
    Hashed { seed: u64, scale: f64 },
}

/// Markov-window lookup-table policy.
///
/// Parameters are the explicit rows, laid out row-major by (context, token):
/// the thought table first, then the answer table.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    view: TabularView,
    contexts: Vec<Vec<u64>>,
    index: HashMap<Vec<u64>, usize>,
    answer_contexts: Vec<Vec<u64>>,
    answer_index: HashMap<Vec<u64>, usize>,
    params: Vec<f64>,
    fallback: Fallback,
    answer_fallback: Fallback,
}

impl TabularPolicy {
    /// An empty sparse table.
    pub fn new(vocab: Vocab, view: TabularView) -> Self {
        Self {
            vocab,
            view,
            contexts: Vec::new(),
            index: HashMap::new(),
            answer_contexts: Vec::new(),
            answer_index: HashMap::new(),
            params: Vec::new(),
            fallback: Fallback::None,
            answer_fallback: Fallback::None,
        }
    }

    /// Uniform over thought tokens and over answers, for every context.
    pub fn uniform(vocab: Vocab, view: TabularView) -> Self {
        let nt = vocab.thought_tokens().len();
        let na = vocab.num_answers();
        let mut p = Self::new(vocab, view);
        p.fallback = Fallback::Row(vec![0.0; nt]);
        p.answer_fallback = Fallback::Row(vec![0.0; na]);
        p
    }

    /// Dense table whose logits are i.i.d. `scale * N(0,1)`-like draws seeded
    /// by a hash of each context, so any state is covered deterministically.
    pub fn random(vocab: Vocab, view: TabularView, seed: u64, scale: f64) -> Self {
        let mut p = Self::new(vocab, view);
        p.fallback = Fallback::Hashed { seed, scale };
        p.answer_fallback = Fallback::Hashed {
            seed: seed ^ 0xA5A5_A5A5,
            scale,
        };
        p
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn view(&self) -> TabularView {
        self.view
    }

    pub fn fallback(&self) -> &Fallback {
        &self.fallback
    }

    pub fn answer_fallback(&self) -> &Fallback {
        &self.answer_fallback
    }

    pub fn set_fallback(&mut self, thought: Fallback, answer: Fallback) {
        self.fallback = thought;
        self.answer_fallback = answer;
    }

    fn n_thought(&self) -> usize {
        self.vocab.thought_tokens().len()
    }

    fn answer_offset(&self) -> usize {
        self.contexts.len() * self.n_thought()
    }

    /// Sets (or inserts) the thought row for `state`'s context. `logits` is
    /// indexed by thought column.
    pub fn set_row(&mut self, state: &State, logits: &[f64]) -> Result<()> {
        let key = self.view.thought_context(state);
        self.set_row_by_key(key, logits)
    }

    pub fn set_row_by_key(&mut self, key: Vec<u64>, logits: &[f64]) -> Result<()> {
        let nt = self.n_thought();
        if logits.len() != nt {
            return Err(FlowError::InvalidConfig(format!(
                "thought row has {} entries, expected {nt}",
                logits.len()
            )));
        }
        match self.index.get(&key) {
            Some(&r) => self.params[r * nt..(r + 1) * nt].copy_from_slice(logits),
            None => {
                let r = self.contexts.len();
                let at = self.answer_offset();
                self.params.splice(at..at, logits.iter().copied());
                self.index.insert(key.clone(), r);
                self.contexts.push(key);
            }
        }
        Ok(())
    }

    /// Sets (or inserts) the answer row read at `state`.
    pub fn set_answer_row(&mut self, state: &State, logits: &[f64]) -> Result<()> {
        let key = self.view.answer_context(&self.vocab, state);
        self.set_answer_row_by_key(key, logits)
    }

    pub fn set_answer_row_by_key(&mut self, key: Vec<u64>, logits: &[f64]) -> Result<()> {
        let na = self.vocab.num_answers();
        if logits.len() != na {
            return Err(FlowError::InvalidConfig(format!(
                "answer row has {} entries, expected {na}",
                logits.len()
            )));
        }
        let off = self.answer_offset();
        match self.answer_index.get(&key) {
            Some(&r) => self.params[off + r * na..off + (r + 1) * na].copy_from_slice(logits),
            None => {
                let r = self.answer_contexts.len();
                self.params.extend_from_slice(logits);
                self.answer_index.insert(key.clone(), r);
                self.answer_contexts.push(key);
            }
        }
        Ok(())
    }

    /// Ensures explicit rows exist for `state` (copying the fallback), so the
    /// entries become trainable parameters.
    pub fn materialize(&mut self, state: &State) -> Result<()> {
        let key = self.view.thought_context(state);
        if !self.index.contains_key(&key) {
            let row = self.fallback_row(&key, self.n_thought(), &self.fallback)?;
            self.set_row_by_key(key, &row)?;
        }
        let akey = self.view.answer_context(&self.vocab, state);
        if !self.answer_index.contains_key(&akey) {
            let row = self.fallback_row(&akey, self.vocab.num_answers(), &self.answer_fallback)?;
            self.set_answer_row_by_key(akey, &row)?;
        }
        Ok(())
    }

    pub fn contexts(&self) -> &[Vec<u64>] {
        &self.contexts
    }

    pub fn answer_contexts(&self) -> &[Vec<u64>] {
        &self.answer_contexts
    }

    pub(crate) fn from_parts(
        vocab: Vocab,
        view: TabularView,
        contexts: Vec<Vec<u64>>,
        answer_contexts: Vec<Vec<u64>>,
        params: Vec<f64>,
        fallback: Fallback,
        answer_fallback: Fallback,
    ) -> Result<Self> {
        let expected =
            contexts.len() * vocab.thought_tokens().len() + answer_contexts.len() * vocab.num_answers();
        if params.len() != expected {
            return Err(FlowError::Checkpoint(format!(
                "expected {expected} logits, found {}",
                params.len()
            )));
        }
        let index = contexts.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        let answer_index = answer_contexts
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, c)| (c, i))
            .collect();
        Ok(Self {
            vocab,
            view,
            contexts,
            index,
            answer_contexts,
            answer_index,
            params,
            fallback,
            answer_fallback,
        })
    }

    fn fallback_row(&self, key: &[u64], width: usize, fallback: &Fallback) -> Result<Vec<f64>> {
        match fallback {
            Fallback::None => Err(FlowError::UnknownContext(format_key(key))),
            Fallback::Row(r) => Ok(r.clone()),
            Fallback::Hashed { seed, scale } => {
                let mut rng = rng::stream(*seed, key);
                Ok((0..width)
                    .map(|_| {
                        // Sum of uniforms: cheap, bounded, roughly Gaussian.
                        let u: f64 = (0..4).map(|_| rng.gen::<f64>()).sum::<f64>() - 2.0;
                        scale * u * 3f64.sqrt()
                    })
                    .collect())
            }
        }
    }

    fn thought_row(&self, state: &State) -> Result<(Option<usize>, Vec<f64>)> {
        let key = self.view.thought_context(state);
        let nt = self.n_thought();
        match self.index.get(&key) {
            Some(&r) => Ok((Some(r), self.params[r * nt..(r + 1) * nt].to_vec())),
            None => Ok((None, self.fallback_row(&key, nt, &self.fallback)?)),
        }
    }

    fn answer_row(&self, state: &State) -> Result<(Option<usize>, Vec<f64>)> {
        let key = self.view.answer_context(&self.vocab, state);
        let na = self.vocab.num_answers();
        let off = self.answer_offset();
        match self.answer_index.get(&key) {
            Some(&r) => Ok((Some(r), self.params[off + r * na..off + (r + 1) * na].to_vec())),
            None => Ok((None, self.fallback_row(&key, na, &self.answer_fallback)?)),
        }
    }

    fn thought_logprobs_by_column(&self, state: &State) -> Result<(Option<usize>, Vec<f64>)> {
        let (row, mut logits) = self.thought_row(state)?;
        log_softmax_in_place(&mut logits);
        Ok((row, logits))
    }
}

pub(crate) fn format_key(key: &[u64]) -> String {
    let parts: Vec<String> = key
        .iter()
        .map(|&k| match k {
            super::BOS => "<bos>".to_string(),
            NO_LABEL => "<nolabel>".to_string(),
            SEP => "|".to_string(),
            k => k.to_string(),
        })
        .collect();
    format!("[{}]", parts.join(" "))
}

impl CondSeqModel for TabularPolicy {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_token_logprobs(&self, state: &State) -> Result<Vec<f64>> {
        let (_, cols) = self.thought_logprobs_by_column(state)?;
        let mut out = vec![f64::NEG_INFINITY; self.vocab.len()];
        for (c, &t) in self.vocab.thought_tokens().iter().enumerate() {
            out[t] = cols[c];
        }
        Ok(out)
    }

    fn answer_logprobs(&self, state: &State) -> Result<Vec<f64>> {
        let (_, mut logits) = self.answer_row(state)?;
        log_softmax_in_place(&mut logits);
        Ok(logits)
    }

    fn context_key(&self, state: &State) -> ContextKey {
        let mut key = self.view.thought_context(state);
        key.push(SEP);
        key.extend(state.content_window(&self.vocab, self.view.answer_order));
        key
    }
}

impl Differentiable for TabularPolicy {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate_token_grad(
        &self,
        state: &State,
        token: TokenId,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let col = self
            .vocab
            .thought_column(token)
            .ok_or_else(|| self.vocab.wrong_role(token, "thought"))?;
        let (row, lp) = self.thought_logprobs_by_column(state)?;
        let row = row.ok_or_else(|| {
            FlowError::UnknownContext(format!(
                "{} is not materialized as a parameter row",
                format_key(&self.view.thought_context(state))
            ))
        })?;
        let nt = self.n_thought();
        for (c, l) in lp.iter().enumerate() {
            let ind = if c == col { 1.0 } else { 0.0 };
            out[row * nt + c] += scale * (ind - l.exp());
        }
        Ok(())
    }

    fn accumulate_answer_grad(
        &self,
        state: &State,
        answer: TokenId,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let a = self.vocab.answer_index(answer)?;
        let (row, mut logits) = self.answer_row(state)?;
        let row = row.ok_or_else(|| {
            FlowError::UnknownContext(format!(
                "answer context {} is not materialized as a parameter row",
                format_key(&self.view.answer_context(&self.vocab, state))
            ))
        })?;
        log_softmax_in_place(&mut logits);
        let na = self.vocab.num_answers();
        let off = self.answer_offset() + row * na;
        for (j, l) in logits.iter().enumerate() {
            let ind = if j == a { 1.0 } else { 0.0 };
            out[off + j] += scale * (ind - l.exp());
        }
        Ok(())
    }
}

/// Weighted transition and answer counts, turned into add-α smoothed logits.
#[derive(Debug)]
pub struct CountTable {
    vocab: Vocab,
    view: TabularView,
    thought: HashMap<Vec<u64>, Vec<f64>>,
    answers: HashMap<Vec<u64>, Vec<f64>>,
}

impl CountTable {
    pub fn new(vocab: Vocab, view: TabularView) -> Self {
        Self {
            vocab,
            view,
            thought: HashMap::new(),
            answers: HashMap::new(),
        }
    }

    pub fn add_transition(&mut self, state: &State, token: TokenId, weight: f64) -> Result<()> {
        let col = self
            .vocab
            .thought_column(token)
            .ok_or_else(|| self.vocab.wrong_role(token, "thought"))?;
        let nt = self.vocab.thought_tokens().len();
        self.thought
            .entry(self.view.thought_context(state))
            .or_insert_with(|| vec![0.0; nt])[col] += weight;
        Ok(())
    }

    pub fn add_answer(&mut self, state: &State, answer: TokenId, weight: f64) -> Result<()> {
        let a = self.vocab.answer_index(answer)?;
        let na = self.vocab.num_answers();
        self.answers
            .entry(self.view.answer_context(&self.vocab, state))
            .or_insert_with(|| vec![0.0; na])[a] += weight;
        Ok(())
    }

    /// Adds every transition of a trajectory plus its answer read-out.
    pub fn add_trajectory(&mut self, traj: &Trajectory, weight: f64) -> Result<()> {
        let mut state = State {
            query: traj.state.query.clone(),
            label: traj.state.label,
            thought: Vec::with_capacity(traj.len()),
        };
        for &t in &traj.state.thought {
            self.add_transition(&state, t, weight)?;
            state.thought.push(t);
        }
        self.add_answer(&state, traj.answer, weight)
    }

    pub fn is_empty(&self) -> bool {
        self.thought.is_empty()
    }

    /// Logits `ln(count + α)`; unseen contexts fall back to the uniform `ln α` row.
    pub fn build(self, alpha: f64) -> Result<TabularPolicy> {
        if !(alpha > 0.0) {
            return Err(FlowError::InvalidConfig(format!("smoothing α must be > 0, got {alpha}")));
        }
        let mut thought: Vec<_> = self.thought.into_iter().collect();
        thought.sort_by(|a, b| a.0.cmp(&b.0));
        let mut answers: Vec<_> = self.answers.into_iter().collect();
        answers.sort_by(|a, b| a.0.cmp(&b.0));
        let smoothed = |c: &f64| (c + alpha).ln();
        let params: Vec<f64> = thought
            .iter()
            .flat_map(|(_, c)| c.iter().map(smoothed))
            .chain(answers.iter().flat_map(|(_, c)| c.iter().map(smoothed)))
            .collect();
        let nt = self.vocab.thought_tokens().len();
        let na = self.vocab.num_answers();
        TabularPolicy::from_parts(
            self.vocab,
            self.view,
            thought.into_iter().map(|(k, _)| k).collect(),
            answers.into_iter().map(|(k, _)| k).collect(),
            params,
            Fallback::Row(vec![alpha.ln(); nt]),
            Fallback::Row(vec![alpha.ln(); na]),
        )
    }
}

/// Maximum-likelihood tabular policy from a demonstration corpus with add-α smoothing.
pub fn fit_mle(
    vocab: &Vocab,
    view: TabularView,
    corpus: &[Trajectory],
    alpha: f64,
) -> Result<TabularPolicy> {
    if corpus.is_empty() {
        return Err(FlowError::EmptyCorpus);
    }
    let mut counts = CountTable::new(vocab.clone(), view);
    for traj in corpus {
        counts.add_trajectory(traj, 1.0)?;
    }
    counts.build(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{answer_logprob, normalization_error};
    use crate::lm::Role::*;

    fn vocab4() -> Vocab {
        // a b c <eot> | y0 y1
        Vocab::new(vec![Content, Content, Content, EndOfThought, Answer, Answer]).unwrap()
    }

    fn traj(thought: Vec<TokenId>, answer: TokenId, vocab: &Vocab) -> Trajectory {
        let terminated = thought.last() == Some(&vocab.eot());
        Trajectory {
            log_probs: vec![-1.0; thought.len()],
            state: State {
                query: vec![],
                label: None,
                thought,
            },
            answer,
            terminated,
        }
    }

    #[test]
    fn uniform_policy_gives_log_quarter() {
        let p = TabularPolicy::uniform(vocab4(), TabularView::default());
        let lp = p.next_token_logprobs(&State::new(vec![0])).unwrap();
        for &t in &[0, 1, 2, 3] {
            assert!((lp[t] - 0.25f64.ln()).abs() < 1e-12);
        }
        assert_eq!(lp[4], f64::NEG_INFINITY);
        let s = State {
            query: vec![],
            label: None,
            thought: vec![0, 3],
        };
        assert!((answer_logprob(&p, &s, 4).unwrap() - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_row_selects_token() {
        let mut p = TabularPolicy::new(vocab4(), TabularView::default());
        let s = State::new(vec![]);
        p.set_row(&s, &[30.0, 0.0, 0.0, 0.0]).unwrap();
        let lp = p.next_token_logprobs(&s).unwrap();
        assert!(lp[0] >= -1e-9);
    }

    #[test]
    fn sparse_table_names_missing_context() {
        let p = TabularPolicy::new(vocab4(), TabularView::default());
        let err = p.next_token_logprobs(&State::new(vec![2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2 | <bos> <bos>]"), "{msg}");
    }

    #[test]
    fn laplace_smoothing_arithmetic() {
        let v = vocab4();
        let view = TabularView {
            order: 1,
            ..TabularView::default()
        };
        // after context `a`: b three times, c once
        let corpus = vec![
            traj(vec![0, 1, 3], 4, &v),
            traj(vec![0, 1, 3], 4, &v),
            traj(vec![0, 1, 3], 4, &v),
            traj(vec![0, 2, 3], 5, &v),
        ];
        let p = fit_mle(&v, view, &corpus, 1.0).unwrap();
        let s = State {
            query: vec![],
            label: None,
            thought: vec![0],
        };
        let lp = p.next_token_logprobs(&s).unwrap();
        assert!((lp[1].exp() - 0.5).abs() < 1e-12);
        assert!((lp[2].exp() - 0.25).abs() < 1e-12);
        assert!(normalization_error(&lp) < 1e-12);
    }

    #[test]
    fn small_alpha_recovers_empirical_frequency() {
        let v = vocab4();
        let view = TabularView {
            order: 1,
            ..TabularView::default()
        };
        let p = fit_mle(&v, view, &[traj(vec![0, 1, 3], 4, &v)], 1e-9).unwrap();
        let s = State {
            query: vec![],
            label: None,
            thought: vec![0],
        };
        assert!(p.next_token_logprobs(&s).unwrap()[1] > -1e-8);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            fit_mle(&vocab4(), TabularView::default(), &[], 1.0),
            Err(FlowError::EmptyCorpus)
        ));
        let v = vocab4();
        assert!(fit_mle(&v, TabularView::default(), &[traj(vec![3], 4, &v)], 0.0).is_err());
    }

    #[test]
    fn hashed_random_policy_is_deterministic_and_normalized() {
        let p = TabularPolicy::random(vocab4(), TabularView::default(), 11, 1.5);
        let s = State {
            query: vec![1],
            label: None,
            thought: vec![2, 0],
        };
        let a = p.next_token_logprobs(&s).unwrap();
        let b = p.next_token_logprobs(&s).unwrap();
        assert_eq!(a, b);
        assert!(normalization_error(&a) < 1e-12);
        let q = p.clone();
        assert_eq!(q.answer_logprobs(&s).unwrap(), p.answer_logprobs(&s).unwrap());
    }

    #[test]
    fn token_gradient_matches_finite_difference() {
        let mut p = TabularPolicy::random(vocab4(), TabularView::default(), 3, 1.0);
        let s = State {
            query: vec![],
            label: None,
            thought: vec![1],
        };
        p.materialize(&s).unwrap();
        let mut g = vec![0.0; p.num_params()];
        p.accumulate_token_grad(&s, 2, 1.0, &mut g).unwrap();
        let h = 1e-6;
        for i in 0..p.num_params() {
            let mut up = p.clone();
            up.params_mut()[i] += h;
            let mut dn = p.clone();
            dn.params_mut()[i] -= h;
            let fd = (up.next_token_logprobs(&s).unwrap()[2] - dn.next_token_logprobs(&s).unwrap()[2])
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "param {i}: {fd} vs {}", g[i]);
        }
    }
}
