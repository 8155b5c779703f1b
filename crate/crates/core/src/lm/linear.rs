use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::{ContextKey, CondSeqModel, Differentiable, State, TokenId, Trajectory, Vocab, BOS, NO_LABEL};
use crate::error::{FlowError, Result};
use crate::numeric::log_softmax_in_place;
use crate::rng;

/// Feature templates of the linear-softmax policy.
///
/// Thought head: bias, bag of the last `order` thought tokens, a one-hot
/// step bucket, and optionally a cursor conjunction (last content token ×
/// query token at position `content_count + cursor_offset`) and the label
/// slot. Answer head: bias plus the last content token. Before any content
/// is written, the first query token stands in for the last content token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub order: usize,
    /// Ascending step boundaries; the bucket is the number of boundaries `<=` the step index.
    pub step_buckets: Vec<usize>,
    pub cursor: bool,
    pub cursor_offset: usize,
    pub use_label: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            order: 1,
            step_buckets: Vec::new(),
            cursor: true,
            cursor_offset: 1,
            use_label: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    v1: usize,
    bag: usize,
    steps: usize,
    cursor: usize,
    label: usize,
    n_feat: usize,
    n_ans_feat: usize,
}

impl Layout {
    fn new(vocab: &Vocab, spec: &FeatureSpec) -> Self {
        let v1 = vocab.len() + 1;
        let bag = 1;
        let steps = bag + v1;
        let n_steps = if spec.step_buckets.is_empty() {
            0
        } else {
            spec.step_buckets.len() + 1
        };
        let cursor = steps + n_steps;
        let label = cursor + if spec.cursor { v1 * v1 } else { 0 };
        let n_feat = label + if spec.use_label { v1 } else { 0 };
        Self {
            v1,
            bag,
            steps,
            cursor,
            label,
            n_feat,
            n_ans_feat: 1 + v1,
        }
    }
}

/// Linear-softmax policy: `logits = Wᵀ φ(state)` with sparse features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSoftmaxPolicy {
    vocab: Vocab,
    spec: FeatureSpec,
    layout: Layout,
    params: Vec<f64>,
}

/// Full-batch maximum-likelihood fitting settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            learning_rate: 2.0,
            l2: 1e-4,
        }
    }
}

impl LinearSoftmaxPolicy {
    pub fn zeros(vocab: Vocab, spec: FeatureSpec) -> Self {
        let layout = Layout::new(&vocab, &spec);
        let n = layout.n_feat * vocab.thought_tokens().len() + layout.n_ans_feat * vocab.num_answers();
        Self {
            params: vec![0.0; n],
            vocab,
            spec,
            layout,
        }
    }

    pub fn random(vocab: Vocab, spec: FeatureSpec, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(vocab, spec);
        let mut r = rng::stream(seed, &[rng::label("linear-init")]);
        for w in &mut p.params {
            *w = scale * (2.0 * r.gen::<f64>() - 1.0);
        }
        p
    }

    pub fn from_params(vocab: Vocab, spec: FeatureSpec, params: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(vocab, spec);
        if params.len() != p.params.len() {
            return Err(FlowError::Checkpoint(format!(
                "expected {} weights, found {}",
                p.params.len(),
                params.len()
            )));
        }
        p.params = params;
        Ok(p)
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn n_thought(&self) -> usize {
        self.vocab.thought_tokens().len()
    }

    fn answer_offset(&self) -> usize {
        self.layout.n_feat * self.n_thought()
    }

    fn token_index(&self, t: u64) -> usize {
        if t == BOS || t == NO_LABEL {
            self.layout.v1 - 1
        } else {
            t as usize
        }
    }

    /// Active thought features as (index, value) pairs.
    pub fn features(&self, state: &State) -> Vec<(usize, f64)> {
        let l = &self.layout;
        let mut f: Vec<(usize, f64)> = vec![(0, 1.0)];
        for t in state.window(self.spec.order) {
            let idx = l.bag + self.token_index(t);
            match f.iter_mut().find(|(i, _)| *i == idx) {
                Some(e) => e.1 += 1.0,
                None => f.push((idx, 1.0)),
            }
        }
        if !self.spec.step_buckets.is_empty() {
            let step = state.step_index();
            let b = self.spec.step_buckets.iter().filter(|&&x| x <= step).count();
            f.push((l.steps + b, 1.0));
        }
        if self.spec.cursor {
            let last = self.last_content(state);
            let pos = state.content_count(&self.vocab) + self.spec.cursor_offset;
            let q = state.query.get(pos).copied().unwrap_or(l.v1 - 1);
            f.push((l.cursor + last * l.v1 + q, 1.0));
        }
        if self.spec.use_label {
            let lab = state.label.map_or(l.v1 - 1, |x| x);
            f.push((l.label + lab, 1.0));
        }
        f
    }

    fn answer_features(&self, state: &State) -> [usize; 2] {
        [0, 1 + self.last_content(state)]
    }

    /// Last content token written, or the first query token before any.
    fn last_content(&self, state: &State) -> usize {
        match state.content_window(&self.vocab, 1)[0] {
            BOS => state.query.first().map_or(self.layout.v1 - 1, |&t| t),
            t => self.token_index(t),
        }
    }

    fn thought_logits(&self, feats: &[(usize, f64)]) -> Vec<f64> {
        let nt = self.n_thought();
        let mut z = vec![0.0; nt];
        for &(i, v) in feats {
            let row = &self.params[i * nt..(i + 1) * nt];
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += v * w;
            }
        }
        z
    }

    fn answer_logits(&self, state: &State) -> Vec<f64> {
        let na = self.vocab.num_answers();
        let off = self.answer_offset();
        let mut z = vec![0.0; na];
        for i in self.answer_features(state) {
            let row = &self.params[off + i * na..off + (i + 1) * na];
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += w;
            }
        }
        z
    }

    /// Log-probabilities indexed by thought column.
    fn column_logprobs(&self, state: &State) -> (Vec<(usize, f64)>, Vec<f64>) {
        let feats = self.features(state);
        let mut z = self.thought_logits(&feats);
        log_softmax_in_place(&mut z);
        (feats, z)
    }

    /// Maximum-likelihood fit on a corpus by full-batch gradient ascent on the
    /// mean log-likelihood with an L2 penalty. Transitions are grouped by
    /// feature signature first, so the cost scales with distinct contexts.
    pub fn fit_mle(&mut self, corpus: &[Trajectory], config: &LinearFitConfig) -> Result<()> {
        if corpus.is_empty() {
            return Err(FlowError::EmptyCorpus);
        }
        let nt = self.n_thought();
        let na = self.vocab.num_answers();
        let mut thought: HashMap<Vec<(usize, u64)>, (Vec<(usize, f64)>, Vec<f64>)> = HashMap::new();
        let mut answers: HashMap<[usize; 2], Vec<f64>> = HashMap::new();
        let mut total = 0.0;
        for traj in corpus {
            let mut s = State {
                query: traj.state.query.clone(),
                label: traj.state.label,
                thought: Vec::new(),
            };
            for &t in &traj.state.thought {
                let col = self
                    .vocab
                    .thought_column(t)
                    .ok_or_else(|| self.vocab.wrong_role(t, "thought"))?;
                let feats = self.features(&s);
                let sig = feats.iter().map(|&(i, v)| (i, v.to_bits())).collect();
                thought.entry(sig).or_insert_with(|| (feats, vec![0.0; nt])).1[col] += 1.0;
                s.thought.push(t);
                total += 1.0;
            }
            let a = self.vocab.answer_index(traj.answer)?;
            answers
                .entry(self.answer_features(&s))
                .or_insert_with(|| vec![0.0; na])[a] += 1.0;
            total += 1.0;
        }
        let mut groups: Vec<_> = thought.into_values().collect();
        groups.sort_by(|a, b| {
            let ka: Vec<_> = a.0.iter().map(|x| x.0).collect();
            let kb: Vec<_> = b.0.iter().map(|x| x.0).collect();
            ka.cmp(&kb)
        });
        let mut agroups: Vec<_> = answers.into_iter().collect();
        agroups.sort_by_key(|a| a.0);

        let off = self.answer_offset();
        let mut grad = vec![0.0; self.params.len()];
        for _ in 0..config.iterations {
            grad.iter_mut().zip(&self.params).for_each(|(g, w)| *g = -config.l2 * w);
            for (feats, counts) in &groups {
                let n: f64 = counts.iter().sum();
                let mut z = self.thought_logits(feats);
                log_softmax_in_place(&mut z);
                for &(i, v) in feats {
                    for c in 0..nt {
                        grad[i * nt + c] += v * (counts[c] - n * z[c].exp()) / total;
                    }
                }
            }
            for (fs, counts) in &agroups {
                let n: f64 = counts.iter().sum();
                let mut z = vec![0.0; na];
                for &i in fs {
                    for j in 0..na {
                        z[j] += self.params[off + i * na + j];
                    }
                }
                log_softmax_in_place(&mut z);
                for &i in fs {
                    for j in 0..na {
                        grad[off + i * na + j] += (counts[j] - n * z[j].exp()) / total;
                    }
                }
            }
            for (w, g) in self.params.iter_mut().zip(&grad) {
                *w += config.learning_rate * g;
            }
        }
        Ok(())
    }
}

impl CondSeqModel for LinearSoftmaxPolicy {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_token_logprobs(&self, state: &State) -> Result<Vec<f64>> {
        let (_, cols) = self.column_logprobs(state);
        let mut out = vec![f64::NEG_INFINITY; self.vocab.len()];
        for (c, &t) in self.vocab.thought_tokens().iter().enumerate() {
            out[t] = cols[c];
        }
        Ok(out)
    }

    fn answer_logprobs(&self, state: &State) -> Result<Vec<f64>> {
        let mut z = self.answer_logits(state);
        log_softmax_in_place(&mut z);
        Ok(z)
    }

    fn context_key(&self, state: &State) -> ContextKey {
        let mut key: Vec<u64> = state.query.iter().map(|&t| t as u64).collect();
        key.push(state.label.map_or(NO_LABEL, |l| l as u64));
        key.extend(state.window(self.spec.order));
        key.extend(state.content_window(&self.vocab, 1));
        key.push(state.content_count(&self.vocab) as u64);
        key
    }
}

impl Differentiable for LinearSoftmaxPolicy {
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
        let (feats, lp) = self.column_logprobs(state);
        let nt = self.n_thought();
        for &(i, v) in &feats {
            for (c, l) in lp.iter().enumerate() {
                let ind = if c == col { 1.0 } else { 0.0 };
                out[i * nt + c] += scale * v * (ind - l.exp());
            }
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
        let lp = self.answer_logprobs(state)?;
        let na = self.vocab.num_answers();
        let off = self.answer_offset();
        for i in self.answer_features(state) {
            for (j, l) in lp.iter().enumerate() {
                let ind = if j == a { 1.0 } else { 0.0 };
                out[off + i * na + j] += scale * (ind - l.exp());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{normalization_error, Role::*};
    use crate::numeric::max_relative_error;
    use rand::seq::SliceRandom;

    fn vocab() -> Vocab {
        Vocab::new(vec![
            Content, Content, Content, Filler, EndOfThought, Answer, Answer, Answer, Placeholder,
        ])
        .unwrap()
    }

    fn spec() -> FeatureSpec {
        FeatureSpec {
            order: 2,
            step_buckets: vec![2, 4],
            cursor: true,
            cursor_offset: 1,
            use_label: true,
        }
    }

    fn random_state(r: &mut crate::rng::Rng, v: &Vocab) -> State {
        let thought_pool = [0, 1, 2, 3];
        let n = r.gen_range(0..6);
        let s = State {
            query: (0..3).map(|_| r.gen_range(0..3)).collect(),
            label: if r.gen_bool(0.5) { Some(r.gen_range(5..9)) } else { None },
            thought: (0..n).map(|_| *thought_pool.choose(r).unwrap()).collect(),
        };
        s.validate(v).unwrap();
        s
    }

    #[test]
    fn outputs_are_normalized_and_deterministic() {
        let v = vocab();
        let p = LinearSoftmaxPolicy::random(v.clone(), spec(), 5, 1.0);
        let mut r = crate::rng::stream(1, &[]);
        for _ in 0..50 {
            let s = random_state(&mut r, &v);
            let a = p.next_token_logprobs(&s).unwrap();
            assert!(normalization_error(&a) < 1e-9);
            assert_eq!(a, p.next_token_logprobs(&s).unwrap());
            assert!(normalization_error(&p.answer_logprobs(&s).unwrap()) < 1e-9);
        }
    }

    /// Analytic gradients against central differences on random (state, token) pairs.
    #[test]
    fn gradients_match_central_differences() {
        let v = vocab();
        let p = LinearSoftmaxPolicy::random(v.clone(), spec(), 9, 0.7);
        let mut r = crate::rng::stream(2, &[]);
        let h = 1e-5;
        for _ in 0..100 {
            let s = random_state(&mut r, &v);
            let tok = *[0, 1, 2, 3, 4].choose(&mut r).unwrap();
            let mut g = vec![0.0; p.num_params()];
            p.accumulate_token_grad(&s, tok, 1.0, &mut g).unwrap();
            let touched: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
            let mut fd = vec![0.0; touched.len()];
            for (k, &i) in touched.iter().enumerate() {
                let mut up = p.clone();
                up.params[i] += h;
                let mut dn = p.clone();
                dn.params[i] -= h;
                fd[k] = (up.next_token_logprobs(&s).unwrap()[tok] - dn.next_token_logprobs(&s).unwrap()[tok])
                    / (2.0 * h);
            }
            let an: Vec<f64> = touched.iter().map(|&i| g[i]).collect();
            assert!(max_relative_error(&an, &fd, 1e-6) < 1e-4);
        }
        let s = random_state(&mut r, &v);
        let mut g = vec![0.0; p.num_params()];
        p.accumulate_answer_grad(&s, 6, 1.0, &mut g).unwrap();
        for i in (0..g.len()).filter(|&i| g[i] != 0.0) {
            let mut up = p.clone();
            up.params[i] += h;
            let mut dn = p.clone();
            dn.params[i] -= h;
            let fd = (up.answer_logprobs(&s).unwrap()[1] - dn.answer_logprobs(&s).unwrap()[1]) / (2.0 * h);
            assert!((fd - g[i]).abs() / fd.abs().max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn mle_fit_learns_deterministic_cursor_rule() {
        let v = vocab();
        let spec = FeatureSpec {
            order: 1,
            step_buckets: vec![],
            cursor: true,
            cursor_offset: 0,
            use_label: false,
        };
        // Copy the query, then stop; answer is the last copied token.
        let mut corpus = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                corpus.push(Trajectory {
                    state: State {
                        query: vec![a, b],
                        label: None,
                        thought: vec![a, b, 4],
                    },
                    answer: 5 + b,
                    log_probs: vec![-1.0; 3],
                    terminated: true,
                });
            }
        }
        let mut p = LinearSoftmaxPolicy::zeros(v, spec);
        p.fit_mle(&corpus, &LinearFitConfig::default()).unwrap();
        let s = State {
            query: vec![2, 1],
            label: None,
            thought: vec![2],
        };
        let lp = p.next_token_logprobs(&s).unwrap();
        assert_eq!(crate::numeric::argmax(&lp), Some(1));
        assert!(lp[1] > 0.5f64.ln());
    }
}
