//! Metrics: pass@k, arm comparisons with correctness transitions, and
//! reasoning-budget sweeps. Length always counts thought tokens only.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::collections::HashSet;
use std::fmt;

use crate::decode::{rollout_batch, DecodeConfig, Rollout};
use crate::error::{FlowError, Result};
use crate::lm::CondSeqModel;
use crate::tasks::TaskInstance;

fn check_pass_args(n: usize, c: usize, k: usize) -> Result<()> {
    if k > n {
        return Err(FlowError::KExceedsN { k, n });
    }
    if k == 0 || c > n {
        return Err(FlowError::InvalidConfig(format!(
            "pass@k needs 1 <= k and c <= n, got n={n} c={c} k={k}"
        )));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    // Each partial product is itself a binomial coefficient, so the division is exact.
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// `1 − C(n−c,k)/C(n,k)` as an exact fraction `(numerator, denominator)`; `n <= 64`.
pub fn pass_at_k_exact(n: usize, c: usize, k: usize) -> Result<(u128, u128)> {
    check_pass_args(n, c, k)?;
    if n > 64 {
        return Err(FlowError::InvalidConfig(format!("exact pass@k supports n <= 64, got {n}")));
    }
    let total = binomial(n, k);
    Ok((total - binomial(n - c, k), total))
}

pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    check_pass_args(n, c, k)?;
    if n <= 64 {
        let (num, den) = pass_at_k_exact(n, c, k)?;
        return Ok(num as f64 / den as f64);
    }
    if n - c < k {
        return Ok(1.0);
    }
    let ln_choose = |a: usize, b: usize| ln_gamma(a as f64 + 1.0) - ln_gamma(b as f64 + 1.0) - ln_gamma((a - b) as f64 + 1.0);
    Ok(1.0 - (ln_choose(n - c, k) - ln_choose(n, k)).exp())
}

/// Counts the size-`k` subsets of `n` samples (the first `c` correct) that
/// contain a correct one: `(hits, subsets)`. Exponential; for checking.
pub fn pass_at_k_brute_force(n: usize, c: usize, k: usize) -> Result<(u128, u128)> {
    check_pass_args(n, c, k)?;
    if n > 20 {
        return Err(FlowError::InvalidConfig(format!("brute force supports n <= 20, got {n}")));
    }
    let correct_mask: u32 = (1u32 << c) - 1;
    let (mut hits, mut total) = (0u128, 0u128);
    for subset in 0u32..(1u32 << n) {
        if subset.count_ones() as usize == k {
            total += 1;
            if subset & correct_mask != 0 {
                hits += 1;
            }
        }
    }
    Ok((hits, total))
}

/// A named decoding configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub config: DecodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub instances: usize,
    pub pass1: f64,
    pub mean_length: f64,
    pub median_length: f64,
    pub truncated: usize,
}

impl ArmSummary {
    pub const CSV_HEADER: &'static str = "arm,instances,pass1,mean_length,median_length,truncated";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.name, self.instances, self.pass1, self.mean_length, self.median_length, self.truncated
        )
    }
}

pub fn summarize(name: &str, rollouts: &[Rollout]) -> ArmSummary {
    let n = rollouts.len();
    let mut lens: Vec<usize> = rollouts.iter().map(|r| r.len()).collect();
    lens.sort_unstable();
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => lens[n / 2] as f64,
        _ => (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0,
    };
    ArmSummary {
        name: name.to_string(),
        instances: n,
        pass1: rollouts.iter().filter(|r| r.correct).count() as f64 / n.max(1) as f64,
        mean_length: lens.iter().sum::<usize>() as f64 / n.max(1) as f64,
        median_length: median,
        truncated: rollouts.iter().filter(|r| !r.trajectory.terminated).count(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transition {
    #[serde(rename = "W->C")]
    WrongToCorrect,
    #[serde(rename = "C->W")]
    CorrectToWrong,
    #[serde(rename = "C->C")]
    CorrectToCorrect,
    #[serde(rename = "W->W")]
    WrongToWrong,
}

impl Transition {
    pub fn classify(baseline: bool, flow: bool) -> Self {
        match (baseline, flow) {
            (false, true) => Transition::WrongToCorrect,
            (true, false) => Transition::CorrectToWrong,
            (true, true) => Transition::CorrectToCorrect,
            (false, false) => Transition::WrongToWrong,
        }
    }

    pub fn is_diagonal(self) -> bool {
        matches!(self, Transition::CorrectToCorrect | Transition::WrongToWrong)
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transition::WrongToCorrect => "W->C",
            Transition::CorrectToWrong => "C->W",
            Transition::CorrectToCorrect => "C->C",
            Transition::WrongToWrong => "W->W",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub id: String,
    pub baseline_correct: bool,
    pub flow_correct: bool,
    pub transition: Transition,
    /// `1 − len_flow / len_baseline`.
    pub compression: f64,
    /// Mean velocity along the flow trajectory, when it was profiled.
    pub mean_pfp: Option<f64>,
}

/// Pairs two rollout sets by instance id.
pub fn transitions(baseline: &[Rollout], flow: &[Rollout]) -> Result<Vec<TransitionRecord>> {
    let ids = |rs: &[Rollout]| rs.iter().map(|r| r.instance_id.clone()).collect::<Vec<_>>();
    if ids(baseline) != ids(flow) {
        return Err(FlowError::MismatchedInstances(format!(
            "{} baseline rollouts vs {} flow rollouts with differing ids",
            baseline.len(),
            flow.len()
        )));
    }
    Ok(baseline
        .iter()
        .zip(flow)
        .map(|(b, f)| TransitionRecord {
            id: b.instance_id.clone(),
            baseline_correct: b.correct,
            flow_correct: f.correct,
            transition: Transition::classify(b.correct, f.correct),
            compression: if b.is_empty() && f.is_empty() {
                0.0
            } else {
                1.0 - f.len() as f64 / b.len() as f64
            },
            mean_pfp: f.profile.as_ref().map(|p| p.mean),
        })
        .collect())
}

pub struct Comparison {
    pub summaries: Vec<ArmSummary>,
    pub rollouts: Vec<Vec<Rollout>>,
    /// Records for the first and last arm (baseline, flow).
    pub transitions: Vec<TransitionRecord>,
}

/// Runs every arm on the same instances with coupled seeds.
pub fn compare_arms(
    prior: &dyn CondSeqModel,
    posterior: Option<&dyn CondSeqModel>,
    instances: &[TaskInstance],
    arms: &[Arm],
) -> Result<Comparison> {
    if arms.len() < 2 {
        return Err(FlowError::InvalidConfig(format!("need at least 2 arms, got {}", arms.len())));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = instances.iter().find(|i| !seen.insert(&i.id)) {
        return Err(FlowError::MismatchedInstances(format!("duplicate instance id {}", dup.id)));
    }
    let rollouts = arms
        .iter()
        .map(|a| rollout_batch(prior, posterior, instances, &a.config))
        .collect::<Result<Vec<_>>>()?;
    let summaries = arms.iter().zip(&rollouts).map(|(a, r)| summarize(&a.name, r)).collect();
    let transitions = transitions(&rollouts[0], &rollouts[rollouts.len() - 1])?;
    Ok(Comparison {
        summaries,
        rollouts,
        transitions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arm: String,
    pub budget: usize,
    pub pass1: f64,
    pub mean_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub arm: String,
    /// Least-squares slope of mean length against budget.
    pub slope: f64,
    /// `|len(B_top) − len(B_prev)| / len(B_prev)` over the two largest budgets.
    pub top_relative_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub saturation: Vec<Saturation>,
}

impl SweepTable {
    pub fn lengths(&self, arm: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.arm == arm).map(|r| r.mean_length).collect()
    }
}

/// Each arm at each horizon in `budgets` (strictly increasing).
pub fn budget_sweep(
    prior: &dyn CondSeqModel,
    posterior: Option<&dyn CondSeqModel>,
    instances: &[TaskInstance],
    budgets: &[usize],
    arms: &[Arm],
) -> Result<SweepTable> {
    if budgets.is_empty() || budgets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FlowError::InvalidConfig(format!(
            "budgets must be non-empty and strictly increasing, got {budgets:?}"
        )));
    }
    let mut rows = Vec::new();
    let mut saturation = Vec::new();
    for arm in arms {
        let mut lens = Vec::with_capacity(budgets.len());
        for &b in budgets {
            let cfg = DecodeConfig {
                horizon: b,
                ..arm.config.clone()
            };
            let s = summarize(&arm.name, &rollout_batch(prior, posterior, instances, &cfg)?);
            lens.push(s.mean_length);
            rows.push(SweepRow {
                arm: arm.name.clone(),
                budget: b,
                pass1: s.pass1,
                mean_length: s.mean_length,
            });
        }
        let xs: Vec<f64> = budgets.iter().map(|&b| b as f64).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = lens.iter().sum::<f64>() / lens.len() as f64;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&lens).map(|(x, y)| (x - mx) * (y - my)).sum();
        let n = lens.len();
        saturation.push(Saturation {
            arm: arm.name.clone(),
            slope: if sxx > 0.0 { sxy / sxx } else { 0.0 },
            top_relative_change: if n >= 2 {
                (lens[n - 1] - lens[n - 2]).abs() / lens[n - 2]
            } else {
                0.0
            },
        });
    }
    Ok(SweepTable { rows, saturation })
}
