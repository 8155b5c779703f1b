//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL ...` line.

use std::sync::OnceLock;
use std::time::Instant;

use flowcot::decode::{rollout_batch, DecodeConfig, Strategy};
use flowcot::eval::{budget_sweep, compare_arms, summarize, Arm, Transition};
use flowcot::flow::{posterior_quality, profile, PosteriorMode, PosteriorView};
use flowcot::lm::CondSeqModel;
use flowcot::oracle::EnumerationBudget;
use flowcot::reference::{DecodeAssets, DecodeSetup, RlSetup};
use flowcot::rl::{train, GateKind, RewardMode, TrainConfig, TrainReport};
use flowcot::tasks::{generate, synthesize_corpus};
use flowcot::verify::{run_identity_suite, VerifyReport};

fn report(n: usize, passed: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "criterion {n} failed: {detail}");
}

fn identity() -> &'static (VerifyReport, f64) {
    static CELL: OnceLock<(VerifyReport, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let r = run_identity_suite().expect("identity suite runs");
        (r, t.elapsed().as_secs_f64())
    })
}

fn identity_criterion(n: usize, names: &[&str]) {
    let (rep, secs) = identity();
    let checks: Vec<_> = rep.checks.iter().filter(|c| names.contains(&c.name.as_str())).collect();
    assert_eq!(checks.len(), names.len(), "missing identity checks {names:?}");
    let passed = checks.iter().all(|c| c.passed) && *secs < 60.0;
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.2e} <= {:.0e}", c.name, c.measured, c.tolerance))
        .collect::<Vec<_>>()
        .join("; ");
    report(n, passed, format!("{detail} (suite {secs:.1}s)"));
}

#[test]
fn c01_expected_velocity_is_neg_kl() {
    identity_criterion(1, &["expected_velocity_is_neg_kl"]);
}

#[test]
fn c02_velocity_sign_bounds() {
    identity_criterion(2, &["velocity_sign_bounds"]);
}

#[test]
fn c03_ratio_equals_difficulty_drop() {
    identity_criterion(3, &["ratio_equals_difficulty_drop"]);
}

#[test]
fn c04_telescoping() {
    identity_criterion(4, &["telescoping"]);
}

#[test]
fn c05_total_probability() {
    identity_criterion(5, &["total_probability"]);
}

#[test]
fn c06_gradient_decomposition() {
    identity_criterion(6, &["gradient_vs_finite_diff", "direct_vs_decomposed"]);
}

#[test]
fn c07_stop_gradient() {
    identity_criterion(7, &["stop_gradient_contract"]);
}

#[test]
fn c08_estimator_consistency() {
    identity_criterion(8, &["estimator_consistency"]);
}

#[test]
fn c09_pass_at_k() {
    identity_criterion(9, &["pass_at_k_brute_force"]);
}

fn decode_assets() -> &'static DecodeAssets {
    static CELL: OnceLock<DecodeAssets> = OnceLock::new();
    CELL.get_or_init(|| DecodeSetup::default().build().expect("reference decode setup"))
}

fn arm(name: &str, strategy: Strategy, mode: PosteriorMode) -> Arm {
    Arm {
        name: name.into(),
        config: DecodeConfig {
            strategy,
            posterior_mode: mode,
            ..DecodeConfig::default()
        },
    }
}

#[test]
fn c10_flow_decoding_compresses() {
    let a = decode_assets();
    let arms = [
        arm("standard_greedy", Strategy::StandardGreedy, PosteriorMode::ExactBayes),
        Arm {
            config: DecodeConfig {
                profile: true,
                ..arm("", Strategy::FlowGreedy, PosteriorMode::ExactBayes).config
            },
            name: "flow_greedy".into(),
        },
    ];
    let cmp = compare_arms(&a.prior, Some(&a.posterior), &a.eval, &arms).unwrap();
    let (base, flow) = (&cmp.summaries[0], &cmp.summaries[1]);
    let count = |t: Transition| cmp.transitions.iter().filter(|r| r.transition == t).count();
    let pfp = |t: Transition| {
        let v: Vec<f64> = cmp
            .transitions
            .iter()
            .filter(|r| r.transition == t)
            .filter_map(|r| r.mean_pfp)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    println!(
        "  transitions W->C {} C->W {} C->C {} W->W {}; mean PFP W->C {:.3} W->W {:.3}",
        count(Transition::WrongToCorrect),
        count(Transition::CorrectToWrong),
        count(Transition::CorrectToCorrect),
        count(Transition::WrongToWrong),
        pfp(Transition::WrongToCorrect),
        pfp(Transition::WrongToWrong)
    );
    let passed = flow.mean_length <= 0.85 * base.mean_length && flow.pass1 >= base.pass1 - 0.01;
    report(
        10,
        passed,
        format!(
            "flow length {:.3} vs 0.85 x standard {:.3}; pass@1 flow {:.3} standard {:.3} over {} instances",
            flow.mean_length,
            0.85 * base.mean_length,
            flow.pass1,
            base.pass1,
            base.instances
        ),
    );
}

#[test]
fn c11_budget_saturation() {
    let a = decode_assets();
    let budgets = [4, 8, 16, 24];
    let arms = [
        arm("standard_greedy", Strategy::StandardGreedy, PosteriorMode::ExactBayes),
        arm("flow_greedy", Strategy::FlowGreedy, PosteriorMode::ExactBayes),
    ];
    let table = budget_sweep(&a.prior, None, &a.eval, &budgets, &arms).unwrap();
    let base = table.lengths("standard_greedy");
    let flow = table.lengths("flow_greedy");
    let n = budgets.len();
    let flow_change = (flow[n - 1] - flow[n - 2]).abs() / flow[n - 2];
    let base_grows = base.windows(2).all(|w| w[1] > w[0]);
    report(
        11,
        flow_change <= 0.10 && base_grows,
        format!("budgets {budgets:?}: flow lengths {flow:.2?} (top change {flow_change:.3} <= 0.10); standard lengths {base:.2?} strictly increasing: {base_grows}"),
    );
}

#[test]
fn c12_posterior_quality_ordering() {
    let a = decode_assets();
    let modes = [PosteriorMode::GoldLabel, PosteriorMode::LatentLabel, PosteriorMode::RandomLabel];
    let mut acc = Vec::new();
    let mut kl = Vec::new();
    for mode in modes {
        let cfg = DecodeConfig {
            strategy: Strategy::FlowGreedy,
            posterior_mode: mode,
            ..DecodeConfig::default()
        };
        let rs = rollout_batch(&a.prior, Some(&a.posterior), &a.eval, &cfg).unwrap();
        acc.push(summarize(&mode.to_string(), &rs).pass1);
        kl.push(
            posterior_quality(
                &a.prior,
                Some(&a.posterior),
                mode,
                &a.eval,
                500,
                EnumerationBudget::with_horizon(cfg.horizon),
                3,
            )
            .unwrap(),
        );
    }
    let acc_order = acc[0] >= acc[1] && acc[1] >= acc[2];
    let kl_order = kl[0] <= kl[1] && kl[1] <= kl[2];
    let close = acc[0] - acc[1] <= 0.02;
    report(
        12,
        acc_order && kl_order && close,
        format!(
            "pass@1 gold {:.3} latent {:.3} random {:.3} (ordered: {acc_order}); divergence gold {:.4} latent {:.4} random {:.4} (ordered: {kl_order}); latent within 0.02 of gold: {close}",
            acc[0], acc[1], acc[2], kl[0], kl[1], kl[2]
        ),
    );
}

struct RlRuns {
    runs: Vec<(&'static str, TrainReport)>,
}

fn rl_runs() -> &'static RlRuns {
    static CELL: OnceLock<RlRuns> = OnceLock::new();
    CELL.get_or_init(|| {
        let setup = RlSetup::default();
        let assets = setup.build().expect("reference RL setup");
        let variants: [(&'static str, RewardMode, GateKind); 5] = [
            ("outcome_sparse", RewardMode::OutcomeSparse, GateKind::ReluRelative),
            ("relu", RewardMode::FlowDense, GateKind::ReluRelative),
            ("binary", RewardMode::FlowDense, GateKind::BinaryRelative),
            ("ratio", RewardMode::FlowDense, GateKind::Ratio),
            ("absolute", RewardMode::FlowDense, GateKind::Absolute),
        ];
        let runs = variants
            .into_iter()
            .map(|(name, mode, gate)| {
                let cfg = TrainConfig {
                    reward_mode: mode,
                    gate,
                    ..setup.train.clone()
                };
                let mut p = assets.policy.clone();
                (name, train(&mut p, &assets.train, &assets.heldout, &cfg).expect("training runs"))
            })
            .collect();
        RlRuns { runs }
    })
}

fn final_of(name: &str) -> (f64, f64, bool) {
    let (_, rep) = rl_runs().runs.iter().find(|(n, _)| *n == name).unwrap();
    match rep.last_evaluated() {
        Some(r) => (r.pass1, r.length_mean, rep.divergence.is_some()),
        None => (f64::NAN, f64::NAN, rep.divergence.is_some()),
    }
}

#[test]
fn c13_rl_pareto() {
    let (p_flow, l_flow, _) = final_of("relu");
    let (p_out, l_out, _) = final_of("outcome_sparse");
    report(
        13,
        p_flow >= p_out && l_flow <= l_out,
        format!("flow_dense+relu pass@1 {p_flow:.3} length {l_flow:.2}; outcome_sparse pass@1 {p_out:.3} length {l_out:.2}"),
    );
}

#[test]
fn c14_gate_ablation() {
    let (relu, _, _) = final_of("relu");
    let (binary, _, _) = final_of("binary");
    let (ratio, _, ratio_div) = final_of("ratio");
    let (absolute, _, _) = final_of("absolute");
    let ratio_ok = ratio_div || relu - ratio >= 0.05;
    let abs_ok = relu - absolute >= 0.05;
    report(
        14,
        relu >= binary && ratio_ok && abs_ok,
        format!(
            "pass@1 relu {relu:.3} binary {binary:.3} (relu >= binary: {}); ratio {ratio:.3} diverged {ratio_div} (ok: {ratio_ok}); absolute {absolute:.3} (>= 0.05 below relu: {abs_ok})",
            relu >= binary
        ),
    );
}

#[test]
fn c15_content_outpaces_filler() {
    let a = decode_assets();
    let setup = DecodeSetup::default();
    let (tv, inst) = generate(&setup.task, 1000).unwrap();
    let corpus = synthesize_corpus(&tv, &inst, setup.filler_rate, 2024).unwrap();
    let horizon = corpus.iter().map(|t| t.len()).max().unwrap();
    let (mut content, mut filler) = (Vec::new(), Vec::new());
    let prior: &dyn CondSeqModel = &a.prior;
    for t in &corpus {
        let view = PosteriorView::exact(prior, t.answer, EnumerationBudget::with_horizon(horizon)).unwrap();
        let p = profile(prior, &view, t).unwrap();
        for (v, r) in p.velocities.iter().zip(&p.roles) {
            match r {
                flowcot::lm::Role::Content => content.push(*v),
                flowcot::lm::Role::Filler => filler.push(*v),
                _ => {}
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (c, f) = (mean(&content), mean(&filler));
    report(
        15,
        c > f,
        format!(
            "mean velocity content {c:.4} ({} tokens) vs filler {f:.4} ({} tokens) over {} trajectories, horizon {horizon}",
            content.len(),
            filler.len(),
            corpus.len()
        ),
    );
}
