use proptest::prelude::*;

use flowcot::decode::{DecodeConfig, Strategy};
use flowcot::eval::{budget_sweep, compare_arms, pass_at_k, pass_at_k_brute_force, pass_at_k_exact, Arm, Transition};
use flowcot::flow::PosteriorMode;
use flowcot::reference::{DecodeAssets, DecodeSetup};
use flowcot::tasks::TaskFamilyConfig;

fn assets() -> DecodeAssets {
    DecodeSetup {
        task: TaskFamilyConfig {
            min_ops: 1,
            max_ops: 3,
            ..TaskFamilyConfig::default()
        },
        corpus_size: 5000,
        eval_size: 120,
        ..DecodeSetup::default()
    }
    .build()
    .unwrap()
}

fn arm(name: &str, strategy: Strategy, mode: PosteriorMode) -> Arm {
    Arm {
        name: name.into(),
        config: DecodeConfig {
            strategy,
            posterior_mode: mode,
            profile: true,
            ..DecodeConfig::default()
        },
    }
}

#[test]
fn identical_arms_stay_on_the_diagonal() {
    let a = assets();
    let arms = [
        arm("a", Strategy::StandardGreedy, PosteriorMode::ExactBayes),
        arm("b", Strategy::StandardGreedy, PosteriorMode::ExactBayes),
    ];
    let cmp = compare_arms(&a.prior, None, &a.eval, &arms).unwrap();
    let (x, y) = (&cmp.summaries[0], &cmp.summaries[1]);
    assert_eq!((x.pass1, x.mean_length, x.median_length), (y.pass1, y.mean_length, y.median_length));
    assert!(cmp.transitions.iter().all(|t| t.transition.is_diagonal()));
    assert!(cmp.transitions.iter().all(|t| t.compression == 0.0));
}

#[test]
fn metrics_ignore_instance_order() {
    let a = assets();
    let arms = [
        arm("standard", Strategy::StandardGreedy, PosteriorMode::ExactBayes),
        arm("flow", Strategy::FlowGreedy, PosteriorMode::ExactBayes),
    ];
    let fwd = compare_arms(&a.prior, None, &a.eval, &arms).unwrap();
    let mut rev = a.eval.clone();
    rev.reverse();
    let back = compare_arms(&a.prior, None, &rev, &arms).unwrap();
    assert_eq!(fwd.summaries, back.summaries);
}

#[test]
fn flow_corrects_more_than_it_breaks() {
    let a = assets();
    let arms = [
        arm("standard", Strategy::StandardGreedy, PosteriorMode::ExactBayes),
        arm("flow", Strategy::FlowGreedy, PosteriorMode::ExactBayes),
    ];
    let cmp = compare_arms(&a.prior, None, &a.eval, &arms).unwrap();
    let of = |t: Transition| cmp.transitions.iter().filter(move |r| r.transition == t);
    assert!(of(Transition::WrongToCorrect).count() >= of(Transition::CorrectToWrong).count());
    assert!(cmp.transitions.iter().all(|r| r.compression <= 1.0));

    let mean = |t| {
        let v: Vec<f64> = of(t).filter_map(|r| r.mean_pfp).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    if let (Some(wc), Some(ww)) = (mean(Transition::WrongToCorrect), mean(Transition::WrongToWrong)) {
        assert!(wc > ww, "W->C {wc} W->W {ww}");
    }
}

#[test]
fn budget_sweep_properties() {
    let a = assets();
    let arms = [
        arm("standard", Strategy::StandardGreedy, PosteriorMode::ExactBayes),
        arm("flow", Strategy::FlowGreedy, PosteriorMode::ExactBayes),
    ];
    let budgets = [1, 6, 12];
    let t1 = budget_sweep(&a.prior, None, &a.eval, &budgets, &arms).unwrap();
    let t2 = budget_sweep(&a.prior, None, &a.eval, &budgets, &arms).unwrap();
    assert_eq!(t1, t2);
    let acc = |b: usize| t1.rows.iter().find(|r| r.arm == "standard" && r.budget == b).unwrap().pass1;
    assert!(acc(1) < acc(12), "budget 1 {} vs 12 {}", acc(1), acc(12));
    assert!(budget_sweep(&a.prior, None, &a.eval, &[6, 6], &arms).is_err());
}

#[test]
fn pass_at_k_examples() {
    assert_eq!(pass_at_k(4, 2, 1).unwrap(), 0.5);
    assert_eq!(pass_at_k(4, 2, 4).unwrap(), 1.0);
    assert_eq!(pass_at_k_exact(4, 2, 2).unwrap(), (5, 6));
    assert!(pass_at_k(4, 2, 5).is_err());
}

proptest! {
    #[test]
    fn pass_at_k_is_a_monotone_probability(n in 1usize..40, c_frac in 0.0f64..=1.0) {
        let c = ((n as f64) * c_frac).round() as usize;
        let mut prev = 0.0;
        for k in 1..=n {
            let p = pass_at_k(n, c, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(p >= prev - 1e-15);
            prev = p;
        }
        prop_assert!((pass_at_k(n, c, 1).unwrap() - c as f64 / n as f64).abs() < 1e-12);
        prop_assert_eq!(pass_at_k(n, c, n).unwrap(), if c > 0 { 1.0 } else { 0.0 });
    }

    #[test]
    fn exact_estimator_matches_subset_enumeration(n in 1usize..=8, c in 0usize..=8, k in 1usize..=8) {
        prop_assume!(c <= n && k <= n);
        let (a, b) = pass_at_k_exact(n, c, k).unwrap();
        let (x, y) = pass_at_k_brute_force(n, c, k).unwrap();
        prop_assert_eq!(a * y, x * b);
    }
}
