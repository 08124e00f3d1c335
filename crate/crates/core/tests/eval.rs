mod common;

use std::sync::Arc;

use autocomplete_core::agents::{PolicySpec, TrainConfig};
use autocomplete_core::eval::{
    check_oracle_dominance, evaluate, evaluate_detailed, gamma_comparison, threshold_sweep, AgentKind, EvalConfig,
};
use autocomplete_core::exec::Execution;
use autocomplete_core::mdp::{EnvConfig, RewardParams};
use autocomplete_core::theory::{monte_carlo_return, solve_dp, CandidateRule, PrefixMdp};
use common::desk;

#[test]
fn oracle_is_nonnegative_and_dominant() {
    let desk = desk();
    let cfg = EvalConfig { runs: 2, ..EvalConfig::new(desk.eval.clone(), EnvConfig::default()) };
    let policies = [PolicySpec::Oracle, PolicySpec::Random, PolicySpec::Threshold(0.0), PolicySpec::Threshold(0.5)];
    let evals = evaluate_detailed(&policies, &desk.lm, &cfg).unwrap();
    for run in &evals[0].logs {
        assert!(run.iter().all(|e| e.return_undiscounted >= 0.0));
    }
    check_oracle_dominance(&evals[0], &evals[1..]).unwrap();
}

#[test]
fn threshold_suggestion_rate_is_monotone() {
    let desk = desk();
    let cfg = EvalConfig { runs: 2, ..EvalConfig::new(desk.validation.clone(), EnvConfig::default()) };
    let specs: Vec<_> = (0..=10).map(|i| PolicySpec::Threshold(i as f64 / 10.0)).collect();
    let rows = evaluate(&specs, &desk.lm, &cfg).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].suggestions_made <= w[0].suggestions_made + 1e-12, "{} then {}", w[0].policy, w[1].policy);
    }
    let wait = evaluate(&[PolicySpec::WaitAlways], &desk.lm, &cfg).unwrap().remove(0);
    assert_eq!((wait.mean_return, wait.suggestions_made), (0.0, 0.0));
}

#[test]
fn threshold_beats_random_on_acceptance() {
    let desk = desk();
    let cfg = EvalConfig::new(desk.eval.clone(), EnvConfig::default());
    let rows = evaluate(&[PolicySpec::Random, PolicySpec::Threshold(0.3)], &desk.lm, &cfg).unwrap();
    assert!(rows[0].acceptance_rate <= rows[1].acceptance_rate);
    assert!(rows[0].mean_return <= rows[1].mean_return);
}

#[test]
fn default_preset_prefers_a_positive_threshold() {
    let desk = desk();
    let cfg = EvalConfig::new(desk.validation.clone(), EnvConfig::default());
    let sweep = threshold_sweep(&[0.0, 0.1, 0.2, 0.3, 0.5], RewardParams::default(), &desk.lm, &cfg).unwrap();
    assert!(sweep.best_tau > 0.0, "{sweep:?}");
    assert!(threshold_sweep(&[1.5], RewardParams::default(), &desk.lm, &cfg).is_err());
}

#[test]
fn identical_seeds_give_identical_rows() {
    let desk = desk();
    let cfg = EvalConfig { per_run: Some(20), ..EvalConfig::new(desk.eval.clone(), EnvConfig::default()) };
    let a = evaluate(&[PolicySpec::Random, PolicySpec::Threshold(0.2)], &desk.lm, &cfg).unwrap();
    let b = evaluate(&[PolicySpec::Random, PolicySpec::Threshold(0.2)], &desk.lm, &cfg).unwrap();
    assert_eq!(a, b);
    let other = evaluate(&[PolicySpec::Random], &desk.lm, &EvalConfig { seed_base: 1, ..cfg }).unwrap();
    assert_ne!(a[0], other[0]);
}

#[test]
fn confidence_interval_shrinks_with_runs() {
    let desk = desk();
    let base = EvalConfig { per_run: Some(10), ..EvalConfig::new(desk.eval.clone(), EnvConfig::default()) };
    let ci = |runs| {
        evaluate(&[PolicySpec::Random], &desk.lm, &EvalConfig { runs, ..base.clone() }).unwrap()[0].ci95_return
    };
    let ratio = ci(160) / ci(10);
    // 1/sqrt(16) = 0.25 up to sampling noise in the standard deviation.
    assert!((0.15..0.4).contains(&ratio), "{ratio}");
}

#[test]
fn execution_modes_agree() {
    let desk = desk();
    let cfg = EvalConfig { runs: 3, ..EvalConfig::new(desk.eval.clone(), EnvConfig::default()) };
    let specs = [PolicySpec::Oracle, PolicySpec::Random, PolicySpec::Threshold(0.3)];
    let seq = evaluate(&specs, &desk.lm, &EvalConfig { exec: Execution::Sequential, ..cfg.clone() }).unwrap();
    let par = evaluate(&specs, &desk.lm, &EvalConfig { exec: Execution::Parallel, ..cfg }).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn dp_policy_on_lm_slates() {
    let desk = desk();
    let env = EnvConfig::default();
    let sents: Vec<_> = desk.eval.iter().take(15).cloned().collect();
    let targets = sents.iter().map(|s| (s.text.clone(), 1.0)).collect();
    let mdp = PrefixMdp::new(targets, CandidateRule::Lm { lm: &desk.lm, config: env.lm.clone() }, env.reward, 1.0).unwrap();
    let table = Arc::new(solve_dp(&mdp).unwrap());
    let cfg = EvalConfig::new(sents, env);
    let row = evaluate(&[PolicySpec::Dp(table.clone())], &desk.lm, &cfg).unwrap().remove(0);
    let oracle = evaluate(&[PolicySpec::Oracle], &desk.lm, &cfg).unwrap().remove(0);
    assert!(row.mean_return <= oracle.mean_return + 1e-9);
    assert!(row.mean_return >= 0.0);
    let mc = monte_carlo_return(&mdp, &table, 10_000, 3, Execution::Parallel);
    assert!((mc.mean - table.root_value()).abs() < 3.0 * mc.std_err + 1e-9, "{mc:?} vs {}", table.root_value());
}

#[test]
fn farsighted_dp_is_no_worse_at_high_alpha() {
    let desk = desk();
    let sents: Vec<_> = desk.eval.iter().take(20).cloned().collect();
    let cfg = EvalConfig::new(sents, EnvConfig::default());
    let cmp = gamma_comparison(AgentKind::Dp, &[0.0, 1.0], 0.4, 60.0 / 521.0, &desk.lm, &TrainConfig::default(), &cfg).unwrap();
    assert_eq!(cmp.rows.len(), 2);
    assert!(cmp.difference >= -1e-9, "{cmp:?}");
}
