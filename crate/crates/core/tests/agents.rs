mod common;

use std::collections::BTreeMap;

use autocomplete_core::agents::{
    collect_offline, fitted_q_train, q_learning_train, CollectConfig, EnvFactory, FeatureConfig, FittedConfig,
    OfflineDataset, PolicySpec, QTable, TrainConfig,
};
use autocomplete_core::exec::Execution;
use autocomplete_core::mdp::{run_episode, AgentAction, EnvConfig};
use common::{desk, records};

fn suggest_share(d: &OfflineDataset) -> f64 {
    let with_candidate: Vec<_> = d.transitions.iter().filter(|t| !t.state.suggest.is_empty()).collect();
    with_candidate.iter().filter(|t| t.action != AgentAction::Wait).count() as f64 / with_candidate.len() as f64
}

#[test]
fn transitions_partition_into_complete_trajectories() {
    let desk = desk();
    let env = EnvConfig::default();
    let factory = EnvFactory::new(&desk.lm, &env, &desk.train).unwrap();
    let cfg = CollectConfig { trajectories: 300, ..Default::default() };
    let data = collect_offline(&PolicySpec::Threshold(0.3), &factory, &cfg, Execution::Parallel).unwrap();
    let mut per: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for t in &data.transitions {
        per.entry(t.trajectory).or_default().push(t.done);
    }
    assert_eq!(per.len(), 300);
    for dones in per.values() {
        assert_eq!(dones.iter().filter(|d| **d).count(), 1);
        assert!(*dones.last().unwrap());
    }
    assert_eq!(per.values().map(Vec::len).sum::<usize>(), data.transitions.len());
}

#[test]
fn zero_exploration_reproduces_the_base_policy() {
    let desk = desk();
    let env = EnvConfig::default();
    let target = &desk.eval[3..4];
    let factory = EnvFactory::new(&desk.lm, &env, target).unwrap();
    let cfg = CollectConfig { exploration_rate: 0.0, trajectories: 4, ..Default::default() };
    let data = collect_offline(&PolicySpec::Threshold(0.3), &factory, &cfg, Execution::Sequential).unwrap();
    let mut policy = PolicySpec::Threshold(0.3).build(0, env.acceptance);
    let log = run_episode(policy.as_mut(), &target[0], &desk.lm, &env).unwrap();
    assert_eq!(data.exploration_fraction(), 0.0);
    assert_eq!(data.transitions.len(), 4 * log.horizon);
    for traj in data.transitions.chunks(log.horizon) {
        for (t, s) in traj.iter().zip(&log.steps) {
            assert_eq!(t.action, s.action);
            assert_eq!(t.reward, s.reward);
        }
    }
}

#[test]
fn full_exploration_matches_random_marginals() {
    let desk = desk();
    let env = EnvConfig::default();
    let factory = EnvFactory::new(&desk.lm, &env, &desk.train).unwrap();
    let explore = CollectConfig { exploration_rate: 1.0, trajectories: 2000, ..Default::default() };
    let plain = CollectConfig { exploration_rate: 0.0, seed: 9, ..explore.clone() };
    let a = collect_offline(&PolicySpec::Threshold(0.3), &factory, &explore, Execution::Parallel).unwrap();
    let b = collect_offline(&PolicySpec::Random, &factory, &plain, Execution::Parallel).unwrap();
    assert_eq!(a.exploration_fraction(), 1.0);
    assert!((suggest_share(&a) - 0.5).abs() < 0.02, "{}", suggest_share(&a));
    assert!((suggest_share(&a) - suggest_share(&b)).abs() < 0.03);
    let mean_len = |d: &OfflineDataset| d.transitions.len() as f64 / d.trajectories as f64;
    assert!((mean_len(&a) / mean_len(&b) - 1.0).abs() < 0.05);
}

#[test]
fn exploration_fraction_tracks_the_rate() {
    let desk = desk();
    let env = EnvConfig::default();
    let factory = EnvFactory::new(&desk.lm, &env, &desk.train).unwrap();
    let data = collect_offline(&PolicySpec::Threshold(0.3), &factory, &CollectConfig::default(), Execution::Parallel).unwrap();
    assert!((data.exploration_fraction() - 0.05).abs() < 0.01);
}

#[test]
fn collection_and_fitting_are_deterministic() {
    let desk = desk();
    let env = EnvConfig::default();
    let factory = EnvFactory::new(&desk.lm, &env, &desk.train).unwrap();
    let cfg = CollectConfig { trajectories: 500, ..Default::default() };
    let seq = collect_offline(&PolicySpec::Threshold(0.3), &factory, &cfg, Execution::Sequential).unwrap();
    let par = collect_offline(&PolicySpec::Threshold(0.3), &factory, &cfg, Execution::Parallel).unwrap();
    assert_eq!(seq, par);

    let mut buf = Vec::new();
    seq.write_jsonl(&mut buf).unwrap();
    let back = OfflineDataset::read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, seq);

    let a = fitted_q_train(&seq, &FittedConfig::default()).unwrap();
    let b = fitted_q_train(&back, &FittedConfig::default()).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(QTable::from_json(&a.to_json().unwrap()).unwrap(), a);
}

#[test]
fn online_training_is_seed_deterministic_and_finite() {
    let corpus = records(&["see you soon", "see you at home", "how are you", "call me later"]);
    let lm = autocomplete_core::lm::build_lm(&corpus).unwrap();
    let env = EnvConfig::default();
    let factory = EnvFactory::new(&lm, &env, &corpus).unwrap();
    let cfg = TrainConfig { steps: 5000, log_every: 500, features: FeatureConfig::exact(), ..Default::default() };
    let a = q_learning_train(&factory, &cfg).unwrap();
    let b = q_learning_train(&factory, &cfg).unwrap();
    assert_eq!(a.table, b.table);
    assert!(a.table.is_finite());
    assert!(!a.curve.is_empty());
    assert!(q_learning_train(&factory, &TrainConfig { gamma: 1.5, ..cfg }).is_err());
}
