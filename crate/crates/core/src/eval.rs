//! Experiment harness: multi-run policy evaluation with 95% confidence
//! intervals, threshold sweeps, discount comparisons and the multi-word
//! crowding analysis.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agents::{oracle_act, q_learning_train, EnvFactory, PolicySpec, TrainConfig};
use crate::corpus::SentenceRecord;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lm::{build_lm, Candidate, LanguageModel, LmConfig};
use crate::mdp::{insertion_for, matches_remaining, run_episode, AgentAction, EnvConfig, EnvState, EpisodeLog, RewardParams};
use crate::rng::{derive_seed, seeded};
use crate::theory::{solve_dp, CandidateRule, PrefixMdp};

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub runs: usize,
    pub sentences: Vec<SentenceRecord>,
    /// Sentences drawn (without replacement) per run; `None` uses all of
    /// them in a run-specific order.
    pub per_run: Option<usize>,
    pub env: EnvConfig,
    pub seed_base: u64,
    pub exec: Execution,
}

impl EvalConfig {
    pub fn new(sentences: Vec<SentenceRecord>, env: EnvConfig) -> Self {
        EvalConfig { runs: 5, sentences, per_run: None, env, seed_base: 0, exec: Execution::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(Error::config("empty evaluation sentence set"));
        }
        if self.runs < 2 {
            return Err(Error::config("at least 2 runs are needed for a confidence interval"));
        }
        if self.per_run == Some(0) {
            return Err(Error::config("per_run must be positive"));
        }
        self.env.reward.validate()?;
        self.env.lm.validate()
    }

    fn run_sentences(&self, run: usize) -> Vec<&SentenceRecord> {
        let mut idx: Vec<usize> = (0..self.sentences.len()).collect();
        idx.shuffle(&mut seeded(derive_seed(self.seed_base, run as u64)));
        if let Some(n) = self.per_run {
            idx.truncate(n);
        }
        idx.into_iter().map(|i| &self.sentences[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy: String,
    pub runs: usize,
    pub mean_return: f64,
    pub ci95_return: f64,
    pub mean_chars_saved: f64,
    pub ci95_chars_saved: f64,
    /// Mean suggestions surfaced per episode.
    pub suggestions_made: f64,
    pub acceptance_rate: f64,
}

/// Mean and 1.96 standard errors.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub row: MetricsRow,
    /// `logs[run][episode]`.
    pub logs: Vec<Vec<EpisodeLog>>,
}

fn episode_seed(base: u64, run: usize, episode: usize) -> u64 {
    derive_seed(derive_seed(base, 1 << 32 | run as u64), episode as u64)
}

fn evaluate_one(spec: &PolicySpec, lm: &LanguageModel, config: &EvalConfig) -> Result<PolicyEvaluation> {
    let mut logs = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        let sents = config.run_sentences(run);
        let episodes: Vec<Result<EpisodeLog>> = config.exec.map_range(0..sents.len(), |i| {
            let mut policy = spec.build(episode_seed(config.seed_base, run, i), config.env.acceptance);
            run_episode(policy.as_mut(), sents[i], lm, &config.env)
        });
        logs.push(episodes.into_iter().collect::<Result<Vec<_>>>()?);
    }
    Ok(PolicyEvaluation { row: summarize(&spec.name(), &logs), logs })
}

/// Aggregate stored episode logs into a metrics row.
pub fn summarize(policy: &str, logs: &[Vec<EpisodeLog>]) -> MetricsRow {
    let per_run = |f: &dyn Fn(&EpisodeLog) -> f64| -> Vec<f64> {
        logs.iter().map(|run| run.iter().map(f).sum::<f64>() / run.len().max(1) as f64).collect()
    };
    let (mean_return, ci95_return) = mean_ci95(&per_run(&|e| e.return_undiscounted));
    let (mean_chars_saved, ci95_chars_saved) = mean_ci95(&per_run(&|e| e.chars_saved as f64));
    let episodes: usize = logs.iter().map(Vec::len).sum();
    let shown: usize = logs.iter().flatten().map(EpisodeLog::suggestions).sum();
    let accepted: usize = logs.iter().flatten().map(EpisodeLog::accepted).sum();
    MetricsRow {
        policy: policy.to_owned(),
        runs: logs.len(),
        mean_return,
        ci95_return,
        mean_chars_saved,
        ci95_chars_saved,
        suggestions_made: shown as f64 / episodes.max(1) as f64,
        acceptance_rate: if shown == 0 { 0.0 } else { accepted as f64 / shown as f64 },
    }
}

pub fn evaluate_detailed(
    policies: &[PolicySpec],
    lm: &LanguageModel,
    config: &EvalConfig,
) -> Result<Vec<PolicyEvaluation>> {
    config.validate()?;
    policies.iter().map(|p| evaluate_one(p, lm, config)).collect()
}

pub fn evaluate(policies: &[PolicySpec], lm: &LanguageModel, config: &EvalConfig) -> Result<Vec<MetricsRow>> {
    Ok(evaluate_detailed(policies, lm, config)?.into_iter().map(|e| e.row).collect())
}

/// Per-episode check that the oracle's return is at least every other
/// policy's on the same target. Holds for single-word slates, where the
/// oracle's earliest correct suggestion is the longest available insertion.
pub fn check_oracle_dominance(oracle: &PolicyEvaluation, others: &[PolicyEvaluation]) -> Result<()> {
    for other in others {
        for (ro, rx) in oracle.logs.iter().zip(&other.logs) {
            for (eo, ex) in ro.iter().zip(rx) {
                if eo.target != ex.target {
                    return Err(Error::contract("runs evaluated different sentence orders"));
                }
                if ex.return_undiscounted > eo.return_undiscounted + 1e-9 {
                    return Err(Error::contract(format!(
                        "{} beat the oracle on {:?}: {} > {}",
                        other.row.policy, ex.target.text, ex.return_undiscounted, eo.return_undiscounted
                    )));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub taus: Vec<f64>,
    pub rows: Vec<MetricsRow>,
    pub best_tau: f64,
}

/// Evaluate threshold agents over `taus`; the best τ maximizes mean return,
/// ties to the smaller τ.
pub fn threshold_sweep(
    taus: &[f64],
    reward: RewardParams,
    lm: &LanguageModel,
    config: &EvalConfig,
) -> Result<ThresholdSweep> {
    if taus.is_empty() || taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::config("threshold grid must be a nonempty subset of [0, 1]"));
    }
    let mut cfg = config.clone();
    cfg.env.reward = reward;
    let specs: Vec<PolicySpec> = taus.iter().map(|&t| PolicySpec::Threshold(t)).collect();
    let rows = evaluate(&specs, lm, &cfg)?;
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.mean_return > rows[best].mean_return {
            best = i;
        }
    }
    Ok(ThresholdSweep { taus: taus.to_vec(), best_tau: taus[best], rows })
}

/// 0, 0.1, ..., 0.9.
pub fn default_tau_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Exact backward induction over the evaluation sentences.
    Dp,
    /// Online tabular Q-learning on the evaluation sentences.
    OnlineQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaComparison {
    pub alpha: f64,
    pub rows: Vec<GammaRow>,
    /// Return of the last γ minus the first, with a combined CI.
    pub difference: f64,
    pub difference_ci95: f64,
}

/// Train (or solve) one agent per γ with reward α / β and evaluate each
/// undiscounted on the same sentences.
pub fn gamma_comparison(
    kind: AgentKind,
    gammas: &[f64],
    alpha: f64,
    beta: f64,
    lm: &LanguageModel,
    train: &TrainConfig,
    config: &EvalConfig,
) -> Result<GammaComparison> {
    if gammas.is_empty() {
        return Err(Error::config("no discount factors given"));
    }
    let mut cfg = config.clone();
    cfg.env.reward = RewardParams::uniform(alpha, beta);
    let mut rows = Vec::new();
    for &gamma in gammas {
        let spec = match kind {
            AgentKind::Dp => {
                let targets = cfg.sentences.iter().map(|s| (s.text.clone(), 1.0)).collect();
                let rule = CandidateRule::Lm { lm, config: cfg.env.lm.clone() };
                let mut mdp = PrefixMdp::new(targets, rule, cfg.env.reward, gamma)?;
                mdp.acceptance = cfg.env.acceptance;
                PolicySpec::Dp(Arc::new(solve_dp(&mdp)?))
            }
            AgentKind::OnlineQ => {
                let factory = EnvFactory::new(lm, &cfg.env, &cfg.sentences)?;
                let tc = TrainConfig { gamma, ..train.clone() };
                PolicySpec::QOnline(Arc::new(q_learning_train(&factory, &tc)?.table))
            }
        };
        let mut metrics = evaluate(&[spec], lm, &cfg)?.remove(0);
        metrics.policy = format!("{kind:?}@gamma={gamma}").to_lowercase();
        rows.push(GammaRow { gamma, metrics });
    }
    let (first, last) = (&rows[0].metrics, &rows[rows.len() - 1].metrics);
    Ok(GammaComparison {
        alpha,
        difference: last.mean_return - first.mean_return,
        difference_ci95: (first.ci95_return.powi(2) + last.ci95_return.powi(2)).sqrt(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrowdingReport {
    pub states_examined: usize,
    pub crowded_states: usize,
    pub oracle_saved_single: usize,
    pub oracle_saved_mixed: usize,
}

fn has_correct_single(slate: &[Candidate], state: &EnvState, target: &str, cfg: &EnvConfig) -> bool {
    let remaining = &target[state.typed.len()..];
    slate
        .iter()
        .any(|c| {
            c.full_words.len() == 1
                && insertion_for(c, &state.current_prefix).is_ok_and(|ins| matches_remaining(remaining, &ins, cfg.acceptance))
        })
}

/// Compare oracle behaviour under single-word and mixed top-`k` slates. A
/// state is crowded when a correct one-word candidate makes the single-word
/// slate but not the mixed one.
pub fn crowding_report(
    lm: &LanguageModel,
    sentences: &[SentenceRecord],
    k: usize,
    env: &EnvConfig,
    multiword: bool,
) -> Result<CrowdingReport> {
    if sentences.is_empty() {
        return Err(Error::config("empty evaluation sentence set"));
    }
    let single = EnvConfig { lm: LmConfig { k, multiword: false, ..env.lm.clone() }, ..env.clone() };
    let mixed = EnvConfig { lm: LmConfig { k, multiword, ..env.lm.clone() }, ..env.clone() };
    single.lm.validate()?;
    mixed.lm.validate()?;
    let mut examined = 0;
    let mut crowded = 0;
    for s in sentences {
        for (i, _) in s.text.char_indices() {
            let typed = s.text[..i].to_owned();
            let a = EnvState::observe(typed.clone(), lm, &single.lm);
            let b = EnvState::observe(typed, lm, &mixed.lm);
            examined += 1;
            if has_correct_single(&a.candidates, &a, &s.text, env)
                && !has_correct_single(&b.candidates, &b, &s.text, env)
            {
                crowded += 1;
            }
        }
    }
    let saved = |cfg: &EnvConfig| -> Result<usize> {
        let mut total = 0;
        for s in sentences {
            let mut oracle = |st: &EnvState, t: &SentenceRecord| -> AgentAction { oracle_act(st, &t.text, cfg.acceptance) };
            total += run_episode(&mut oracle, s, lm, cfg)?.chars_saved;
        }
        Ok(total)
    };
    Ok(CrowdingReport {
        states_examined: examined,
        crowded_states: crowded,
        oracle_saved_single: saved(&single)?,
        oracle_saved_mixed: saved(&mixed)?,
    })
}

/// A small corpus where, after "i am", five "gr" words each have one
/// near-certain follower, so their two-word continuations outrank the
/// one-word "great" in a top-5 mixed slate.
pub fn crowding_instance() -> Result<(LanguageModel, Vec<SentenceRecord>)> {
    let corpus = [
        "i am great",
        "great job today",
        "i am grateful for it",
        "i am greater than that",
        "i am greatly relieved",
        "i am grand now",
    ];
    let records: Vec<SentenceRecord> = corpus.iter().map(|s| SentenceRecord::from_text(s)).collect();
    let lm = build_lm(&records)?;
    Ok((lm, vec![records[0].clone()]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub lm_hash: String,
    pub runs: usize,
    pub seed_base: u64,
    pub sentences: usize,
    pub per_run: Option<usize>,
    pub env: EnvConfig,
    pub rows: Vec<MetricsRow>,
}

impl EvalBundle {
    pub fn new(lm: &LanguageModel, config: &EvalConfig, rows: Vec<MetricsRow>) -> Self {
        EvalBundle {
            lm_hash: lm.content_hash(),
            runs: config.runs,
            seed_base: config.seed_base,
            sentences: config.sentences.len(),
            per_run: config.per_run,
            env: config.env.clone(),
            rows,
        }
    }
}

pub fn write_csv<W: std::io::Write, T: Serialize>(rows: &[T], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (LanguageModel, Vec<SentenceRecord>) {
        let texts = ["call me later", "call me now", "see you later", "see you soon", "how are you", "how is it"];
        let recs: Vec<_> = texts.iter().map(|t| SentenceRecord::from_text(t)).collect();
        (build_lm(&recs).unwrap(), recs)
    }

    #[test]
    fn ci_examples() {
        let (m, ci) = mean_ci95(&[1.0, 1.0, 1.0]);
        assert_eq!((m, ci), (1.0, 0.0));
        let (m, ci) = mean_ci95(&[0.0, 2.0]);
        assert_eq!(m, 1.0);
        assert!((ci - 1.96).abs() < 1e-12);
    }

    #[test]
    fn wait_always_is_zero() {
        let (lm, s) = small();
        let rows = evaluate(&[PolicySpec::WaitAlways], &lm, &EvalConfig::new(s, EnvConfig::default())).unwrap();
        assert_eq!(rows[0].mean_return, 0.0);
        assert_eq!(rows[0].mean_chars_saved, 0.0);
        assert_eq!(rows[0].acceptance_rate, 0.0);
    }

    #[test]
    fn oracle_dominates_and_audit_matches() {
        let (lm, s) = small();
        let cfg = EvalConfig { exec: Execution::Sequential, ..EvalConfig::new(s, EnvConfig::default()) };
        let specs = [PolicySpec::Oracle, PolicySpec::Random, PolicySpec::Threshold(0.3), PolicySpec::Threshold(0.0)];
        let evals = evaluate_detailed(&specs, &lm, &cfg).unwrap();
        check_oracle_dominance(&evals[0], &evals[1..]).unwrap();
        for e in &evals {
            assert!((0.0..=1.0).contains(&e.row.acceptance_rate));
            let again = summarize(&e.row.policy, &e.logs);
            assert_eq!(again, e.row);
            let recomputed: Vec<f64> = e
                .logs
                .iter()
                .map(|r| r.iter().map(|l| l.steps.iter().map(|s| s.reward).sum::<f64>()).sum::<f64>() / r.len() as f64)
                .collect();
            assert!((mean_ci95(&recomputed).0 - e.row.mean_return).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_given_seed_and_modes_agree() {
        let (lm, s) = small();
        let mut cfg = EvalConfig::new(s, EnvConfig::default());
        cfg.exec = Execution::Sequential;
        let a = evaluate(&[PolicySpec::Random], &lm, &cfg).unwrap();
        cfg.exec = Execution::Parallel;
        let b = evaluate(&[PolicySpec::Random], &lm, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_errors() {
        let (lm, s) = small();
        assert!(matches!(
            evaluate(&[PolicySpec::Oracle], &lm, &EvalConfig::new(vec![], EnvConfig::default())),
            Err(Error::Config(_))
        ));
        let cfg = EvalConfig { runs: 1, ..EvalConfig::new(s, EnvConfig::default()) };
        assert!(matches!(evaluate(&[PolicySpec::Oracle], &lm, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn crowding_on_crafted_instance() {
        let (lm, sents) = crowding_instance().unwrap();
        let env = EnvConfig::default();
        let r = crowding_report(&lm, &sents, 5, &env, true).unwrap();
        assert!(r.crowded_states >= 1, "{r:?}");
        assert!(r.oracle_saved_mixed < r.oracle_saved_single, "{r:?}");
        assert!(r.crowded_states <= r.states_examined);
        let off = crowding_report(&lm, &sents, 5, &env, false).unwrap();
        assert_eq!(off.crowded_states, 0);
        let wide = crowding_report(&lm, &sents, 64, &EnvConfig { lm: LmConfig { beam_width: 64, ..env.lm.clone() }, ..env }, true).unwrap();
        assert_eq!(wide.crowded_states, 0);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let (lm, s) = small();
        let rows = evaluate(&[PolicySpec::Oracle, PolicySpec::WaitAlways], &lm, &EvalConfig::new(s, EnvConfig::default())).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("policy,runs,mean_return"));
    }
}
