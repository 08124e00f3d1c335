//! Exact analysis of myopic (γ = 0) versus farsighted (γ = 1) suggestion
//! policies.
//!
//! Two routes are kept deliberately separate: the closed forms for the
//! two-word system together with a direct backward-induction oracle over it,
//! and a general backward-induction solver over prefix states of an arbitrary
//! target set ([`PrefixMdp`]), which covers word tries as well as whole
//! sentences with LM-generated candidate slates.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lm::{Candidate, LanguageModel, LmConfig};
use crate::mdp::{insertion_for, matches_remaining, AcceptanceMode, AgentAction, RewardParams};
use crate::rng::{derive_seed, seeded};

// ---------------------------------------------------------------------------
// Two-word system
// ---------------------------------------------------------------------------

/// Two equally likely target words of length `n` sharing their first `m`
/// letters; single candidate, actions show / wait.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoWordInstance {
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl TwoWordInstance {
    pub fn new(n: usize, m: usize, alpha: f64, beta: f64) -> Result<Self> {
        if m < 1 || m >= n {
            return Err(Error::config(format!("need 1 <= m < n, got n={n}, m={m}")));
        }
        Ok(TwoWordInstance { n, m, alpha, beta })
    }

    /// Regime in which the farsighted closed form holds.
    pub fn farsighted_regime(&self) -> bool {
        (self.n - self.m - 1) as f64 * (1.0 - self.alpha) >= self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShowWait {
    pub show: f64,
    pub wait: f64,
}

impl ShowWait {
    pub fn value(&self) -> f64 {
        self.show.max(self.wait)
    }

    /// Ties go to wait.
    pub fn shows(&self) -> bool {
        self.show > self.wait
    }
}

pub fn q_myopic_at_m(inst: &TwoWordInstance) -> ShowWait {
    let d = (inst.n - inst.m) as f64;
    ShowWait { show: d * (0.5 - inst.alpha) - inst.beta, wait: 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QSource {
    ClosedForm,
    BruteForce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarsightedQ {
    pub q: ShowWait,
    pub source: QSource,
}

/// Closed-form γ = 1 values at position m. Outside the validity regime the
/// closed form does not hold and brute-force values are returned instead.
pub fn q_farsighted_at_m(inst: &TwoWordInstance) -> FarsightedQ {
    if !inst.farsighted_regime() {
        let table = brute_force_two_word(inst, 1.0);
        return FarsightedQ { q: table.at(inst.m).u, source: QSource::BruteForce };
    }
    let d = (inst.n - inst.m) as f64;
    let (a, b) = (inst.alpha, inst.beta);
    FarsightedQ {
        q: ShowWait { show: d * (1.0 - 1.5 * a) - 0.5 * (1.0 - a) - 1.5 * b, wait: (d - 1.0) * (1.0 - a) - b },
        source: QSource::ClosedForm,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoWordRow {
    pub t: usize,
    pub u: ShowWait,
    pub v: ShowWait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoWordTable {
    pub instance: TwoWordInstance,
    pub gamma: f64,
    /// Rows for t = 0..=n.
    pub rows: Vec<TwoWordRow>,
}

impl TwoWordTable {
    pub fn at(&self, t: usize) -> &TwoWordRow {
        &self.rows[t]
    }
}

/// Backward induction over the two-word system. Up to position m the single
/// candidate is the designated word (correct with probability 0.5); after m
/// it is the target. Rejected suggestions continue along the other word.
pub fn brute_force_two_word(inst: &TwoWordInstance, gamma: f64) -> TwoWordTable {
    let (n, m, a, b) = (inst.n, inst.m, inst.alpha, inst.beta);
    let zero = ShowWait { show: 0.0, wait: 0.0 };
    let mut rows = vec![TwoWordRow { t: n, u: zero, v: zero }; n + 1];
    for t in (0..n).rev() {
        let rem = (n - t) as f64;
        let next = rows[t + 1];
        let hit = rem * (1.0 - a) - b;
        let row = if t > m {
            TwoWordRow {
                t,
                u: ShowWait { show: hit, wait: gamma * next.u.value() },
                v: ShowWait { show: hit, wait: gamma * next.v.value() },
            }
        } else {
            let miss = -rem * a - b + gamma * next.v.value();
            let q = ShowWait {
                show: 0.5 * hit + 0.5 * miss,
                wait: gamma * (0.5 * next.u.value() + 0.5 * next.v.value()),
            };
            TwoWordRow { t, u: q, v: q }
        };
        rows[t] = row;
    }
    TwoWordTable { instance: *inst, gamma, rows }
}

/// Open interval of α for which the optimal γ = 1 policy waits and the optimal
/// γ = 0 policy shows at position m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintInterval {
    pub alpha_lo: f64,
    pub alpha_hi: f64,
}

impl ConstraintInterval {
    pub fn is_empty(&self) -> bool {
        self.alpha_lo >= self.alpha_hi
    }

    pub fn contains(&self, alpha: f64) -> bool {
        alpha > self.alpha_lo && alpha < self.alpha_hi
    }
}

pub fn disagreement_interval(n: usize, m: usize, beta: f64) -> ConstraintInterval {
    let d = (n - m) as f64;
    ConstraintInterval { alpha_lo: (1.0 - beta) / (d + 1.0), alpha_hi: (0.5 * d - beta) / d }
}

// ---------------------------------------------------------------------------
// General prefix-state MDP
// ---------------------------------------------------------------------------

/// How the candidate slate is produced for a typed prefix.
#[derive(Debug, Clone)]
pub enum CandidateRule<'a> {
    /// One candidate: the most probable target (by prior) still consistent
    /// with the prefix, ties lexicographic.
    TopPrior,
    /// The language model's slate.
    Lm { lm: &'a LanguageModel, config: LmConfig },
}

/// Finite-horizon MDP whose states are typed prefixes of a known target set.
/// The belief at a state is the prior restricted to targets that strictly
/// extend the prefix.
#[derive(Debug, Clone)]
pub struct PrefixMdp<'a> {
    targets: Vec<(String, f64)>,
    pub rule: CandidateRule<'a>,
    pub reward: RewardParams,
    pub acceptance: AcceptanceMode,
    pub gamma: f64,
}

/// Word-trie instance with the top-by-prior candidate rule.
pub type TrieMdp<'a> = PrefixMdp<'a>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Prior {
    #[default]
    Frequency,
    Uniform,
}

impl<'a> PrefixMdp<'a> {
    pub fn new(
        targets: Vec<(String, f64)>,
        rule: CandidateRule<'a>,
        reward: RewardParams,
        gamma: f64,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::config("empty target set"));
        }
        let mut merged: BTreeMap<String, f64> = BTreeMap::new();
        for (t, w) in targets {
            if t.is_empty() || w.is_nan() || w <= 0.0 {
                return Err(Error::config("targets must be nonempty with positive weight"));
            }
            *merged.entry(t).or_insert(0.0) += w;
        }
        let z: f64 = merged.values().sum();
        let targets = merged.into_iter().map(|(t, w)| (t, w / z)).collect();
        Ok(PrefixMdp { targets, rule, reward, acceptance: AcceptanceMode::WordBoundary, gamma })
    }

    /// Trie over the given words with the top-by-prior rule.
    pub fn trie(words: &[(String, u64)], prior: Prior, reward: RewardParams, gamma: f64) -> Result<Self> {
        let targets = words
            .iter()
            .map(|(w, c)| (w.clone(), if prior == Prior::Uniform { 1.0 } else { *c as f64 }))
            .collect();
        Self::new(targets, CandidateRule::TopPrior, reward, gamma)
    }

    /// Trie over the `n` most frequent words of a language model.
    pub fn from_lm_top_words(lm: &LanguageModel, n: usize, prior: Prior, reward: RewardParams, gamma: f64) -> Result<Self> {
        Self::trie(&lm.most_frequent(n), prior, reward, gamma)
    }

    pub fn with_reward(&self, reward: RewardParams, gamma: f64) -> Self {
        PrefixMdp { reward, gamma, ..self.clone() }
    }

    pub fn targets(&self) -> &[(String, f64)] {
        &self.targets
    }

    /// Every proper prefix of every target (all reachable states).
    pub fn states(&self) -> Vec<String> {
        let mut set: BTreeMap<String, ()> = BTreeMap::new();
        for (t, _) in &self.targets {
            for (i, _) in t.char_indices() {
                set.insert(t[..i].to_owned(), ());
            }
        }
        set.into_keys().collect()
    }

    fn belief(&self, typed: &str) -> Vec<(&str, f64)> {
        let live: Vec<(&str, f64)> = self
            .targets
            .iter()
            .filter(|(t, _)| t.len() > typed.len() && t.starts_with(typed))
            .map(|(t, p)| (t.as_str(), *p))
            .collect();
        let z: f64 = live.iter().map(|(_, p)| p).sum();
        live.into_iter().map(|(t, p)| (t, p / z)).collect()
    }

    pub fn slate(&self, typed: &str) -> Vec<Candidate> {
        match &self.rule {
            CandidateRule::Lm { lm, config } => lm.candidates(typed, config),
            CandidateRule::TopPrior => self
                .belief(typed)
                .into_iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(w, p)| Candidate {
                    completion: w[typed.len()..].to_owned(),
                    full_words: vec![w.to_owned()],
                    raw_prob: p,
                    norm_prob: 1.0,
                })
                .into_iter()
                .collect(),
        }
    }

    /// Outcomes of `action` at `typed`: (probability, reward, next prefix or
    /// None when the episode ends).
    fn outcomes(&self, typed: &str, slate: &[Candidate], action: AgentAction) -> Vec<(f64, f64, Option<String>)> {
        let prefix = crate::lm::parse_context(typed).1;
        let shown = match action {
            AgentAction::Wait => None,
            AgentAction::Suggest(i) => slate.get(i),
        };
        let insertion = shown.and_then(|c| insertion_for(c, prefix).ok());
        self.belief(typed)
            .into_iter()
            .map(|(target, p)| {
                let remaining = &target[typed.len()..];
                let (r, next) = match &insertion {
                    Some(ins) if matches_remaining(remaining, ins, self.acceptance) => {
                        let r = (1.0 - self.reward.alpha) * ins.len() as f64 - self.reward.beta_correct;
                        (r, format!("{typed}{ins}"))
                    }
                    other => {
                        let r = match other {
                            Some(ins) => -self.reward.alpha * ins.len() as f64 - self.reward.beta_incorrect,
                            None => 0.0,
                        };
                        let c = remaining.chars().next().expect("belief targets extend the prefix");
                        (r, format!("{typed}{c}"))
                    }
                };
                let next = (next.len() < target.len()).then_some(next);
                (p, r, next)
            })
            .collect()
    }

    fn q_values(&self, typed: &str, slate: &[Candidate], values: &HashMap<String, f64>) -> Vec<f64> {
        std::iter::once(AgentAction::Wait)
            .chain((0..slate.len()).map(AgentAction::Suggest))
            .map(|a| {
                self.outcomes(typed, slate, a)
                    .into_iter()
                    .map(|(p, r, next)| p * (r + self.gamma * next.map_or(0.0, |s| values[&s])))
                    .sum()
            })
            .collect()
    }
}

/// Index into a Q-vector: 0 is wait, i + 1 is suggest(i).
pub fn action_index(a: AgentAction) -> usize {
    match a {
        AgentAction::Wait => 0,
        AgentAction::Suggest(i) => i + 1,
    }
}

/// Greedy action over a Q-vector; ties toward wait, then the lowest index.
pub fn argmax_action(q: &[f64]) -> AgentAction {
    let mut best = AgentAction::Wait;
    let mut best_v = q[0];
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = AgentAction::Suggest(i - 1);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateValue {
    /// Q-values: index 0 is wait, i + 1 is suggest(i).
    pub q: Vec<f64>,
    pub value: f64,
    pub action: AgentAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub gamma: f64,
    pub states: BTreeMap<String, StateValue>,
}

impl PolicyTable {
    pub fn action(&self, typed: &str) -> AgentAction {
        self.states.get(typed).map_or(AgentAction::Wait, |s| s.action)
    }

    pub fn root_value(&self) -> f64 {
        self.states.get("").map_or(0.0, |s| s.value)
    }

    pub fn shows_at(&self, typed: &str) -> bool {
        self.action(typed) != AgentAction::Wait
    }
}

fn states_by_length_desc(mdp: &PrefixMdp<'_>) -> Vec<String> {
    let mut states = mdp.states();
    states.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    states
}

/// Optimal values and actions by backward induction over prefix states.
pub fn solve_dp(mdp: &PrefixMdp<'_>) -> Result<PolicyTable> {
    if mdp.targets.is_empty() {
        return Err(Error::config("empty target set"));
    }
    let mut values: HashMap<String, f64> = HashMap::new();
    let mut out = BTreeMap::new();
    for s in states_by_length_desc(mdp) {
        let slate = mdp.slate(&s);
        let q = mdp.q_values(&s, &slate, &values);
        let action = argmax_action(&q);
        let value = q[action_index(action)];
        values.insert(s.clone(), value);
        out.insert(s, StateValue { q, value, action });
    }
    Ok(PolicyTable { gamma: mdp.gamma, states: out })
}

/// Expected return from the root when following `policy` (discounted by the
/// MDP's γ).
pub fn evaluate_policy(mdp: &PrefixMdp<'_>, policy: &dyn Fn(&str) -> AgentAction) -> f64 {
    let mut values: HashMap<String, f64> = HashMap::new();
    for s in states_by_length_desc(mdp) {
        let slate = mdp.slate(&s);
        let a = policy(&s);
        let v = mdp
            .outcomes(&s, &slate, a)
            .into_iter()
            .map(|(p, r, next)| p * (r + mdp.gamma * next.map_or(0.0, |n| values[&n])))
            .sum();
        values.insert(s, v);
    }
    values.get("").copied().unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub rollouts: usize,
}

/// Roll out `table`'s greedy actions through the prefix-state transition
/// kernel (the same outcome distribution the backward induction uses).
pub fn monte_carlo_return(
    mdp: &PrefixMdp<'_>,
    table: &PolicyTable,
    rollouts: usize,
    seed: u64,
    exec: Execution,
) -> MonteCarloEstimate {
    let returns: Vec<f64> = exec.map_range(0..rollouts, |i| {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let mut typed = String::new();
        let mut ret = 0.0;
        let mut discount = 1.0;
        loop {
            let slate = mdp.slate(&typed);
            let outcomes = mdp.outcomes(&typed, &slate, table.action(&typed));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let last = outcomes.len() - 1;
            let (_, r, next) = outcomes
                .into_iter()
                .enumerate()
                .find(|(j, (p, _, _))| {
                    acc += p;
                    u < acc || *j == last
                })
                .map(|(_, o)| o)
                .expect("nonempty belief");
            ret += discount * r;
            discount *= mdp.gamma;
            match next {
                Some(n) => typed = n,
                None => break,
            }
        }
        ret
    });
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    MonteCarloEstimate { mean, std_err: (var / n).sqrt(), rollouts }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisagreementReport {
    pub total_states: usize,
    pub disagreements: usize,
    pub fraction: f64,
}

pub fn count_disagreements(farsighted: &PolicyTable, myopic: &PolicyTable) -> Result<DisagreementReport> {
    if farsighted.states.len() != myopic.states.len()
        || farsighted.states.keys().zip(myopic.states.keys()).any(|(a, b)| a != b)
    {
        return Err(Error::contract("policy tables cover different state sets"));
    }
    let disagreements = farsighted
        .states
        .iter()
        .zip(myopic.states.values())
        .filter(|((_, f), m)| f.action != m.action)
        .count();
    let total = farsighted.states.len();
    Ok(DisagreementReport {
        total_states: total,
        disagreements,
        fraction: if total == 0 { 0.0 } else { disagreements as f64 / total as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub report: DisagreementReport,
}

/// Default α grid 0.05, 0.10, ..., 0.95.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Solve the template at γ = 1 and γ = 0 for each α and count disagreements.
pub fn alpha_sweep(template: &PrefixMdp<'_>, alphas: &[f64], beta: f64, exec: Execution) -> Result<Vec<SweepPoint>> {
    exec.map(alphas, |&alpha| {
        let reward = RewardParams::uniform(alpha, beta);
        let far = solve_dp(&template.with_reward(reward, 1.0))?;
        let myo = solve_dp(&template.with_reward(reward, 0.0))?;
        Ok(SweepPoint { alpha, report: count_disagreements(&far, &myo)? })
    })
    .into_iter()
    .collect()
}

/// The two-word system as a [`PrefixMdp`] over words `a^m x^(n-m)` and
/// `a^m y^(n-m)`; the lexicographically first is the designated candidate.
pub fn two_word_trie(inst: &TwoWordInstance, gamma: f64) -> Result<PrefixMdp<'static>> {
    let common = "a".repeat(inst.m);
    let u = format!("{common}{}", "x".repeat(inst.n - inst.m));
    let v = format!("{common}{}", "y".repeat(inst.n - inst.m));
    PrefixMdp::trie(&[(u, 1), (v, 1)], Prior::Uniform, RewardParams::uniform(inst.alpha, inst.beta), gamma)
}
