//! Suggestion policies: oracle, uniform random and threshold baselines, exact
//! DP policies, and value-based agents over discrete state features (online
//! tabular Q-learning and offline fitted Q-iteration).

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::SentenceRecord;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lm::LanguageModel;
use crate::mdp::{
    insertion_for, matches_remaining, step, AcceptanceMode, AgentAction, EnvConfig, EnvState, Policy,
};
use crate::rng::{derive_seed, seeded, Rng};
use crate::theory::PolicyTable;

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

pub fn threshold_act(state: &EnvState, tau: f64) -> AgentAction {
    match state.candidates.first() {
        Some(c) if c.raw_prob >= tau => AgentAction::Suggest(0),
        _ => AgentAction::Wait,
    }
}

/// Lowest-index candidate the idealized user would accept, else wait.
pub fn oracle_act(state: &EnvState, target: &str, mode: AcceptanceMode) -> AgentAction {
    let Some(remaining) = target.strip_prefix(state.typed.as_str()) else {
        return AgentAction::Wait;
    };
    state
        .candidates
        .iter()
        .position(|c| {
            insertion_for(c, &state.current_prefix).is_ok_and(|ins| matches_remaining(remaining, &ins, mode))
        })
        .map_or(AgentAction::Wait, AgentAction::Suggest)
}

/// Uniform over wait plus every available candidate.
pub fn random_act(state: &EnvState, rng: &mut Rng) -> AgentAction {
    let i = rng.random_range(0..=state.candidates.len());
    if i == 0 {
        AgentAction::Wait
    } else {
        AgentAction::Suggest(i - 1)
    }
}

// ---------------------------------------------------------------------------
// Features and Q-tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Probability, insertion-length and prefix-length bins.
    #[default]
    Binned,
    /// The full typed context; exact tabular states.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub prob_bins: u8,
    pub len_cap: u8,
    pub prefix_cap: u8,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { kind: FeatureKind::Binned, prob_bins: 20, len_cap: 5, prefix_cap: 3 }
    }
}

impl FeatureConfig {
    pub fn exact() -> Self {
        FeatureConfig { kind: FeatureKind::Exact, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKey {
    Binned { prob_bin: u8, len_bin: u8, prefix_bin: u8 },
    NoCandidate { prefix_bin: u8 },
    Exact { context: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureState {
    /// Key of the wait action (summarizes the top candidate).
    pub wait: StateKey,
    /// Key of each suggest(i) action.
    pub suggest: Vec<StateKey>,
}

impl FeatureState {
    pub fn key(&self, action: AgentAction) -> Option<&StateKey> {
        match action {
            AgentAction::Wait => Some(&self.wait),
            AgentAction::Suggest(i) => self.suggest.get(i),
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = AgentAction> + '_ {
        std::iter::once(AgentAction::Wait).chain((0..self.suggest.len()).map(AgentAction::Suggest))
    }
}

pub fn featurize(state: &EnvState, cfg: &FeatureConfig) -> FeatureState {
    let prefix_bin = state.current_prefix.len().min(cfg.prefix_cap as usize) as u8;
    if cfg.kind == FeatureKind::Exact {
        let key = StateKey::Exact { context: state.typed.clone() };
        return FeatureState { wait: key.clone(), suggest: vec![key; state.candidates.len()] };
    }
    let suggest: Vec<StateKey> = state
        .candidates
        .iter()
        .map(|c| {
            let bins = cfg.prob_bins.max(1);
            let prob_bin = ((c.raw_prob * bins as f64).floor() as i64).clamp(0, bins as i64 - 1) as u8;
            let len_bin = c.completion.len().clamp(1, cfg.len_cap as usize) as u8;
            StateKey::Binned { prob_bin, len_bin, prefix_bin }
        })
        .collect();
    let wait = suggest.first().cloned().unwrap_or(StateKey::NoCandidate { prefix_bin });
    FeatureState { wait, suggest }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QEntry {
    pub value: f64,
    pub visits: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QTable {
    pub features: FeatureConfig,
    pub entries: BTreeMap<(StateKey, AgentAction), QEntry>,
}

#[derive(Serialize, Deserialize)]
struct QTableFile {
    features_config: FeatureConfig,
    entries: Vec<QTableRow>,
}

#[derive(Serialize, Deserialize)]
struct QTableRow {
    state: StateKey,
    action: AgentAction,
    value: f64,
    visits: u64,
}

impl QTable {
    pub fn new(features: FeatureConfig) -> Self {
        QTable { features, entries: BTreeMap::new() }
    }

    /// Unseen cells read as 0, the value of waiting.
    pub fn value(&self, fs: &FeatureState, action: AgentAction) -> f64 {
        fs.key(action)
            .and_then(|k| self.entries.get(&(k.clone(), action)))
            .map_or(0.0, |e| e.value)
    }

    pub fn best_value(&self, fs: &FeatureState) -> f64 {
        fs.actions().map(|a| self.value(fs, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn greedy(&self, fs: &FeatureState) -> AgentAction {
        let mut best = AgentAction::Wait;
        let mut best_v = self.value(fs, best);
        for a in fs.actions().skip(1) {
            let v = self.value(fs, a);
            if v > best_v {
                best = a;
                best_v = v;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = QTableFile {
            features_config: self.features,
            entries: self
                .entries
                .iter()
                .map(|((s, a), e)| QTableRow { state: s.clone(), action: *a, value: e.value, visits: e.visits })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: QTableFile = serde_json::from_str(text)?;
        let entries = file
            .entries
            .into_iter()
            .map(|r| ((r.state, r.action), QEntry { value: r.value, visits: r.visits }))
            .collect();
        Ok(QTable { features: file.features_config, entries })
    }
}

pub fn greedy_act(table: &QTable, state: &EnvState) -> AgentAction {
    table.greedy(&featurize(state, &table.features))
}

// ---------------------------------------------------------------------------
// Policy specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum PolicySpec {
    Oracle,
    Random,
    Threshold(f64),
    WaitAlways,
    Dp(Arc<PolicyTable>),
    QOnline(Arc<QTable>),
    QOffline(Arc<QTable>),
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::Oracle => "oracle".into(),
            PolicySpec::Random => "random".into(),
            PolicySpec::Threshold(t) => format!("threshold:{t}"),
            PolicySpec::WaitAlways => "wait".into(),
            PolicySpec::Dp(_) => "dp".into(),
            PolicySpec::QOnline(_) => "q_online".into(),
            PolicySpec::QOffline(_) => "q_offline".into(),
        }
    }

    /// Parse `oracle`, `random`, `wait`, or `threshold:<tau>`. Table-backed
    /// kinds are constructed directly.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None => match s {
                "oracle" => Ok(PolicySpec::Oracle),
                "random" => Ok(PolicySpec::Random),
                "wait" | "wait-always" => Ok(PolicySpec::WaitAlways),
                "threshold" => Ok(PolicySpec::Threshold(0.3)),
                _ => Err(Error::config(format!("unknown policy {s:?}"))),
            },
            Some(("threshold", t)) => {
                let tau: f64 = t.parse().map_err(|_| Error::config(format!("bad threshold {t:?}")))?;
                if !(0.0..=1.0).contains(&tau) {
                    return Err(Error::config("threshold must lie in [0, 1]"));
                }
                Ok(PolicySpec::Threshold(tau))
            }
            _ => Err(Error::config(format!("unknown policy {s:?}"))),
        }
    }

    pub fn build(&self, seed: u64, acceptance: AcceptanceMode) -> Box<dyn Policy + Send> {
        match self {
            PolicySpec::Oracle => Box::new(move |s: &EnvState, t: &SentenceRecord| oracle_act(s, &t.text, acceptance)),
            PolicySpec::Random => {
                let mut rng = seeded(seed);
                Box::new(move |s: &EnvState, _: &SentenceRecord| random_act(s, &mut rng))
            }
            &PolicySpec::Threshold(tau) => Box::new(move |s: &EnvState, _: &SentenceRecord| threshold_act(s, tau)),
            PolicySpec::WaitAlways => Box::new(|_: &EnvState, _: &SentenceRecord| AgentAction::Wait),
            PolicySpec::Dp(table) => {
                let table = Arc::clone(table);
                Box::new(move |s: &EnvState, _: &SentenceRecord| {
                    let a = table.action(&s.typed);
                    match a {
                        AgentAction::Suggest(i) if i >= s.candidates.len() => AgentAction::Wait,
                        a => a,
                    }
                })
            }
            PolicySpec::QOnline(table) | PolicySpec::QOffline(table) => {
                let table = Arc::clone(table);
                Box::new(move |s: &EnvState, _: &SentenceRecord| greedy_act(&table, s))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRate {
    Constant(f64),
    /// 1 / visits(s, a): the sample average of TD targets.
    InverseVisits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub steps: usize,
    pub learning_rate: LearningRate,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `steps` over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    pub seed: u64,
    pub features: FeatureConfig,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            steps: 250_000,
            learning_rate: LearningRate::InverseVisits,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            seed: 0,
            features: FeatureConfig::default(),
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1]"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if let LearningRate::Constant(lr) = self.learning_rate {
            if !(lr > 0.0 && lr <= 1.0) {
                return Err(Error::config("learning rate must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        let horizon = self.epsilon_decay_fraction * self.steps as f64;
        if horizon <= 0.0 {
            return self.epsilon_end;
        }
        let frac = (step as f64 / horizon).min(1.0);
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// Samples training targets for episodes.
#[derive(Clone, Copy)]
pub struct EnvFactory<'a> {
    pub lm: &'a LanguageModel,
    pub config: &'a EnvConfig,
    pub sentences: &'a [SentenceRecord],
}

impl<'a> EnvFactory<'a> {
    pub fn new(lm: &'a LanguageModel, config: &'a EnvConfig, sentences: &'a [SentenceRecord]) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::config("no training sentences"));
        }
        Ok(EnvFactory { lm, config, sentences })
    }

    fn sample(&self, rng: &mut Rng) -> &'a SentenceRecord {
        &self.sentences[rng.random_range(0..self.sentences.len())]
    }

    fn initial(&self) -> EnvState {
        EnvState::observe(String::new(), self.lm, &self.config.lm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epsilon: f64,
    /// Mean undiscounted return of episodes finished since the last point.
    pub mean_return: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub table: QTable,
    pub curve: Vec<CurvePoint>,
    pub episodes: usize,
}

pub fn q_learning_train(factory: &EnvFactory<'_>, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let mut rng = seeded(config.seed);
    let mut table = QTable::new(config.features);
    let mut curve = Vec::new();
    let mut window = (0.0, 0usize);
    let mut episodes = 0;
    let mut target = factory.sample(&mut rng);
    let mut state = factory.initial();
    let mut ep_return = 0.0;
    for t in 0..config.steps {
        let fs = featurize(&state, &config.features);
        let eps = config.epsilon(t);
        let action = if rng.random::<f64>() < eps { random_act(&state, &mut rng) } else { table.greedy(&fs) };
        let (next, out) = step(&state, action, target, factory.lm, factory.config)?;
        ep_return += out.reward;
        let bootstrap = if out.done { 0.0 } else { table.best_value(&featurize(&next, &config.features)) };
        let td_target = out.reward + config.gamma * bootstrap;
        let key = (fs.key(action).expect("action available").clone(), action);
        let entry = table.entries.entry(key).or_insert(QEntry { value: 0.0, visits: 0 });
        entry.visits += 1;
        let lr = match config.learning_rate {
            LearningRate::Constant(lr) => lr,
            LearningRate::InverseVisits => 1.0 / entry.visits as f64,
        };
        entry.value += lr * (td_target - entry.value);
        if !entry.value.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite Q at step {t}: reward {} bootstrap {bootstrap} lr {lr}",
                out.reward
            )));
        }
        if out.done {
            window.0 += ep_return;
            window.1 += 1;
            episodes += 1;
            ep_return = 0.0;
            target = factory.sample(&mut rng);
            state = factory.initial();
        } else {
            state = next;
        }
        if config.log_every > 0 && (t + 1) % config.log_every == 0 {
            curve.push(CurvePoint {
                step: t + 1,
                epsilon: eps,
                mean_return: if window.1 > 0 { window.0 / window.1 as f64 } else { f64::NAN },
                episodes: window.1,
            });
            window = (0.0, 0);
        }
    }
    Ok(TrainReport { table, curve, episodes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub trajectory: usize,
    pub state: FeatureState,
    pub action: AgentAction,
    pub reward: f64,
    pub next_state: FeatureState,
    pub done: bool,
    /// The action came from the exploration draw rather than the base policy.
    pub explored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub policy: String,
    pub exploration_rate: f64,
    pub seed: u64,
    pub features: FeatureConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub provenance: Provenance,
    pub trajectories: usize,
    pub transitions: Vec<Transition>,
}

impl OfflineDataset {
    pub fn exploration_fraction(&self) -> f64 {
        let n = self.transitions.len().max(1);
        self.transitions.iter().filter(|t| t.explored).count() as f64 / n as f64
    }

    /// A header line (provenance and trajectory count), then one transition
    /// per line.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader { provenance: self.provenance.clone(), trajectories: self.trajectories };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: DatasetHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Format("empty dataset file".into())),
        };
        let mut transitions = Vec::new();
        for l in lines {
            let l = l?;
            if !l.trim().is_empty() {
                transitions.push(serde_json::from_str(&l)?);
            }
        }
        Ok(OfflineDataset { provenance: header.provenance, trajectories: header.trajectories, transitions })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    provenance: Provenance,
    trajectories: usize,
}

#[derive(Debug, Clone)]
pub struct CollectConfig {
    pub exploration_rate: f64,
    pub trajectories: usize,
    pub seed: u64,
    pub features: FeatureConfig,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig { exploration_rate: 0.05, trajectories: 5000, seed: 0, features: FeatureConfig::default() }
    }
}

/// Roll out `base` with per-step uniform exploration and record featurized
/// transitions.
pub fn collect_offline(
    base: &PolicySpec,
    factory: &EnvFactory<'_>,
    config: &CollectConfig,
    exec: Execution,
) -> Result<OfflineDataset> {
    let per_traj: Vec<Result<Vec<Transition>>> = exec.map_range(0..config.trajectories, |i| {
        let mut rng = seeded(derive_seed(config.seed, i as u64));
        let target = factory.sample(&mut rng);
        let mut policy = base.build(derive_seed(config.seed ^ 0xA5A5, i as u64), factory.config.acceptance);
        let mut state = factory.initial();
        let mut out = Vec::new();
        loop {
            let explored = rng.random::<f64>() < config.exploration_rate;
            let action = if explored { random_act(&state, &mut rng) } else { policy.act(&state, target) };
            let (next, o) = step(&state, action, target, factory.lm, factory.config)?;
            out.push(Transition {
                trajectory: i,
                state: featurize(&state, &config.features),
                action,
                reward: o.reward,
                next_state: featurize(&next, &config.features),
                done: o.done,
                explored,
            });
            if o.done {
                break;
            }
            state = next;
        }
        Ok(out)
    });
    let mut transitions = Vec::new();
    for t in per_traj {
        transitions.extend(t?);
    }
    Ok(OfflineDataset {
        provenance: Provenance {
            policy: base.name(),
            exploration_rate: config.exploration_rate,
            seed: config.seed,
            features: config.features,
        },
        trajectories: config.trajectories,
        transitions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedConfig {
    pub gamma: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FittedConfig {
    fn default() -> Self {
        FittedConfig { gamma: 0.99, tolerance: 1e-6, max_iterations: 20_000 }
    }
}

/// Fitted Q-iteration on the discrete feature table: each sweep replaces every
/// observed cell by the empirical mean of its Bellman targets.
pub fn fitted_q_train(dataset: &OfflineDataset, config: &FittedConfig) -> Result<QTable> {
    if dataset.transitions.is_empty() {
        return Err(Error::config("empty offline dataset"));
    }
    if !(0.0..=1.0).contains(&config.gamma) {
        return Err(Error::config("gamma must lie in [0, 1]"));
    }
    // Intern next-states so each sweep only touches distinct successors.
    let mut next_ids: HashMap<&FeatureState, usize> = HashMap::new();
    let mut next_states: Vec<&FeatureState> = Vec::new();
    struct Cell {
        n: u64,
        reward_sum: f64,
        successors: BTreeMap<usize, u64>,
    }
    let mut cells: BTreeMap<(StateKey, AgentAction), Cell> = BTreeMap::new();
    for t in &dataset.transitions {
        let key = t
            .state
            .key(t.action)
            .ok_or_else(|| Error::contract("transition action not available in its state"))?;
        let cell = cells
            .entry((key.clone(), t.action))
            .or_insert(Cell { n: 0, reward_sum: 0.0, successors: BTreeMap::new() });
        cell.n += 1;
        cell.reward_sum += t.reward;
        if !t.done {
            let id = *next_ids.entry(&t.next_state).or_insert_with(|| {
                next_states.push(&t.next_state);
                next_states.len() - 1
            });
            *cell.successors.entry(id).or_insert(0) += 1;
        }
    }
    let features = dataset.provenance.features;
    let mut table = QTable::new(features);
    for (k, c) in &cells {
        table.entries.insert(k.clone(), QEntry { value: c.reward_sum / c.n as f64, visits: c.n });
    }
    if config.gamma == 0.0 {
        return Ok(table);
    }
    for _ in 0..config.max_iterations {
        let v_next: Vec<f64> = next_states.iter().map(|s| table.best_value(s)).collect();
        let mut delta = 0.0f64;
        for (k, c) in &cells {
            let boot: f64 = c.successors.iter().map(|(&id, &cnt)| cnt as f64 * v_next[id]).sum();
            let q = (c.reward_sum + config.gamma * boot) / c.n as f64;
            let e = table.entries.get_mut(k).expect("cell present");
            delta = delta.max((q - e.value).abs());
            e.value = q;
        }
        if !table.is_finite() {
            return Err(Error::Diverged("non-finite fitted Q value".into()));
        }
        if delta < config.tolerance {
            break;
        }
    }
    Ok(table)
}
