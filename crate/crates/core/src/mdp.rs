//! The autocomplete MDP: prefix-completion states, wait/suggest actions, the
//! idealized user, and the cognitive-load reward.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_word_char, SentenceRecord};
use crate::error::{Error, Result};
use crate::lm::{parse_context, Candidate, LanguageModel, LmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentAction {
    Wait,
    Suggest(usize),
}

/// Millisecond timings the default reward parameters derive from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingConstants {
    pub char_write_ms: f64,
    pub char_read_ms: f64,
    pub saccade_ms: f64,
}

impl Default for TimingConstants {
    fn default() -> Self {
        TimingConstants { char_write_ms: 521.0, char_read_ms: 40.0, saccade_ms: 30.0 }
    }
}

impl TimingConstants {
    /// α = read / write; β = two saccades / write.
    pub fn reward_params(&self) -> RewardParams {
        let alpha = self.char_read_ms / self.char_write_ms;
        let beta = 2.0 * self.saccade_ms / self.char_write_ms;
        RewardParams { alpha, beta_correct: beta, beta_incorrect: beta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub alpha: f64,
    pub beta_correct: f64,
    pub beta_incorrect: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { alpha: 40.0 / 521.0, beta_correct: 60.0 / 521.0, beta_incorrect: 60.0 / 521.0 }
    }
}

impl RewardParams {
    /// Load constants measured in the typing study: no per-character cost,
    /// cheap correct suggestions, expensive incorrect ones.
    pub fn study() -> Self {
        RewardParams { alpha: 0.0, beta_correct: 10.0 / 521.0, beta_incorrect: 50.0 / 521.0 }
    }

    pub fn uniform(alpha: f64, beta: f64) -> Self {
        RewardParams { alpha, beta_correct: beta, beta_incorrect: beta }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "study" => Ok(Self::study()),
            other => Err(Error::config(format!("unknown reward preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("alpha", self.alpha), ("beta_correct", self.beta_correct), ("beta_incorrect", self.beta_incorrect)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// When the idealized user considers a suggestion a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceMode {
    /// Insertion matches the remaining text and ends at a word boundary.
    #[default]
    WordBoundary,
    /// Insertion matches any prefix of the remaining text.
    LiteralPrefix,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub reward: RewardParams,
    #[serde(default)]
    pub acceptance: AcceptanceMode,
    #[serde(default)]
    pub lm: LmConfig,
}

/// On-disk environment config. `preset` seeds the reward parameters; any
/// explicit `reward` table overrides it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfigFile {
    pub preset: Option<String>,
    pub reward: Option<RewardParams>,
    pub acceptance: Option<AcceptanceMode>,
    pub k: Option<usize>,
    pub multiword: Option<bool>,
    pub lambda: Option<f64>,
}

impl EnvConfigFile {
    pub fn resolve(&self) -> Result<EnvConfig> {
        let mut cfg = EnvConfig::default();
        if let Some(p) = &self.preset {
            cfg.reward = RewardParams::preset(p)?;
        }
        if let Some(r) = self.reward {
            cfg.reward = r;
        }
        if let Some(a) = self.acceptance {
            cfg.acceptance = a;
        }
        if let Some(k) = self.k {
            cfg.lm.k = k;
            cfg.lm.beam_width = cfg.lm.beam_width.max(k);
        }
        if let Some(m) = self.multiword {
            cfg.lm.multiword = m;
        }
        if let Some(l) = self.lambda {
            cfg.lm.lambda = l;
        }
        cfg.reward.validate()?;
        cfg.lm.validate()?;
        Ok(cfg)
    }
}

impl EnvConfig {
    pub fn with_preset(name: &str) -> Result<Self> {
        Ok(EnvConfig { reward: RewardParams::preset(name)?, ..Default::default() })
    }

    /// Read a `.toml` or `.json` config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: EnvConfigFile = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?,
        };
        file.resolve()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub typed: String,
    pub current_prefix: String,
    pub candidates: Vec<Candidate>,
}

impl EnvState {
    pub fn observe(typed: String, lm: &LanguageModel, config: &LmConfig) -> Self {
        let current_prefix = parse_context(&typed).1.to_owned();
        let candidates = lm.candidates(&typed, config);
        EnvState { typed, current_prefix, candidates }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserReaction {
    Accept,
    TypeChar(char),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub accepted: bool,
    pub inserted: String,
    pub done: bool,
}

/// Text acceptance would insert: the candidate's word(s) minus the prefix.
pub fn insertion_for(candidate: &Candidate, current_prefix: &str) -> Result<String> {
    let first = candidate.full_words.first().ok_or_else(|| Error::contract("candidate has no words"))?;
    if !first.starts_with(current_prefix) {
        return Err(Error::contract(format!("candidate {first:?} does not extend prefix {current_prefix:?}")));
    }
    Ok(candidate.full_words.join(" ")[current_prefix.len()..].to_owned())
}

/// Whether the idealized user would accept `insertion` with `remaining` text
/// still to type.
pub fn matches_remaining(remaining: &str, insertion: &str, mode: AcceptanceMode) -> bool {
    if insertion.is_empty() || !remaining.starts_with(insertion) {
        return false;
    }
    match mode {
        AcceptanceMode::LiteralPrefix => true,
        AcceptanceMode::WordBoundary => {
            remaining[insertion.len()..].chars().next().is_none_or(|c| !is_word_char(c))
        }
    }
}

pub fn user_react(
    target: &str,
    typed: &str,
    suggestion: Option<&Candidate>,
    mode: AcceptanceMode,
) -> Result<UserReaction> {
    let remaining = target
        .strip_prefix(typed)
        .ok_or_else(|| Error::contract(format!("typed {typed:?} is not a prefix of the target")))?;
    let next = remaining.chars().next().ok_or_else(|| Error::contract("target already complete"))?;
    if let Some(s) = suggestion {
        let prefix = parse_context(typed).1;
        if let Ok(ins) = insertion_for(s, prefix) {
            if matches_remaining(remaining, &ins, mode) {
                return Ok(UserReaction::Accept);
            }
        }
    }
    Ok(UserReaction::TypeChar(next))
}

/// Suggestion reward in units of one character's writing time.
pub fn reward(action: AgentAction, accepted: bool, insertion_len: usize, params: &RewardParams) -> f64 {
    let len = insertion_len as f64;
    match action {
        AgentAction::Wait => 0.0,
        AgentAction::Suggest(_) if accepted => (1.0 - params.alpha) * len - params.beta_correct,
        AgentAction::Suggest(_) => -params.alpha * len - params.beta_incorrect,
    }
}

/// Apply one agent action and the user's response.
pub fn step(
    state: &EnvState,
    action: AgentAction,
    target: &SentenceRecord,
    lm: &LanguageModel,
    config: &EnvConfig,
) -> Result<(EnvState, StepOutcome)> {
    let suggestion = match action {
        AgentAction::Wait => None,
        AgentAction::Suggest(i) => Some(state.candidates.get(i).ok_or_else(|| {
            Error::contract(format!("suggest index {i} out of range ({} candidates)", state.candidates.len()))
        })?),
    };
    let reaction = user_react(&target.text, &state.typed, suggestion, config.acceptance)?;
    let mut typed = state.typed.clone();
    let (accepted, inserted, insertion_len) = match (reaction, suggestion) {
        (UserReaction::Accept, Some(s)) => {
            let ins = insertion_for(s, &state.current_prefix)?;
            typed.push_str(&ins);
            let n = ins.len();
            (true, ins, n)
        }
        (UserReaction::TypeChar(c), s) => {
            typed.push(c);
            let n = s.map(|s| insertion_for(s, &state.current_prefix).map(|i| i.len())).transpose()?.unwrap_or(0);
            (false, String::new(), n)
        }
        (UserReaction::Accept, None) => unreachable!("acceptance requires a suggestion"),
    };
    let r = reward(action, accepted, insertion_len, &config.reward);
    let done = typed == target.text;
    let next = EnvState::observe(typed, lm, &config.lm);
    Ok((next, StepOutcome { reward: r, accepted, inserted, done }))
}

/// One JSON-lines record of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub typed_len: usize,
    pub action: AgentAction,
    pub candidate_word: Option<String>,
    pub raw_prob: Option<f64>,
    pub accepted: bool,
    pub reward: f64,
    pub inserted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub target: SentenceRecord,
    pub steps: Vec<StepRecord>,
    pub return_undiscounted: f64,
    pub chars_saved: usize,
    pub horizon: usize,
}

impl EpisodeLog {
    pub fn suggestions(&self) -> usize {
        self.steps.iter().filter(|s| s.action != AgentAction::Wait).count()
    }

    pub fn accepted(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Anything that picks an action from the observable state. `target` is
/// privileged information; only the oracle may read it.
pub trait Policy {
    fn act(&mut self, state: &EnvState, target: &SentenceRecord) -> AgentAction;
}

impl<F> Policy for F
where
    F: FnMut(&EnvState, &SentenceRecord) -> AgentAction,
{
    fn act(&mut self, state: &EnvState, target: &SentenceRecord) -> AgentAction {
        self(state, target)
    }
}

/// Stateful single-episode environment.
pub struct Env<'a> {
    lm: &'a LanguageModel,
    config: &'a EnvConfig,
    target: &'a SentenceRecord,
    state: EnvState,
    done: bool,
}

impl<'a> Env<'a> {
    pub fn new(lm: &'a LanguageModel, config: &'a EnvConfig, target: &'a SentenceRecord) -> Self {
        let state = EnvState::observe(String::new(), lm, &config.lm);
        let done = target.text.is_empty();
        Env { lm, config, target, state, done }
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn target(&self) -> &SentenceRecord {
        self.target
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: AgentAction) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::contract("step after episode end"));
        }
        let (next, outcome) = step(&self.state, action, self.target, self.lm, self.config)?;
        self.state = next;
        self.done = outcome.done;
        Ok(outcome)
    }
}

pub fn run_episode(
    policy: &mut dyn Policy,
    target: &SentenceRecord,
    lm: &LanguageModel,
    config: &EnvConfig,
) -> Result<EpisodeLog> {
    let mut env = Env::new(lm, config, target);
    let mut steps = Vec::new();
    let mut total = 0.0;
    let mut saved = 0;
    let limit = target.text.len() + 1;
    while !env.is_done() {
        if steps.len() >= limit {
            return Err(Error::contract("episode exceeded its horizon bound"));
        }
        let state = env.state().clone();
        let action = policy.act(&state, target);
        let outcome = env.step(action)?;
        let shown = match action {
            AgentAction::Suggest(i) => state.candidates.get(i),
            AgentAction::Wait => None,
        };
        total += outcome.reward;
        saved += outcome.inserted.len();
        steps.push(StepRecord {
            t: steps.len(),
            typed_len: state.typed.len(),
            action,
            candidate_word: shown.map(Candidate::text),
            raw_prob: shown.map(|c| c.raw_prob),
            accepted: outcome.accepted,
            reward: outcome.reward,
            inserted: outcome.inserted,
        });
    }
    Ok(EpisodeLog {
        target: target.clone(),
        horizon: steps.len(),
        steps,
        return_undiscounted: total,
        chars_saved: saved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::build_lm;

    fn cand(words: &[&str]) -> Candidate {
        Candidate {
            completion: String::new(),
            full_words: words.iter().map(|s| s.to_string()).collect(),
            raw_prob: 1.0,
            norm_prob: 1.0,
        }
    }

    #[test]
    fn insertion_examples() {
        assert_eq!(insertion_for(&cand(&["call"]), "ca").unwrap(), "ll");
        assert_eq!(insertion_for(&cand(&["call"]), "").unwrap(), "call");
        assert_eq!(insertion_for(&cand(&["call", "later"]), "ca").unwrap(), "ll later");
        assert!(matches!(insertion_for(&cand(&["call"]), "co"), Err(Error::Contract(_))));
    }

    #[test]
    fn idealized_user_reactions() {
        let target = "sorry, i'll call later";
        let typed = "sorry, i'll ca";
        let mode = AcceptanceMode::WordBoundary;
        assert_eq!(user_react(target, typed, Some(&cand(&["call"])), mode).unwrap(), UserReaction::Accept);
        assert_eq!(user_react(target, typed, Some(&cand(&["care"])), mode).unwrap(), UserReaction::TypeChar('l'));
        assert_eq!(user_react(target, typed, None, mode).unwrap(), UserReaction::TypeChar('l'));
        assert!(matches!(user_react(target, "hello", None, mode), Err(Error::Contract(_))));
    }

    #[test]
    fn boundary_mode_rejects_partial_word() {
        let target = "call";
        let short = cand(&["cal"]);
        assert_eq!(
            user_react(target, "c", Some(&short), AcceptanceMode::WordBoundary).unwrap(),
            UserReaction::TypeChar('a')
        );
        assert_eq!(
            user_react(target, "c", Some(&short), AcceptanceMode::LiteralPrefix).unwrap(),
            UserReaction::Accept
        );
    }

    #[test]
    fn reward_examples() {
        let p = RewardParams::default();
        assert_eq!(reward(AgentAction::Wait, false, 0, &p), 0.0);
        let acc = reward(AgentAction::Suggest(0), true, 4, &p);
        assert!((acc - 1864.0 / 521.0).abs() < 1e-12);
        let ign = reward(AgentAction::Suggest(0), false, 4, &p);
        assert!((ign + 220.0 / 521.0).abs() < 1e-12);
    }

    #[test]
    fn timing_constants_give_default_params() {
        let p = TimingConstants::default().reward_params();
        assert_eq!(p, RewardParams::default());
        let s = RewardParams::study();
        assert_eq!(s.alpha, 0.0);
        assert_eq!(s.beta_correct, 10.0 / 521.0);
        assert_eq!(s.beta_incorrect, 50.0 / 521.0);
    }

    #[test]
    fn single_word_episode_accepts_at_start() {
        let lm = build_lm(&[SentenceRecord::from_text("call")]).unwrap();
        let cfg = EnvConfig::default();
        let target = SentenceRecord::from_text("call");
        let mut always = |_: &EnvState, _: &SentenceRecord| AgentAction::Suggest(0);
        let log = run_episode(&mut always, &target, &lm, &cfg).unwrap();
        assert_eq!(log.horizon, 1);
        assert_eq!(log.chars_saved, 4);
        assert!((log.return_undiscounted - 1864.0 / 521.0).abs() < 1e-12);
    }

    #[test]
    fn last_character_wait_ends_episode() {
        let lm = build_lm(&[SentenceRecord::from_text("call")]).unwrap();
        let cfg = EnvConfig::default();
        let target = SentenceRecord::from_text("call");
        let state = EnvState::observe("cal".into(), &lm, &cfg.lm);
        let (next, out) = step(&state, AgentAction::Wait, &target, &lm, &cfg).unwrap();
        assert!(out.done);
        assert_eq!(out.reward, 0.0);
        assert_eq!(next.typed, "call");
    }

    #[test]
    fn invalid_suggest_index_is_contract_violation() {
        let lm = build_lm(&[SentenceRecord::from_text("call")]).unwrap();
        let cfg = EnvConfig::default();
        let target = SentenceRecord::from_text("call");
        let state = EnvState::observe(String::new(), &lm, &cfg.lm);
        assert!(matches!(step(&state, AgentAction::Suggest(3), &target, &lm, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn config_file_presets() {
        let f: EnvConfigFile = toml::from_str("preset = \"study\"\nk = 5\n").unwrap();
        let cfg = f.resolve().unwrap();
        assert_eq!(cfg.reward, RewardParams::study());
        assert_eq!(cfg.lm.k, 5);
        let bad: EnvConfigFile = toml::from_str("preset = \"nope\"").unwrap();
        assert!(bad.resolve().is_err());
        let j: EnvConfigFile = serde_json::from_str(r#"{"reward":{"alpha":0.4,"beta_correct":0.1,"beta_incorrect":0.1}}"#).unwrap();
        assert_eq!(j.resolve().unwrap().reward.alpha, 0.4);
    }
}
