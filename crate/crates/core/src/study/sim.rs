//! Synthetic participants with planted keystroke timing, driving a
//! [`StudyService`] exactly as a client would.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Condition, CreateSession, EventIn, Key, StudyService};
use crate::error::{Error, Result};
use crate::lm::parse_context;
use crate::mdp::{insertion_for, matches_remaining, AcceptanceMode};
use crate::rng::{derive_seed, seeded, Rng};

/// Planted per-suggestion load in units of the per-character write time:
/// `(alpha·len + beta) · char_write_ms`, with β split by correctness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedLoad {
    pub alpha: f64,
    pub beta_correct: f64,
    pub beta_incorrect: f64,
}

impl PlantedLoad {
    pub fn uniform(alpha: f64, beta: f64) -> Self {
        PlantedLoad { alpha, beta_correct: beta, beta_incorrect: beta }
    }

    pub fn ms(&self, len: usize, correct: bool, char_write_ms: f64) -> f64 {
        let beta = if correct { self.beta_correct } else { self.beta_incorrect };
        (self.alpha * len as f64 + beta) * char_write_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptModel {
    Constant(f64),
    /// `p0 · 0.5^(seen / half_life)` over suggestions already seen.
    Decay { p0: f64, half_life: f64 },
}

impl AcceptModel {
    pub fn prob(&self, seen: usize) -> f64 {
        match *self {
            AcceptModel::Constant(p) => p,
            AcceptModel::Decay { p0, half_life } => p0 * 0.5f64.powf(seen as f64 / half_life),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub load: PlantedLoad,
    pub char_write_ms: f64,
    /// Base inter-key interval; each (context, key) adds a fixed offset in
    /// `[0, key_spread_ms]` shared by both conditions.
    pub base_ms: f64,
    pub key_spread_ms: f64,
    pub noise_sd_ms: f64,
    /// Probability of accepting a correct suggestion.
    pub accept: AcceptModel,
    /// Per-key probability of a wrong character followed by a backspace.
    pub typo_rate: f64,
    pub policy: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            load: PlantedLoad::uniform(0.0, 30.0 / 521.0),
            char_write_ms: 521.0,
            base_ms: 180.0,
            key_spread_ms: 60.0,
            noise_sd_ms: 4.0,
            accept: AcceptModel::Constant(0.5),
            typo_rate: 0.0,
            policy: Some("threshold:0".into()),
        }
    }
}

fn key_offset(context: &str, key: Key, spread: f64) -> f64 {
    let mut h = DefaultHasher::new();
    context.hash(&mut h);
    key.hash(&mut h);
    (h.finish() % 10_000) as f64 / 10_000.0 * spread
}

struct Client<'a> {
    service: &'a StudyService,
    id: String,
    cfg: &'a SimConfig,
    rng: Rng,
    noise: Normal<f64>,
    clock: f64,
    seq: u64,
    seen: usize,
}

impl Client<'_> {
    fn dt(&mut self, context: &str, key: Key, load: f64) -> f64 {
        let base = self.cfg.base_ms + key_offset(context, key, self.cfg.key_spread_ms);
        (base + load + self.noise.sample(&mut self.rng)).max(1.0)
    }

    fn push(&mut self, batch: &mut Vec<EventIn>, instance: usize, key: Key, context: &str, load: f64, shown: Option<&crate::lm::Candidate>) {
        self.clock += self.dt(context, key, load);
        batch.push(EventIn {
            seq: self.seq,
            timestamp_ms: self.clock,
            instance,
            key,
            context: context.to_owned(),
            suggestion_shown: shown.cloned(),
        });
        self.seq += 1;
    }

    fn type_prompt(&mut self, instance: usize, text: &str, condition: Condition) -> Result<()> {
        let mut typed = String::new();
        let mut batch = Vec::new();
        while typed != text {
            let shown = match condition {
                Condition::WithSuggestions => self.service.suggest(&self.id, instance, &typed)?,
                Condition::WithoutSuggestions => None,
            };
            let next = text[typed.len()..].chars().next().ok_or_else(|| Error::contract("typed past the prompt"))?;
            let (load, correct, insertion) = match &shown {
                Some(s) => {
                    let ins = insertion_for(&s.candidate, parse_context(&typed).1)?;
                    let ok = matches_remaining(&text[typed.len()..], &ins, AcceptanceMode::WordBoundary);
                    (self.cfg.load.ms(ins.chars().count(), ok, self.cfg.char_write_ms), ok, Some(ins))
                }
                None => (0.0, false, None),
            };
            let cand = shown.as_ref().map(|s| &s.candidate);
            if cand.is_some() {
                self.seen += 1;
            }
            if correct && self.rng.random::<f64>() < self.cfg.accept.prob(self.seen - 1) {
                self.push(&mut batch, instance, Key::Accept, &typed, load, cand);
                typed.push_str(&insertion.expect("correct implies shown"));
                continue;
            }
            if self.cfg.typo_rate > 0.0 && self.rng.random::<f64>() < self.cfg.typo_rate {
                let wrong = if next == 'q' { 'z' } else { 'q' };
                self.push(&mut batch, instance, Key::Char(wrong), &typed, load, cand);
                let ctx = format!("{typed}{wrong}");
                let shown_after = match condition {
                    Condition::WithSuggestions => self.service.suggest(&self.id, instance, &ctx)?,
                    Condition::WithoutSuggestions => None,
                };
                self.push(&mut batch, instance, Key::Backspace, &ctx, 0.0, shown_after.as_ref().map(|s| &s.candidate));
                continue;
            }
            self.push(&mut batch, instance, Key::Char(next), &typed, load, cand);
            typed.push(next);
        }
        self.service.record_events(&self.id, &batch)?;
        Ok(())
    }
}

/// Run one synthetic participant through a full session; returns its id.
pub fn simulate_session(
    service: &StudyService,
    participant: &str,
    prompts: &[String],
    cfg: &SimConfig,
    seed: u64,
) -> Result<String> {
    let session = service.create_session(&CreateSession {
        participant: participant.to_owned(),
        prompts: prompts.to_vec(),
        policy: cfg.policy.clone(),
        seed,
    })?;
    let noise = Normal::new(0.0, cfg.noise_sd_ms.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut client = Client {
        service,
        id: session.id.clone(),
        cfg,
        rng: seeded(derive_seed(seed, 0x51u64)),
        noise,
        clock: 0.0,
        seq: 0,
        seen: 0,
    };
    while let Some(view) = service.next_prompt(&session.id)? {
        client.type_prompt(view.instance, &view.text, view.condition)?;
    }
    Ok(session.id)
}

/// Simulate participants until the pooled pairing yields at least
/// `min_samples` paired samples (or `max_sessions` is reached).
pub fn simulate_until(
    service: &StudyService,
    prompts: &[String],
    cfg: &SimConfig,
    seed: u64,
    min_samples: usize,
    max_sessions: usize,
) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    let mut total = 0;
    for i in 0..max_sessions {
        let id = simulate_session(service, &format!("sim{i}"), prompts, cfg, derive_seed(seed, i as u64))?;
        total += super::analysis::paired_samples(&[service.log(&id)?]).samples.len();
        ids.push(id);
        if total >= min_samples {
            break;
        }
    }
    Ok(ids)
}
