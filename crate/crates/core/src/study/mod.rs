//! Typing-study backend: counterbalanced sessions, live suggestion serving,
//! keystroke logging with idempotent batches, and append-only JSON-lines
//! persistence. Analysis lives in [`analysis`]; [`sim`] drives the service
//! with synthetic participants.

pub mod analysis;
pub mod sim;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::agents::PolicySpec;
use crate::corpus::{judge, normalize, tokenize, FilterConfig, SentenceRecord, Verdict};
use crate::error::{Error, Result};
use crate::lm::{parse_context, Candidate, LanguageModel};
use crate::mdp::{insertion_for, matches_remaining, AgentAction, EnvConfig, EnvState};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    WithSuggestions,
    WithoutSuggestions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub index: usize,
    pub prompt: usize,
    pub condition: Condition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub participant: String,
    pub prompts: Vec<String>,
    pub block_order: [Condition; 2],
    pub instances: Vec<PromptInstance>,
    pub policy: String,
    pub seed: u64,
    pub status: SessionStatus,
    pub created_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "char", rename_all = "snake_case")]
pub enum Key {
    Char(char),
    Accept,
    Backspace,
    Dismiss,
}

/// A key event as the client reports it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventIn {
    pub seq: u64,
    /// Client monotonic clock.
    pub timestamp_ms: f64,
    pub instance: usize,
    pub key: Key,
    /// Typed text of the instance just before the key.
    pub context: String,
    pub suggestion_shown: Option<Candidate>,
}

/// A logged key event; correctness is computed against the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyEvent {
    pub session_id: String,
    pub seq: u64,
    pub timestamp_ms: f64,
    pub instance: usize,
    pub condition: Condition,
    pub key: Key,
    pub context: String,
    pub suggestion_shown: Option<Candidate>,
    pub suggestion_correct: bool,
    pub accepted: bool,
    /// Server wall clock on receipt; audit only.
    pub received_ms: u64,
}

impl KeyEvent {
    fn same_input(&self, e: &EventIn) -> bool {
        self.seq == e.seq
            && self.timestamp_ms == e.timestamp_ms
            && self.instance == e.instance
            && self.key == e.key
            && self.context == e.context
            && self.suggestion_shown == e.suggestion_shown
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedSuggestion {
    pub candidate: Candidate,
    pub insertion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedRecord {
    pub instance: usize,
    pub context: String,
    pub suggestion: Option<ServedSuggestion>,
    pub served_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptView {
    pub instance: usize,
    pub prompt: usize,
    pub text: String,
    pub condition: Condition,
    pub typed: String,
    pub remaining_instances: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAck {
    pub recorded: usize,
    pub duplicates: usize,
    pub last_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub participant: String,
    pub prompts: Vec<String>,
    /// Fixed policy kind (`oracle`, `random`, `wait`, `threshold:<tau>`);
    /// the service default when absent.
    pub policy: Option<String>,
    pub seed: u64,
}

/// One session's log as analysis consumes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session: Session,
    pub events: Vec<KeyEvent>,
}

impl SessionLog {
    pub fn condition(&self, instance: usize) -> Condition {
        self.session.instances[instance].condition
    }

    pub fn prompt_text(&self, instance: usize) -> &str {
        &self.session.prompts[self.session.instances[instance].prompt]
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogRecord {
    Session(Session),
    Event(KeyEvent),
    Served(ServedRecord),
    Status { status: SessionStatus },
}

struct SessionState {
    session: Session,
    policy: PolicySpec,
    events: Vec<KeyEvent>,
    by_seq: HashMap<u64, usize>,
    typed: Vec<String>,
    last_ts: f64,
    served: u64,
}

impl SessionState {
    fn new(session: Session, policy: PolicySpec) -> Self {
        let typed = vec![String::new(); session.instances.len()];
        SessionState { session, policy, events: Vec::new(), by_seq: HashMap::new(), typed, last_ts: f64::NEG_INFINITY, served: 0 }
    }

    fn complete(&self, instance: usize) -> bool {
        let p = self.session.instances[instance].prompt;
        self.typed[instance] == self.session.prompts[p]
    }

    fn apply(&mut self, e: KeyEvent) {
        let typed = &mut self.typed[e.instance];
        apply_key(typed, &e);
        self.last_ts = e.timestamp_ms;
        self.by_seq.insert(e.seq, self.events.len());
        self.events.push(e);
    }
}

fn apply_key(typed: &mut String, e: &KeyEvent) {
    match e.key {
        Key::Char(c) => typed.push(c),
        Key::Backspace => {
            typed.pop();
        }
        Key::Accept => {
            let c = e.suggestion_shown.as_ref().expect("validated accept carries a suggestion");
            let prefix = parse_context(&e.context).1;
            typed.push_str(&insertion_for(c, prefix).expect("validated insertion"));
        }
        Key::Dismiss => {}
    }
}

/// Rebuild each instance's typed text from a log.
pub fn replay(log: &SessionLog) -> Vec<String> {
    let mut typed = vec![String::new(); log.session.instances.len()];
    for e in &log.events {
        apply_key(&mut typed[e.instance], e);
    }
    typed
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn append(dir: &Option<PathBuf>, id: &str, records: &[LogRecord]) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join(format!("{id}.jsonl")))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Read every `*.jsonl` session log in `dir`, ordered by session id.
pub fn load_logs(dir: &Path) -> Result<Vec<SessionLog>> {
    let mut out = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    for p in paths {
        let mut session = None;
        let mut events = Vec::new();
        for line in BufReader::new(File::open(&p)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LogRecord>(&line)? {
                LogRecord::Session(s) => session = Some(s),
                LogRecord::Event(e) => events.push(e),
                LogRecord::Served(_) => {}
                LogRecord::Status { status } => {
                    if let Some(s) = session.as_mut() {
                        s.status = status;
                    }
                }
            }
        }
        let session = session.ok_or_else(|| Error::Format(format!("{} has no session header", p.display())))?;
        out.push(SessionLog { session, events });
    }
    Ok(out)
}

/// The study service: many concurrent sessions, each serialized behind its
/// own lock.
pub struct StudyService {
    lm: Arc<LanguageModel>,
    env: EnvConfig,
    default_policy: PolicySpec,
    filter: FilterConfig,
    log_dir: Option<PathBuf>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<SessionState>>>>,
    next_id: AtomicU64,
}

impl StudyService {
    pub fn new(lm: Arc<LanguageModel>, env: EnvConfig, default_policy: PolicySpec) -> Self {
        StudyService {
            lm,
            env,
            default_policy,
            filter: FilterConfig::default(),
            log_dir: None,
            sessions: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    /// Persist to `dir`, resuming any sessions already logged there.
    pub fn with_log_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut max_id = 0;
        {
            let mut map = self.sessions.write().expect("session map lock");
            for log in load_logs(&dir)? {
                if let Some(n) = log.session.id.strip_prefix("s").and_then(|n| n.parse::<u64>().ok()) {
                    max_id = max_id.max(n);
                }
                let policy = PolicySpec::parse(&log.session.policy).unwrap_or_else(|_| self.default_policy.clone());
                let mut st = SessionState::new(log.session.clone(), policy);
                for e in log.events {
                    st.apply(e);
                }
                map.insert(log.session.id.clone(), Arc::new(Mutex::new(st)));
            }
        }
        self.next_id = AtomicU64::new(max_id + 1);
        self.log_dir = Some(dir);
        Ok(self)
    }

    pub fn env(&self) -> &EnvConfig {
        &self.env
    }

    pub fn lm(&self) -> &LanguageModel {
        &self.lm
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<SessionState>>> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id:?}")))
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<Session> {
        if req.prompts.is_empty() {
            return Err(Error::Session("empty prompt list".into()));
        }
        for p in &req.prompts {
            let text = normalize(p);
            if text != *p || judge(&text, &tokenize(&text), &self.filter, None) != Verdict::Keep {
                return Err(Error::Session(format!("prompt {p:?} fails the corpus filters")));
            }
        }
        let policy = match &req.policy {
            Some(name) => PolicySpec::parse(name)?,
            None => self.default_policy.clone(),
        };
        let mut rng = seeded(req.seed);
        let block_order = if rng.random_bool(0.5) {
            [Condition::WithSuggestions, Condition::WithoutSuggestions]
        } else {
            [Condition::WithoutSuggestions, Condition::WithSuggestions]
        };
        let mut instances = Vec::with_capacity(2 * req.prompts.len());
        for cond in block_order {
            let mut order: Vec<usize> = (0..req.prompts.len()).collect();
            order.shuffle(&mut rng);
            for prompt in order {
                instances.push(PromptInstance { index: instances.len(), prompt, condition: cond });
            }
        }
        let id = format!("s{:05}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let session = Session {
            id: id.clone(),
            participant: req.participant.clone(),
            prompts: req.prompts.clone(),
            block_order,
            instances,
            policy: policy.name(),
            seed: req.seed,
            status: SessionStatus::Active,
            created_ms: now_ms(),
        };
        append(&self.log_dir, &id, &[LogRecord::Session(session.clone())])?;
        self.sessions
            .write()
            .expect("session map lock")
            .insert(id, Arc::new(Mutex::new(SessionState::new(session.clone(), policy))));
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Result<Session> {
        Ok(self.get(id)?.lock().expect("session lock").session.clone())
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().expect("session map lock").keys().cloned().collect()
    }

    /// First unfinished prompt instance, or `None` once all are done.
    pub fn next_prompt(&self, id: &str) -> Result<Option<PromptView>> {
        let st = self.get(id)?;
        let st = st.lock().expect("session lock");
        let open: Vec<usize> = (0..st.session.instances.len()).filter(|&i| !st.complete(i)).collect();
        Ok(open.first().map(|&i| {
            let inst = st.session.instances[i];
            PromptView {
                instance: i,
                prompt: inst.prompt,
                text: st.session.prompts[inst.prompt].clone(),
                condition: inst.condition,
                typed: st.typed[i].clone(),
                remaining_instances: open.len(),
            }
        }))
    }

    /// Run the session policy on `context`; at most one candidate.
    pub fn suggest(&self, id: &str, instance: usize, context: &str) -> Result<Option<ServedSuggestion>> {
        let st = self.get(id)?;
        let mut st = st.lock().expect("session lock");
        if st.session.status != SessionStatus::Active {
            return Err(Error::Session(format!("session {id} is not active")));
        }
        let inst = *st
            .session
            .instances
            .get(instance)
            .ok_or_else(|| Error::Session(format!("no prompt instance {instance}")))?;
        let suggestion = if inst.condition == Condition::WithoutSuggestions {
            None
        } else {
            let state = EnvState::observe(context.to_owned(), &self.lm, &self.env.lm);
            let target = SentenceRecord::from_text(&st.session.prompts[inst.prompt]);
            let mut policy = st.policy.build(derive_seed(st.session.seed, st.served), self.env.acceptance);
            match policy.act(&state, &target) {
                AgentAction::Wait => None,
                AgentAction::Suggest(i) => state.candidates.get(i).map(|c| ServedSuggestion {
                    insertion: c.completion.clone(),
                    candidate: c.clone(),
                }),
            }
        };
        st.served += 1;
        let record = ServedRecord { instance, context: context.to_owned(), suggestion: suggestion.clone(), served_ms: now_ms() };
        append(&self.log_dir, id, &[LogRecord::Served(record)])?;
        Ok(suggestion)
    }

    /// Validate and append a batch atomically. Re-sent events with a known
    /// sequence number and identical content are acknowledged as duplicates.
    pub fn record_events(&self, id: &str, batch: &[EventIn]) -> Result<BatchAck> {
        let st = self.get(id)?;
        let mut st = st.lock().expect("session lock");
        let mut staged: Vec<KeyEvent> = Vec::new();
        let mut typed: HashMap<usize, String> = HashMap::new();
        let mut last_ts = st.last_ts;
        let mut last_seq = st.events.last().map(|e| e.seq);
        let mut duplicates = 0;
        for e in batch {
            if let Some(&i) = st.by_seq.get(&e.seq) {
                if st.events[i].same_input(e) {
                    duplicates += 1;
                    continue;
                }
                return Err(Error::Ordering(format!("sequence number {} reused with different content", e.seq)));
            }
            if last_seq.is_some_and(|s| e.seq <= s) {
                return Err(Error::Ordering(format!("sequence number {} after {}", e.seq, last_seq.unwrap_or(0))));
            }
            if st.session.status != SessionStatus::Active {
                return Err(Error::Session(format!("session {id} is not active")));
            }
            if !e.timestamp_ms.is_finite() || e.timestamp_ms < last_ts {
                return Err(Error::Ordering(format!("timestamp {} precedes {}", e.timestamp_ms, last_ts)));
            }
            let inst = *st
                .session
                .instances
                .get(e.instance)
                .ok_or_else(|| Error::Session(format!("no prompt instance {}", e.instance)))?;
            let prompt = &st.session.prompts[inst.prompt];
            let current = typed.entry(e.instance).or_insert_with(|| st.typed[e.instance].clone());
            if current == prompt {
                return Err(Error::Session(format!("prompt instance {} is already complete", e.instance)));
            }
            if e.context != *current {
                return Err(Error::Session(format!(
                    "context {:?} does not match the reconstructed text {:?}",
                    e.context, current
                )));
            }
            if inst.condition == Condition::WithoutSuggestions && e.suggestion_shown.is_some() {
                return Err(Error::contract("suggestion reported in a without-suggestions block"));
            }
            let prefix = parse_context(&e.context).1;
            let insertion = match &e.suggestion_shown {
                Some(c) => Some(insertion_for(c, prefix)?),
                None => None,
            };
            if matches!(e.key, Key::Accept | Key::Dismiss) && insertion.is_none() {
                return Err(Error::contract(format!("{:?} without a shown suggestion", e.key)));
            }
            let correct = match (&insertion, prompt.strip_prefix(e.context.as_str())) {
                (Some(ins), Some(rest)) => matches_remaining(rest, ins, self.env.acceptance),
                _ => false,
            };
            let ev = KeyEvent {
                session_id: id.to_owned(),
                seq: e.seq,
                timestamp_ms: e.timestamp_ms,
                instance: e.instance,
                condition: inst.condition,
                key: e.key,
                context: e.context.clone(),
                suggestion_shown: e.suggestion_shown.clone(),
                suggestion_correct: correct,
                accepted: e.key == Key::Accept,
                received_ms: now_ms(),
            };
            apply_key(current, &ev);
            last_ts = e.timestamp_ms;
            last_seq = Some(e.seq);
            staged.push(ev);
        }
        let recorded = staged.len();
        let mut records: Vec<LogRecord> = staged.iter().cloned().map(LogRecord::Event).collect();
        for ev in staged {
            st.apply(ev);
        }
        if recorded > 0 && (0..st.session.instances.len()).all(|i| st.complete(i)) {
            st.session.status = SessionStatus::Complete;
            records.push(LogRecord::Status { status: SessionStatus::Complete });
        }
        append(&self.log_dir, id, &records)?;
        Ok(BatchAck { recorded, duplicates, last_seq: st.events.last().map(|e| e.seq) })
    }

    /// Immutable snapshot of one session's log.
    pub fn log(&self, id: &str) -> Result<SessionLog> {
        let st = self.get(id)?;
        let st = st.lock().expect("session lock");
        Ok(SessionLog { session: st.session.clone(), events: st.events.clone() })
    }

    /// Snapshot of every session, ordered by id.
    pub fn logs(&self) -> Vec<SessionLog> {
        self.session_ids().iter().filter_map(|id| self.log(id).ok()).collect()
    }
}
