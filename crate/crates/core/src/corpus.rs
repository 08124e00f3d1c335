//! Sentence ingestion and admissibility filtering.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// True for characters that belong to word tokens: letters and apostrophes.
pub fn is_word_char(c: char) -> bool {
    c.is_alphabetic() || c == '\''
}

/// Lowercase, trim, and fold the typographic right single quote to `'`.
pub fn normalize(line: &str) -> String {
    line.trim()
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c == '\u{2019}' { '\'' } else { c })
        .collect()
}

/// Split text into word tokens: maximal runs of letters and apostrophes.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !is_word_char(c))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    pub words: Vec<String>,
    pub char_count: usize,
}

impl SentenceRecord {
    /// Build a record from already-admissible text (normalization is applied,
    /// no filtering).
    pub fn from_text(text: &str) -> Self {
        let text = normalize(text);
        let words = tokenize(&text);
        let char_count = text.chars().count();
        SentenceRecord { text, words, char_count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub max_words: usize,
    pub allowed_chars: BTreeSet<char>,
    pub max_oov_rate: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let allowed_chars = ('a'..='z').chain(",.'?! ".chars()).collect();
        FilterConfig { max_words: 10, allowed_chars, max_oov_rate: 1.0 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_words == 0 {
            return Err(Error::config("max_words must be at least 1"));
        }
        if self.allowed_chars.is_empty() {
            return Err(Error::config("allowed character set is empty"));
        }
        if !self.allowed_chars.contains(&' ') {
            return Err(Error::config("allowed character set must include space"));
        }
        if !(0.0..=1.0).contains(&self.max_oov_rate) {
            return Err(Error::config("max_oov_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReasons {
    pub too_long: usize,
    pub bad_char: usize,
    pub oov: usize,
    pub empty: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub input_count: usize,
    pub kept_count: usize,
    pub drop_reasons: DropReasons,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Empty,
    BadChar,
    TooLong,
    Oov,
}

pub fn judge(
    text: &str,
    words: &[String],
    config: &FilterConfig,
    vocab: Option<&HashSet<String>>,
) -> Verdict {
    if words.is_empty() {
        return Verdict::Empty;
    }
    if !text.chars().all(|c| config.allowed_chars.contains(&c)) {
        return Verdict::BadChar;
    }
    if words.len() > config.max_words {
        return Verdict::TooLong;
    }
    if let Some(vocab) = vocab {
        let oov = words.iter().filter(|w| !vocab.contains(w.as_str())).count();
        if oov as f64 / words.len() as f64 > config.max_oov_rate {
            return Verdict::Oov;
        }
    }
    Verdict::Keep
}

/// Keep the admissible lines, in order, duplicates included.
pub fn filter_corpus<S: AsRef<str>>(lines: &[S], config: &FilterConfig) -> Result<Vec<SentenceRecord>> {
    filter_corpus_report(lines, config, None).map(|(kept, _)| kept)
}

/// Like [`filter_corpus`], with an optional vocabulary for the OOV screen and a
/// drop-reason summary.
pub fn filter_corpus_report<S: AsRef<str>>(
    lines: &[S],
    config: &FilterConfig,
    vocab: Option<&HashSet<String>>,
) -> Result<(Vec<SentenceRecord>, FilterSummary)> {
    config.validate()?;
    let mut summary = FilterSummary { input_count: lines.len(), ..Default::default() };
    let mut kept = Vec::new();
    for line in lines {
        let record = SentenceRecord::from_text(line.as_ref());
        match judge(&record.text, &record.words, config, vocab) {
            Verdict::Keep => kept.push(record),
            Verdict::Empty => summary.drop_reasons.empty += 1,
            Verdict::BadChar => summary.drop_reasons.bad_char += 1,
            Verdict::TooLong => summary.drop_reasons.too_long += 1,
            Verdict::Oov => summary.drop_reasons.oov += 1,
        }
    }
    summary.kept_count = kept.len();
    Ok((kept, summary))
}

pub fn read_lines(path: &std::path::Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Deterministic three-way split: every `stride`-th sentence goes to the
/// held-out evaluation set, the one after it to validation, the rest to
/// training.
#[derive(Debug, Clone, Default)]
pub struct CorpusSplit {
    pub train: Vec<SentenceRecord>,
    pub validation: Vec<SentenceRecord>,
    pub eval: Vec<SentenceRecord>,
}

pub fn split_corpus(records: &[SentenceRecord], stride: usize) -> CorpusSplit {
    let stride = stride.max(3);
    let mut split = CorpusSplit::default();
    for (i, r) in records.iter().enumerate() {
        match i % stride {
            0 => split.eval.push(r.clone()),
            1 => split.validation.push(r.clone()),
            _ => split.train.push(r.clone()),
        }
    }
    split
}
