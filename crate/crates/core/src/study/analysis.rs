//! Paired cognitive-load samples, load-parameter estimation and the
//! acceptance-versus-exposure fatigue curves.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Condition, Key, SessionLog};
use crate::corpus::is_word_char;
use crate::error::{Error, Result};
use crate::lm::parse_context;
use crate::mdp::{insertion_for, TimingConstants};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub session_id: String,
    pub context_hash: String,
    pub key: char,
    pub dt_with_ms: f64,
    pub dt_without_ms: f64,
    pub load_ms: f64,
    pub suggestion_len: usize,
    pub suggestion_correct: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    pub samples: Vec<PairedSample>,
    /// With-suggestion keys that never occurred without suggestions.
    pub unmatched_with: usize,
    pub unmatched_without: usize,
    /// Keys dropped because a backspace occurred earlier in the same word.
    pub excluded_after_backspace: usize,
}

pub fn context_hash(context: &str) -> String {
    hex::encode(&Sha256::digest(context.as_bytes())[..8])
}

#[derive(Default)]
struct Cell {
    sum: f64,
    n: usize,
}

impl Cell {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }
}

type WithKey = (String, char, String, bool);

/// Pair each (context, key) typed with a suggestion on screen against the
/// same (context, key) typed without suggestions, per session. Repeated
/// intervals are averaged within each condition before differencing.
pub fn paired_samples(logs: &[SessionLog]) -> PairingReport {
    let mut report = PairingReport::default();
    for log in logs {
        let mut with: BTreeMap<WithKey, Cell> = BTreeMap::new();
        let mut without: BTreeMap<(String, char), Cell> = BTreeMap::new();
        let mut by_instance: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in log.events.iter().enumerate() {
            by_instance.entry(e.instance).or_default().push(i);
        }
        for (instance, idx) in by_instance {
            let cond = log.condition(instance);
            let mut dirty = false;
            let mut prev: Option<(f64, Key)> = None;
            for i in idx {
                let e = &log.events[i];
                let interval = prev.and_then(|(t, k)| (k != Key::Dismiss).then_some(e.timestamp_ms - t));
                prev = Some((e.timestamp_ms, e.key));
                let c = match e.key {
                    Key::Backspace => {
                        dirty = true;
                        continue;
                    }
                    Key::Accept => {
                        dirty = false;
                        continue;
                    }
                    Key::Dismiss => continue,
                    Key::Char(c) => c,
                };
                let was_dirty = dirty;
                if !is_word_char(c) {
                    dirty = false;
                }
                if was_dirty {
                    report.excluded_after_backspace += 1;
                    continue;
                }
                let Some(dt) = interval.filter(|dt| *dt > 0.0) else { continue };
                match (cond, &e.suggestion_shown) {
                    (Condition::WithSuggestions, Some(s)) => {
                        let Ok(ins) = insertion_for(s, parse_context(&e.context).1) else { continue };
                        with.entry((e.context.clone(), c, ins, e.suggestion_correct)).or_default().push(dt);
                    }
                    (Condition::WithSuggestions, None) => {}
                    (Condition::WithoutSuggestions, _) => without.entry((e.context.clone(), c)).or_default().push(dt),
                }
            }
        }
        let mut matched: BTreeMap<(String, char), ()> = BTreeMap::new();
        for ((context, key, ins, correct), cell) in &with {
            let k = (context.clone(), *key);
            let Some(base) = without.get(&k) else {
                report.unmatched_with += 1;
                continue;
            };
            matched.insert(k, ());
            let (w, wo) = (cell.mean(), base.mean());
            report.samples.push(PairedSample {
                session_id: log.session.id.clone(),
                context_hash: context_hash(context),
                key: *key,
                dt_with_ms: w,
                dt_without_ms: wo,
                load_ms: w - wo,
                suggestion_len: ins.chars().count(),
                suggestion_correct: *correct,
            });
        }
        report.unmatched_without += without.keys().filter(|k| !matched.contains_key(*k)).count();
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub ms: f64,
    pub ci95_ms: f64,
    /// `ms` in units of the per-character write time.
    pub value: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadEstimate {
    pub char_write_ms: f64,
    pub n_samples: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub mean_load_ms: f64,
    /// Per-character load (slope on suggestion length).
    pub alpha: Coefficient,
    pub beta_correct: Option<Coefficient>,
    pub beta_incorrect: Option<Coefficient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRow {
    pub quantity: String,
    pub ms: f64,
    pub ci95_ms: f64,
    pub value: f64,
    pub ci95: f64,
    pub n: usize,
}

impl LoadEstimate {
    pub fn rows(&self) -> Vec<LoadRow> {
        let row = |q: &str, c: &Coefficient, n| LoadRow {
            quantity: q.into(),
            ms: c.ms,
            ci95_ms: c.ci95_ms,
            value: c.value,
            ci95: c.ci95,
            n,
        };
        let mut out = vec![row("alpha", &self.alpha, self.n_samples)];
        if let Some(c) = &self.beta_correct {
            out.push(row("beta_correct", c, self.n_correct));
        }
        if let Some(c) = &self.beta_incorrect {
            out.push(row("beta_incorrect", c, self.n_incorrect));
        }
        out
    }
}

/// Least squares of load on suggestion length with one intercept per
/// correctness class: `load = slope·len + b_correct·[correct] +
/// b_incorrect·[incorrect]`. Coefficients are reported in ms and divided by
/// the per-character write time.
pub fn estimate_load(samples: &[PairedSample], timing: &TimingConstants) -> Result<LoadEstimate> {
    let n = samples.len();
    let n_correct = samples.iter().filter(|s| s.suggestion_correct).count();
    let n_incorrect = n - n_correct;
    let mut lengths: Vec<usize> = samples.iter().map(|s| s.suggestion_len).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let classes = usize::from(n_correct > 0) + usize::from(n_incorrect > 0);
    let p = 1 + classes;
    if lengths.len() < 2 || n <= p {
        return Err(Error::Estimation(format!(
            "need at least 2 distinct suggestion lengths and more than {p} samples; got {n} samples, {} lengths \
             ({n_correct} correct, {n_incorrect} incorrect)",
            lengths.len()
        )));
    }
    let mut x = DMatrix::<f64>::zeros(n, p);
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.load_ms));
    for (i, s) in samples.iter().enumerate() {
        x[(i, 0)] = s.suggestion_len as f64;
        let col = match (s.suggestion_correct, n_correct > 0) {
            (true, _) => 1,
            (false, true) => 2,
            (false, false) => 1,
        };
        x[(i, col)] = 1.0;
    }
    let xtx = x.transpose() * &x;
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::Estimation("singular design: suggestion length is collinear with class".into()))?;
    let coef = &inv * (x.transpose() * &y);
    let resid = &y - &x * &coef;
    let sigma2 = resid.norm_squared() / (n - p) as f64;
    let w = timing.char_write_ms;
    let make = |j: usize| {
        let se = (sigma2 * inv[(j, j)]).max(0.0).sqrt();
        Coefficient { ms: coef[j], ci95_ms: 1.96 * se, value: coef[j] / w, ci95: 1.96 * se / w }
    };
    Ok(LoadEstimate {
        char_write_ms: w,
        n_samples: n,
        n_correct,
        n_incorrect,
        mean_load_ms: y.mean(),
        alpha: make(0),
        beta_correct: (n_correct > 0).then(|| make(1)),
        beta_incorrect: (n_incorrect > 0).then(|| make(if n_correct > 0 { 2 } else { 1 })),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FatigueBucket {
    pub curve: String,
    /// Cumulative prior exposures, `[bin_start, bin_end)`.
    pub bin_start: usize,
    pub bin_end: usize,
    pub n: usize,
    pub accepted: usize,
    pub rate: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FatigueCurves {
    /// Binned by the number of suggestions shown earlier in the session.
    pub all: Vec<FatigueBucket>,
    /// Binned by the number of incorrect suggestions shown earlier.
    pub incorrect: Vec<FatigueBucket>,
}

fn buckets(curve: &str, points: &[(usize, bool)], width: usize) -> Vec<FatigueBucket> {
    let mut bins: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(count, accepted) in points {
        let b = bins.entry(count / width).or_insert((0, 0));
        b.0 += 1;
        b.1 += usize::from(accepted);
    }
    bins.into_iter()
        .map(|(b, (n, acc))| {
            let rate = acc as f64 / n as f64;
            FatigueBucket {
                curve: curve.into(),
                bin_start: b * width,
                bin_end: (b + 1) * width,
                n,
                accepted: acc,
                rate,
                ci95: 1.96 * (rate * (1.0 - rate) / n as f64).sqrt(),
            }
        })
        .collect()
}

/// Acceptance rate of correct suggestions against the cumulative number of
/// suggestions (all, and incorrect only) the participant has already seen.
pub fn fatigue_curve(logs: &[SessionLog], bin_width: usize) -> Result<FatigueCurves> {
    if bin_width == 0 {
        return Err(Error::config("bin width must be positive"));
    }
    let mut all = Vec::new();
    let mut incorrect = Vec::new();
    for log in logs {
        let (mut seen, mut seen_wrong) = (0usize, 0usize);
        for e in &log.events {
            if log.condition(e.instance) != Condition::WithSuggestions || e.suggestion_shown.is_none() {
                continue;
            }
            if e.suggestion_correct {
                all.push((seen, e.accepted));
                incorrect.push((seen_wrong, e.accepted));
            } else {
                seen_wrong += 1;
            }
            seen += 1;
        }
    }
    Ok(FatigueCurves { all: buckets("all", &all, bin_width), incorrect: buckets("incorrect", &incorrect, bin_width) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyAnalysis {
    pub sessions: usize,
    pub paired_samples: usize,
    pub unmatched_with: usize,
    pub unmatched_without: usize,
    pub excluded_after_backspace: usize,
    pub load: Option<LoadEstimate>,
    /// Why `load` is absent, when it is.
    pub load_error: Option<String>,
    pub fatigue: FatigueCurves,
}

/// Pairing, load estimation and fatigue curves in one pass over `logs`.
pub fn analyze(logs: &[SessionLog], timing: &TimingConstants, bin_width: usize) -> Result<StudyAnalysis> {
    let pairing = paired_samples(logs);
    let (load, load_error) = match estimate_load(&pairing.samples, timing) {
        Ok(l) => (Some(l), None),
        Err(Error::Estimation(msg)) => (None, Some(msg)),
        Err(e) => return Err(e),
    };
    Ok(StudyAnalysis {
        sessions: logs.len(),
        paired_samples: pairing.samples.len(),
        unmatched_with: pairing.unmatched_with,
        unmatched_without: pairing.unmatched_without,
        excluded_after_backspace: pairing.excluded_after_backspace,
        load,
        load_error,
        fatigue: fatigue_curve(logs, bin_width)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(len: usize, correct: bool, load: f64) -> PairedSample {
        PairedSample {
            session_id: "s".into(),
            context_hash: String::new(),
            key: 'a',
            dt_with_ms: 200.0 + load,
            dt_without_ms: 200.0,
            load_ms: load,
            suggestion_len: len,
            suggestion_correct: correct,
        }
    }

    #[test]
    fn exact_planted_recovery() {
        let t = TimingConstants::default();
        let samples: Vec<_> = (0..200)
            .map(|i| {
                let len = 1 + i % 7;
                let correct = i % 3 == 0;
                sample(len, correct, 40.0 * len as f64 + if correct { 10.0 } else { 50.0 })
            })
            .collect();
        let est = estimate_load(&samples, &t).unwrap();
        assert!((est.alpha.value - 40.0 / 521.0).abs() < 1e-9);
        assert!((est.beta_correct.unwrap().value - 10.0 / 521.0).abs() < 1e-9);
        assert!((est.beta_incorrect.unwrap().value - 50.0 / 521.0).abs() < 1e-9);
        assert_eq!(est.n_correct + est.n_incorrect, est.n_samples);
        assert_eq!(est.rows().len(), 3);
    }

    #[test]
    fn single_class_and_errors() {
        let t = TimingConstants::default();
        let samples: Vec<_> = (0..20).map(|i| sample(1 + i % 4, false, 30.0)).collect();
        let est = estimate_load(&samples, &t).unwrap();
        assert!(est.alpha.ms.abs() < 1e-9 && est.beta_correct.is_none());
        assert!((est.beta_incorrect.unwrap().ms - 30.0).abs() < 1e-9);
        let same_len: Vec<_> = (0..20).map(|_| sample(3, false, 30.0)).collect();
        assert!(matches!(estimate_load(&same_len, &t), Err(Error::Estimation(_))));
        assert!(matches!(estimate_load(&[], &t), Err(Error::Estimation(_))));
    }

    #[test]
    fn empty_logs_give_empty_outputs() {
        assert!(paired_samples(&[]).samples.is_empty());
        assert_eq!(fatigue_curve(&[], 10).unwrap(), FatigueCurves::default());
        assert!(fatigue_curve(&[], 0).is_err());
    }

    #[test]
    fn bucket_rates_and_ci() {
        let pts: Vec<(usize, bool)> = (0..100).map(|i| (i, i % 2 == 0)).collect();
        let b = buckets("all", &pts, 50);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.rate == 0.5 && (0.0..=1.0).contains(&x.rate)));
        assert!((b[0].ci95 - 1.96 * (0.25f64 / 50.0).sqrt()).abs() < 1e-12);
    }
}
