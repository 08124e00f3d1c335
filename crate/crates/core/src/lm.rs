//! Frequency word language model over a prefix trie.
//!
//! Scores interpolate a bigram estimate with the unigram estimate,
//! `score(w) = λ·P(w | prev) + (1 − λ)·P(w)`, and candidate probabilities are
//! normalized over every vocabulary word consistent with the typed prefix.
//! Without a usable previous word (sentence start, or a previous word that was
//! never followed by anything) the unigram estimate is used alone.
//!
//! # Model artifact layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic        4 bytes   "ACLM"
//! version      u32       1
//! vocab_len    u32
//!   word_len   u16       } repeated vocab_len times,
//!   word       bytes     } words in lexicographic order
//!   count      u64       }
//! bigram_len   u32
//!   prev       u32       } repeated bigram_len times, indices into the
//!   next       u32       } vocabulary block, sorted by (prev, next)
//!   count      u64       }
//! ```
//!
//! The trie is not stored; it is rebuilt on load.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{is_word_char, SentenceRecord};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"ACLM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    pub counts: BTreeMap<String, u64>,
    pub total_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BigramTable {
    pub counts: BTreeMap<(String, String), u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Characters acceptance would insert after the typed prefix.
    pub completion: String,
    pub full_words: Vec<String>,
    pub raw_prob: f64,
    pub norm_prob: f64,
}

impl Candidate {
    pub fn text(&self) -> String {
        self.full_words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub k: usize,
    pub lambda: f64,
    pub multiword: bool,
    pub beam_width: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { k: 1, lambda: 0.7, multiword: false, beam_width: 16 }
    }
}

impl LmConfig {
    pub fn with_k(k: usize) -> Self {
        LmConfig { k, beam_width: 16.max(k), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda must lie in [0, 1]"));
        }
        if self.beam_width < self.k {
            return Err(Error::config("beam_width must be >= k"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<char, usize>,
    mass: f64,
    terminal_mass: f64,
    terminal: Option<u32>,
    /// Word ids in this subtree by (count desc, word asc).
    ranked: Vec<u32>,
}

/// Character trie over the vocabulary; masses are unigram probabilities.
#[derive(Debug, Clone, Default)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
}

impl PrefixTrie {
    fn build(words: &[String], counts: &[u64], total: u64) -> Self {
        let mut nodes = vec![TrieNode::default()];
        let mut order: Vec<u32> = (0..words.len() as u32).collect();
        order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
        for &id in &order {
            let p = counts[id as usize] as f64 / total as f64;
            let mut node = 0;
            nodes[0].ranked.push(id);
            for c in words[id as usize].chars() {
                let next = match nodes[node].children.get(&c) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode::default());
                        let n = nodes.len() - 1;
                        nodes[node].children.insert(c, n);
                        n
                    }
                };
                node = next;
                nodes[node].ranked.push(id);
            }
            nodes[node].terminal = Some(id);
            nodes[node].terminal_mass = p;
        }
        // Masses bottom-up; children always have larger indices than parents.
        for i in (0..nodes.len()).rev() {
            let child_mass: f64 = nodes[i].children.values().map(|&c| nodes[c].mass).sum();
            nodes[i].mass = child_mass + nodes[i].terminal_mass;
        }
        PrefixTrie { nodes }
    }

    fn find(&self, prefix: &str) -> Option<usize> {
        let mut node = 0;
        for c in prefix.chars() {
            node = *self.nodes.get(node)?.children.get(&c)?;
        }
        Some(node)
    }

    /// Unigram probability mass of all words beginning with `prefix`.
    pub fn mass(&self, prefix: &str) -> f64 {
        self.find(prefix).map_or(0.0, |n| self.nodes[n].mass)
    }

    /// Number of vocabulary words beginning with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.find(prefix).map_or(0, |n| self.nodes[n].ranked.len())
    }

    pub fn root_mass(&self) -> f64 {
        self.nodes.first().map_or(0.0, |n| n.mass)
    }

    /// Checks `mass = Σ children + terminal` at every node.
    pub fn check_invariants(&self, tol: f64) -> bool {
        self.nodes.iter().all(|n| {
            let s: f64 = n.children.values().map(|&c| self.nodes[c].mass).sum();
            (n.mass - s - n.terminal_mass).abs() <= tol
        }) && (self.root_mass() - 1.0).abs() <= tol
    }
}

/// Split typed text into (previous complete word, in-progress word prefix).
pub fn parse_context(typed: &str) -> (Option<&str>, &str) {
    let split = typed
        .char_indices()
        .rev()
        .find(|&(_, c)| !is_word_char(c))
        .map_or(0, |(i, c)| i + c.len_utf8());
    let (head, prefix) = typed.split_at(split);
    let prev = head.split(|c: char| !is_word_char(c)).rfind(|t| !t.is_empty());
    (prev, prefix)
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    vocab: Vocabulary,
    bigrams: BigramTable,
    trie: PrefixTrie,
    words: Vec<String>,
    index: HashMap<String, u32>,
    counts: Vec<u64>,
    total: u64,
    successors: Vec<HashMap<u32, u64>>,
    successor_totals: Vec<u64>,
}

pub fn build_lm(sentences: &[SentenceRecord]) -> Result<LanguageModel> {
    if sentences.is_empty() {
        return Err(Error::Build("empty corpus".into()));
    }
    let mut vocab = Vocabulary::default();
    let mut bigrams = BigramTable::default();
    for s in sentences {
        for w in &s.words {
            *vocab.counts.entry(w.clone()).or_insert(0) += 1;
        }
        for pair in s.words.windows(2) {
            *bigrams.counts.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += 1;
        }
    }
    LanguageModel::from_counts(vocab.counts, bigrams.counts)
}

impl LanguageModel {
    pub fn from_counts(
        unigrams: BTreeMap<String, u64>,
        bigrams: BTreeMap<(String, String), u64>,
    ) -> Result<Self> {
        if unigrams.is_empty() {
            return Err(Error::Build("corpus contains no words".into()));
        }
        if unigrams.values().any(|&c| c == 0) {
            return Err(Error::Build("zero unigram count".into()));
        }
        let words: Vec<String> = unigrams.keys().cloned().collect();
        let index: HashMap<String, u32> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let counts: Vec<u64> = unigrams.values().copied().collect();
        let total: u64 = counts.iter().sum();
        let mut successors = vec![HashMap::new(); words.len()];
        let mut successor_totals = vec![0u64; words.len()];
        for ((a, b), &c) in &bigrams {
            let (Some(&ia), Some(&ib)) = (index.get(a), index.get(b)) else {
                return Err(Error::Build(format!("bigram ({a}, {b}) references unknown word")));
            };
            if c == 0 {
                return Err(Error::Build("zero bigram count".into()));
            }
            successors[ia as usize].insert(ib, c);
            successor_totals[ia as usize] += c;
        }
        let trie = PrefixTrie::build(&words, &counts, total);
        Ok(LanguageModel {
            vocab: Vocabulary { counts: unigrams, total_count: total },
            bigrams: BigramTable { counts: bigrams },
            trie,
            words,
            index,
            counts,
            total,
            successors,
            successor_totals,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn bigrams(&self) -> &BigramTable {
        &self.bigrams
    }

    pub fn trie(&self) -> &PrefixTrie {
        &self.trie
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn unigram(&self, word: &str) -> f64 {
        self.index.get(word).map_or(0.0, |&i| self.counts[i as usize] as f64 / self.total as f64)
    }

    /// The `n` most frequent words with their counts (ties lexicographic).
    pub fn most_frequent(&self, n: usize) -> Vec<(String, u64)> {
        self.trie.nodes[0]
            .ranked
            .iter()
            .take(n)
            .map(|&id| (self.words[id as usize].clone(), self.counts[id as usize]))
            .collect()
    }

    fn context_id(&self, prev: Option<&str>) -> Option<u32> {
        let id = *self.index.get(prev?)?;
        (self.successor_totals[id as usize] > 0).then_some(id)
    }

    fn score(&self, ctx: Option<u32>, id: u32, lambda: f64) -> f64 {
        let uni = self.counts[id as usize] as f64 / self.total as f64;
        match ctx {
            None => uni,
            Some(p) => {
                let c = self.successors[p as usize].get(&id).copied().unwrap_or(0);
                lambda * c as f64 / self.successor_totals[p as usize] as f64 + (1.0 - lambda) * uni
            }
        }
    }

    fn normalizer(&self, ctx: Option<u32>, node: usize, prefix: &str, lambda: f64) -> f64 {
        let uni_mass = self.trie.nodes[node].mass;
        match ctx {
            None => uni_mass,
            Some(p) => {
                let bi: u64 = self.successors[p as usize]
                    .iter()
                    .filter(|(&w, _)| self.words[w as usize].starts_with(prefix))
                    .map(|(_, &c)| c)
                    .sum();
                lambda * bi as f64 / self.successor_totals[p as usize] as f64 + (1.0 - lambda) * uni_mass
            }
        }
    }

    /// Full distribution over every word consistent with `prefix`, including a
    /// word equal to the prefix itself. Sums to one when nonempty.
    pub fn prefix_distribution(&self, prev: Option<&str>, prefix: &str, lambda: f64) -> Vec<(String, f64)> {
        let Some(node) = self.trie.find(prefix) else { return Vec::new() };
        let ctx = self.context_id(prev);
        let z = self.normalizer(ctx, node, prefix, lambda);
        self.trie.nodes[node]
            .ranked
            .iter()
            .map(|&id| (self.words[id as usize].clone(), self.score(ctx, id, lambda) / z))
            .collect()
    }

    /// Top-`limit` word completions by raw probability.
    fn top_words(&self, prev: Option<&str>, prefix: &str, lambda: f64, limit: usize) -> Vec<(u32, f64)> {
        let Some(node) = self.trie.find(prefix) else { return Vec::new() };
        let ctx = self.context_id(prev);
        let z = self.normalizer(ctx, node, prefix, lambda);
        let exact = self.trie.nodes[node].terminal.filter(|_| !prefix.is_empty());
        let succ = ctx.map(|p| &self.successors[p as usize]);
        let mut pool: Vec<u32> = Vec::new();
        if let Some(succ) = succ {
            pool.extend(
                succ.keys().copied().filter(|&w| self.words[w as usize].starts_with(prefix)),
            );
        }
        let mut fresh = 0;
        for &id in &self.trie.nodes[node].ranked {
            if fresh > limit {
                break;
            }
            if succ.is_some_and(|s| s.contains_key(&id)) {
                continue;
            }
            pool.push(id);
            fresh += 1;
        }
        let mut scored: Vec<(u32, f64)> = pool
            .into_iter()
            .filter(|&id| Some(id) != exact)
            .map(|id| (id, self.score(ctx, id, lambda) / z))
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then_with(|| self.words[a.0 as usize].cmp(&self.words[b.0 as usize]))
        });
        scored.truncate(limit);
        scored
    }

    /// Up to `k` single-word candidates completing `prefix`, descending raw
    /// probability. `norm_prob` equals `raw_prob` until renormalized.
    pub fn raw_candidates(&self, prev: Option<&str>, prefix: &str, config: &LmConfig) -> Vec<Candidate> {
        self.top_words(prev, prefix, config.lambda, config.k)
            .into_iter()
            .map(|(id, p)| {
                let word = &self.words[id as usize];
                Candidate {
                    completion: word[prefix.len()..].to_owned(),
                    full_words: vec![word.clone()],
                    raw_prob: p,
                    norm_prob: p,
                }
            })
            .collect()
    }

    /// Mixed one- and two-word candidates ranked by length-normalized
    /// probability; `raw_prob` carries the normalized value.
    pub fn beam_multiword(&self, prev: Option<&str>, prefix: &str, config: &LmConfig) -> Vec<Candidate> {
        let firsts = self.top_words(prev, prefix, config.lambda, config.beam_width);
        let mut pool: Vec<Candidate> = Vec::new();
        for &(id, p1) in &firsts {
            let w1 = &self.words[id as usize];
            let base = &w1[prefix.len()..];
            pool.push(Candidate {
                completion: base.to_owned(),
                full_words: vec![w1.clone()],
                raw_prob: p1,
                norm_prob: p1,
            });
            if p1 <= 0.0 {
                continue;
            }
            for (id2, p2) in self.top_words(Some(w1), "", config.lambda, config.beam_width) {
                if p2 <= 0.0 {
                    continue;
                }
                let w2 = &self.words[id2 as usize];
                let p = normalize_length(&[p1, p2]).expect("probabilities are positive");
                pool.push(Candidate {
                    completion: format!("{base} {w2}"),
                    full_words: vec![w1.clone(), w2.clone()],
                    raw_prob: p,
                    norm_prob: p,
                });
            }
        }
        pool.sort_by(|a, b| {
            b.raw_prob
                .total_cmp(&a.raw_prob)
                .then(a.full_words.len().cmp(&b.full_words.len()))
                .then_with(|| a.completion.cmp(&b.completion))
        });
        pool.truncate(config.k);
        renormalize_topk(pool)
    }

    /// The candidate slate the environment exposes for `typed`.
    pub fn candidates(&self, typed: &str, config: &LmConfig) -> Vec<Candidate> {
        let (prev, prefix) = parse_context(typed);
        if config.multiword {
            self.beam_multiword(prev, prefix, config)
        } else {
            renormalize_topk(self.raw_candidates(prev, prefix, config))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.words.len() as u32).to_le_bytes());
        for (w, c) in self.words.iter().zip(&self.counts) {
            out.extend_from_slice(&(w.len() as u16).to_le_bytes());
            out.extend_from_slice(w.as_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        let mut entries: Vec<(u32, u32, u64)> = self
            .successors
            .iter()
            .enumerate()
            .flat_map(|(a, m)| m.iter().map(move |(&b, &c)| (a as u32, b, c)))
            .collect();
        entries.sort_unstable();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (a, b, c) in entries {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let mut words = Vec::with_capacity(n);
        let mut unigrams = BTreeMap::new();
        for _ in 0..n {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len)?;
            let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut buf)?;
            let w = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
            let c = read_u64(&mut r)?;
            words.push(w.clone());
            unigrams.insert(w, c);
        }
        let m = read_u32(&mut r)? as usize;
        let mut bigrams = BTreeMap::new();
        for _ in 0..m {
            let a = read_u32(&mut r)? as usize;
            let b = read_u32(&mut r)? as usize;
            let c = read_u64(&mut r)?;
            let (Some(wa), Some(wb)) = (words.get(a), words.get(b)) else {
                return Err(Error::Format("bigram index out of range".into()));
            };
            bigrams.insert((wa.clone(), wb.clone()), c);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Self::from_counts(unigrams, bigrams)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized artifact.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated model file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Rescale so `norm_prob` sums to one; ordering and `raw_prob` are kept.
pub fn renormalize_topk(mut candidates: Vec<Candidate>) -> Vec<Candidate> {
    let z: f64 = candidates.iter().map(|c| c.raw_prob).sum();
    for c in &mut candidates {
        c.norm_prob = c.raw_prob / z;
    }
    candidates
}

/// Geometric mean of a multi-word suggestion's chain probabilities.
pub fn normalize_length(word_probs: &[f64]) -> Result<f64> {
    if word_probs.is_empty() {
        return Err(Error::Domain("no word probabilities".into()));
    }
    if let Some(p) = word_probs.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Domain(format!("probability {p} outside (0, 1]")));
    }
    let product: f64 = word_probs.iter().product();
    Ok(match word_probs.len() {
        1 => product,
        2 => product.sqrt(),
        m => product.powf(1.0 / m as f64),
    })
}
