#![allow(dead_code)]

use std::path::PathBuf;

use autocomplete_core::corpus::{filter_corpus, read_lines, split_corpus, FilterConfig, SentenceRecord};
use autocomplete_core::lm::{build_lm, LanguageModel};

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

pub struct Desk {
    pub lm: LanguageModel,
    pub train: Vec<SentenceRecord>,
    pub validation: Vec<SentenceRecord>,
    pub eval: Vec<SentenceRecord>,
}

pub fn desk() -> Desk {
    let lines = read_lines(&data("desk_corpus.txt")).unwrap();
    let records = filter_corpus(&lines, &FilterConfig::default()).unwrap();
    let lm = build_lm(&records).unwrap();
    let s = split_corpus(&records, 10);
    Desk { lm, train: s.train, validation: s.validation, eval: s.eval }
}

pub fn prompts() -> Vec<String> {
    read_lines(&data("study_prompts.txt")).unwrap()
}

pub fn records(texts: &[&str]) -> Vec<SentenceRecord> {
    texts.iter().map(|t| SentenceRecord::from_text(t)).collect()
}
