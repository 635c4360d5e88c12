//! Gender-indicator neutralization and excerpt extraction.
//!
//! Tokenization splits on whitespace and detaches every punctuation
//! character as its own token. The single exception is an initial: one
//! uppercase letter directly followed by `.` stays a single token (`J.`), so
//! it is neither split nor mistaken for a sentence end.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_FIRST_NAMES: &str = include_str!("../data/first_names.txt");

pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_alphanumeric() {
                // Initial: a lone capital directly followed by a period.
                let at_word_start = word.is_empty() && (i == 0 || !chars[i - 1].is_alphanumeric());
                let lone = chars.get(i + 1) == Some(&'.')
                    && chars.get(i + 2).is_none_or(|n| !n.is_alphanumeric());
                if c.is_uppercase() && at_word_start && lone {
                    tokens.push(format!("{c}."));
                    i += 2;
                    continue;
                }
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            }
            i += 1;
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

pub fn is_punctuation(token: &str) -> bool {
    !token.chars().any(char::is_alphanumeric)
}

/// The group every explicit indicator is mapped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetGroup {
    Female,
    Male,
}

impl TargetGroup {
    /// Indicator replacements for this target, keyed by lowercase token.
    pub fn default_indicator_map(self) -> BTreeMap<String, String> {
        let pairs: &[(&str, &str)] = match self {
            TargetGroup::Female => &[
                ("he", "she"),
                ("him", "her"),
                ("his", "her"),
                ("himself", "herself"),
                ("mr", "mrs"),
            ],
            TargetGroup::Male => &[
                ("she", "he"),
                ("her", "his"),
                ("hers", "his"),
                ("herself", "himself"),
                ("mrs", "mr"),
                ("ms", "mr"),
                ("miss", "mr"),
            ],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeutralizeConfig {
    pub target_group: TargetGroup,
    pub neutral_first_name: String,
    pub first_names: BTreeSet<String>,
    pub indicator_map: BTreeMap<String, String>,
}

impl NeutralizeConfig {
    /// Built-in first-name list, default indicator map, neutral name "Sam".
    pub fn new(target_group: TargetGroup) -> Self {
        Self {
            target_group,
            neutral_first_name: "Sam".into(),
            first_names: DEFAULT_FIRST_NAMES.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect(),
            indicator_map: target_group.default_indicator_map(),
        }
    }

    /// Replaces the first-name list with the file at `path` (one name per line).
    pub fn load_first_names(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.first_names = text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        Ok(self)
    }

    /// Replaces the indicator map with a JSON object `{"she": "he", ...}`.
    pub fn load_indicator_map(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let map: BTreeMap<String, String> = crate::dataio::read_json(path)?;
        self.indicator_map = map.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect();
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.neutral_first_name.trim().is_empty() {
            return Err(Error::invalid("neutral first name must be non-empty"));
        }
        if let Some(k) = self.indicator_map.keys().find(|k| k.to_lowercase() != **k) {
            return Err(Error::invalid(format!("indicator key {k:?} is not lowercase")));
        }
        // A chain a→b, b→c would make neutralization non-idempotent.
        if let Some(v) = self.indicator_map.values().find(|v| {
            let v = v.to_lowercase();
            self.indicator_map.get(&v).is_some_and(|w| w.to_lowercase() != v)
        }) {
            return Err(Error::invalid(format!("indicator replacement {v:?} is itself remapped")));
        }
        Ok(())
    }
}

/// Copies the capitalization pattern of `original` onto `replacement`.
fn match_case(original: &str, replacement: &str) -> String {
    let letters: Vec<char> = original.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        replacement.to_uppercase()
    } else if letters.first().is_some_and(|c| c.is_uppercase()) {
        let mut chars = replacement.chars();
        match chars.next() {
            Some(first) => first.to_uppercase().chain(chars.flat_map(char::to_lowercase)).collect(),
            None => String::new(),
        }
    } else {
        replacement.to_lowercase()
    }
}

/// Replaces first names and explicit gender indicators token by token.
pub fn neutralize(tokens: &[String], cfg: &NeutralizeConfig) -> Vec<String> {
    tokens
        .iter()
        .map(|tok| {
            let lower = tok.to_lowercase();
            if cfg.first_names.contains(&lower) {
                match_case(tok, &cfg.neutral_first_name)
            } else if let Some(rep) = cfg.indicator_map.get(&lower) {
                match_case(tok, rep)
            } else {
                tok.clone()
            }
        })
        .collect()
}

/// Excerpt-extraction modes, from coarse to fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcerptMode {
    WholeText,
    SentencesMin6,
    Clauses,
    Words,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcerptSpec {
    pub mode: ExcerptMode,
    pub min_words: usize,
}

impl ExcerptSpec {
    pub fn new(mode: ExcerptMode) -> Self {
        Self { mode, min_words: 6 }
    }
}

/// A token span `[start, end)` of the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excerpt {
    pub start: usize,
    pub end: usize,
    pub tokens: Vec<String>,
}

impl Excerpt {
    fn from_span(tokens: &[String], start: usize, end: usize) -> Self {
        Self { start, end, tokens: tokens[start..end].to_vec() }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

const CLAUSE_BREAKS: [&str; 6] = [",", ";", ":", "and", "but", "or"];

fn is_sentence_end(tok: &str) -> bool {
    tok == "."
}

pub fn extract_excerpts(tokens: &[String], spec: &ExcerptSpec) -> Vec<Excerpt> {
    if tokens.is_empty() {
        return Vec::new();
    }
    let min_words = spec.min_words.max(1);
    match spec.mode {
        ExcerptMode::WholeText => vec![Excerpt::from_span(tokens, 0, tokens.len())],
        ExcerptMode::SentencesMin6 => {
            let mut out = Vec::new();
            let mut start = 0;
            for (i, tok) in tokens.iter().enumerate() {
                if is_sentence_end(tok) {
                    let words = tokens[start..i].iter().filter(|t| !is_punctuation(t)).count();
                    if words >= min_words {
                        out.push(Excerpt::from_span(tokens, start, i + 1));
                    }
                    start = i + 1;
                }
            }
            out
        }
        ExcerptMode::Clauses => {
            let mut out = Vec::new();
            let mut start = 0;
            let flush = |start: usize, end: usize, out: &mut Vec<Excerpt>| {
                if end >= start + 2 {
                    out.push(Excerpt::from_span(tokens, start, end));
                }
            };
            for (i, tok) in tokens.iter().enumerate() {
                let lower = tok.to_lowercase();
                if is_sentence_end(tok) || CLAUSE_BREAKS.contains(&lower.as_str()) {
                    flush(start, i, &mut out);
                    start = i + 1;
                }
            }
            flush(start, tokens.len(), &mut out);
            out
        }
        ExcerptMode::Words => tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| !is_punctuation(t))
            .map(|(i, _)| Excerpt::from_span(tokens, i, i + 1))
            .collect(),
    }
}
