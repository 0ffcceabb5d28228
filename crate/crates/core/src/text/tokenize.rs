use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A post split into sentences of tokens, truncated to the configured limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedPost {
    pub id: String,
    pub text: String,
    /// Sentence strings as fed to the sentence embedder, parallel to `sentences`.
    pub sentence_texts: Vec<String>,
    pub sentences: Vec<Vec<String>>,
    pub label: Option<usize>,
}

fn boundary() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[.!?]+\s+").expect("static regex"))
}

/// Splits after every run of `.`, `!` or `?` that is followed by whitespace.
/// The punctuation stays with its sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    for m in boundary().find_iter(text) {
        let end = m.start() + m.as_str().trim_end().len();
        let s = text[start..end].trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
        start = m.end();
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// Whitespace tokenization with punctuation stripped from token edges.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl TokenizedPost {
    /// Keeps at most `max_sentences` non-empty sentences of at most `max_tokens` tokens each.
    pub fn new(
        id: impl Into<String>,
        text: &str,
        label: Option<usize>,
        max_sentences: usize,
        max_tokens: usize,
    ) -> Result<Self> {
        let id = id.into();
        if max_sentences == 0 || max_tokens == 0 {
            return Err(Error::contract("sentence and token limits must be at least 1"));
        }
        let mut sentence_texts = Vec::new();
        let mut sentences = Vec::new();
        for s in split_sentences(text) {
            let mut toks = tokenize(&s);
            if toks.is_empty() {
                continue;
            }
            toks.truncate(max_tokens);
            sentence_texts.push(s);
            sentences.push(toks);
            if sentences.len() == max_sentences {
                break;
            }
        }
        if sentences.is_empty() {
            return Err(Error::Validation(format!("post {id:?} has no tokens")));
        }
        Ok(TokenizedPost {
            id,
            text: text.trim().to_string(),
            sentence_texts,
            sentences,
            label,
        })
    }

    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }
}
