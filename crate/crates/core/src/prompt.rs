//! Lexicon-driven noun extraction from a grounding query.

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// A set of lowercase terms loaded from a one-term-per-line file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    terms: HashSet<String>,
}

impl Lexicon {
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let terms = terms.into_iter().map(|t| t.as_ref().trim().to_lowercase()).filter(|t| !t.is_empty()).collect();
        Self { terms }
    }

    /// Parses lexicon text: one term per line, `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        Self::new(lexicon_terms(text))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, term: &str) -> bool {
        self.terms.contains(term)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Terms of a lexicon file in file order, lowercased, without comments,
/// blanks or repeats.
pub fn lexicon_terms(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        let term = line.split('#').next().unwrap_or("").trim().to_lowercase();
        if !term.is_empty() && !out.contains(&term) {
            out.push(term);
        }
    }
    out
}

/// Ordered, duplicate-free target nouns extracted from a query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NounSet {
    nouns: Vec<String>,
}

impl NounSet {
    pub fn new<I, S>(nouns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = Self::default();
        for n in nouns {
            set.push(n.into());
        }
        set
    }

    fn push(&mut self, noun: String) {
        if !self.nouns.contains(&noun) {
            self.nouns.push(noun);
        }
    }

    pub fn len(&self) -> usize {
        self.nouns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.nouns
    }

    pub fn index_of(&self, noun: &str) -> Option<usize> {
        self.nouns.iter().position(|n| n == noun)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.nouns.iter().map(String::as_str)
    }
}

/// Splits on whitespace, strips non-alphanumeric characters from token edges
/// and lowercases.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|tok| !tok.is_empty())
        .collect()
}

/// Walks the query tokens and keeps those found in `nouns`. A token in
/// `modifiers` immediately followed by a noun merges with it into one phrase
/// ("red umbrella").
pub fn extract_nouns(query: &str, nouns: &Lexicon, modifiers: Option<&Lexicon>) -> NounSet {
    let tokens = tokenize(query);
    let mut out = NounSet::default();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        let is_modifier = modifiers.is_some_and(|m| m.contains(tok));
        if is_modifier && tokens.get(i + 1).is_some_and(|next| nouns.contains(next)) {
            out.push(format!("{tok} {}", tokens[i + 1]));
            i += 2;
            continue;
        }
        if nouns.contains(tok) {
            out.push(tok.clone());
        }
        i += 1;
    }
    out
}
