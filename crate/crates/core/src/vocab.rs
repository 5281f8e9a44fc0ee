//! Caption text normalization and the token vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "<start>";
pub const STOP_TOKEN: &str = "<stop>";
pub const UNK_TOKEN: &str = "<unk>";

/// Words seen fewer times than this in the training captions are dropped.
pub const DEFAULT_MIN_COUNT: usize = 5;

/// Lowercases, drops every character outside `[a-z0-9]` (whitespace acts as
/// the separator) and splits into tokens.
pub fn normalize_text(raw: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in raw.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_lowercase() || ch.is_ascii_digit() {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index_of: HashMap<String, usize>,
}

impl Vocabulary {
    pub const START_ID: usize = 0;
    pub const STOP_ID: usize = 1;
    pub const UNK_ID: usize = 2;

    /// Builds the vocabulary from a tokenized corpus. Tokens are kept when they
    /// occur at least `min_count` times and are ordered by descending
    /// frequency, then lexicographically, after the three sentinels.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Param("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !is_sentinel(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let tokens = [START_TOKEN, STOP_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its index-ordered token list (as stored in a
    /// checkpoint). The first three entries must be the sentinels.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[Self::START_ID] != START_TOKEN
            || tokens[Self::STOP_ID] != STOP_TOKEN
            || tokens[Self::UNK_ID] != UNK_TOKEN
        {
            return Err(Error::Format(
                "vocabulary must begin with <start>, <stop>, <unk>".into(),
            ));
        }
        let mut index_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index_of.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.index_of.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn start_id(&self) -> usize {
        Self::START_ID
    }

    pub fn stop_id(&self) -> usize {
        Self::STOP_ID
    }

    pub fn unk_id(&self) -> usize {
        Self::UNK_ID
    }

    /// Maps tokens to indices (unknown words become `<unk>`) and wraps the
    /// sequence in `<start>` … `<stop>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(Self::START_ID);
        ids.extend(
            tokens
                .iter()
                .map(|t| self.index(t.as_ref()).unwrap_or(Self::UNK_ID)),
        );
        ids.push(Self::STOP_ID);
        ids
    }

    /// Inverse of [`Vocabulary::encode`] for in-vocabulary words; sentinels at
    /// the ends are stripped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        let inner = match ids {
            [Self::START_ID, rest @ ..] => rest,
            _ => ids,
        };
        let inner = match inner {
            [rest @ .., Self::STOP_ID] => rest,
            _ => inner,
        };
        inner
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_owned())
            .collect()
    }
}

fn is_sentinel(t: &str) -> bool {
    t == START_TOKEN || t == STOP_TOKEN || t == UNK_TOKEN
}

pub fn encode_caption<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(tokens)
}

pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocabulary> {
    Vocabulary::build(corpus, min_count)
}
