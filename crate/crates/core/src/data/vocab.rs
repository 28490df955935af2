use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const CTX: usize = 4;
pub const N_SPECIAL: usize = 5;

/// Uppercase, so lowercasing tokenization never produces them.
pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["<PAD>", "<UNK>", "<SOS>", "<EOS>", "<CTX>"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_frequency` times, ordered by count
    /// (descending) then token text.
    pub fn build<'a, I>(sequences: I, min_frequency: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut total = 0;
        for seq in sequences {
            for t in seq {
                *counts.entry(t.as_str()).or_default() += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_frequency && !SPECIAL_TOKENS.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds from an id-ordered token list, which must start with the
    /// special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < N_SPECIAL || tokens[..N_SPECIAL].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::invalid("vocabulary must begin with the special tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIAL_TOKENS[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
