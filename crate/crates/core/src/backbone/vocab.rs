use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
/// Terminates generated answers.
pub const EOA: &str = "<eoa>";
/// Marks a question probe.
pub const QUESTION: &str = "<q>";

pub const RESERVED: [&str; 4] = [PAD, UNK, EOA, QUESTION];

/// Whitespace word-level vocabulary with reserved control tokens at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids plus the number of words mapped to the unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub unknown: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from words in order; reserved tokens are prepended
    /// and duplicates dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), all.len());
                all.push(w.to_string());
            }
        }
        Vocabulary { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn eoa(&self) -> usize {
        2
    }

    pub fn question(&self) -> usize {
        3
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn encode(&self, text: &str) -> Encoded {
        let mut unknown = 0;
        let ids = text
            .split_whitespace()
            .map(|w| {
                self.id(w).unwrap_or_else(|| {
                    unknown += 1;
                    self.unk()
                })
            })
            .collect();
        Encoded { ids, unknown }
    }

    /// Encodes text that must be fully in-vocabulary.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Validation(format!("word `{w}` not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary must start with reserved tokens".into()));
        }
        let v = Vocabulary::new(words[RESERVED.len()..].iter());
        if v.len() != words.len() {
            return Err(Error::Format("vocabulary contains duplicates".into()));
        }
        Ok(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}
