//! Synthetic multi-session dialogues with annotated evidence turns, and the
//! JSON corpus format shared with externally prepared files.

pub mod generate;
pub mod lexicon;
pub mod pretrain_corpus;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Vocabulary;
use crate::error::{Error, Result};

pub use generate::{generate, BenchConfig, LagProfile};
pub use pretrain_corpus::{pretraining_corpus, pretraining_texts, PretrainCorpusConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

impl Turn {
    /// Model input for this turn: speaker tag followed by the text.
    pub fn render(&self) -> String {
        format!("{} {}", self.speaker, self.text)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Session {
    pub turns: Vec<Turn>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
    /// `(session, turn)` pairs, turn counted within its session.
    pub evidence: Vec<(usize, usize)>,
    /// Global index of the turn after which the question is asked.
    pub ask_after: usize,
}

impl QaItem {
    /// Model input for the question.
    pub fn probe(&self) -> String {
        format!("{} {}", crate::backbone::vocab::QUESTION, self.question)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub schema_version: u32,
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    pub sessions: Vec<Session>,
    pub qa: Vec<QaItem>,
}

impl Dialogue {
    pub fn turn_count(&self) -> usize {
        self.sessions.iter().map(|s| s.turns.len()).sum()
    }

    /// Consecutive numbering across sessions.
    pub fn global_index(&self, session: usize, turn: usize) -> Option<usize> {
        let s = self.sessions.get(session)?;
        if turn >= s.turns.len() {
            return None;
        }
        Some(self.sessions[..session].iter().map(|s| s.turns.len()).sum::<usize>() + turn)
    }

    /// `(session, turn, &Turn)` in global order.
    pub fn turns(&self) -> impl Iterator<Item = (usize, usize, &Turn)> {
        self.sessions
            .iter()
            .enumerate()
            .flat_map(|(s, sess)| sess.turns.iter().enumerate().map(move |(t, turn)| (s, t, turn)))
    }

    /// Session index holding a global turn.
    pub fn session_of(&self, global: usize) -> Option<usize> {
        let mut start = 0;
        for (s, sess) in self.sessions.iter().enumerate() {
            if global < start + sess.turns.len() {
                return Some(s);
            }
            start += sess.turns.len();
        }
        None
    }

    /// Latest session the question draws evidence from.
    pub fn scope_session(&self, qa: &QaItem) -> usize {
        qa.evidence.iter().map(|&(s, _)| s).max().unwrap_or(0)
    }

    /// Structural checks: schema version, evidence indices, ask point.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "dialogue {}: schema_version {} (expected {SCHEMA_VERSION})",
                self.id, self.schema_version
            )));
        }
        let total = self.turn_count();
        for (i, qa) in self.qa.iter().enumerate() {
            let name = || format!("dialogue {} qa #{i} ({:?})", self.id, qa.question);
            if qa.evidence.is_empty() {
                return Err(Error::Validation(format!("{}: no evidence turns", name())));
            }
            let mut latest = 0;
            for &(s, t) in &qa.evidence {
                let g = self.global_index(s, t).ok_or_else(|| {
                    Error::Validation(format!("{}: evidence ({s}, {t}) does not exist", name()))
                })?;
                latest = latest.max(g);
            }
            if qa.ask_after >= total || qa.ask_after < latest {
                return Err(Error::Validation(format!(
                    "{}: ask_after {} must lie in {latest}..{total}",
                    name(),
                    qa.ask_after
                )));
            }
        }
        Ok(())
    }

    /// Checks that every gold answer appears verbatim in each of its evidence
    /// turns. Holds for generated corpora, not necessarily for ingested ones.
    pub fn check_answers_in_evidence(&self) -> Result<()> {
        for (i, qa) in self.qa.iter().enumerate() {
            for &(s, t) in &qa.evidence {
                let text = &self.sessions[s].turns[t].text;
                let padded = format!(" {text} ");
                if !padded.contains(&format!(" {} ", qa.answer)) {
                    return Err(Error::Validation(format!(
                        "dialogue {} qa #{i}: answer {:?} not found in turn ({s}, {t})",
                        self.id, qa.answer
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Lag recomputed from the raw `(session, turn)` evidence, independent of
/// the evaluation code path.
pub fn recompute_lag(dialogue: &Dialogue, qa: &QaItem) -> Option<usize> {
    let mut offsets = vec![0usize];
    for s in &dialogue.sessions {
        offsets.push(offsets.last().unwrap() + s.turns.len());
    }
    let first = qa.evidence.iter().map(|&(s, t)| offsets[s] + t).min()?;
    qa.ask_after.checked_sub(first)
}

/// Words outside the vocabulary found while ingesting.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub dialogues: usize,
    pub turns: usize,
    pub questions: usize,
    /// Occurrences mapped to the unknown token.
    pub unknown_words: usize,
}

#[derive(Deserialize)]
struct RawQa {
    question: String,
    answer: String,
    evidence: Vec<(usize, usize)>,
    #[serde(default)]
    ask_after: Option<usize>,
}

#[derive(Deserialize)]
struct RawDialogue {
    schema_version: Option<u32>,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    seed: u64,
    sessions: Vec<Session>,
    qa: Vec<RawQa>,
}

/// Parses and validates a corpus. Questions without `ask_after` are asked
/// after the final turn of their dialogue.
pub fn ingest_str(json: &str, vocab: &Vocabulary) -> Result<(Vec<Dialogue>, IngestReport)> {
    let raw: Vec<RawDialogue> = serde_json::from_str(json)?;
    let mut report = IngestReport::default();
    let mut out = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        let schema_version = r
            .schema_version
            .ok_or_else(|| Error::Validation(format!("dialogue #{i}: missing schema_version")))?;
        let total: usize = r.sessions.iter().map(|s| s.turns.len()).sum();
        let qa = r
            .qa
            .into_iter()
            .map(|q| QaItem {
                question: q.question,
                answer: q.answer,
                evidence: q.evidence,
                ask_after: q.ask_after.unwrap_or(total.saturating_sub(1)),
            })
            .collect();
        let d = Dialogue {
            schema_version,
            id: r.id.unwrap_or_else(|| format!("d{i}")),
            seed: r.seed,
            sessions: r.sessions,
            qa,
        };
        d.validate()?;
        for (_, _, t) in d.turns() {
            report.unknown_words += vocab.encode(&t.render()).unknown;
        }
        for q in &d.qa {
            report.unknown_words += vocab.encode(&q.question).unknown + vocab.encode(&q.answer).unknown;
        }
        report.turns += d.turn_count();
        report.questions += d.qa.len();
        out.push(d);
    }
    report.dialogues = out.len();
    Ok((out, report))
}

pub fn ingest(path: &Path, vocab: &Vocabulary) -> Result<(Vec<Dialogue>, IngestReport)> {
    ingest_str(&std::fs::read_to_string(path)?, vocab)
}

/// Serialises a corpus; the output is a deterministic function of its input.
pub fn export(dialogues: &[Dialogue]) -> Result<String> {
    Ok(serde_json::to_string_pretty(dialogues)? + "\n")
}

pub fn export_to(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    std::fs::write(path, export(dialogues)?)?;
    Ok(())
}
