use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{fill, values_for, ATTRIBUTES, DISTRACTORS, ENTITIES, FACT_TEMPLATES, QUESTION_TEMPLATE, SPEAKERS, VALUES};
use crate::backbone::vocab::{EOA, QUESTION};
use crate::backbone::Vocabulary;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainCorpusConfig {
    pub n_docs: usize,
    /// Turns before the question, inclusive range.
    pub min_turns: usize,
    pub max_turns: usize,
    pub distractor_rate: f64,
    /// Probability that a stated fact is later restated with a new value.
    pub overwrite_rate: f64,
    pub seed: u64,
}

impl Default for PretrainCorpusConfig {
    fn default() -> Self {
        PretrainCorpusConfig {
            n_docs: 8000,
            min_turns: 1,
            max_turns: 6,
            distractor_rate: 0.4,
            overwrite_rate: 0.2,
            seed: 0,
        }
    }
}

/// Short conversations that end in a question answered from earlier turns.
/// Facts come from the half of the value space the benchmark never uses.
pub fn pretraining_texts(cfg: &PretrainCorpusConfig) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6574);
    let mut docs = Vec::with_capacity(cfg.n_docs);
    for _ in 0..cfg.n_docs {
        let n_turns = rng.random_range(cfg.min_turns..=cfg.max_turns.max(cfg.min_turns));
        let mut stated: Vec<(usize, usize, usize)> = Vec::new();
        let mut parts = Vec::new();
        for t in 0..n_turns {
            let speaker = SPEAKERS[t % 2];
            let last = t + 1 == n_turns;
            if !last && rng.random_bool(cfg.distractor_rate) {
                let e = ENTITIES[rng.random_range(0..ENTITIES.len())];
                parts.push(format!("{speaker} {}", fill(DISTRACTORS.choose(&mut rng).expect("non-empty"), e, "", "")));
                continue;
            }
            let restate = !stated.is_empty() && rng.random_bool(cfg.overwrite_rate);
            let (e, a, v) = if restate {
                let i = rng.random_range(0..stated.len());
                let (e, a, old) = stated.remove(i);
                let vs: Vec<usize> = values_for(e, a, 1).into_iter().filter(|&v| v != old).collect();
                (e, a, vs.choose(&mut rng).copied().unwrap_or(old))
            } else {
                let e = rng.random_range(0..ENTITIES.len());
                let a = rng.random_range(0..ATTRIBUTES.len());
                stated.retain(|&(se, sa, _)| (se, sa) != (e, a));
                let v = *values_for(e, a, 1).choose(&mut rng).expect("non-empty half");
                (e, a, v)
            };
            stated.push((e, a, v));
            let template = FACT_TEMPLATES.choose(&mut rng).expect("non-empty");
            parts.push(format!("{speaker} {}", fill(template, ENTITIES[e], ATTRIBUTES[a], VALUES[a][v])));
        }
        let &(e, a, v) = stated.choose(&mut rng).expect("last turn states a fact");
        parts.push(format!(
            "{QUESTION} {} {} {EOA}",
            fill(QUESTION_TEMPLATE, ENTITIES[e], ATTRIBUTES[a], ""),
            VALUES[a][v]
        ));
        docs.push(parts.join(" "));
    }
    docs
}

pub fn pretraining_corpus(cfg: &PretrainCorpusConfig, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    pretraining_texts(cfg).iter().map(|d| vocab.encode_strict(d)).collect()
}
