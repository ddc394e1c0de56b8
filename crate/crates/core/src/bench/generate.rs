use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{fill, values_for, ATTRIBUTES, DISTRACTORS, ENTITIES, FACT_TEMPLATES, QUESTION_TEMPLATE, SPEAKERS, VALUES};
use super::{Dialogue, QaItem, Session, Turn, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::eval::{bucket_of, BUCKET_EDGES};

/// Which lag buckets to fill and how many questions each gets per dialogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagProfile {
    pub buckets: Vec<usize>,
    pub questions_per_bucket: usize,
}

impl Default for LagProfile {
    fn default() -> Self {
        LagProfile {
            buckets: (0..BUCKET_EDGES.len()).collect(),
            questions_per_bucket: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_dialogues: usize,
    pub n_sessions: usize,
    pub turns_per_session: usize,
    pub n_entities: usize,
    pub n_attributes: usize,
    /// Facts tracked per dialogue.
    pub active_facts: usize,
    pub lag_profile: LagProfile,
    /// Probability that a turn is small talk.
    pub distractor_rate: f64,
    /// Probability that a fact mention replaces the current value.
    pub overwrite_rate: f64,
    /// Questions are asked fewer than this many turns after the latest
    /// mention of their fact.
    pub recall_gap: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_dialogues: 20,
            n_sessions: 30,
            turns_per_session: 12,
            n_entities: ENTITIES.len(),
            n_attributes: ATTRIBUTES.len(),
            active_facts: 3,
            lag_profile: LagProfile::default(),
            distractor_rate: 0.4,
            overwrite_rate: 0.02,
            recall_gap: 8,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_entities == 0 || self.n_entities > ENTITIES.len() {
            return bad(format!("n_entities must lie in 1..={}", ENTITIES.len()));
        }
        if self.n_attributes == 0 || self.n_attributes > ATTRIBUTES.len() {
            return bad(format!("n_attributes must lie in 1..={}", ATTRIBUTES.len()));
        }
        if self.n_sessions == 0 || self.turns_per_session == 0 {
            return bad("dialogues need at least one turn".into());
        }
        if self.active_facts == 0 || self.recall_gap == 0 {
            return bad("active_facts and recall_gap must be positive".into());
        }
        if !(0.0..1.0).contains(&self.distractor_rate) || !(0.0..=1.0).contains(&self.overwrite_rate) {
            return bad("rates must lie in [0, 1) and [0, 1]".into());
        }
        let max_lag = self.n_sessions * self.turns_per_session - 1;
        for &b in &self.lag_profile.buckets {
            let Some(&lo) = BUCKET_EDGES.get(b) else {
                return bad(format!("lag bucket {b} does not exist"));
            };
            if lo > max_lag {
                return bad(format!(
                    "lag bucket {b} starts at {lo} turns but the maximum achievable lag is {max_lag}"
                ));
            }
        }
        Ok(())
    }
}

struct Lineage {
    value: usize,
    mentions: Vec<usize>,
}

struct Fact {
    entity: usize,
    attribute: usize,
    lineages: Vec<Lineage>,
}

struct Candidate {
    fact: usize,
    lineage: usize,
    ask_after: usize,
    lag: usize,
}

/// Builds a deterministic corpus from the configuration.
pub fn generate(cfg: &BenchConfig) -> Result<Vec<Dialogue>> {
    cfg.validate()?;
    (0..cfg.n_dialogues).map(|i| generate_one(cfg, i)).collect()
}

fn generate_one(cfg: &BenchConfig, index: usize) -> Result<Dialogue> {
    let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = cfg.n_sessions * cfg.turns_per_session;

    let mut pairs: Vec<(usize, usize)> = (0..cfg.n_entities)
        .flat_map(|e| (0..cfg.n_attributes).map(move |a| (e, a)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(cfg.active_facts);
    let mut facts: Vec<Fact> = pairs
        .into_iter()
        .map(|(entity, attribute)| Fact {
            entity,
            attribute,
            lineages: Vec::new(),
        })
        .collect();

    let mut turns = Vec::with_capacity(total);
    for t in 0..total {
        let speaker = SPEAKERS[t % 2].to_string();
        if rng.random_bool(cfg.distractor_rate) {
            let template = DISTRACTORS.choose(&mut rng).expect("non-empty");
            let e = ENTITIES[rng.random_range(0..cfg.n_entities)];
            turns.push(Turn {
                speaker,
                text: fill(template, e, "", ""),
            });
            continue;
        }
        let f = rng.random_range(0..facts.len());
        let fact = &mut facts[f];
        let allowed = values_for(fact.entity, fact.attribute, 0);
        let overwrite = !fact.lineages.is_empty() && allowed.len() > 1 && rng.random_bool(cfg.overwrite_rate);
        if fact.lineages.is_empty() || overwrite {
            let current = fact.lineages.last().map(|l| l.value);
            let choices: Vec<usize> = allowed.iter().copied().filter(|&v| Some(v) != current).collect();
            let value = *choices.choose(&mut rng).expect("at least one value");
            fact.lineages.push(Lineage {
                value,
                mentions: Vec::new(),
            });
        }
        let lineage = fact.lineages.last_mut().expect("lineage exists");
        lineage.mentions.push(t);
        let template = FACT_TEMPLATES.choose(&mut rng).expect("non-empty");
        turns.push(Turn {
            speaker,
            text: fill(
                template,
                ENTITIES[fact.entity],
                ATTRIBUTES[fact.attribute],
                VALUES[fact.attribute][lineage.value],
            ),
        });
    }

    // every (fact, lineage, ask point) with a mention shortly before the ask
    let mut by_bucket: Vec<Vec<Candidate>> = (0..BUCKET_EDGES.len()).map(|_| Vec::new()).collect();
    for (fi, fact) in facts.iter().enumerate() {
        for (li, lineage) in fact.lineages.iter().enumerate() {
            let start = lineage.mentions[0];
            let end = fact.lineages.get(li + 1).map(|l| l.mentions[0]).unwrap_or(total);
            for ask in start..end {
                let latest = lineage.mentions.iter().copied().filter(|&m| m <= ask).max().expect("start <= ask");
                if ask - latest < cfg.recall_gap {
                    let lag = ask - start;
                    by_bucket[bucket_of(lag)].push(Candidate {
                        fact: fi,
                        lineage: li,
                        ask_after: ask,
                        lag,
                    });
                }
            }
        }
    }

    let mut qa = Vec::new();
    for &b in &cfg.lag_profile.buckets {
        let pool = &by_bucket[b];
        let picks: Vec<&Candidate> = pool
            .choose_multiple(&mut rng, cfg.lag_profile.questions_per_bucket.min(pool.len()))
            .collect();
        for c in picks {
            let fact = &facts[c.fact];
            let lineage = &fact.lineages[c.lineage];
            let evidence = lineage
                .mentions
                .iter()
                .filter(|&&m| m <= c.ask_after)
                .map(|&m| (m / cfg.turns_per_session, m % cfg.turns_per_session))
                .collect();
            debug_assert_eq!(bucket_of(c.lag), b);
            qa.push(QaItem {
                question: fill(QUESTION_TEMPLATE, ENTITIES[fact.entity], ATTRIBUTES[fact.attribute], ""),
                answer: VALUES[fact.attribute][lineage.value].to_string(),
                evidence,
                ask_after: c.ask_after,
            });
        }
    }
    qa.sort_by_key(|q| q.ask_after);

    let sessions = turns
        .chunks(cfg.turns_per_session)
        .map(|c| Session { turns: c.to_vec() })
        .collect();
    Ok(Dialogue {
        schema_version: SCHEMA_VERSION,
        id: format!("syn-{}-{index:03}", cfg.seed),
        seed,
        sessions,
        qa,
    })
}
