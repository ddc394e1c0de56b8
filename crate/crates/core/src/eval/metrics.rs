use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::bench::{Dialogue, QaItem};
use crate::error::{Error, Result};

/// Lower edges of the lag buckets `[0,32) [32,64) [64,128) [128,256) [256,inf)`.
pub const BUCKET_EDGES: [usize; 5] = [0, 32, 64, 128, 256];

pub fn bucket_of(lag: usize) -> usize {
    BUCKET_EDGES.iter().rposition(|&lo| lag >= lo).expect("first edge is zero")
}

pub fn bucket_label(b: usize) -> String {
    match BUCKET_EDGES.get(b + 1) {
        Some(hi) => format!("[{},{})", BUCKET_EDGES[b], hi),
        None => format!("[{},inf)", BUCKET_EDGES[b]),
    }
}

pub fn normalize_answer(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Multiset token F1 after lowercasing and stripping punctuation.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `T - min(E)` over global turn indices.
pub fn evidence_lag(dialogue: &Dialogue, qa: &QaItem) -> Result<usize> {
    let first = qa
        .evidence
        .iter()
        .map(|&(s, t)| {
            dialogue
                .global_index(s, t)
                .ok_or_else(|| Error::Validation(format!("evidence ({s}, {t}) does not exist")))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min()
        .ok_or_else(|| Error::Validation(format!("question {:?} has no evidence", qa.question)))?;
    qa.ask_after
        .checked_sub(first)
        .ok_or_else(|| Error::Validation(format!("question {:?} is asked before its evidence", qa.question)))
}

/// `max(0, f1_mem - f1_ablated)`.
pub fn retained_score(f1_mem: f64, f1_ablated: f64) -> f64 {
    (f1_mem - f1_ablated).max(0.0)
}

/// Weighted least-squares projection onto non-increasing sequences by pool
/// adjacent violators. Weights must be positive.
pub fn pava_non_increasing(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if values.len() != weights.len() {
        return Err(Error::Validation("values and weights differ in length".into()));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::Validation("pava weights must be positive".into()));
    }
    // blocks of (weighted sum, total weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v * w, w, 1));
        while blocks.len() > 1 {
            let (s1, w1, _) = blocks[blocks.len() - 2];
            let (s2, w2, _) = blocks[blocks.len() - 1];
            if s1 / w1 >= s2 / w2 {
                break;
            }
            let (_, _, n2) = blocks.pop().expect("two blocks");
            let last = blocks.last_mut().expect("one block");
            last.0 += s2;
            last.1 += w2;
            last.2 += n2;
        }
    }
    Ok(blocks
        .into_iter()
        .flat_map(|(s, w, n)| std::iter::repeat_n(s / w, n))
        .collect())
}

/// Scores for one question under the three conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub dialogue: String,
    pub question: usize,
    pub lag: usize,
    pub session: usize,
    pub f1_mem: f64,
    pub f1_ablated: f64,
    pub f1_baseline: f64,
    pub retained: f64,
    pub prediction_mem: String,
    pub prediction_ablated: String,
    pub prediction_baseline: String,
    pub gold: String,
    /// sha256 of the question tokens fed to every condition.
    pub input_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketCurve {
    pub edges: Vec<usize>,
    pub counts: Vec<usize>,
    /// Mean retained score per bucket; `None` for empty buckets.
    pub raw: Vec<Option<f64>>,
    /// Non-increasing fit over the non-empty buckets.
    pub smoothed: Vec<Option<f64>>,
}

impl BucketCurve {
    /// Minimum of the smoothed values over non-empty buckets.
    pub fn min_smoothed(&self) -> Option<f64> {
        self.smoothed.iter().flatten().copied().reduce(f64::min)
    }
}

pub fn bucket_and_smooth(results: &[QuestionResult]) -> Result<BucketCurve> {
    if results.is_empty() {
        return Err(Error::Validation("no question results to bucket".into()));
    }
    let nb = BUCKET_EDGES.len();
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    for r in results {
        let b = bucket_of(r.lag);
        sums[b] += r.retained;
        counts[b] += 1;
    }
    let raw: Vec<Option<f64>> = (0..nb)
        .map(|b| (counts[b] > 0).then(|| sums[b] / counts[b] as f64))
        .collect();
    let present: Vec<usize> = (0..nb).filter(|&b| counts[b] > 0).collect();
    let values: Vec<f64> = present.iter().map(|&b| raw[b].expect("non-empty")).collect();
    let weights: Vec<f64> = present.iter().map(|&b| counts[b] as f64).collect();
    let fit = pava_non_increasing(&values, &weights)?;
    let mut smoothed = vec![None; nb];
    for (&b, v) in present.iter().zip(fit) {
        smoothed[b] = Some(v);
    }
    Ok(BucketCurve {
        edges: BUCKET_EDGES.to_vec(),
        counts,
        raw,
        smoothed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgePoint {
    pub session: usize,
    pub k: f64,
    /// Number of questions scoped to sessions `0..=session`.
    pub questions: usize,
    /// No question is scoped to this session; the previous value is repeated.
    pub carried: bool,
}

/// `K_s = 100 * (mean F1 with memory - mean F1 of the baseline)` over the
/// questions scoped to sessions `0..=s`; returns the series and its final
/// value.
pub fn knowledge_curve(results: &[QuestionResult], n_sessions: usize) -> (Vec<KnowledgePoint>, f64) {
    let mut points = Vec::with_capacity(n_sessions);
    let (mut sum_mem, mut sum_base, mut count) = (0.0, 0.0, 0usize);
    let mut last = 0.0;
    for s in 0..n_sessions {
        let mut fresh = 0;
        for r in results.iter().filter(|r| r.session == s) {
            sum_mem += r.f1_mem;
            sum_base += r.f1_baseline;
            count += 1;
            fresh += 1;
        }
        if fresh > 0 {
            last = 100.0 * (sum_mem - sum_base) / count as f64;
        }
        points.push(KnowledgePoint {
            session: s,
            k: last,
            questions: count,
            carried: fresh == 0,
        });
    }
    (points, last)
}
