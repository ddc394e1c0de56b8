use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{
    bucket_and_smooth, bucket_label, evidence_lag, knowledge_curve, retained_score, token_f1, BucketCurve,
    KnowledgePoint, QuestionResult,
};
use crate::backbone::{Backbone, Generation};
use crate::bench::Dialogue;
use crate::error::{Error, Result};
use crate::memory::{Adapter, Capacity, Method};
use crate::runtime::ConversationHandle;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolOptions {
    /// Answer tokens generated per question.
    pub max_answer_tokens: usize,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions { max_answer_tokens: 4 }
    }
}

/// Everything one evaluation run produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutput {
    pub results: Vec<QuestionResult>,
    pub curve: BucketCurve,
    pub knowledge: Vec<KnowledgePoint>,
    pub summary: SummaryRow,
}

/// One method at one capacity: the two numbers reported per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `None` for the stateless baseline.
    pub method: Option<Method>,
    pub capacity: Option<Capacity>,
    pub questions: usize,
    /// Minimum over non-empty lag buckets of the smoothed retained score,
    /// in F1 points.
    pub retained_pct: f64,
    pub delta_k: f64,
}

pub fn input_hash(tokens: &[usize]) -> String {
    let mut h = Sha256::new();
    for &t in tokens {
        h.update((t as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn consumed(g: &Generation) -> &[usize] {
    &g.tokens[..g.tokens.len() - g.new_tokens.len()]
}

/// Runs every dialogue through the with-memory, ablated and baseline
/// conditions, scoring each question under all three on identical inputs.
/// Without an adapter the method is the baseline itself.
pub fn run_protocol<T: Scalar>(
    backbone: &Backbone<T>,
    adapter: Option<&Adapter<T>>,
    corpus: &[Dialogue],
    opts: &ProtocolOptions,
) -> Result<ProtocolOutput> {
    let vocab = backbone.vocab();
    let mut results = Vec::new();
    for d in corpus {
        d.validate()?;
        let mut mem = match adapter {
            Some(a) => ConversationHandle::new(backbone, a)?,
            None => ConversationHandle::baseline(backbone),
        };
        let baseline = ConversationHandle::baseline(backbone);
        let mut pending: Vec<usize> = (0..d.qa.len()).collect();
        pending.sort_by_key(|&i| (d.qa[i].ask_after, i));
        let mut next = 0;
        for (global, (_, _, turn)) in d.turns().enumerate() {
            mem.feed(turn)?;
            while next < pending.len() && d.qa[pending[next]].ask_after == global {
                let qi = pending[next];
                next += 1;
                let qa = &d.qa[qi];
                let prompt = vocab.encode(&qa.probe()).ids;
                let ablated = mem.ablate_memory()?;
                let outputs = [
                    mem.ask(&prompt, opts.max_answer_tokens)?,
                    ablated.ask(&prompt, opts.max_answer_tokens)?,
                    baseline.ask(&prompt, opts.max_answer_tokens)?,
                ];
                let hashes: Vec<String> = outputs.iter().map(|g| input_hash(consumed(g))).collect();
                if hashes.iter().any(|h| h != &hashes[0]) {
                    return Err(Error::EqualInput {
                        question: format!("{} #{qi}", d.id),
                    });
                }
                let [pm, pa, pb] = outputs.map(|g| vocab.decode(&g.new_tokens));
                let (f1_mem, f1_ablated, f1_baseline) =
                    (token_f1(&pm, &qa.answer), token_f1(&pa, &qa.answer), token_f1(&pb, &qa.answer));
                results.push(QuestionResult {
                    dialogue: d.id.clone(),
                    question: qi,
                    lag: evidence_lag(d, qa)?,
                    session: d.scope_session(qa),
                    f1_mem,
                    f1_ablated,
                    f1_baseline,
                    retained: retained_score(f1_mem, f1_ablated),
                    prediction_mem: pm,
                    prediction_ablated: pa,
                    prediction_baseline: pb,
                    gold: qa.answer.clone(),
                    input_hash: hashes[0].clone(),
                });
            }
        }
    }
    let curve = bucket_and_smooth(&results)?;
    let n_sessions = corpus.iter().map(|d| d.sessions.len()).max().unwrap_or(0);
    let (knowledge, delta_k) = knowledge_curve(&results, n_sessions);
    let summary = SummaryRow {
        method: adapter.map(|a| a.method()),
        capacity: adapter.map(|a| a.capacity()),
        questions: results.len(),
        retained_pct: 100.0 * curve.min_smoothed().unwrap_or(0.0),
        delta_k,
    };
    Ok(ProtocolOutput {
        results,
        curve,
        knowledge,
        summary,
    })
}

/// `bucket,raw,smoothed,count` with empty buckets left blank.
pub fn curve_csv(curve: &BucketCurve) -> String {
    let mut out = String::from("bucket,raw,smoothed,count\n");
    for b in 0..curve.counts.len() {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            bucket_label(b),
            cell(curve.raw[b]),
            cell(curve.smoothed[b]),
            curve.counts[b]
        );
    }
    out
}

/// `session,k,questions,carried`.
pub fn knowledge_csv(points: &[KnowledgePoint]) -> String {
    let mut out = String::from("session,k,questions,carried\n");
    for p in points {
        let _ = writeln!(out, "{},{:.6},{},{}", p.session, p.k, p.questions, p.carried);
    }
    out
}

fn row_label(method: Option<Method>) -> &'static str {
    method.map_or("M.0 Baseline", |m| m.label())
}

/// Rows M.0 to M.6, columns retained % and delta K at 1x and 10x. The
/// baseline does not depend on capacity and fills both columns.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:>12} {:>9} {:>12} {:>9}",
        "Method", "Ret% (1x)", "dK (1x)", "Ret% (10x)", "dK (10x)"
    );
    let methods = std::iter::once(None).chain(Method::ALL.iter().copied().map(Some));
    for m in methods {
        let cell = |cap: Capacity| {
            rows.iter()
                .find(|r| r.method == m && (m.is_none() || r.capacity == Some(cap)))
                .map(|r| (format!("{:.2}", r.retained_pct), format!("{:.2}", r.delta_k)))
                .unwrap_or_else(|| ("-".into(), "-".into()))
        };
        let (r1, k1) = cell(Capacity::X1);
        let (r10, k10) = cell(Capacity::X10);
        let _ = writeln!(out, "{:<22} {r1:>12} {k1:>9} {r10:>12} {k10:>9}", row_label(m));
    }
    out
}
