//! End-to-end run on the desk-scale backbone: pretrain, Type-1 training of
//! the three gated methods, and evaluation against untrained controls. The
//! other three methods are trained and reported afterwards.

use std::time::Instant;

use latmem::backbone::{pretrain, Backbone, BackboneConfig, PretrainOptions};
use latmem::bench::{self, lexicon, BenchConfig, LagProfile, PretrainCorpusConfig};
use latmem::eval::{format_table, run_protocol, ProtocolOptions, SummaryRow};
use latmem::memory::{Adapter, Capacity, Method, WriteConfig};
use latmem::train::{type1_train, AdamWConfig, TrainConfig};

use super::checks::Outcome;

pub const GATED: [Method; 3] = [Method::M2, Method::M4, Method::M6];
/// Trained and reported but not held to the margin.
pub const REPORTED: [Method; 3] = [Method::M1, Method::M3, Method::M5];
pub const MIN_RETAINED: f64 = 5.0;
pub const CONTROL_BAND: f64 = 1.0;
pub const BUDGET_SECS: f64 = 3600.0;

pub fn schedule(method: Method) -> TrainConfig {
    let (lr, epochs) = match method {
        Method::M4 => (3e-4, 12),
        _ => (1e-3, 8),
    };
    TrainConfig {
        optimizer: AdamWConfig {
            lr,
            warmup_steps: 20,
            ..AdamWConfig::default()
        },
        epochs,
        grad_accum: 1,
        patience: 10,
        turn_loss_weight: 0.0,
        ..TrainConfig::default()
    }
}

pub fn end_to_end(log: &mut dyn FnMut(String)) -> Outcome {
    let start = Instant::now();
    let vocab = lexicon::vocabulary();
    let docs = bench::pretraining_corpus(&PretrainCorpusConfig::default(), &vocab).map_err(|e| e.to_string())?;
    let heldout = bench::pretraining_corpus(
        &PretrainCorpusConfig {
            n_docs: 200,
            seed: 99,
            ..Default::default()
        },
        &vocab,
    )
    .map_err(|e| e.to_string())?;
    let (backbone, report): (Backbone<f32>, _) =
        pretrain(&docs, &heldout, vocab, BackboneConfig::default(), &PretrainOptions::default())
            .map_err(|e| e.to_string())?;
    log(format!(
        "pretrained in {:.0}s, held-out loss {:.3} -> {:.3}",
        start.elapsed().as_secs_f64(),
        report.initial_heldout_loss,
        report.final_heldout_loss
    ));

    let train_corpus = bench::generate(&BenchConfig {
        n_dialogues: 48,
        n_sessions: 6,
        lag_profile: LagProfile {
            buckets: vec![0, 1, 2],
            questions_per_bucket: 12,
        },
        seed: 1001,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let (train, val) = train_corpus.split_at(43);
    let test = bench::generate(&BenchConfig::default()).map_err(|e| e.to_string())?;
    let opts = ProtocolOptions::default();

    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut failures = Vec::new();
    let base = run_protocol(&backbone, None, &test, &opts).map_err(|e| e.to_string())?;
    rows.push(base.summary);
    for method in GATED {
        let fresh = Adapter::<f32>::new(method, WriteConfig::new(Capacity::X1), backbone.config(), 7)
            .map_err(|e| e.to_string())?;
        let mut control = fresh.clone();
        control.freeze();
        let untrained = run_protocol(&backbone, Some(&control), &test, &opts).map_err(|e| e.to_string())?;

        let t = Instant::now();
        let mut adapter = fresh;
        let report =
            type1_train(&backbone, &mut adapter, train, val, &schedule(method), |_| {}).map_err(|e| e.to_string())?;
        let trained = run_protocol(&backbone, Some(&adapter), &test, &opts).map_err(|e| e.to_string())?;
        let (got, ctl) = (trained.summary.retained_pct, untrained.summary.retained_pct);
        log(format!(
            "{method}: {} steps in {:.0}s, val {:.3} -> {:.3}; retained {got:.2} (untrained {ctl:.2}), dK {:.2}",
            report.steps.len(),
            t.elapsed().as_secs_f64(),
            report.initial_val_loss,
            report.best_val_loss,
            trained.summary.delta_k
        ));
        if got < MIN_RETAINED {
            failures.push(format!("{method} retained {got:.2} < {MIN_RETAINED}"));
        }
        if ctl.abs() > CONTROL_BAND {
            failures.push(format!("{method} untrained control at {ctl:.2}"));
        }
        rows.push(trained.summary);
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > BUDGET_SECS {
        failures.push(format!("took {secs:.0}s"));
    }
    for method in REPORTED {
        let t = Instant::now();
        let mut adapter = Adapter::<f32>::new(method, WriteConfig::new(Capacity::X1), backbone.config(), 7)
            .map_err(|e| e.to_string())?;
        let report =
            type1_train(&backbone, &mut adapter, train, val, &schedule(method), |_| {}).map_err(|e| e.to_string())?;
        let trained = run_protocol(&backbone, Some(&adapter), &test, &opts).map_err(|e| e.to_string())?;
        log(format!(
            "{method} (not gated): {} steps in {:.0}s, val {:.3} -> {:.3}; retained {:.2}, dK {:.2}",
            report.steps.len(),
            t.elapsed().as_secs_f64(),
            report.initial_val_loss,
            report.best_val_loss,
            trained.summary.retained_pct,
            trained.summary.delta_k
        ));
        rows.push(trained.summary);
    }
    for line in format_table(&rows).lines() {
        log(line.to_string());
    }
    if failures.is_empty() {
        Ok(format!("{secs:.0}s"))
    } else {
        Err(failures.join("; "))
    }
}
