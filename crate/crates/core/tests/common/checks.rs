//! One function per acceptance criterion. Each returns a short detail line
//! on success and the reason on failure.

use std::time::Instant;

use latmem::autograd::{attention_forward, attention_mask, MemoryVisibility};
use latmem::backbone::{Backbone, BackboneConfig, ForwardOptions, HiddenStates};
use latmem::bench::{self, lexicon, BenchConfig, Dialogue};
use latmem::eval::{
    bucket_of, input_hash, knowledge_curve, pava_non_increasing, retained_score, run_protocol, token_f1,
    ProtocolOptions, QuestionResult, BUCKET_EDGES,
};
use latmem::memory::{write_hebbian, Adapter, Capacity, MemoryKind, Method, ReadHooks, WriteConfig};
use latmem::runtime::ConversationHandle;
use latmem::train::{type1_train, AdamWConfig, TrainConfig};
use latmem::{Graph, Tensor};
use rand::Rng;

use super::grad::{check_op, check_read_path, op_cases};
use super::{random_state, rng, scramble, tiny_adapter, tiny_backbone, tiny_dims};

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (i, case) in op_cases().iter().enumerate() {
        let (err, norms) = check_op(case, 100 + i as u64);
        ensure(norms.iter().all(|&n| n > 0.0), || format!("{}: vanishing gradient", case.name))?;
        ensure(err < 1e-4, || format!("{}: relative error {err:.2e}", case.name))?;
        worst = worst.max(err);
    }
    for method in Method::ALL {
        for c in check_read_path(method) {
            ensure(c.rel_err < 1e-4, || format!("{method} {}: relative error {:.2e}", c.name, c.rel_err))?;
            worst = worst.max(c.rel_err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("max rel err {worst:.2e}, {secs:.1}s"))
}

/// Small backbone over the benchmark lexicon with room for whole turns.
pub fn lexicon_backbone(seed: u64) -> Backbone<f32> {
    let vocab = lexicon::vocabulary();
    let cfg = BackboneConfig {
        max_context: 48,
        ..BackboneConfig::tiny(vocab.len())
    };
    let mut model = Backbone::new(cfg, vocab, seed).unwrap();
    model.freeze();
    model
}

pub fn small_corpus(n_dialogues: usize, n_sessions: usize, seed: u64) -> Vec<Dialogue> {
    bench::generate(&BenchConfig {
        n_dialogues,
        n_sessions,
        turns_per_session: 6,
        lag_profile: bench::LagProfile {
            buckets: if n_sessions * 6 > 40 { vec![0, 1] } else { vec![0] },
            questions_per_bucket: 1,
        },
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_adapter(method: Method, model: &Backbone<f32>, seed: u64) -> Adapter<f32> {
    let write = WriteConfig::new(Capacity::X1).with_dims(tiny_dims());
    Adapter::new(method, write, model.config(), seed).unwrap()
}

pub fn frozen_backbone() -> Outcome {
    let model = lexicon_backbone(1);
    let corpus = small_corpus(3, 2, 5);
    let (train, val) = corpus.split_at(2);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        grad_accum: 1,
        window: 4,
        optimizer: AdamWConfig {
            lr: 1e-2,
            warmup_steps: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    let before = model.fingerprint();
    for method in Method::ALL {
        let mut adapter = small_adapter(method, &model, 2);
        let write_before = adapter.write_params().fingerprint();
        let read_before = adapter.params().fingerprint();
        let report = type1_train(&model, &mut adapter, train, val, &cfg, |_| {}).map_err(|e| e.to_string())?;
        ensure(!report.steps.is_empty(), || format!("{method}: no optimizer step"))?;
        ensure(model.fingerprint() == before, || format!("{method}: backbone hash changed"))?;
        ensure(adapter.write_params().fingerprint() == write_before, || {
            format!("{method}: write projections changed")
        })?;
        ensure(adapter.params().fingerprint() != read_before, || format!("{method}: read path never moved"))?;
    }
    Ok(format!("backbone {}.. unchanged over 6 runs", &before[..12]))
}

pub fn safe_startup() -> Outcome {
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..5u64 {
        let model = tiny_backbone(seed);
        let tokens: Vec<usize> = (0..8).map(|i| 4 + (i * 7 + seed as usize) % 16).collect();
        let mut g = Graph::no_grad();
        let base = model.forward(&mut g, &tokens, None).unwrap();
        let base = g.value(base.logits).clone();
        for method in [Method::M2, Method::M5] {
            let mut adapter = tiny_adapter(method, seed + 10);
            if method == Method::M5 {
                for p in adapter.params_mut().iter_mut() {
                    if p.name.ends_with(".bg") {
                        p.value = p.value.map(|_| -40.0);
                    }
                }
            }
            let mut state = random_state(&adapter, seed + 20);
            if let MemoryKind::Bank(p) = &mut state.kind {
                *p = p.scale(1e3);
            }
            let mut hooks = ReadHooks::new(&adapter, &state).unwrap();
            let mut g = Graph::no_grad();
            let pass = model.forward(&mut g, &tokens, Some(&mut hooks)).unwrap();
            let diff = g.value(pass.logits).max_abs_diff(&base).unwrap();
            if method == Method::M2 {
                worst.0 = worst.0.max(diff);
            } else {
                worst.1 = worst.1.max(diff);
            }
        }
    }
    ensure(worst.0 < 1e-6, || format!("zero beta drifts by {:.2e}", worst.0))?;
    ensure(worst.1 < 1e-5, || format!("shut gate drifts by {:.2e}", worst.1))?;
    Ok(format!("max |dlogit| {:.1e} (beta=0), {:.1e} (gate shut)", worst.0, worst.1))
}

fn zero_hidden(adapter: &Adapter<f64>, n: usize) -> HiddenStates<f64> {
    let d = adapter.d_model();
    HiddenStates {
        layers: (0..adapter.n_layers()).map(|_| Tensor::zeros(&[n, d])).collect(),
        last: Tensor::zeros(&[n, d]),
    }
}

pub fn singular_values(a: &Tensor<f64>) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

pub fn numerical_rank(a: &Tensor<f64>) -> usize {
    let sv = singular_values(a);
    let tol = sv[0] * 1e-6;
    sv.iter().filter(|&&s| s > tol).count()
}

pub fn write_laws() -> Outcome {
    // decay under zero input, checked against repeated scalar multiplication
    for method in [Method::M1, Method::M2, Method::M3, Method::M4, Method::M5] {
        let adapter = tiny_adapter(method, 3);
        let start = random_state(&adapter, 4);
        let mut state = start.clone();
        let steps = 7;
        for _ in 0..steps {
            adapter.write_step(&mut state, &zero_hidden(&adapter, 3)).unwrap();
        }
        let gamma = adapter.write_config().decay;
        for (after, before) in state.tensors().iter().zip(start.tensors()) {
            for (&x, &x0) in after.data().iter().zip(before.data()) {
                let mut expect = x0;
                for _ in 0..steps {
                    expect *= gamma;
                }
                ensure(x == expect, || format!("{method}: {x} != gamma^{steps} * {x0}"))?;
            }
        }
    }
    // slot writes touch exactly k rows
    let adapter = tiny_adapter(Method::M6, 5);
    let k = adapter.write_config().dims.top_k;
    let mut r = rng(6);
    let mut state = random_state(&adapter, 7);
    for turn in 0..20 {
        let before = state.clone();
        let n = r.random_range(1..6);
        let d = adapter.d_model();
        let hidden = HiddenStates {
            layers: Vec::new(),
            last: Tensor::randn(&[n, d], 1.0, &mut r),
        };
        adapter.write_step(&mut state, &hidden).unwrap();
        let (MemoryKind::Slots { bank: b0, .. }, MemoryKind::Slots { bank: b1, last_written }) =
            (&before.kind, &state.kind)
        else {
            return Err("slot state lost its variant".into());
        };
        let changed: Vec<usize> = (0..b0.rows()).filter(|&j| b0.row(j) != b1.row(j)).collect();
        ensure(changed.len() == k && &changed == last_written, || {
            format!("turn {turn}: changed rows {changed:?}, reported {last_written:?}, k={k}")
        })?;
    }
    // one token gives a rank-one Hebbian increment
    let mut r = rng(8);
    let (d, dh) = (32, 8);
    let zero = Tensor::<f64>::zeros(&[dh, dh]);
    let pk = Tensor::randn(&[d, dh], 0.2, &mut r);
    let pv = Tensor::randn(&[d, dh], 0.2, &mut r);
    for n in 1..=3 {
        let h = Tensor::randn(&[n, d], 1.0, &mut r);
        let update = write_hebbian(&zero, &h, &pk, &pv, 0.95).unwrap();
        let rank = numerical_rank(&update);
        ensure(rank == n, || format!("{n}-token Hebbian update has rank {rank}"))?;
    }
    Ok(format!("decay exact over 7 turns, {k} of {} slots per write, rank 1", adapter.write_config().dims.slots))
}

/// Direct transcription of masked multi-head attention, one score at a time.
pub fn brute_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    p: usize,
    visibility: Option<MemoryVisibility>,
    heads: usize,
) -> Tensor<f64> {
    let (n, w) = (q.rows(), q.cols());
    let m = k.rows();
    let (dk, dv) = (w / heads, v.cols() / heads);
    let mut out = Tensor::zeros(&[n, v.cols()]);
    for h in 0..heads {
        for i in 0..n {
            let visible = |j: usize| {
                if j < p {
                    match visibility {
                        Some(MemoryVisibility::Open) => true,
                        Some(MemoryVisibility::Causal) => j <= i,
                        None => false,
                    }
                } else {
                    j - p <= i
                }
            };
            let scores: Vec<Option<f64>> = (0..m)
                .map(|j| {
                    visible(j).then(|| {
                        (0..dk).map(|c| q.at(i, h * dk + c) * k.at(j, h * dk + c)).sum::<f64>() / (dk as f64).sqrt()
                    })
                })
                .collect();
            let top = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - top).exp()).sum();
            for c in 0..dv {
                let mut acc = 0.0;
                for (j, s) in scores.iter().enumerate() {
                    if let Some(s) = s {
                        acc += (s - top).exp() / z * v.at(j, h * dv + c);
                    }
                }
                out.data_mut()[i * v.cols() + h * dv + c] = acc;
            }
        }
    }
    out
}

pub fn mask_correctness() -> Outcome {
    let model = tiny_backbone(9);
    let tokens = [4, 8, 12, 5, 9, 13];
    let n = tokens.len();
    let mut memory_mass = f64::INFINITY;
    for method in [Method::M1, Method::M3, Method::M4, Method::M6] {
        let mut adapter = tiny_adapter(method, 10);
        scramble(&mut adapter, 11);
        let state = random_state(&adapter, 12);
        let mut hooks = ReadHooks::new(&adapter, &state).unwrap();
        let mut g = Graph::no_grad();
        let opts = ForwardOptions { capture_attention: true };
        let pass = model.forward_with(&mut g, &tokens, Some(&mut hooks), opts).unwrap();
        let heads = model.config().n_heads;
        for (layer, probs) in pass.attention.iter().enumerate() {
            let m = probs.len() / (heads * n);
            let p = m - n;
            for h in 0..heads {
                for i in 0..n {
                    let row = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                    for j in i + 1..n {
                        ensure(row[p + j] == 0.0, || {
                            format!("{method} layer {layer} head {h}: token {i} sees future token {j}")
                        })?;
                    }
                    if method != Method::M4 {
                        let mass: f64 = row[..p].iter().sum();
                        ensure(mass > 0.0, || format!("{method} layer {layer}: memory columns unused"))?;
                        memory_mass = memory_mass.min(mass);
                    } else {
                        for j in i + 1..p {
                            ensure(row[j] == 0.0, || format!("M4 token {i} sees recall row {j}"))?;
                        }
                    }
                }
            }
        }
    }
    let mut r = rng(13);
    let mut worst = 0.0f64;
    for n in 1..=3 {
        for p in 0..=2 {
            for vis in [None, Some(MemoryVisibility::Open), Some(MemoryVisibility::Causal)] {
                if vis.is_none() != (p == 0) {
                    continue;
                }
                for heads in [1, 2] {
                    let q = Tensor::randn(&[n, 4], 1.0, &mut r);
                    let k = Tensor::randn(&[p + n, 4], 1.0, &mut r);
                    let v = Tensor::randn(&[p + n, 6], 1.0, &mut r);
                    let mask = attention_mask::<f64>(n, vis.map(|vis| (p, vis)));
                    let (fast, _) = attention_forward(&q, &k, &v, &mask, heads).unwrap();
                    let slow = brute_attention(&q, &k, &v, p, vis, heads);
                    worst = worst.max(fast.max_abs_diff(&slow).unwrap());
                }
            }
        }
    }
    ensure(worst < 1e-6, || format!("attention differs from brute force by {worst:.2e}"))?;
    Ok(format!("no future leakage, min memory mass {memory_mass:.3}, oracle diff {worst:.1e}"))
}

/// Least-squares non-increasing fit by enumerating every split of the
/// sequence into consecutive blocks.
pub fn exhaustive_isotonic(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cuts in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        for end in 1..=n {
            if end == n || cuts & (1 << (end - 1)) != 0 {
                let w: f64 = weights[start..end].iter().sum();
                let mean = (start..end).map(|i| values[i] * weights[i]).sum::<f64>() / w;
                fit.extend(std::iter::repeat_n(mean, end - start));
                start = end;
            }
        }
        if fit.windows(2).any(|p| p[1] > p[0]) {
            continue;
        }
        let sse: f64 = (0..n).map(|i| weights[i] * (values[i] - fit[i]).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, fit));
        }
    }
    best.expect("a single block is always feasible").1
}

pub fn pava_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let values: Vec<f64> = (0..5).map(|_| r.random::<f64>()).collect();
        let weights: Vec<f64> = (0..5).map(|_| r.random_range(1..30) as f64).collect();
        let fast = pava_non_increasing(&values, &weights).map_err(|e| e.to_string())?;
        let slow = exhaustive_isotonic(&values, &weights);
        ensure(fast.windows(2).all(|p| p[1] <= p[0]), || format!("seed {seed}: increasing fit {fast:?}"))?;
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max difference {worst:.2e}"))?;
    Ok(format!("200 instances, max diff {worst:.1e}"))
}

pub fn protocol_soundness() -> Outcome {
    let model = lexicon_backbone(14);
    let corpus = small_corpus(3, 12, 15);
    let opts = ProtocolOptions::default();
    let base = run_protocol(&model, None, &corpus, &opts).map_err(|e| e.to_string())?;
    ensure(base.results.iter().all(|r| r.retained == 0.0), || "baseline retained a nonzero score".into())?;
    ensure(base.summary.retained_pct == 0.0, || "baseline retained % is not zero".into())?;
    let mut questions = base.results.len();
    for method in Method::ALL {
        let mut adapter = small_adapter(method, &model, 16);
        let mut r = rng(17);
        for p in adapter.params_mut().iter_mut() {
            if p.requires_grad && p.name != "wa" && p.name != "ws" {
                p.value = Tensor::randn(p.value.shape(), 0.2, &mut r);
            }
        }
        adapter.freeze();
        let out = run_protocol(&model, Some(&adapter), &corpus, &opts).map_err(|e| format!("{method}: {e}"))?;
        for (r, b) in out.results.iter().zip(&base.results) {
            ensure(r.input_hash == b.input_hash, || format!("{method}: prompt hash differs across runs"))?;
            let qa = &corpus.iter().find(|d| d.id == r.dialogue).unwrap().qa[r.question];
            let prompt = model.vocab().encode(&qa.probe()).ids;
            ensure(r.input_hash == input_hash(&prompt), || format!("{method}: hash is not of the prompt"))?;
            ensure(r.retained == retained_score(r.f1_mem, r.f1_ablated), || "retained mismatch".into())?;
        }
        questions += out.results.len();
    }
    // every lag lands in exactly one bucket
    let edges: Vec<usize> = BUCKET_EDGES.to_vec();
    for lag in 0..600 {
        let hits = (0..edges.len())
            .filter(|&b| lag >= edges[b] && edges.get(b + 1).is_none_or(|&hi| lag < hi))
            .count();
        ensure(hits == 1 && lag >= edges[bucket_of(lag)], || format!("lag {lag} falls in {hits} buckets"))?;
    }
    let counted: usize = base.curve.counts.iter().sum();
    ensure(counted == base.results.len(), || "bucket counts do not cover every question".into())?;
    Ok(format!("{questions} questions over 7 runs, baseline retained 0"))
}

/// Feeds a dialogue question by question, optionally snapshotting and
/// restoring at `split`; returns results and the final memory fingerprint.
pub fn scripted_run(
    model: &Backbone<f32>,
    adapter: &Adapter<f32>,
    dialogue: &Dialogue,
    split: Option<(usize, &std::path::Path)>,
) -> (Vec<QuestionResult>, String) {
    let vocab = model.vocab();
    let mut handle = ConversationHandle::new(model, adapter).unwrap();
    let baseline = ConversationHandle::baseline(model);
    let mut results = Vec::new();
    for (global, (_, _, turn)) in dialogue.turns().enumerate() {
        if let Some((at, path)) = split {
            if global == at {
                handle.snapshot(path).unwrap();
                drop(handle);
                handle = ConversationHandle::restore(model, adapter, path).unwrap();
            }
        }
        handle.feed(turn).unwrap();
        for (qi, qa) in dialogue.qa.iter().enumerate().filter(|(_, q)| q.ask_after == global) {
            let prompt = vocab.encode(&qa.probe()).ids;
            let mem = vocab.decode(&handle.ask(&prompt, 3).unwrap().new_tokens);
            let abl = vocab.decode(&handle.ablate_memory().unwrap().ask(&prompt, 3).unwrap().new_tokens);
            let base = vocab.decode(&baseline.ask(&prompt, 3).unwrap().new_tokens);
            let (f1_mem, f1_ablated) = (token_f1(&mem, &qa.answer), token_f1(&abl, &qa.answer));
            results.push(QuestionResult {
                dialogue: dialogue.id.clone(),
                question: qi,
                lag: latmem::eval::evidence_lag(dialogue, qa).unwrap(),
                session: dialogue.scope_session(qa),
                f1_mem,
                f1_ablated,
                f1_baseline: token_f1(&base, &qa.answer),
                retained: retained_score(f1_mem, f1_ablated),
                prediction_mem: mem,
                prediction_ablated: abl,
                prediction_baseline: base,
                gold: qa.answer.clone(),
                input_hash: input_hash(&prompt),
            });
        }
    }
    (results, handle.memory().unwrap().fingerprint())
}

pub fn type2_determinism() -> Outcome {
    let model = lexicon_backbone(18);
    let corpus = small_corpus(1, 6, 19);
    let dialogue = &corpus[0];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let n_sessions = dialogue.sessions.len();
    for method in Method::ALL {
        let mut adapter = small_adapter(method, &model, 20);
        let mut r = rng(21);
        for p in adapter.params_mut().iter_mut() {
            if p.requires_grad {
                p.value = Tensor::randn(p.value.shape(), 0.3, &mut r);
            }
        }
        adapter.freeze();
        let (straight, fp) = scripted_run(&model, &adapter, dialogue, None);
        let (replay, fp_replay) = scripted_run(&model, &adapter, dialogue, None);
        ensure(straight == replay && fp == fp_replay, || format!("{method}: replay differs"))?;
        let path = dir.path().join(format!("{method}.mem"));
        let mid = dialogue.turn_count() / 2;
        let (resumed, fp_resumed) = scripted_run(&model, &adapter, dialogue, Some((mid, &path)));
        ensure(fp == fp_resumed, || format!("{method}: resumed memory differs"))?;
        let dk = knowledge_curve(&straight, n_sessions).1;
        let dk_resumed = knowledge_curve(&resumed, n_sessions).1;
        ensure(dk.to_bits() == dk_resumed.to_bits(), || format!("{method}: dK {dk} vs {dk_resumed}"))?;
        ensure(straight == resumed, || format!("{method}: answers differ after restore"))?;
    }
    Ok(format!("6 methods, snapshot at turn {} of {}", dialogue.turn_count() / 2, dialogue.turn_count()))
}

pub fn capacity_shapes() -> Outcome {
    let cfg = BackboneConfig::default();
    let d = cfg.d_model;
    let expected = [(Capacity::X1, (64, 256, 64, 8)), (Capacity::X10, (640, 810, 640, 80))];
    for (capacity, (n_p, d_h, s, k)) in expected {
        let dims = capacity.dims();
        ensure((dims.bank_size, dims.hebbian_dim, dims.slots, dims.top_k) == (n_p, d_h, s, k), || {
            format!("{capacity}: dims {dims:?}")
        })?;
        for method in Method::ALL {
            let adapter = Adapter::<f32>::new(method, WriteConfig::new(capacity), &cfg, 0).unwrap();
            let state = adapter.init_state().unwrap();
            let shapes: Vec<Vec<usize>> = state.tensors().iter().map(|t| t.shape().to_vec()).collect();
            let want: Vec<Vec<usize>> = match method {
                Method::M1 | Method::M2 | Method::M5 => vec![vec![n_p, d]],
                Method::M3 => vec![vec![n_p, d]; cfg.n_layers],
                Method::M4 => vec![vec![d_h, d_h]],
                Method::M6 => vec![vec![s, d]],
            };
            ensure(shapes == want, || format!("{method} {capacity}: state {shapes:?}"))?;
            if method == Method::M4 {
                ensure(adapter.param("wqh").unwrap().value.shape() == [d, d_h], || "wqh shape".into())?;
                ensure(adapter.param("h0.wk").unwrap().value.shape() == [d_h, d], || "recall key shape".into())?;
            }
            if method == Method::M6 {
                let mut state = state;
                let h = HiddenStates {
                    layers: Vec::new(),
                    last: Tensor::randn(&[5, d], 1.0, &mut rng(22)),
                };
                adapter.write_step(&mut state, &h).unwrap();
                let MemoryKind::Slots { last_written, .. } = &state.kind else {
                    return Err("slot variant".into());
                };
                ensure(last_written.len() == k, || format!("{capacity}: {} slots written", last_written.len()))?;
            }
        }
    }
    Ok("(64, 256, 64, 8) and (640, 810, 640, 80)".into())
}
