//! Acceptance suite: one test per criterion. Each test prints a single
//! pass line (visible with `--nocapture`); an assertion failure is the
//! corresponding fail line.

use std::collections::BTreeSet;
use std::time::Instant;

use longdoc::analysis;
use longdoc::attention::{
    attention_cost, full_attention, full_attention_cost, sliding_global_attention, AttentionSpec,
    SlidingInputs,
};
use longdoc::checkpoint;
use longdoc::corpus::{pack_corpus, write_shard, PackedSequence};
use longdoc::datasets::{record_text, synth_generate, synth_signal_at_start, TaskKind, TaskRecord};
use longdoc::encoder::{EncoderState, ForwardOpts, HeadKind, ModelConfig, ModelShape, SpecialIds};
use longdoc::metrics;
use longdoc::numerics::{finite_diff_check, ops, Tensor};
use longdoc::rng::Rng;
use longdoc::tokenizer::{self, train_wordpiece, TokenizerOptions, Vocab};
use longdoc::training::{
    self, compare_strategies, finetune, lr_at, mlm_accuracy, pretrain_mlm, run_grid, FinetuneOpts,
    GridSpec, Strategy, TrainConfig,
};

fn pass(n: usize, what: &str) {
    println!("criterion {n}: PASS - {what}");
}

fn random_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    Tensor::new(shape, data).unwrap()
}

fn config(
    vocab_size: usize,
    hidden: usize,
    n_layers: usize,
    n_heads: usize,
    max_positions: usize,
    shape: ModelShape,
    window: usize,
) -> ModelConfig {
    ModelConfig {
        vocab_size,
        hidden,
        n_layers,
        n_heads,
        ffn_dim: 2 * hidden,
        max_positions,
        shape,
        window,
        dropout: 0.0,
        specials: SpecialIds::default(),
    }
}

#[test]
fn criterion_01_attention_equivalence() {
    let start = Instant::now();
    let mut rng = Rng::new(11);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = 2 + rng.next_below(63) as usize; // 2..=64
        let n_heads = [1usize, 2, 4][rng.next_below(3) as usize];
        let head_dim = 2 + 2 * rng.next_below(4) as usize;
        let mut window = 2 * n + 2 * rng.next_below(8) as usize;
        if window % 2 == 1 {
            window += 1;
        }
        let n_globals = rng.next_below(n as u64 + 1) as usize;
        let mut globals: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut globals);
        globals.truncate(n_globals);
        globals.sort_unstable();
        let spec = AttentionSpec::new(n_heads, head_dim, window, globals).unwrap();
        let hidden = n_heads * head_dim;
        let q = random_tensor(vec![n, hidden], &mut rng);
        let k = random_tensor(vec![n, hidden], &mut rng);
        let v = random_tensor(vec![n, hidden], &mut rng);
        let mask = vec![true; n];
        // copied global projections: qg/kg/vg alias the locals
        let inputs = SlidingInputs { q: &q, k: &k, v: &v, qg: &q, kg: &k, vg: &v };
        let (sparse, _) = sliding_global_attention(&inputs, &spec, &mask).unwrap();
        let dense = full_attention(&q, &k, &v, n_heads, &mask, None).unwrap();
        let err = sparse.max_abs_diff(&dense);
        assert!(err < 1e-5, "case {case}: n={n} err={err}");
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    pass(1, &format!("200 sliding-vs-dense cases, max abs error {worst:.2e} in {elapsed:?}"));
}

#[test]
fn criterion_02_sparsity_scaling() {
    let spec = AttentionSpec::new(1, 8, 512, vec![]).unwrap();
    for n in [4096usize, 8192] {
        let small = attention_cost(n, &spec).score_entries as f64;
        let large = attention_cost(2 * n, &spec).score_entries as f64;
        let ratio = large / small;
        assert!((1.9..=2.1).contains(&ratio), "sparse ratio at n={n}: {ratio}");
        let dense_small = full_attention_cost(n, 1, 8).score_entries as f64;
        let dense_large = full_attention_cost(2 * n, 1, 8).score_entries as f64;
        assert_eq!(dense_large / dense_small, 4.0, "dense ratio at n={n}");
    }
    pass(2, "score entries scale linearly (ratio in [1.9, 2.1]); dense ratio exactly 4.0");
}

#[test]
fn criterion_03_gradient_fidelity() {
    let start = Instant::now();
    let tokens: Vec<u32> = vec![2, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 5];
    let globals = vec![0usize];
    let n = tokens.len();
    let cfg = config(20, 8, 2, 2, 16, ModelShape::Longformer, 4);

    for kind in [HeadKind::TokenCls, HeadKind::Mlm, HeadKind::SeqCls, HeadKind::StsReg] {
        let n_out = match kind {
            HeadKind::TokenCls => 3,
            HeadKind::Mlm => 20,
            HeadKind::SeqCls => 4,
            HeadKind::StsReg => 1,
        };
        let mut state32 = EncoderState::<f32>::init(cfg.clone(), 3).unwrap();
        state32.attach_head(kind, n_out, 103);
        let state = state32.cast::<f64>();

        let token_labels: Vec<Option<usize>> = match kind {
            HeadKind::TokenCls => tokens.iter().map(|&t| Some((t % 3) as usize)).collect(),
            HeadKind::Mlm => (0..n).map(|i| (i % 3 == 1).then(|| tokens[i] as usize)).collect(),
            _ => vec![],
        };
        // ridge and tilt terms keep every parameter's gradient above the
        // noise floor of central differences (some components only reach a
        // pooled loss through second-order paths and are ~1e-13); both terms
        // are polynomials of degree <= 2, so the central difference resolves
        // them exactly and any backward error still fails the check
        let lambda = 1e-3;
        let tilt = 1e-2;
        let loss_of = {
            let (tk, gl, lb) = (tokens.clone(), globals.clone(), token_labels.clone());
            move |s: &mut EncoderState<f64>, backprop: bool| -> longdoc::Result<f64> {
                let ridge: f64 = s
                    .flat_values()
                    .iter()
                    .map(|t| t.data().iter().map(|x| lambda * x * x + tilt * x).sum::<f64>())
                    .sum::<f64>();
                let (hidden, cache) = s.encode_with(&tk, &gl, &mut ForwardOpts::eval())?;
                match kind {
                    HeadKind::TokenCls | HeadKind::Mlm => {
                        let logits = s.apply_head(&hidden)?;
                        let (loss, d_logits) = ops::cross_entropy(&logits, &lb)?;
                        if backprop {
                            let d_hidden = s.head_backward_tokens(&hidden, &d_logits)?;
                            s.backward(&cache, &d_hidden)?;
                        }
                        Ok(loss + ridge)
                    }
                    HeadKind::SeqCls => {
                        let (logits, pooled) = s.pooled_forward(&hidden)?;
                        let (loss, d_logits) = ops::cross_entropy(&logits, &[Some(2)])?;
                        if backprop {
                            let d_hidden = s.head_backward_pooled(&pooled, tk.len(), &d_logits)?;
                            s.backward(&cache, &d_hidden)?;
                        }
                        Ok(loss + ridge)
                    }
                    HeadKind::StsReg => {
                        let (logits, pooled) = s.pooled_forward(&hidden)?;
                        let pred = logits.data()[0];
                        let loss = (pred - 0.7).powi(2);
                        if backprop {
                            let d = Tensor::new(vec![1, 1], vec![2.0 * (pred - 0.7)])?;
                            let d_hidden = s.head_backward_pooled(&pooled, tk.len(), &d)?;
                            s.backward(&cache, &d_hidden)?;
                        }
                        Ok(loss + ridge)
                    }
                }
            }
        };

        let mut work = state.clone();
        work.zero_grads();
        loss_of(&mut work, true).unwrap();
        let params = state.flat_values();
        let mut analytic = work.flat_grads();
        for (g, p) in analytic.iter_mut().zip(&params) {
            g.axpy(2.0 * lambda, p);
            for x in g.data_mut() {
                *x += tilt;
            }
        }
        let proto = state.clone();
        let lf = loss_of.clone();
        let mut f = move |p: &[Tensor<f64>]| -> longdoc::Result<f64> {
            let mut s = proto.clone();
            s.set_flat_values(p);
            lf(&mut s, false)
        };
        let err = finite_diff_check(&mut f, &params, &analytic, 3e-4).unwrap();
        assert!(err < 1e-3, "{kind:?}: gradient error {err}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    pass(3, &format!("finite-difference error < 1e-3 for all four head kinds in {elapsed:?}"));
}

#[test]
fn criterion_04_conversion_fidelity() {
    let cfg = config(30, 16, 2, 2, 512, ModelShape::Bert, 8);
    let bert = EncoderState::<f32>::init(cfg, 17).unwrap();
    let long = checkpoint::convert_bert_to_longformer(&bert, 4096, 1024).unwrap();

    // position table tiling over all 4,096 indices
    assert_eq!(long.pos_emb.value.shape()[0], 4096);
    for i in 0..4096 {
        assert_eq!(long.pos_emb.value.row(i), bert.pos_emb.value.row(i % 512), "position {i}");
    }

    let mut rng = Rng::new(23);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let n = 2 + rng.next_below(511) as usize; // 2..=512
        let ids: Vec<u32> = (0..n).map(|_| 6 + rng.next_below(24) as u32).collect();
        let hb = bert.encode(&ids, &[]).unwrap();
        let hl = long.encode(&ids, &[0]).unwrap();
        let err = hb.max_abs_diff(&hl);
        assert!(err <= 1e-5, "case {case}: n={n} err={err}");
        worst = worst.max(err);
    }
    pass(4, &format!("50 inputs match the source model (max abs error {worst:.2e}); positions tile"));
}

fn single_token_vocab() -> Vocab {
    let dir = std::env::temp_dir().join("longdoc-acceptance-vocab");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("single.txt");
    let mut tokens: Vec<String> = tokenizer::SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.push("a".into());
    std::fs::write(&path, tokens.join("\n") + "\n").unwrap();
    Vocab::load(&path).unwrap()
}

#[test]
fn criterion_05_packing_protocol() {
    let vocab = single_token_vocab();
    let expected = [(4094usize, 1usize), (4394, 1), (4694, 2)];
    let mut total_real = 0usize;
    for &(body_tokens, n_seqs) in &expected {
        let doc = vec!["a"; body_tokens].join(" ");
        let (seqs, stats) = pack_corpus([doc.as_str()], &vocab, 4094);
        assert_eq!(seqs.len(), n_seqs, "{body_tokens} body tokens");
        assert_eq!(stats.sequences, n_seqs);
        for s in &seqs {
            assert_eq!(s.ids.len(), 4096);
            assert_eq!(s.attention_mask.len(), 4096);
            total_real += s.n_real - 2; // body tokens, net of [CLS]/[EOS]
        }
    }
    // the 4,394-token document drops its 300-token tail (shorter than 512)
    assert_eq!(total_real, 4094 + 4094 + 4694);
    pass(5, "body lengths {4094, 4394, 4694} emit {1, 1, 2} sequences of exactly 4,096 tokens");
}

fn pattern_corpus() -> (Vocab, Vec<PackedSequence>) {
    // deterministic cycle: the masked token is a function of its neighbors
    let cycle = ["pa", "qe", "ri", "so", "tu", "vy", "wa", "xe", "yi", "zo"];
    let doc: Vec<&str> = (0..2400).map(|i| cycle[i % cycle.len()]).collect();
    let doc = doc.join(" ");
    let vocab = train_wordpiece([doc.as_str()], 40, 1, TokenizerOptions::default()).unwrap();
    let (seqs, _) = pack_corpus([doc.as_str()], &vocab, 126);
    (vocab, seqs)
}

#[test]
fn criterion_06_mlm_learnability() {
    let start = Instant::now();
    let (vocab, seqs) = pattern_corpus();
    let cfg = config(vocab.size(), 64, 2, 2, 128, ModelShape::Longformer, 32);
    let state = checkpoint::init_from_scratch(cfg, 9).unwrap();
    let train_cfg = TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 50,
        total_steps: 800,
        batch_size: 2,
        grad_accum_steps: 1,
        seed: 9,
        strategy: Strategy::Scratch,
    };
    let (trained, trace) = pretrain_mlm(state, &seqs, &vocab, &train_cfg).unwrap();

    let expect = (vocab.size() as f64).ln();
    let initial = trace[0].loss;
    assert!(
        (initial - expect).abs() < 0.1 * expect,
        "initial loss {initial} vs ln(vocab) {expect}"
    );

    let acc = mlm_accuracy(&trained, &seqs, &vocab, 77).unwrap();
    let chance = 1.0 / vocab.size() as f64;
    assert!(
        acc >= 10.0 * chance,
        "masked accuracy {acc} below 10x chance {}",
        10.0 * chance
    );
    assert!(trace.len() <= 2000);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 900.0, "took {elapsed:?}");
    pass(
        6,
        &format!(
            "initial loss {initial:.3} ~ ln({}) = {expect:.3}; masked accuracy {acc:.3} >= 10x chance ({:.3}) after {} steps in {elapsed:?}",
            vocab.size(),
            10.0 * chance,
            trace.len()
        ),
    );
}

fn split_records(records: &[TaskRecord]) -> (Vec<TaskRecord>, Vec<TaskRecord>, Vec<TaskRecord>) {
    let n = records.len();
    let tr = records[..n * 7 / 10].to_vec();
    let va = records[n * 7 / 10..n * 8 / 10].to_vec();
    let te = records[n * 8 / 10..].to_vec();
    (tr, va, te)
}

#[test]
fn criterion_07_strategy_comparison() {
    let records = synth_generate(TaskKind::Multiclass, 60, 41);
    let texts: Vec<String> = records.iter().map(record_text).collect();
    let vocab = train_wordpiece(texts.iter(), 400, 1, TokenizerOptions::default()).unwrap();
    let (tr, va, te) = split_records(&records);

    let long_cfg = config(vocab.size(), 32, 2, 2, 32, ModelShape::Longformer, 8);
    let bert_cfg = config(vocab.size(), 32, 2, 2, 32, ModelShape::Bert, 8);
    let bert = EncoderState::<f32>::init(bert_cfg, 3).unwrap();
    // short MLM run over the task texts as the continual-pre-training source
    let continual_src = {
        let (seqs, _) = pack_corpus(texts.iter(), &vocab, 8);
        let state = checkpoint::init_from_scratch(long_cfg.clone(), 4).unwrap();
        let cfg = TrainConfig {
            peak_lr: 5e-4,
            warmup_steps: 5,
            total_steps: 30,
            batch_size: 2,
            grad_accum_steps: 1,
            seed: 4,
            strategy: Strategy::Scratch,
        };
        pretrain_mlm(state, &seqs, &vocab, &cfg).unwrap().0
    };

    let grid = GridSpec { learning_rates: vec![1e-3, 5e-4, 2e-4, 1e-4], runs_per_lr: 4 };
    let mut outcomes = Vec::new();
    for strategy in [Strategy::Scratch, Strategy::Convert, Strategy::Continual] {
        let init = training::init_for_strategy(
            strategy,
            &long_cfg,
            Some(&bert),
            Some(&continual_src),
            7,
        )
        .unwrap();
        let outcome = run_grid(&grid, |lr, seed| {
            finetune(&init, &vocab, TaskKind::Multiclass, &tr, &va, &te, &FinetuneOpts { lr, seed, epochs: 25 })
        })
        .unwrap();
        assert!(
            outcome.mean_metric > 0.95,
            "{strategy:?}: weighted F1 {} below 0.95",
            outcome.mean_metric
        );
        outcomes.push((strategy, outcome));
    }
    let report = compare_strategies(TaskKind::Multiclass, outcomes.clone()).unwrap();
    assert_eq!(report.rows.len(), 3);
    let best = report.rows.iter().map(|r| r.mean_metric).fold(f64::MIN, f64::max);
    for row in &report.rows {
        if row.mean_metric == best {
            assert!(!row.starred, "best-tied strategy {:?} starred", row.strategy);
        }
        assert!((0.0..=1.0).contains(&row.p_vs_best));
    }
    // self-consistency: identical per-run metrics never differ significantly
    let clone = outcomes[0].1.clone();
    let twin = compare_strategies(
        TaskKind::Multiclass,
        vec![(Strategy::Scratch, clone.clone()), (Strategy::Convert, clone)],
    )
    .unwrap();
    assert!(twin.rows.iter().all(|r| !r.starred));
    let scores: Vec<String> =
        report.rows.iter().map(|r| format!("{:?} {:.3}", r.strategy, r.mean_metric)).collect();
    pass(7, &format!("all strategies above 0.95 weighted F1 ({}); no spurious stars", scores.join(", ")));
}

fn brute_force_spans(tags: &[String]) -> Vec<(String, usize, usize)> {
    // independent strict-IOB2 reference: find each B-, extend greedily
    let mut out = Vec::new();
    for (i, t) in tags.iter().enumerate() {
        if let Some(label) = t.strip_prefix("B-") {
            let mut end = i + 1;
            while end < tags.len() && tags[end] == format!("I-{label}") {
                end += 1;
            }
            out.push((label.to_string(), i, end));
        }
    }
    out
}

fn rank_oracle(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[test]
fn criterion_08_metric_oracles() {
    // span_f1 vs brute force over 1,000 random sequences
    let labels = ["A", "B", "C"];
    let mut rng = Rng::new(61);
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let random_tags = |rng: &mut Rng| -> Vec<String> {
        let len = 1 + rng.next_below(12) as usize;
        (0..len)
            .map(|_| {
                let l = labels[rng.next_below(3) as usize];
                match rng.next_below(3) {
                    0 => "O".to_string(),
                    1 => format!("B-{l}"),
                    _ => format!("I-{l}"),
                }
            })
            .collect()
    };
    for _ in 0..1000 {
        let g = random_tags(&mut rng);
        let p: Vec<String> = random_tags(&mut rng).into_iter().chain(std::iter::repeat("O".into())).take(g.len()).collect();
        gold.push(g);
        pred.push(p);
    }
    let got = metrics::span_f1(&gold, &pred).unwrap();
    let (mut tp, mut n_gold, mut n_pred) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(&pred) {
        let gs = brute_force_spans(g);
        let ps = brute_force_spans(p);
        n_gold += gs.len();
        n_pred += ps.len();
        let gset: BTreeSet<_> = gs.iter().collect();
        tp += ps.iter().filter(|s| gset.contains(s)).count();
    }
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    assert_eq!(got.precision, precision);
    assert_eq!(got.recall, recall);
    assert_eq!(got.f1, f1);

    // spearman vs 64-bit average-rank oracle on tied data
    let mut rng = Rng::new(62);
    for _ in 0..50 {
        let n = 3 + rng.next_below(30) as usize;
        let x: Vec<f64> = (0..n).map(|_| rng.next_below(6) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.next_below(6) as f64).collect();
        let rx = rank_oracle(&x);
        let ry = rank_oracle(&y);
        let m = n as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / m, ry.iter().sum::<f64>() / m);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        if vx == 0.0 || vy == 0.0 {
            assert!(metrics::spearman(&x, &y).is_err());
            continue;
        }
        let oracle = cov / (vx * vy).sqrt();
        let got = metrics::spearman(&x, &y).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    // enumerated examples
    let gold = vec!["P", "P", "N", "N"];
    let pred = vec!["P", "P", "P", "P"];
    assert_eq!(metrics::weighted_f1(&gold, &pred).unwrap(), (2.0 / 3.0) * 0.5);

    let s = |items: &[char]| items.iter().copied().collect::<BTreeSet<char>>();
    assert_eq!(metrics::emr_hamming(&[s(&['A', 'B'])], &[s(&['A'])]).unwrap(), (0.0, 0.5));
    assert_eq!(metrics::emr_hamming(&[s(&['A'])], &[s(&['B'])]).unwrap(), (0.0, 0.0));
    assert_eq!(metrics::emr_hamming(&[s(&['A', 'C'])], &[s(&['A', 'C'])]).unwrap(), (1.0, 1.0));

    assert_eq!(metrics::edrm(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), 1.0);
    assert_eq!(metrics::edrm(&[0.0], &[5.0]).unwrap(), 0.0);
    assert!((metrics::edrm(&[2.5], &[3.5]).unwrap() - 0.6).abs() < 1e-12);

    let (t, p) = metrics::students_ttest(&[0.5, 0.6, 0.7], &[0.5, 0.6, 0.7]).unwrap();
    assert_eq!((t, p), (0.0, 1.0));
    let (_, p) = metrics::students_ttest(&[1.0, 1.0, 1.0, 1.0], &[2.0, 2.0, 2.0, 2.0]).unwrap();
    assert_eq!(p, 0.0);

    pass(8, "span F1 brute-force agreement on 1,000 sequences; rank, set, EDRM and t-test examples exact");
}

#[test]
fn criterion_09_warmup_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.peak_lr, cfg.warmup_steps), (5e-5, 1000));
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert_eq!(lr_at(cfg.warmup_steps, &cfg), cfg.peak_lr);
    assert_eq!(lr_at(cfg.total_steps, &cfg), 0.0);
    let decay = (cfg.total_steps - cfg.warmup_steps) as f64;
    for i in 0..1000 {
        let step = i * cfg.total_steps / 999;
        let expect = if step <= cfg.warmup_steps {
            cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
        } else {
            cfg.peak_lr * (cfg.total_steps - step) as f64 / decay
        };
        assert_eq!(lr_at(step, &cfg), expect, "step {step}");
    }
    pass(9, "lr schedule hits 0 / peak / 0 and is piecewise linear at 1,000 sample points");
}

#[test]
fn criterion_10_analysis_reproducers() {
    // keyword classification: bucket counts partition the test set
    let records = synth_generate(TaskKind::Multiclass, 24, 83);
    let texts: Vec<String> = records.iter().map(record_text).collect();
    let vocab = train_wordpiece(texts.iter(), 400, 1, TokenizerOptions::default()).unwrap();
    let cfg = config(vocab.size(), 32, 1, 2, 64, ModelShape::Longformer, 8);
    let state = EncoderState::<f32>::init(cfg.clone(), 19).unwrap();
    let setup = training::task_setup(TaskKind::Multiclass, &records);
    let mut head_state = state.clone();
    head_state.attach_head(HeadKind::SeqCls, setup.classes.len(), 19);
    let results: Vec<(usize, bool)> = records
        .iter()
        .map(|r| {
            let pred = training::predict(&head_state, &vocab, &setup, r).unwrap();
            let longdoc::datasets::TaskPayload::Classify { label, .. } = &r.payload else {
                unreachable!()
            };
            let correct = matches!(&pred, training::Prediction::Class(c) if c == label);
            (r.word_count, correct)
        })
        .collect();
    let threshold = analysis::length_threshold(&records, &vocab, 512);
    let buckets = analysis::error_rate_by_length(&results, threshold);
    assert_eq!(buckets.short_count + buckets.long_count, records.len());

    // per-document attention mass conservation
    let profile = analysis::attention_profile(&state, &vocab, &texts).unwrap();
    for &mass in &profile.doc_total_mass {
        assert!((mass - cfg.n_heads as f64).abs() < 1e-5, "mass {mass}");
    }

    // planted signal at the document start pulls CLS attention forward
    let signal = synth_signal_at_start(60, 20, 29);
    let signal_texts: Vec<String> = signal.iter().map(record_text).collect();
    let sig_vocab = train_wordpiece(signal_texts.iter(), 400, 1, TokenizerOptions::default()).unwrap();
    let sig_cfg = config(sig_vocab.size(), 32, 1, 2, 64, ModelShape::Longformer, 8);
    let init = EncoderState::<f32>::init(sig_cfg, 31).unwrap();
    let (tr, va, te) = split_records(&signal);
    let (run, tuned) = training::finetune_full(
        &init,
        &sig_vocab,
        TaskKind::Multiclass,
        &tr,
        &va,
        &te,
        &FinetuneOpts { lr: 5e-4, seed: 0, epochs: 20 },
    )
    .unwrap();
    assert!(run.final_test > 0.95, "signal task not learned: {}", run.final_test);
    let profile = analysis::attention_profile(&tuned, &sig_vocab, &signal_texts).unwrap();
    let n = profile.mean_mass.len() as f64;
    let k = (n * 0.1).ceil();
    let uniform = k / n;
    let head = analysis::head_mass_fraction(&profile, 0.1);
    assert!(
        head >= 2.0 * uniform,
        "first-10% mass {head:.3} below 2x uniform baseline {:.3}",
        uniform
    );
    pass(
        10,
        &format!(
            "buckets partition the test set; per-doc mass conserved; first-10% mass {head:.3} >= 2x uniform {:.3}",
            uniform
        ),
    );
}

#[test]
fn criterion_11_determinism() {
    let dir = std::env::temp_dir().join("longdoc-acceptance-determinism");
    std::fs::create_dir_all(&dir).unwrap();
    let docs: Vec<String> = synth_generate(TaskKind::Multiclass, 20, 53).iter().map(record_text).collect();

    // tokenizer
    let v1 = train_wordpiece(docs.iter(), 300, 1, TokenizerOptions::default()).unwrap();
    let v2 = train_wordpiece(docs.iter(), 300, 1, TokenizerOptions::default()).unwrap();
    let (p1, p2) = (dir.join("v1.txt"), dir.join("v2.txt"));
    v1.save(&p1).unwrap();
    v2.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    // shards
    let (s1, _) = pack_corpus(docs.iter(), &v1, 8);
    let (s2, _) = pack_corpus(docs.iter(), &v1, 8);
    let (q1, q2) = (dir.join("s1.bin"), dir.join("s2.bin"));
    write_shard(&q1, &s1).unwrap();
    write_shard(&q2, &s2).unwrap();
    assert_eq!(std::fs::read(&q1).unwrap(), std::fs::read(&q2).unwrap());

    // pre-training checkpoints
    let cfg = config(v1.size(), 16, 1, 2, 32, ModelShape::Longformer, 8);
    let train_cfg = TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 2,
        total_steps: 8,
        batch_size: 2,
        grad_accum_steps: 1,
        seed: 5,
        strategy: Strategy::Scratch,
    };
    let run_once = |path: &std::path::Path| {
        let init = checkpoint::init_from_scratch(cfg.clone(), 5).unwrap();
        let (state, _) = pretrain_mlm(init, &s1, &v1, &train_cfg).unwrap();
        checkpoint::save(&state, &v1.hash(), path).unwrap();
    };
    let (c1, c2) = (dir.join("c1.ckpt"), dir.join("c2.ckpt"));
    run_once(&c1);
    run_once(&c2);
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());

    // fine-tuning reports
    let records = synth_generate(TaskKind::Multiclass, 12, 53);
    let init = EncoderState::<f32>::init(cfg, 6).unwrap();
    let opts = FinetuneOpts { lr: 1e-3, seed: 2, epochs: 2 };
    let r1 = finetune(&init, &v1, TaskKind::Multiclass, &records, &records, &records, &opts).unwrap();
    let r2 = finetune(&init, &v1, TaskKind::Multiclass, &records, &records, &records, &opts).unwrap();
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());

    pass(11, "vocab, shard, checkpoint and report artifacts are byte-identical across reruns");
}
