//! Training: the MLM pre-training loop with a linear warmup/decay schedule
//! and AdamW updates, the fine-tuning protocol with per-task input templates,
//! and the learning-rate grid runner with best-mean selection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{sample_mlm, PackedSequence};
use crate::datasets::{TaskKind, TaskPayload, TaskRecord};
use crate::encoder::{EncoderState, ForwardOpts, HeadKind, ModelShape};
use crate::error::{Error, Result};
use crate::metrics;
use crate::numerics::{ops, Tensor};
use crate::rng::Rng;
use crate::tokenizer::{self, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Scratch,
    Convert,
    Continual,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Strategy::Scratch),
            "convert" => Ok(Strategy::Convert),
            "continual" => Ok(Strategy::Continual),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 5e-5,
            warmup_steps: 1000,
            total_steps: 10_000,
            batch_size: 2,
            grad_accum_steps: 1,
            seed: 0,
            strategy: Strategy::Scratch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("total_steps, batch_size and grad_accum_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise-linear schedule: 0 to peak over the warmup, then peak back to 0
/// at total_steps.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step <= cfg.warmup_steps && cfg.warmup_steps > 0 {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let decay = cfg.total_steps - cfg.warmup_steps;
        if decay == 0 {
            0.0
        } else {
            cfg.peak_lr * (cfg.total_steps - step) as f64 / decay as f64
        }
    }
}

/// AdamW (decoupled weight decay). Moments are kept in f64; weight decay
/// skips biases and layer-norm parameters, the usual convention.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    fn decays(name: &str) -> bool {
        !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
    }

    pub fn step(&mut self, state: &mut EncoderState<f32>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut idx = 0usize;
        let lazy_init = self.m.is_empty();
        let (m, v) = (&mut self.m, &mut self.v);
        let t_first = self.t == 1 && lazy_init;
        state.visit_params_mut(&mut |name, p| {
            if t_first {
                m.push(vec![0.0; p.value.numel()]);
                v.push(vec![0.0; p.value.numel()]);
            }
            let decay = if Self::decays(&name) { wd } else { 0.0 };
            let pm = &mut m[idx];
            let pv = &mut v[idx];
            for (i, (val, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = *g as f64;
                pm[i] = b1 * pm[i] + (1.0 - b1) * g;
                pv[i] = b2 * pv[i] + (1.0 - b2) * g * g;
                let mhat = pm[i] / bc1;
                let vhat = pv[i] / bc2;
                let x = *val as f64;
                *val = (x - lr * (mhat / (vhat.sqrt() + eps) + decay * x)) as f32;
            }
            idx += 1;
        });
    }
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

fn trimmed_len(seq: &PackedSequence) -> usize {
    seq.n_real.max(1)
}

/// MLM pre-training over packed sequences. Returns the trained model and a
/// per-step loss trace. Deterministic given the config seed; a non-finite
/// loss aborts with the offending step index.
pub fn pretrain_mlm(
    mut state: EncoderState<f32>,
    seqs: &[PackedSequence],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(EncoderState<f32>, Vec<StepLog>)> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::Data("no pre-training sequences".into()));
    }
    if state.head.as_ref().map(|h| h.kind) != Some(HeadKind::Mlm) {
        state.attach_head(HeadKind::Mlm, vocab.size(), cfg.seed ^ 0x6d6c6d);
    }
    let mut opt = AdamW::new();
    let mut rng = Rng::new(cfg.seed);
    let micro = cfg.batch_size * cfg.grad_accum_steps;
    let mut trace = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        state.zero_grads();
        let mut loss_sum = 0.0;
        for _ in 0..micro {
            let seq = &seqs[rng.next_below(seqs.len() as u64) as usize];
            let batch = sample_mlm(seq, vocab, rng.next_u64())?;
            let n = trimmed_len(seq);
            let tokens = &batch.input_ids[..n];
            let targets: Vec<Option<usize>> =
                batch.labels[..n].iter().map(|l| l.map(|id| id as usize)).collect();
            let globals: Vec<usize> = if state.config.shape == ModelShape::Longformer { vec![0] } else { vec![] };
            let mut fwd = if state.config.dropout > 0.0 {
                ForwardOpts::train(rng.fork(step as u64))
            } else {
                ForwardOpts::eval()
            };
            let (hidden, cache) = state
                .encode_with(tokens, &globals, &mut fwd)
                .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
            let logits = state.apply_head(&hidden)?;
            let (loss, mut d_logits) = ops::cross_entropy(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite MLM loss at step {step}")));
            }
            loss_sum += loss;
            let scale = 1.0 / micro as f64;
            d_logits.data_mut().iter_mut().for_each(|g| *g *= scale as f32);
            let d_hidden = state.head_backward_tokens(&hidden, &d_logits)?;
            state.backward(&cache, &d_hidden)?;
        }
        let lr = lr_at(step + 1, cfg);
        opt.step(&mut state, lr);
        trace.push(StepLog { step, lr, loss: loss_sum / micro as f64 });
    }
    Ok((state, trace))
}

/// Top-1 accuracy at masked positions, for learnability checks.
pub fn mlm_accuracy(state: &EncoderState<f32>, seqs: &[PackedSequence], vocab: &Vocab, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut correct = 0usize;
    let mut total = 0usize;
    for seq in seqs {
        let batch = sample_mlm(seq, vocab, rng.next_u64())?;
        let n = trimmed_len(seq);
        let globals: Vec<usize> = if state.config.shape == ModelShape::Longformer { vec![0] } else { vec![] };
        let hidden = state.encode(&batch.input_ids[..n], &globals)?;
        let logits = state.apply_head(&hidden)?;
        for (i, label) in batch.labels[..n].iter().enumerate() {
            let Some(gold) = label else { continue };
            let row = logits.row(i);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            total += 1;
            if pred == *gold as usize {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Data("no masked positions to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub metric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub lr: f64,
    pub seed: u64,
    pub trace: Vec<EpochLog>,
    pub final_test: f64,
}

/// Label spaces derived from the training split.
#[derive(Debug, Clone)]
pub struct TaskSetup {
    pub kind: TaskKind,
    /// Classification classes; for MCQA and multi-label these are the
    /// distinct label combinations observed in training.
    pub classes: Vec<String>,
    /// Token-task tag inventory.
    pub tags: Vec<String>,
}

pub fn task_setup(kind: TaskKind, train: &[TaskRecord]) -> TaskSetup {
    let mut classes = BTreeSet::new();
    let mut tags = BTreeSet::new();
    for r in train {
        match &r.payload {
            TaskPayload::Classify { label, .. } => {
                classes.insert(label.clone());
            }
            TaskPayload::MultiLabel { labels, .. } => {
                classes.insert(labels.iter().cloned().collect::<Vec<_>>().join("+"));
            }
            TaskPayload::Mcqa { answer_set, .. } => {
                classes.insert(answer_set.iter().collect::<String>());
            }
            TaskPayload::Tokens { tags: t, .. } => {
                tags.extend(t.iter().cloned());
            }
            TaskPayload::Sts { .. } => {}
        }
    }
    TaskSetup { kind, classes: classes.into_iter().collect(), tags: tags.into_iter().collect() }
}

fn class_of(r: &TaskRecord) -> Option<String> {
    match &r.payload {
        TaskPayload::Classify { label, .. } => Some(label.clone()),
        TaskPayload::MultiLabel { labels, .. } => {
            Some(labels.iter().cloned().collect::<Vec<_>>().join("+"))
        }
        TaskPayload::Mcqa { answer_set, .. } => Some(answer_set.iter().collect::<String>()),
        _ => None,
    }
}

/// Token layout per task, truncated to `max_len`:
/// classification `[CLS] doc [EOS]`, STS `[CLS] t1 [SEP] t2 [EOS]`,
/// MCQA `[CLS] Q [SEP] A [SEP] B [SEP] C [SEP] D [SEP] E [EOS]`.
pub fn build_input(r: &TaskRecord, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    let sp = vocab.specials();
    let mut ids = vec![sp.cls];
    let push_text = |ids: &mut Vec<u32>, text: &str| {
        ids.extend(tokenizer::encode(text, vocab).ids);
    };
    match &r.payload {
        TaskPayload::Classify { text, .. } | TaskPayload::MultiLabel { text, .. } => {
            push_text(&mut ids, text);
        }
        TaskPayload::Sts { text1, text2, .. } => {
            push_text(&mut ids, text1);
            ids.push(sp.sep);
            push_text(&mut ids, text2);
        }
        TaskPayload::Mcqa { question, answers, .. } => {
            push_text(&mut ids, question);
            for a in answers {
                ids.push(sp.sep);
                push_text(&mut ids, a);
            }
        }
        TaskPayload::Tokens { tokens, .. } => {
            push_text(&mut ids, &tokens.join(" "));
        }
    }
    ids.truncate(max_len - 1);
    ids.push(sp.eos);
    ids
}

/// Token-task input: `[CLS] words [EOS]` with the tag index attached to each
/// word's first subword (None elsewhere).
fn build_token_input(
    tokens: &[String],
    tags: &[String],
    setup: &TaskSetup,
    vocab: &Vocab,
    max_len: usize,
) -> (Vec<u32>, Vec<Option<usize>>, Vec<usize>) {
    let sp = vocab.specials();
    let enc = tokenizer::encode(&tokens.join(" "), vocab);
    let mut ids = vec![sp.cls];
    ids.extend(enc.ids.iter().copied());
    ids.truncate(max_len - 1);
    ids.push(sp.eos);
    let mut targets = vec![None; ids.len()];
    let mut word_pos = Vec::with_capacity(tokens.len());
    for (w, &(start, _)) in enc.word_spans.iter().enumerate() {
        let pos = start + 1; // CLS offset
        word_pos.push(pos);
        if pos < ids.len() - 1 {
            targets[pos] = setup.tags.iter().position(|t| t == &tags[w]);
        }
    }
    (ids, targets, word_pos)
}

fn globals_for(state: &EncoderState<f32>) -> Vec<usize> {
    if state.config.shape == ModelShape::Longformer {
        vec![0]
    } else {
        vec![]
    }
}

/// Merge sentence records into one record per document (document-level
/// fine-tuning for Longformer-shaped models).
pub fn merge_documents(records: &[TaskRecord]) -> Vec<TaskRecord> {
    let mut out: Vec<TaskRecord> = Vec::new();
    for r in records {
        let TaskPayload::Tokens { doc_id, tokens, tags } = &r.payload else {
            out.push(r.clone());
            continue;
        };
        match out.last_mut() {
            Some(TaskRecord { payload: TaskPayload::Tokens { doc_id: d, tokens: t, tags: g }, word_count, .. })
                if d == doc_id =>
            {
                t.extend(tokens.iter().cloned());
                g.extend(tags.iter().cloned());
                *word_count = t.len();
            }
            _ => out.push(r.clone()),
        }
    }
    out
}

/// Predictions for evaluation: class string, tag sequence, or score.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class(String),
    Tags(Vec<String>),
    Score(f64),
}

pub fn predict(state: &EncoderState<f32>, vocab: &Vocab, setup: &TaskSetup, r: &TaskRecord) -> Result<Prediction> {
    let max_len = state.config.max_positions;
    let globals = globals_for(state);
    match setup.kind {
        TaskKind::Pos | TaskKind::Ner => {
            let TaskPayload::Tokens { tokens, tags, .. } = &r.payload else {
                return Err(Error::Data("expected token record".into()));
            };
            let (ids, _, word_pos) = build_token_input(tokens, tags, setup, vocab, max_len);
            let hidden = state.encode(&ids, &globals)?;
            let logits = state.apply_head(&hidden)?;
            let fallback = "O".to_string();
            let pred: Vec<String> = word_pos
                .iter()
                .map(|&p| {
                    if p >= ids.len() - 1 {
                        return fallback.clone(); // truncated word
                    }
                    let row = logits.row(p);
                    let best = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    setup.tags.get(best).cloned().unwrap_or_else(|| fallback.clone())
                })
                .collect();
            Ok(Prediction::Tags(pred))
        }
        TaskKind::Sts => {
            let ids = build_input(r, vocab, max_len);
            let hidden = state.encode(&ids, &globals)?;
            let logits = state.apply_head(&hidden)?;
            Ok(Prediction::Score((logits.data()[0] as f64).clamp(0.0, 5.0)))
        }
        _ => {
            let ids = build_input(r, vocab, max_len);
            let hidden = state.encode(&ids, &globals)?;
            let logits = state.apply_head(&hidden)?;
            let best = logits
                .row(0)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            Ok(Prediction::Class(setup.classes[best].clone()))
        }
    }
}

/// Primary metric per task family: span F1 (NER), token weighted F1 (POS),
/// weighted F1 (classification), multi-label weighted F1, Spearman (STS),
/// exact match ratio (MCQA). Unseen gold labels score as wrong.
pub fn evaluate(state: &EncoderState<f32>, vocab: &Vocab, setup: &TaskSetup, records: &[TaskRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    match setup.kind {
        TaskKind::Ner => {
            let mut gold = Vec::new();
            let mut pred = Vec::new();
            for r in records {
                let TaskPayload::Tokens { tags, .. } = &r.payload else { continue };
                let Prediction::Tags(p) = predict(state, vocab, setup, r)? else { unreachable!() };
                gold.push(tags.clone());
                pred.push(p);
            }
            Ok(metrics::span_f1(&gold, &pred)?.f1)
        }
        TaskKind::Pos => {
            let mut gold = Vec::new();
            let mut pred = Vec::new();
            for r in records {
                let TaskPayload::Tokens { tags, .. } = &r.payload else { continue };
                let Prediction::Tags(p) = predict(state, vocab, setup, r)? else { unreachable!() };
                gold.extend(tags.iter().cloned());
                pred.extend(p);
            }
            metrics::weighted_f1(&gold, &pred)
        }
        TaskKind::Multiclass => {
            let gold: Vec<String> = records.iter().filter_map(class_of).collect();
            let mut pred = Vec::new();
            for r in records {
                let Prediction::Class(c) = predict(state, vocab, setup, r)? else { unreachable!() };
                pred.push(c);
            }
            metrics::weighted_f1(&gold, &pred)
        }
        TaskKind::Multilabel => {
            let to_set = |s: &str| -> BTreeSet<String> {
                if s.is_empty() { BTreeSet::new() } else { s.split('+').map(String::from).collect() }
            };
            let gold: Vec<BTreeSet<String>> = records.iter().filter_map(|r| class_of(r).map(|c| to_set(&c))).collect();
            let mut pred = Vec::new();
            for r in records {
                let Prediction::Class(c) = predict(state, vocab, setup, r)? else { unreachable!() };
                pred.push(to_set(&c));
            }
            metrics::weighted_f1_multilabel(&gold, &pred)
        }
        TaskKind::Mcqa => {
            let to_set = |s: &str| -> BTreeSet<char> { s.chars().collect() };
            let gold: Vec<BTreeSet<char>> = records.iter().filter_map(|r| class_of(r).map(|c| to_set(&c))).collect();
            let mut pred = Vec::new();
            for r in records {
                let Prediction::Class(c) = predict(state, vocab, setup, r)? else { unreachable!() };
                pred.push(to_set(&c));
            }
            Ok(metrics::emr_hamming(&gold, &pred)?.0)
        }
        TaskKind::Sts => {
            let mut gold = Vec::new();
            let mut pred = Vec::new();
            for r in records {
                let TaskPayload::Sts { score, .. } = &r.payload else { continue };
                let Prediction::Score(p) = predict(state, vocab, setup, r)? else { unreachable!() };
                gold.push(*score);
                pred.push(p);
            }
            metrics::spearman(&gold, &pred)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneOpts {
    pub lr: f64,
    pub seed: u64,
    pub epochs: usize,
}

impl Default for FinetuneOpts {
    fn default() -> Self {
        FinetuneOpts { lr: 5e-5, seed: 0, epochs: 10 }
    }
}

/// One training step for one record; returns the loss.
fn finetune_step(
    state: &mut EncoderState<f32>,
    vocab: &Vocab,
    setup: &TaskSetup,
    r: &TaskRecord,
) -> Result<f64> {
    let max_len = state.config.max_positions;
    let globals = globals_for(state);
    state.zero_grads();
    match setup.kind {
        TaskKind::Pos | TaskKind::Ner => {
            let TaskPayload::Tokens { tokens, tags, .. } = &r.payload else {
                return Err(Error::Data("expected token record".into()));
            };
            let (ids, targets, _) = build_token_input(tokens, tags, setup, vocab, max_len);
            if targets.iter().all(Option::is_none) {
                return Ok(0.0); // every gold tag unseen in train: nothing to learn from
            }
            let (hidden, cache) = state.encode_with(&ids, &globals, &mut ForwardOpts::eval())?;
            let logits = state.apply_head(&hidden)?;
            let (loss, d_logits) = ops::cross_entropy(&logits, &targets)?;
            let d_hidden = state.head_backward_tokens(&hidden, &d_logits)?;
            state.backward(&cache, &d_hidden)?;
            Ok(loss)
        }
        TaskKind::Sts => {
            let TaskPayload::Sts { score, .. } = &r.payload else {
                return Err(Error::Data("expected STS record".into()));
            };
            let ids = build_input(r, vocab, max_len);
            let (hidden, cache) = state.encode_with(&ids, &globals, &mut ForwardOpts::eval())?;
            let (logits, pooled) = state.pooled_forward(&hidden)?;
            let p = logits.data()[0] as f64;
            let loss = (p - score).powi(2);
            let d_logits = Tensor::from_f64(vec![1, 1], &[2.0 * (p - score)])?;
            let d_hidden = state.head_backward_pooled(&pooled, ids.len(), &d_logits)?;
            state.backward(&cache, &d_hidden)?;
            Ok(loss)
        }
        _ => {
            let gold = class_of(r).ok_or_else(|| Error::Data("expected labeled record".into()))?;
            let Some(target) = setup.classes.iter().position(|c| c == &gold) else {
                return Ok(0.0); // label unseen in train
            };
            let ids = build_input(r, vocab, max_len);
            let (hidden, cache) = state.encode_with(&ids, &globals, &mut ForwardOpts::eval())?;
            let (logits, pooled) = state.pooled_forward(&hidden)?;
            let (loss, d_logits) = ops::cross_entropy(&logits, &[Some(target)])?;
            let d_hidden = state.head_backward_pooled(&pooled, ids.len(), &d_logits)?;
            state.backward(&cache, &d_hidden)?;
            Ok(loss)
        }
    }
}

/// Fine-tune `init` on one task. Epoch loop with seeded shuffling, constant
/// learning rate, best-validation checkpoint selection; the returned
/// final_test is scored with the best-validation parameters. NER and POS run
/// document-level on Longformer-shaped models, sentence-level otherwise.
pub fn finetune(
    init: &EncoderState<f32>,
    vocab: &Vocab,
    kind: TaskKind,
    train: &[TaskRecord],
    validation: &[TaskRecord],
    test: &[TaskRecord],
    opts: &FinetuneOpts,
) -> Result<RunResult> {
    finetune_full(init, vocab, kind, train, validation, test, opts).map(|(r, _)| r)
}

/// Like [`finetune`] but also returns the best-validation model state.
pub fn finetune_full(
    init: &EncoderState<f32>,
    vocab: &Vocab,
    kind: TaskKind,
    train: &[TaskRecord],
    validation: &[TaskRecord],
    test: &[TaskRecord],
    opts: &FinetuneOpts,
) -> Result<(RunResult, EncoderState<f32>)> {
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let doc_level = init.config.shape == ModelShape::Longformer && matches!(kind, TaskKind::Pos | TaskKind::Ner);
    let (train, validation, test) = if doc_level {
        (merge_documents(train), merge_documents(validation), merge_documents(test))
    } else {
        (train.to_vec(), validation.to_vec(), test.to_vec())
    };
    let setup = task_setup(kind, &train);
    let mut state = init.clone();
    let head_seed = opts.seed ^ 0x68656164;
    match kind {
        TaskKind::Pos | TaskKind::Ner => state.attach_head(HeadKind::TokenCls, setup.tags.len().max(1), head_seed),
        TaskKind::Sts => state.attach_head(HeadKind::StsReg, 1, head_seed),
        _ => state.attach_head(HeadKind::SeqCls, setup.classes.len().max(1), head_seed),
    }
    let mut opt = AdamW::new();
    let mut rng = Rng::new(opts.seed);
    let mut trace = Vec::new();
    let mut best: Option<(f64, EncoderState<f32>)> = None;
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for &i in &order {
            loss_sum += finetune_step(&mut state, vocab, &setup, &train[i])?;
            opt.step(&mut state, opts.lr);
        }
        if !loss_sum.is_finite() {
            return Err(Error::Numeric(format!("non-finite fine-tuning loss in epoch {epoch}")));
        }
        trace.push(EpochLog { epoch, split: "train_loss".into(), metric: loss_sum / train.len() as f64 });
        let val_records = if validation.is_empty() { &train } else { &validation };
        let val_metric = evaluate(&state, vocab, &setup, val_records)?;
        trace.push(EpochLog { epoch, split: "validation".into(), metric: val_metric });
        if best.as_ref().is_none_or(|(m, _)| val_metric > *m) {
            best = Some((val_metric, state.clone()));
        }
    }
    let (_, best_state) = best.expect("at least one epoch");
    let test_records = if test.is_empty() { &train } else { &test };
    let final_test = evaluate(&best_state, vocab, &setup, test_records)?;
    trace.push(EpochLog { epoch: opts.epochs, split: "test".into(), metric: final_test });
    Ok((RunResult { lr: opts.lr, seed: opts.seed, trace, final_test }, best_state))
}

/// Check that a checkpoint's head matches the task's label space before
/// running inference with it.
pub fn check_head(state: &EncoderState<f32>, setup: &TaskSetup) -> Result<()> {
    let Some(head) = &state.head else {
        return Err(Error::Config("checkpoint has no task head".into()));
    };
    let (want_kind, want_out) = match setup.kind {
        TaskKind::Pos | TaskKind::Ner => (HeadKind::TokenCls, setup.tags.len()),
        TaskKind::Sts => (HeadKind::StsReg, 1),
        _ => (HeadKind::SeqCls, setup.classes.len()),
    };
    if head.kind != want_kind {
        return Err(Error::Config(format!(
            "checkpoint head {:?} does not fit a {:?} task",
            head.kind, setup.kind
        )));
    }
    let n_out = head.weight.value.shape()[1];
    if n_out != want_out {
        return Err(Error::Config(format!(
            "checkpoint head has {n_out} outputs but the data defines {want_out} labels"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub runs_per_lr: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { learning_rates: vec![1e-4, 1e-5, 2e-5, 5e-5], runs_per_lr: 4 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRun {
    pub lr: f64,
    pub seed: u64,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridOutcome {
    pub selected_lr: f64,
    pub mean_metric: f64,
    pub runs: Vec<GridRun>,
    /// Final test metrics of the selected learning rate's runs, for t-tests.
    pub selected_metrics: Vec<f64>,
}

/// Run the full grid (each lr x each seed) through `runner` and select the
/// learning rate with the best mean metric. Ties break toward the smallest
/// learning rate. Failed runs are recorded and excluded from the mean; a
/// learning rate fails only if all of its runs fail.
pub fn run_grid(
    spec: &GridSpec,
    mut runner: impl FnMut(f64, u64) -> Result<RunResult>,
) -> Result<GridOutcome> {
    if spec.learning_rates.is_empty() || spec.runs_per_lr == 0 {
        return Err(Error::Config("grid needs at least one learning rate and one run".into()));
    }
    let mut lrs = spec.learning_rates.clone();
    lrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut runs = Vec::new();
    let mut best: Option<(f64, f64, Vec<f64>)> = None; // (mean, lr, metrics)
    for &lr in &lrs {
        let mut metrics = Vec::new();
        for seed in 0..spec.runs_per_lr as u64 {
            match runner(lr, seed) {
                Ok(r) => {
                    metrics.push(r.final_test);
                    runs.push(GridRun { lr, seed, metric: Some(r.final_test), error: None });
                }
                Err(e) => runs.push(GridRun { lr, seed, metric: None, error: Some(e.to_string()) }),
            }
        }
        if metrics.is_empty() {
            continue;
        }
        let mean = metrics.iter().sum::<f64>() / metrics.len() as f64;
        if best.as_ref().is_none_or(|(m, _, _)| mean > *m) {
            best = Some((mean, lr, metrics));
        }
    }
    let Some((mean_metric, selected_lr, selected_metrics)) = best else {
        return Err(Error::Data("every grid run failed".into()));
    };
    Ok(GridOutcome { selected_lr, mean_metric, runs, selected_metrics })
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub selected_lr: f64,
    pub mean_metric: f64,
    pub p_vs_best: f64,
    /// Significantly worse than the best strategy (p < 0.05).
    pub starred: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategyReport {
    pub task: TaskKind,
    pub rows: Vec<StrategyRow>,
}

/// Compare pre-training strategies on one task: each provides an initial
/// encoder, each runs the full grid, and every row is t-tested against the
/// best strategy's selected runs (the Table-3 protocol).
pub fn compare_strategies(
    task: TaskKind,
    outcomes: Vec<(Strategy, GridOutcome)>,
) -> Result<StrategyReport> {
    if outcomes.is_empty() {
        return Err(Error::Config("no strategies to compare".into()));
    }
    let best_idx = outcomes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.mean_metric.partial_cmp(&b.1 .1.mean_metric).unwrap())
        .unwrap()
        .0;
    let best_metrics = outcomes[best_idx].1.selected_metrics.clone();
    let mut rows = Vec::new();
    for (i, (strategy, outcome)) in outcomes.iter().enumerate() {
        let p = if i == best_idx {
            1.0
        } else {
            metrics::students_ttest(&best_metrics, &outcome.selected_metrics)?.1
        };
        rows.push(StrategyRow {
            strategy: *strategy,
            selected_lr: outcome.selected_lr,
            mean_metric: outcome.mean_metric,
            p_vs_best: p,
            starred: p < 0.05,
        });
    }
    Ok(StrategyReport { task, rows })
}

/// Build the initial encoder for a strategy at toy scale (used by the CLI
/// and the acceptance suite): scratch initializes fresh; convert starts from
/// a BERT-shaped model; continual adopts a Longformer checkpoint.
pub fn init_for_strategy(
    strategy: Strategy,
    config: &crate::encoder::ModelConfig,
    bert: Option<&EncoderState<f32>>,
    continual_src: Option<&EncoderState<f32>>,
    seed: u64,
) -> Result<EncoderState<f32>> {
    match strategy {
        Strategy::Scratch => checkpoint::init_from_scratch(config.clone(), seed),
        Strategy::Convert => {
            let src = bert.ok_or_else(|| Error::Config("convert strategy needs a BERT-shaped source".into()))?;
            checkpoint::convert_bert_to_longformer(src, config.max_positions, config.window)
        }
        Strategy::Continual => {
            let src = continual_src
                .ok_or_else(|| Error::Config("continual strategy needs a Longformer source".into()))?;
            if src.config.shape != ModelShape::Longformer {
                return Err(Error::Config("continual source must be Longformer-shaped".into()));
            }
            Ok(src.clone())
        }
    }
}
