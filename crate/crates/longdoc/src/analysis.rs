//! Post-hoc analyses: error rate by sequence-length bucket and CLS-attention
//! position profiles from the last encoder layer.

use serde::Serialize;

use crate::datasets::{record_text, TaskRecord};
use crate::encoder::{EncoderState, ForwardOpts, ModelShape};
use crate::error::{Error, Result};
use crate::tokenizer::{self, Vocab};

#[derive(Debug, Clone, Serialize)]
pub struct LengthBuckets {
    pub threshold: usize,
    pub short_count: usize,
    pub long_count: usize,
    pub short_errors: usize,
    pub long_errors: usize,
    /// None when the bucket is empty.
    pub short_rate: Option<f64>,
    pub long_rate: Option<f64>,
}

/// Largest word count W such that every test document with at most W words
/// tokenizes to at most `limit` subwords (computed empirically over the test
/// set). With no violating document the longest document's word count is
/// returned, capped below by `limit` itself.
pub fn length_threshold(records: &[TaskRecord], vocab: &Vocab, limit: usize) -> usize {
    let mut min_violator: Option<usize> = None;
    let mut max_words = 0usize;
    for r in records {
        max_words = max_words.max(r.word_count);
        let n_tokens = tokenizer::encode(&record_text(r), vocab).ids.len();
        if n_tokens > limit {
            min_violator = Some(min_violator.map_or(r.word_count, |m| m.min(r.word_count)));
        }
    }
    match min_violator {
        Some(w) => w.saturating_sub(1),
        None => max_words.max(limit),
    }
}

/// Bucket per-document results (word count, correct) at `threshold`.
/// Multi-label correctness is exact set match, decided by the caller.
pub fn error_rate_by_length(results: &[(usize, bool)], threshold: usize) -> LengthBuckets {
    let mut b = LengthBuckets {
        threshold,
        short_count: 0,
        long_count: 0,
        short_errors: 0,
        long_errors: 0,
        short_rate: None,
        long_rate: None,
    };
    for &(words, correct) in results {
        if words <= threshold {
            b.short_count += 1;
            b.short_errors += usize::from(!correct);
        } else {
            b.long_count += 1;
            b.long_errors += usize::from(!correct);
        }
    }
    if b.short_count > 0 {
        b.short_rate = Some(b.short_errors as f64 / b.short_count as f64);
    }
    if b.long_count > 0 {
        b.long_rate = Some(b.long_errors as f64 / b.long_count as f64);
    }
    b
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionProfile {
    /// Mean normalized CLS-attention mass per word position, averaged over
    /// the documents long enough to reach that position.
    pub mean_mass: Vec<f64>,
    pub doc_count: Vec<usize>,
    pub n_heads: usize,
    /// Raw per-document CLS mass summed over heads and positions; each entry
    /// equals n_heads up to rounding (softmax rows sum to 1).
    pub doc_total_mass: Vec<f64>,
    pub truncated_docs: usize,
}

/// Word-level CLS attention for one tokenized input. `word_spans` are
/// subword ranges into `ids`. Returns (per-word normalized mass, raw total).
pub fn cls_word_attention(
    state: &EncoderState<f32>,
    ids: &[u32],
    word_spans: &[(usize, usize)],
) -> Result<(Vec<f64>, f64)> {
    let globals: Vec<usize> = if state.config.shape == ModelShape::Longformer { vec![0] } else { vec![] };
    let mut opts = ForwardOpts::eval();
    opts.capture_cls_attention = true;
    let (_, cache) = state.encode_with(ids, &globals, &mut opts)?;
    let rows = cache
        .cls_attention
        .ok_or_else(|| Error::Data("CLS position is padding; no attention row".into()))?;
    let n_heads = rows.len() as f64;
    let mut per_pos = vec![0.0f64; ids.len()];
    let mut total = 0.0;
    for head in &rows {
        for &(col, w) in head {
            per_pos[col as usize] += w;
            total += w;
        }
    }
    let word_mass: Vec<f64> = word_spans
        .iter()
        .map(|&(s, e)| per_pos[s..e].iter().sum::<f64>() / n_heads)
        .collect();
    Ok((word_mass, total))
}

/// Last-layer CLS attention profile over a document collection, aggregated
/// from subwords to words by summing within each word span, then averaged
/// per word position over all documents reaching that position. Per-document
/// profiles are normalized by head count, so a single document's profile
/// sums to at most 1 (specials hold the remainder). Documents longer than
/// max_positions are truncated and counted.
pub fn attention_profile(state: &EncoderState<f32>, vocab: &Vocab, texts: &[String]) -> Result<AttentionProfile> {
    if texts.is_empty() {
        return Err(Error::Data("no documents for the attention profile".into()));
    }
    let sp = vocab.specials();
    let max_len = state.config.max_positions;
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut doc_total_mass = Vec::with_capacity(texts.len());
    let mut truncated_docs = 0usize;
    for text in texts {
        let enc = tokenizer::encode(text, vocab);
        let mut ids = vec![sp.cls];
        ids.extend(enc.ids.iter().copied());
        let mut spans: Vec<(usize, usize)> = enc.word_spans.iter().map(|&(s, e)| (s + 1, e + 1)).collect();
        if ids.len() + 1 > max_len {
            truncated_docs += 1;
            ids.truncate(max_len - 1);
            spans.retain_mut(|(s, e)| {
                *e = (*e).min(max_len - 1);
                s < e
            });
        }
        ids.push(sp.eos);
        let (word_mass, total) = cls_word_attention(state, &ids, &spans)?;
        doc_total_mass.push(total);
        if word_mass.len() > sums.len() {
            sums.resize(word_mass.len(), 0.0);
            counts.resize(word_mass.len(), 0);
        }
        for (i, m) in word_mass.iter().enumerate() {
            sums[i] += m;
            counts[i] += 1;
        }
    }
    let mean_mass = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    Ok(AttentionProfile {
        mean_mass,
        doc_count: counts,
        n_heads: state.config.n_heads,
        doc_total_mass,
        truncated_docs,
    })
}

/// CSV with the normalization documented in the header.
pub fn profile_csv(p: &AttentionProfile) -> String {
    let mut out = String::from(
        "# per-document word mass = sum of last-layer CLS attention over the word's subwords,\n\
         # summed across heads and divided by head count; column mean is over contributing docs\n\
         position,mean_mass,doc_count\n",
    );
    for (i, (m, c)) in p.mean_mass.iter().zip(&p.doc_count).enumerate() {
        out.push_str(&format!("{i},{m},{c}\n"));
    }
    out
}

/// Fraction of total profile mass in the first `fraction` of word positions.
pub fn head_mass_fraction(p: &AttentionProfile, fraction: f64) -> f64 {
    let n = p.mean_mass.len();
    if n == 0 {
        return 0.0;
    }
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let head: f64 = p.mean_mass[..k].iter().sum();
    let total: f64 = p.mean_mass.iter().sum();
    if total == 0.0 {
        0.0
    } else {
        head / total
    }
}
