//! Pre-training corpus ingestion: 4,096-token sequence packing, MLM mask
//! sampling, and binary shard I/O. Input corpora are UTF-8 plain text, one
//! document per line.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::{self, Vocab};

pub const SEQ_LEN: usize = 4096;
pub const BODY_LEN: usize = SEQ_LEN - 2;
/// A final chunk whose body is shorter than this is dropped.
pub const MIN_TAIL: usize = 512;

const SHARD_MAGIC: [u8; 4] = *b"LDSH";
const SHARD_VERSION: u32 = 1;

/// One packed pre-training sequence: `[CLS] body [EOS]` plus a `[PAD]` suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub ids: Vec<u32>,
    /// true = real token, false = padding.
    pub attention_mask: Vec<bool>,
    pub n_real: usize,
}

impl PackedSequence {
    pub fn validate(&self, seq_len: usize, pad: u32) -> Result<()> {
        if self.ids.len() != seq_len || self.attention_mask.len() != seq_len {
            return Err(Error::Data(format!(
                "packed sequence length {} != {seq_len}",
                self.ids.len()
            )));
        }
        if self.n_real > seq_len {
            return Err(Error::Data(format!("n_real {} exceeds {seq_len}", self.n_real)));
        }
        for i in 0..seq_len {
            let real = i < self.n_real;
            if self.attention_mask[i] != real {
                return Err(Error::Data(format!("padding is not a contiguous suffix at {i}")));
            }
            if !real && self.ids[i] != pad {
                return Err(Error::Data(format!("non-PAD id in padding at {i}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PackStats {
    pub documents: usize,
    pub empty_documents: usize,
    pub dropped_tails: usize,
    pub sequences: usize,
}

/// Chunk each document's subword stream into bodies of `body_len`, wrap each
/// as `[CLS] body [EOS]`, and pad to `body_len + 2`. A final chunk with fewer
/// than [`MIN_TAIL`] body tokens is dropped. Chunks never span documents;
/// empty documents are skipped and counted.
pub fn pack_corpus<I>(documents: I, vocab: &Vocab, body_len: usize) -> (Vec<PackedSequence>, PackStats)
where
    I: IntoIterator,
    I::Item: AsRef<str>,
{
    let seq_len = body_len + 2;
    let sp = vocab.specials();
    let mut out = Vec::new();
    let mut stats = PackStats::default();
    for doc in documents {
        stats.documents += 1;
        let ids = tokenizer::encode(doc.as_ref(), vocab).ids;
        if ids.is_empty() {
            stats.empty_documents += 1;
            continue;
        }
        for chunk in ids.chunks(body_len) {
            if chunk.len() < body_len && chunk.len() < MIN_TAIL.min(body_len) {
                stats.dropped_tails += 1;
                continue;
            }
            let n_real = chunk.len() + 2;
            let mut seq_ids = Vec::with_capacity(seq_len);
            seq_ids.push(sp.cls);
            seq_ids.extend_from_slice(chunk);
            seq_ids.push(sp.eos);
            seq_ids.resize(seq_len, sp.pad);
            let attention_mask = (0..seq_len).map(|i| i < n_real).collect();
            out.push(PackedSequence { ids: seq_ids, attention_mask, n_real });
            stats.sequences += 1;
        }
    }
    (out, stats)
}

/// MLM training batch for one sequence.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    /// ids with [MASK]/random/kept substitutions applied.
    pub input_ids: Vec<u32>,
    /// original id at selected positions, None elsewhere.
    pub labels: Vec<Option<u32>>,
    pub selected: Vec<bool>,
}

/// Select round(15% of eligible) positions (real, non-special) and apply the
/// BERT 80/10/10 substitution: [MASK], a uniform random non-special id, or
/// the original id. Deterministic for a given seed.
pub fn sample_mlm(seq: &PackedSequence, vocab: &Vocab, seed: u64) -> Result<MaskedBatch> {
    let n_specials = tokenizer::SPECIAL_TOKENS.len() as u32;
    let vocab_size = vocab.size() as u32;
    if vocab_size <= n_specials {
        return Err(Error::Config("vocab has no non-special tokens".into()));
    }
    let sp = vocab.specials();
    let mut eligible: Vec<usize> = (0..seq.n_real)
        .filter(|&i| seq.attention_mask[i] && seq.ids[i] >= n_specials)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data("no eligible positions for MLM masking".into()));
    }
    let k = ((0.15 * eligible.len() as f64).round() as usize).max(1);
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut eligible);
    eligible.truncate(k);

    let mut input_ids = seq.ids.clone();
    let mut labels = vec![None; seq.ids.len()];
    let mut selected = vec![false; seq.ids.len()];
    for &pos in &eligible {
        labels[pos] = Some(seq.ids[pos]);
        selected[pos] = true;
        let r = rng.next_f64();
        if r < 0.8 {
            input_ids[pos] = sp.mask;
        } else if r < 0.9 {
            input_ids[pos] = n_specials + rng.next_below((vocab_size - n_specials) as u64) as u32;
        }
    }
    Ok(MaskedBatch { input_ids, labels, selected })
}

/// Write sequences to a binary shard: header (magic, version, seq len,
/// count), then per sequence the ids as 32-bit little-endian ints followed by
/// the attention mask as packed bits (LSB first).
pub fn write_shard(path: &Path, seqs: &[PackedSequence]) -> Result<()> {
    let seq_len = match seqs.first() {
        Some(s) => s.ids.len(),
        None => return Err(Error::Data("refusing to write an empty shard".into())),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&SHARD_MAGIC)?;
    f.write_all(&SHARD_VERSION.to_le_bytes())?;
    f.write_all(&(seq_len as u32).to_le_bytes())?;
    f.write_all(&(seqs.len() as u64).to_le_bytes())?;
    let mask_bytes = seq_len.div_ceil(8);
    for s in seqs {
        if s.ids.len() != seq_len {
            return Err(Error::Data("mixed sequence lengths in one shard".into()));
        }
        for &id in &s.ids {
            f.write_all(&(id as i32).to_le_bytes())?;
        }
        let mut bits = vec![0u8; mask_bytes];
        for (i, &m) in s.attention_mask.iter().enumerate() {
            if m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        f.write_all(&bits)?;
    }
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Vec<PackedSequence>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 20];
    f.read_exact(&mut head)
        .map_err(|_| Error::Data(format!("{}: truncated shard header", path.display())))?;
    if head[0..4] != SHARD_MAGIC {
        return Err(Error::Data(format!("{}: not a shard file", path.display())));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != SHARD_VERSION {
        return Err(Error::Data(format!(
            "{}: shard version {version}, expected {SHARD_VERSION}",
            path.display()
        )));
    }
    let seq_len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    let mask_bytes = seq_len.div_ceil(8);
    let mut out = Vec::with_capacity(count);
    let mut id_buf = vec![0u8; seq_len * 4];
    let mut bit_buf = vec![0u8; mask_bytes];
    for _ in 0..count {
        f.read_exact(&mut id_buf)
            .map_err(|_| Error::Data(format!("{}: truncated shard payload", path.display())))?;
        f.read_exact(&mut bit_buf)
            .map_err(|_| Error::Data(format!("{}: truncated shard payload", path.display())))?;
        let ids: Vec<u32> = id_buf
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().unwrap()) as u32)
            .collect();
        let attention_mask: Vec<bool> =
            (0..seq_len).map(|i| bit_buf[i / 8] >> (i % 8) & 1 == 1).collect();
        let n_real = attention_mask.iter().filter(|&&m| m).count();
        out.push(PackedSequence { ids, attention_mask, n_real });
    }
    Ok(out)
}

/// Deterministic synthetic corpus: documents of space-separated pseudo-words
/// drawn from a fixed syllable inventory. Used by tests and the toy
/// pre-training runs.
pub fn synthetic_corpus(n_docs: usize, min_words: usize, max_words: usize, seed: u64) -> Vec<String> {
    const SYLLABLES: [&str; 12] =
        ["pa", "ti", "ent", "car", "dio", "re", "nal", "fe", "bri", "le", "mg", "dose"];
    let mut rng = Rng::new(seed);
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let n_words = min_words + rng.next_below((max_words - min_words + 1) as u64) as usize;
        let mut doc = String::new();
        for w in 0..n_words {
            if w > 0 {
                doc.push(' ');
            }
            let n_syl = 1 + rng.next_below(3) as usize;
            for _ in 0..n_syl {
                doc.push_str(SYLLABLES[rng.next_below(SYLLABLES.len() as u64) as usize]);
            }
        }
        docs.push(doc);
    }
    docs
}
