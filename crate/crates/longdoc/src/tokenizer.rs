//! WordPiece tokenizer: training by likelihood-ratio pair merges, greedy
//! longest-match-first encoding, and decoding. The vocabulary file is plain
//! UTF-8, one token per line, line number = id, specials first.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::encoder::SpecialIds;
use crate::error::{Error, Result};

pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[EOS]"];
pub const CONTINUATION: &str = "##";

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TokenizerOptions {
    /// NFC-normalize input text.
    pub nfc: bool,
    pub lowercase: bool,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        TokenizerOptions { nfc: true, lowercase: false }
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pub options: TokenizerOptions,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, options: TokenizerOptions) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocab must start with {s} at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index, options })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds { pad: 0, unk: 1, cls: 2, sep: 3, mask: 4, eos: 5 }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("token id {id} out of range (vocab size {})", self.size())))
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let tokens: Vec<String> = f.lines().collect::<std::io::Result<_>>()?;
        Vocab::from_tokens(tokens, TokenizerOptions::default())
    }

    /// SHA-256 over the token list; identifies the tokenizer in checkpoints.
    pub fn hash(&self) -> String {
        use sha2::Digest;
        let mut h = sha2::Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn normalize(&self, text: &str) -> String {
        let mut s: String = if self.options.nfc { text.nfc().collect() } else { text.to_string() };
        if self.options.lowercase {
            s = s.to_lowercase();
        }
        s
    }
}

/// Subword encoding of one text, with per-word id spans for word-level
/// attention aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    /// For input word `w`, `word_spans[w]` is the `[start, end)` range of its
    /// subword ids within `ids`.
    pub word_spans: Vec<(usize, usize)>,
}

/// Train a WordPiece vocabulary. Starting from the character alphabet, the
/// adjacent pair with the highest likelihood-ratio score
/// `freq(ab) / (freq(a) * freq(b))` is merged until `target_size` tokens
/// exist or no pair reaches `min_freq`. Ties break lexicographically on the
/// pair, so training is deterministic for a given corpus.
pub fn train_wordpiece<I>(corpus: I, target_size: usize, min_freq: u64, options: TokenizerOptions) -> Result<Vocab>
where
    I: IntoIterator,
    I::Item: AsRef<str>,
{
    // word counts
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    let nfc_opts = Vocab {
        tokens: vec![],
        index: HashMap::new(),
        options,
    };
    for doc in corpus {
        for w in nfc_opts.normalize(doc.as_ref()).split_whitespace() {
            *word_counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Data("tokenizer training corpus is empty".into()));
    }
    // initial segmentation: first char bare, continuations ## prefixed
    let mut segs: Vec<(Vec<String>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| {
            let pieces: Vec<String> = w
                .chars()
                .enumerate()
                .map(|(i, ch)| if i == 0 { ch.to_string() } else { format!("{CONTINUATION}{ch}") })
                .collect();
            (pieces, c)
        })
        .collect();
    segs.sort_by(|a, b| a.0.cmp(&b.0)); // deterministic iteration order

    let mut alphabet: Vec<String> = segs.iter().flat_map(|(p, _)| p.iter().cloned()).collect();
    alphabet.sort();
    alphabet.dedup();

    let base = SPECIAL_TOKENS.len() + alphabet.len();
    if target_size < base {
        return Err(Error::Config(format!(
            "target vocab size {target_size} smaller than specials + alphabet ({base})"
        )));
    }
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);

    while tokens.len() < target_size {
        // frequency tables over the current segmentation
        let mut sym_freq: HashMap<&str, u64> = HashMap::new();
        let mut pair_freq: HashMap<(&str, &str), u64> = HashMap::new();
        for (pieces, count) in &segs {
            for p in pieces {
                *sym_freq.entry(p).or_insert(0) += count;
            }
            for win in pieces.windows(2) {
                *pair_freq.entry((&win[0], &win[1])).or_insert(0) += count;
            }
        }
        let mut best: Option<((&str, &str), f64)> = None;
        for (&pair, &freq) in &pair_freq {
            if freq < min_freq {
                continue;
            }
            let score = freq as f64 / (sym_freq[pair.0] as f64 * sym_freq[pair.1] as f64);
            let better = match best {
                None => true,
                Some((bp, bs)) => score > bs || (score == bs && pair < bp),
            };
            if better {
                best = Some((pair, score));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let merged = format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b));
        let (a, b) = (a.to_string(), b.to_string());
        tokens.push(merged.clone());
        for (pieces, _) in segs.iter_mut() {
            let mut i = 0;
            while i + 1 < pieces.len() {
                if pieces[i] == a && pieces[i + 1] == b {
                    pieces[i] = merged.clone();
                    pieces.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
    }
    Vocab::from_tokens(tokens, options)
}

/// Whitespace pre-split, then greedy longest-match-first per word. A word
/// with no full segmentation becomes a single `[UNK]`.
pub fn encode(text: &str, vocab: &Vocab) -> Encoding {
    let text = vocab.normalize(text);
    let mut ids = Vec::new();
    let mut word_spans = Vec::new();
    for word in text.split_whitespace() {
        let start = ids.len();
        match segment_word(word, vocab) {
            Some(mut piece_ids) => ids.append(&mut piece_ids),
            None => ids.push(vocab.specials().unk),
        }
        word_spans.push((start, ids.len()));
    }
    Encoding { ids, word_spans }
}

fn segment_word(word: &str, vocab: &Vocab) -> Option<Vec<u32>> {
    let chars: Vec<char> = word.chars().collect();
    let mut ids = Vec::new();
    let mut pos = 0;
    while pos < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > pos {
            let piece: String = chars[pos..end].iter().collect();
            let candidate = if pos == 0 { piece } else { format!("{CONTINUATION}{piece}") };
            if let Some(id) = vocab.id(&candidate) {
                found = Some((id, end));
                break;
            }
            end -= 1;
        }
        match found {
            Some((id, e)) => {
                ids.push(id);
                pos = e;
            }
            None => return None,
        }
    }
    Some(ids)
}

/// Strips specials, joins `##` continuations without a space.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id)?;
        if vocab.is_special(id) {
            continue;
        }
        if let Some(cont) = tok.strip_prefix(CONTINUATION) {
            out.push_str(cont);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    Ok(out)
}
