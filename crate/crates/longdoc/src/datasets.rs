//! Task-data readers, label-space builders, split handling, and synthetic
//! generators for the five downstream task families. Token-level tasks use
//! CoNLL-style TSV (token TAB tag, blank line = sentence, `-DOCSTART-` =
//! document boundary); the other tasks use JSON-lines with kind-specific
//! fields. See docs/formats.md for examples.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Pos,
    Ner,
    Multiclass,
    Multilabel,
    Sts,
    Mcqa,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pos" => Ok(TaskKind::Pos),
            "ner" => Ok(TaskKind::Ner),
            "multiclass" => Ok(TaskKind::Multiclass),
            "multilabel" => Ok(TaskKind::Multilabel),
            "sts" => Ok(TaskKind::Sts),
            "mcqa" => Ok(TaskKind::Mcqa),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskPayload {
    /// POS and NER: one sentence of tokens with aligned tags.
    Tokens { doc_id: usize, tokens: Vec<String>, tags: Vec<String> },
    Classify { text: String, label: String },
    MultiLabel { text: String, labels: BTreeSet<String> },
    Sts { text1: String, text2: String, score: f64 },
    Mcqa { question: String, answers: Vec<String>, answer_set: BTreeSet<char> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub kind: TaskKind,
    pub payload: TaskPayload,
    /// Whitespace-token count of the raw text (Table-5 length buckets).
    pub word_count: usize,
    /// file:line, for diagnostics.
    pub location: String,
    /// Non-fatal issues, e.g. invalid IOB2 transitions.
    pub warnings: Vec<String>,
}

fn is_valid_tag(tag: &str, kind: TaskKind) -> bool {
    match kind {
        TaskKind::Pos => !tag.is_empty() && !tag.contains(char::is_whitespace),
        _ => tag == "O" || tag.strip_prefix("B-").is_some_and(|l| !l.is_empty())
            || tag.strip_prefix("I-").is_some_and(|l| !l.is_empty()),
    }
}

fn iob2_transition_warnings(tags: &[String]) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        if let Some(label) = tag.strip_prefix("I-") {
            let ok = prev.is_some_and(|p| {
                p.strip_prefix("B-").or_else(|| p.strip_prefix("I-")) == Some(label)
            });
            if !ok {
                warnings.push(format!("position {i}: I-{label} does not continue an entity"));
            }
        }
        prev = Some(tag);
    }
    warnings
}

/// Read a CoNLL-style TSV file of POS or NER sentences.
pub fn read_conll(path: &Path, kind: TaskKind) -> Result<Vec<TaskRecord>> {
    if !matches!(kind, TaskKind::Pos | TaskKind::Ner) {
        return Err(Error::Config(format!("{kind:?} is not a CoNLL task")));
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut doc_id = 0usize;
    let mut sent_start = 1usize;
    let flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, doc_id: usize, line: usize, records: &mut Vec<TaskRecord>| {
        if tokens.is_empty() {
            return;
        }
        let warnings = if kind == TaskKind::Ner { iob2_transition_warnings(tags) } else { Vec::new() };
        records.push(TaskRecord {
            kind,
            word_count: tokens.len(),
            payload: TaskPayload::Tokens {
                doc_id,
                tokens: std::mem::take(tokens),
                tags: std::mem::take(tags),
            },
            location: format!("{}:{line}", path.display()),
            warnings,
        });
    };
    for (lineno, line) in f.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut tags, doc_id, sent_start, &mut records);
            sent_start = lineno + 1;
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            flush(&mut tokens, &mut tags, doc_id, sent_start, &mut records);
            doc_id += 1;
            sent_start = lineno + 1;
            continue;
        }
        let Some((token, tag)) = trimmed.split_once('\t') else {
            return Err(Error::Parse {
                location: format!("{}:{lineno}", path.display()),
                message: "expected token TAB tag".into(),
            });
        };
        if token.is_empty() || !is_valid_tag(tag, kind) {
            return Err(Error::Parse {
                location: format!("{}:{lineno}", path.display()),
                message: format!("invalid token/tag pair {trimmed:?}"),
            });
        }
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags, doc_id, sent_start, &mut records);
    Ok(records)
}

pub fn write_conll(path: &Path, records: &[TaskRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut last_doc = None;
    for r in records {
        let TaskPayload::Tokens { doc_id, tokens, tags } = &r.payload else {
            return Err(Error::Config("write_conll needs token records".into()));
        };
        if last_doc != Some(*doc_id) {
            if last_doc.is_some() || *doc_id > 0 {
                writeln!(f, "-DOCSTART-\n")?;
            }
            last_doc = Some(*doc_id);
        }
        for (t, g) in tokens.iter().zip(tags) {
            writeln!(f, "{t}\t{g}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ClassifyLine {
    text: String,
    label: String,
}
#[derive(Serialize, Deserialize)]
struct MultiLabelLine {
    text: String,
    labels: Vec<String>,
}
#[derive(Serialize, Deserialize)]
struct StsLine {
    text1: String,
    text2: String,
    score: f64,
}
#[derive(Serialize, Deserialize)]
struct McqaLine {
    question: String,
    answers: Vec<String>,
    answer_set: Vec<char>,
}

fn words(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Read a JSON-lines task file for the non-token task kinds.
pub fn read_jsonl(path: &Path, kind: TaskKind) -> Result<Vec<TaskRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{}:{lineno}", path.display());
        let parse_err = |message: String| Error::Parse { location: location.clone(), message };
        let (payload, word_count) = match kind {
            TaskKind::Multiclass => {
                let l: ClassifyLine =
                    serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                let wc = words(&l.text);
                (TaskPayload::Classify { text: l.text, label: l.label }, wc)
            }
            TaskKind::Multilabel => {
                let l: MultiLabelLine =
                    serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                let wc = words(&l.text);
                (TaskPayload::MultiLabel { text: l.text, labels: l.labels.into_iter().collect() }, wc)
            }
            TaskKind::Sts => {
                let l: StsLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                if !(0.0..=5.0).contains(&l.score) {
                    return Err(parse_err(format!("STS score {} outside [0,5]", l.score)));
                }
                let wc = words(&l.text1) + words(&l.text2);
                (TaskPayload::Sts { text1: l.text1, text2: l.text2, score: l.score }, wc)
            }
            TaskKind::Mcqa => {
                let l: McqaLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                if l.answers.len() != 5 {
                    return Err(parse_err(format!("expected 5 answers, got {}", l.answers.len())));
                }
                let set: BTreeSet<char> = l.answer_set.into_iter().collect();
                if set.is_empty() || !set.iter().all(|c| ('A'..='E').contains(c)) {
                    return Err(parse_err("answer set must be a non-empty subset of A..E".into()));
                }
                let wc = words(&l.question) + l.answers.iter().map(|a| words(a)).sum::<usize>();
                (TaskPayload::Mcqa { question: l.question, answers: l.answers, answer_set: set }, wc)
            }
            TaskKind::Pos | TaskKind::Ner => {
                return Err(Error::Config(format!("{kind:?} uses the CoNLL format")))
            }
        };
        records.push(TaskRecord { kind, payload, word_count, location, warnings: Vec::new() });
    }
    Ok(records)
}

pub fn write_jsonl(path: &Path, records: &[TaskRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = match &r.payload {
            TaskPayload::Classify { text, label } => {
                serde_json::to_string(&ClassifyLine { text: text.clone(), label: label.clone() })?
            }
            TaskPayload::MultiLabel { text, labels } => serde_json::to_string(&MultiLabelLine {
                text: text.clone(),
                labels: labels.iter().cloned().collect(),
            })?,
            TaskPayload::Sts { text1, text2, score } => serde_json::to_string(&StsLine {
                text1: text1.clone(),
                text2: text2.clone(),
                score: *score,
            })?,
            TaskPayload::Mcqa { question, answers, answer_set } => serde_json::to_string(&McqaLine {
                question: question.clone(),
                answers: answers.clone(),
                answer_set: answer_set.iter().copied().collect(),
            })?,
            TaskPayload::Tokens { .. } => {
                return Err(Error::Config("token records use the CoNLL format".into()))
            }
        };
        writeln!(f, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.7, validation: 0.1, test: 0.2, seed: 0 }
    }
}

/// Seeded shuffle then partition into train/validation/test.
pub fn split(records: Vec<TaskRecord>, spec: &SplitSpec) -> Result<(Vec<TaskRecord>, Vec<TaskRecord>, Vec<TaskRecord>)> {
    if (spec.train + spec.validation + spec.test - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split fractions must sum to 1".into()));
    }
    if records.len() < 3 {
        return Err(Error::Data(format!("need at least 3 records to split, got {}", records.len())));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(spec.seed);
    rng.shuffle(&mut order);
    let n_train = (spec.train * n as f64).round() as usize;
    let n_val = (spec.validation * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let mut shuffled: Vec<Option<TaskRecord>> = records.into_iter().map(Some).collect();
    let take = |idx: &[usize], shuffled: &mut Vec<Option<TaskRecord>>| -> Vec<TaskRecord> {
        idx.iter().map(|&i| shuffled[i].take().unwrap()).collect()
    };
    let train = take(&order[..n_train], &mut shuffled);
    let val = take(&order[n_train..n_train + n_val], &mut shuffled);
    let test = take(&order[n_train + n_val..], &mut shuffled);
    Ok((train, val, test))
}

/// Sorted distinct labels seen in training records; classification heads and
/// evaluation index into this.
pub fn label_space(records: &[TaskRecord]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for r in records {
        match &r.payload {
            TaskPayload::Classify { label, .. } => {
                set.insert(label.clone());
            }
            TaskPayload::Mcqa { answer_set, .. } => {
                set.insert(answer_set.iter().collect::<String>());
            }
            _ => {}
        }
    }
    set.into_iter().collect()
}

const FILLERS: [&str; 8] = ["nota", "suivi", "examen", "dossier", "patient", "stable", "resultat", "normal"];

fn filler(rng: &mut Rng) -> &'static str {
    FILLERS[rng.next_below(FILLERS.len() as u64) as usize]
}

/// Deterministic synthetic tasks with known optimal labels. Each task is
/// separable by construction: labels are pure functions of surface tokens.
pub fn synth_generate(kind: TaskKind, size: usize, seed: u64) -> Vec<TaskRecord> {
    let mut rng = Rng::new(seed);
    let mut records = Vec::with_capacity(size);
    for i in 0..size {
        let location = format!("synth:{i}");
        let (payload, word_count) = match kind {
            TaskKind::Ner => {
                // entities are the two-token pattern "marque <suffix>"
                let mut tokens = Vec::new();
                let mut tags = Vec::new();
                let len = 6 + rng.next_below(8) as usize;
                let mut p = 0;
                while p < len {
                    if rng.next_f64() < 0.25 {
                        tokens.push("marque".to_string());
                        tags.push("B-ENT".to_string());
                        tokens.push("cible".to_string());
                        tags.push("I-ENT".to_string());
                        p += 2;
                    } else {
                        tokens.push(filler(&mut rng).to_string());
                        tags.push("O".to_string());
                        p += 1;
                    }
                }
                let wc = tokens.len();
                (TaskPayload::Tokens { doc_id: i, tokens, tags }, wc)
            }
            TaskKind::Pos => {
                // tag = deterministic function of the token
                let tag_of = |t: &str| if t.ends_with('a') || t.ends_with('e') { "N" } else { "V" };
                let len = 5 + rng.next_below(8) as usize;
                let tokens: Vec<String> = (0..len).map(|_| filler(&mut rng).to_string()).collect();
                let tags: Vec<String> = tokens.iter().map(|t| tag_of(t).to_string()).collect();
                let wc = tokens.len();
                (TaskPayload::Tokens { doc_id: i, tokens, tags }, wc)
            }
            TaskKind::Multiclass => {
                let class = rng.next_below(3);
                let keyword = ["motifun", "motifdeux", "motiftrois"][class as usize];
                let len = 4 + rng.next_below(10) as usize;
                let mut wordsv: Vec<String> = (0..len).map(|_| filler(&mut rng).to_string()).collect();
                let pos = rng.next_below(wordsv.len() as u64 + 1) as usize;
                wordsv.insert(pos, keyword.to_string());
                let text = wordsv.join(" ");
                let wc = wordsv.len();
                (TaskPayload::Classify { text, label: format!("C{class}") }, wc)
            }
            TaskKind::Multilabel => {
                let mut labels = BTreeSet::new();
                let mut wordsv: Vec<String> =
                    (0..4 + rng.next_below(8) as usize).map(|_| filler(&mut rng).to_string()).collect();
                for (li, kw) in ["drapeaua", "drapeaub", "drapeauc"].iter().enumerate() {
                    if rng.next_f64() < 0.5 {
                        labels.insert(format!("L{li}"));
                        let pos = rng.next_below(wordsv.len() as u64 + 1) as usize;
                        wordsv.insert(pos, kw.to_string());
                    }
                }
                if labels.is_empty() {
                    labels.insert("L0".to_string());
                    wordsv.insert(0, "drapeaua".to_string());
                }
                let text = wordsv.join(" ");
                let wc = wordsv.len();
                (TaskPayload::MultiLabel { text, labels }, wc)
            }
            TaskKind::Sts => {
                // score = token-overlap fraction quantized to [0,5]
                let base: Vec<String> = (0..6).map(|_| filler(&mut rng).to_string()).collect();
                let keep = rng.next_below(7) as usize;
                let mut other = base.clone();
                for w in other.iter_mut().skip(keep) {
                    *w = format!("autre{}", rng.next_below(50));
                }
                let overlap = keep as f64 / 6.0;
                let score = (overlap * 5.0 * 2.0).round() / 2.0;
                let wc = base.len() + other.len();
                (TaskPayload::Sts { text1: base.join(" "), text2: other.join(" "), score }, wc)
            }
            TaskKind::Mcqa => {
                let combos: [&[char]; 4] = [&['A'], &['B'], &['A', 'C'], &['D', 'E']];
                let c = rng.next_below(4) as usize;
                let keyword = ["choixun", "choixdeux", "choixtrois", "choixquatre"][c];
                let question = format!("{} {} {}", filler(&mut rng), keyword, filler(&mut rng));
                let answers: Vec<String> =
                    ["repa", "repb", "repc", "repd", "repe"].iter().map(|s| s.to_string()).collect();
                let wc = words(&question) + answers.len();
                (
                    TaskPayload::Mcqa {
                        question,
                        answers,
                        answer_set: combos[c].iter().copied().collect(),
                    },
                    wc,
                )
            }
        };
        records.push(TaskRecord { kind, payload, word_count, location, warnings: Vec::new() });
    }
    records
}

/// Classification task whose discriminative keyword is always the first
/// word, followed by `doc_words` filler words. Used by the attention-profile
/// analysis: an accurate model must concentrate CLS attention at the start.
pub fn synth_signal_at_start(size: usize, doc_words: usize, seed: u64) -> Vec<TaskRecord> {
    let mut rng = Rng::new(seed);
    (0..size)
        .map(|i| {
            let class = rng.next_below(3);
            let keyword = ["motifun", "motifdeux", "motiftrois"][class as usize];
            let mut wordsv = vec![keyword.to_string()];
            wordsv.extend((0..doc_words).map(|_| filler(&mut rng).to_string()));
            let wc = wordsv.len();
            TaskRecord {
                kind: TaskKind::Multiclass,
                payload: TaskPayload::Classify { text: wordsv.join(" "), label: format!("C{class}") },
                word_count: wc,
                location: format!("synth:{i}"),
                warnings: Vec::new(),
            }
        })
        .collect()
}

/// Raw text of a record, used for tokenizer training and length analysis.
pub fn record_text(r: &TaskRecord) -> String {
    match &r.payload {
        TaskPayload::Tokens { tokens, .. } => tokens.join(" "),
        TaskPayload::Classify { text, .. } => text.clone(),
        TaskPayload::MultiLabel { text, .. } => text.clone(),
        TaskPayload::Sts { text1, text2, .. } => format!("{text1} {text2}"),
        TaskPayload::Mcqa { question, answers, .. } => {
            let mut s = question.clone();
            for a in answers {
                s.push(' ');
                s.push_str(a);
            }
            s
        }
    }
}
