//! Evaluation metrics: strict IOB2 span extraction and micro span F1,
//! weighted F1 (single- and multi-label), exact match ratio and Hamming
//! score, Spearman correlation, EDRM, and a pooled-variance Student's t-test.
//! All corpus-level metrics reduce in a deterministic fold order.

use std::collections::{BTreeMap, BTreeSet};

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub label: String,
    pub start: usize,
    /// exclusive
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PrecisionRecallF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Strict IOB2: an entity opens only at `B-X`; `I-X` extends it only when the
/// previous tag is `B-X` or `I-X` of the same type. A stray `I-` belongs to
/// no entity.
pub fn iob2_extract_strict(tags: &[impl AsRef<str>]) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (keep, start_new) = match tag {
            "O" => (false, None),
            _ => match tag.split_once('-') {
                Some(("B", label)) => (false, Some(label.to_string())),
                Some(("I", label)) => {
                    let continues = open.as_ref().is_some_and(|(l, _)| l == label);
                    (continues, None)
                }
                _ => {
                    return Err(Error::Parse {
                        location: format!("tag {i}"),
                        message: format!("unknown IOB2 tag {tag:?}"),
                    })
                }
            },
        };
        if !keep {
            if let Some((label, start)) = open.take() {
                spans.push(EntitySpan { label, start, end: i });
            }
        }
        if let Some(label) = start_new {
            open = Some((label, i));
        }
    }
    if let Some((label, start)) = open {
        spans.push(EntitySpan { label, start, end: tags.len() });
    }
    Ok(spans)
}

/// Micro-averaged span F1 over a corpus of tag sequences, counting exact
/// (label, start, end) matches. Precision is 0 when nothing is predicted;
/// recall is 0 when there is no gold entity.
pub fn span_f1(gold: &[Vec<String>], pred: &[Vec<String>]) -> Result<PrecisionRecallF1> {
    if gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "span_f1: {} gold sequences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (si, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Data(format!(
                "span_f1: sequence {si} length mismatch ({} vs {})",
                g.len(),
                p.len()
            )));
        }
        let gs: BTreeSet<EntitySpan> = iob2_extract_strict(g)?.into_iter().collect();
        let ps: BTreeSet<EntitySpan> = iob2_extract_strict(p)?.into_iter().collect();
        tp += gs.intersection(&ps).count();
        n_gold += gs.len();
        n_pred += ps.len();
    }
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(PrecisionRecallF1 { precision, recall, f1 })
}

/// Per-class F1 weighted by gold support. Classes absent from the gold
/// labels carry zero weight.
pub fn weighted_f1<L: Ord + Clone>(gold: &[L], pred: &[L]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Data("weighted_f1: length mismatch".into()));
    }
    if gold.is_empty() {
        return Err(Error::Data("weighted_f1: empty input".into()));
    }
    let mut classes: BTreeSet<&L> = gold.iter().collect();
    classes.extend(pred.iter());
    let mut total = 0.0;
    for c in classes {
        let tp = gold.iter().zip(pred).filter(|(g, p)| *g == c && *p == c).count() as f64;
        let fp = gold.iter().zip(pred).filter(|(g, p)| *g != c && *p == c).count() as f64;
        let fn_ = gold.iter().zip(pred).filter(|(g, p)| *g == c && *p != c).count() as f64;
        let support = tp + fn_;
        let f1 = if 2.0 * tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        total += support * f1;
    }
    Ok(total / gold.len() as f64)
}

/// Multi-label weighted F1: per-class binary F1 over set membership, weighted
/// by gold support.
pub fn weighted_f1_multilabel<L: Ord + Clone>(gold: &[BTreeSet<L>], pred: &[BTreeSet<L>]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Data("weighted_f1_multilabel: length mismatch".into()));
    }
    let mut support: BTreeMap<&L, f64> = BTreeMap::new();
    for g in gold {
        for l in g {
            *support.entry(l).or_insert(0.0) += 1.0;
        }
    }
    let total_support: f64 = support.values().sum();
    if total_support == 0.0 {
        return Err(Error::Data("weighted_f1_multilabel: no gold labels".into()));
    }
    let mut total = 0.0;
    for (&label, &sup) in &support {
        let tp = gold.iter().zip(pred).filter(|(g, p)| g.contains(label) && p.contains(label)).count() as f64;
        let fp = gold.iter().zip(pred).filter(|(g, p)| !g.contains(label) && p.contains(label)).count() as f64;
        let fn_ = gold.iter().zip(pred).filter(|(g, p)| g.contains(label) && !p.contains(label)).count() as f64;
        let f1 = if 2.0 * tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        total += sup * f1;
    }
    Ok(total / total_support)
}

/// Exact match ratio and Hamming score (mean intersection-over-union) over
/// answer sets. Two empty sets count as a full match (IoU 1), by convention.
pub fn emr_hamming<L: Ord>(gold: &[BTreeSet<L>], pred: &[BTreeSet<L>]) -> Result<(f64, f64)> {
    if gold.len() != pred.len() || gold.is_empty() {
        return Err(Error::Data("emr_hamming: inputs must be equal-length and non-empty".into()));
    }
    let mut exact = 0usize;
    let mut iou_sum = 0.0;
    for (g, p) in gold.iter().zip(pred) {
        if g == p {
            exact += 1;
        }
        let union = g.union(p).count();
        iou_sum += if union == 0 { 1.0 } else { g.intersection(p).count() as f64 / union as f64 };
    }
    let n = gold.len() as f64;
    Ok((exact as f64 / n, iou_sum / n))
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Data("spearman: need two equal-length samples of size >= 2".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Numeric("spearman undefined: zero rank variance".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Relative-distance accuracy on the [0,5] similarity scale:
/// `1 - mean(min(1, |pred - gold| / max(gold, 5 - gold)))`, predictions
/// clamped to [0,5] first.
pub fn edrm(gold: &[f64], pred: &[f64]) -> Result<f64> {
    if gold.len() != pred.len() || gold.is_empty() {
        return Err(Error::Data("edrm: inputs must be equal-length and non-empty".into()));
    }
    let mut sum = 0.0;
    for (i, (&g, &p)) in gold.iter().zip(pred).enumerate() {
        if !(0.0..=5.0).contains(&g) {
            return Err(Error::Data(format!("edrm: gold score {g} at {i} outside [0,5]")));
        }
        let p = p.clamp(0.0, 5.0);
        let denom = g.max(5.0 - g); // >= 2.5, never zero
        sum += ((p - g).abs() / denom).min(1.0);
    }
    Ok(1.0 - sum / gold.len() as f64)
}

/// Two-sample pooled-variance Student's t-test, two-sided p. Degenerate
/// zero-variance samples: equal means give p = 1, unequal give p = 0.
pub fn students_ttest(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Data("students_ttest: need at least 2 samples per group".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let ssa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let ssb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum();
    let df = na + nb - 2.0;
    let pooled = (ssa + ssb) / df;
    if pooled == 0.0 {
        return Ok(if ma == mb { (0.0, 1.0) } else { (f64::INFINITY * (ma - mb).signum(), 0.0) });
    }
    let t = (ma - mb) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p))
}
