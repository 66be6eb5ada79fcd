//! Sliding-window + global sparse attention, a dense full-attention oracle,
//! and exact cost accounting.
//!
//! The sparse kernel never materializes an n x n score matrix: each query row
//! holds scores only for its support (the window band plus the global
//! columns), so storage and work are `n x (window + 1 + |globals|)` per head.
//! Global positions follow the Longformer convention: they get separate
//! query/key/value projections, attend to every token, and are attended to by
//! every token through the global key/value projections.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::par;

/// Sparse attention pattern description.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct AttentionSpec {
    pub n_heads: usize,
    pub head_dim: usize,
    /// Total window span; each token sees `window / 2` neighbors per side.
    pub window: usize,
    /// Sorted, deduplicated token positions with global attention.
    pub global_indices: Vec<usize>,
}

impl AttentionSpec {
    pub fn new(n_heads: usize, head_dim: usize, window: usize, mut global_indices: Vec<usize>) -> Result<Self> {
        if window < 2 || window % 2 != 0 {
            return Err(Error::Config(format!(
                "attention window must be even and >= 2, got {window}"
            )));
        }
        if n_heads == 0 || head_dim == 0 {
            return Err(Error::Config("n_heads and head_dim must be positive".into()));
        }
        global_indices.sort_unstable();
        global_indices.dedup();
        Ok(AttentionSpec {
            n_heads,
            head_dim,
            window,
            global_indices,
        })
    }

    pub fn hidden(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn is_global(&self, pos: usize) -> bool {
        self.global_indices.binary_search(&pos).is_ok()
    }

    pub fn validate_for_len(&self, seq_len: usize) -> Result<()> {
        if let Some(&g) = self.global_indices.iter().find(|&&g| g >= seq_len) {
            return Err(Error::Config(format!(
                "global index {g} out of range for sequence length {seq_len}"
            )));
        }
        Ok(())
    }
}

/// Work accounting for one attention pattern application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct AttentionCost {
    /// Scalar multiply-accumulates (score dot products + weighted values).
    pub mults: u64,
    /// Number of attention scores computed across all heads.
    pub score_entries: u64,
}

/// Exact score-entry count of the sparse pattern: per head, the sum over
/// queries of their support size. Global rows attend to all `n` tokens.
pub fn attention_cost(n: usize, spec: &AttentionSpec) -> AttentionCost {
    let half = spec.window / 2;
    let mut entries: u64 = 0;
    for i in 0..n {
        if spec.is_global(i) {
            entries += n as u64;
        } else {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let in_window = (hi - lo + 1) as u64;
            let extra_globals = spec
                .global_indices
                .iter()
                .filter(|&&g| g < n && (g < lo || g > hi))
                .count() as u64;
            entries += in_window + extra_globals;
        }
    }
    entries *= spec.n_heads as u64;
    AttentionCost {
        mults: entries * 2 * spec.head_dim as u64,
        score_entries: entries,
    }
}

/// Score-entry count of the dense pattern: `n^2` per head.
pub fn full_attention_cost(n: usize, n_heads: usize, head_dim: usize) -> AttentionCost {
    let entries = (n as u64) * (n as u64) * n_heads as u64;
    AttentionCost {
        mults: entries * 2 * head_dim as u64,
        score_entries: entries,
    }
}

/// Dense scaled dot-product attention over all positions; the equivalence
/// oracle for the sparse kernel. `q`, `k`, `v` are `[n x heads*head_dim]`;
/// `mask[i] == false` marks padding (excluded as key, zero output as query).
/// `extra_mask`, when given, is a dense `n x n` allowed-pair matrix used to
/// emulate arbitrary sparse supports.
pub fn full_attention<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    n_heads: usize,
    mask: &[bool],
    extra_mask: Option<&[bool]>,
) -> Result<Tensor<R>> {
    let n = q.shape()[0];
    let hidden = q.last_dim();
    if k.shape() != q.shape() || v.shape() != q.shape() || hidden % n_heads != 0 {
        return Err(Error::ShapeMismatch {
            op: "full_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let d = hidden / n_heads;
    let scale = 1.0 / (d as f64).sqrt();
    // validity check up front (see softmax_rows)
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let any = (0..n).any(|j| mask[j] && extra_mask.map_or(true, |em| em[i * n + j]));
        if !any {
            return Err(Error::DegenerateRow { row: i });
        }
    }
    let mut out = Tensor::zeros(vec![n, hidden]);
    par::for_each_chunk(out.data_mut(), hidden, |i, out_row| {
        if !mask[i] {
            return;
        }
        for h in 0..n_heads {
            let off = h * d;
            let qi = &q.row(i)[off..off + d];
            let mut scores = vec![f64::NEG_INFINITY; n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if !mask[j] || !extra_mask.map_or(true, |em| em[i * n + j]) {
                    continue;
                }
                let kj = &k.row(j)[off..off + d];
                let s: f64 = qi.iter().zip(kj).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0f64;
            for s in scores.iter_mut() {
                if s.is_finite() {
                    *s = (*s - max).exp();
                    sum += *s;
                } else {
                    *s = 0.0;
                }
            }
            let mut acc = vec![0.0f64; d];
            for j in 0..n {
                if scores[j] == 0.0 {
                    continue;
                }
                let w = scores[j] / sum;
                let vj = &v.row(j)[off..off + d];
                for (a, b) in acc.iter_mut().zip(vj) {
                    *a += w * b.f64();
                }
            }
            for (o, a) in out_row[off..off + d].iter_mut().zip(acc) {
                *o = R::of(a);
            }
        }
    });
    Ok(out)
}

/// Local and global projections feeding the sparse kernel.
pub struct SlidingInputs<'a, R: Real> {
    pub q: &'a Tensor<R>,
    pub k: &'a Tensor<R>,
    pub v: &'a Tensor<R>,
    /// Global projections; queries of global rows and keys/values of global
    /// columns are taken from these.
    pub qg: &'a Tensor<R>,
    pub kg: &'a Tensor<R>,
    pub vg: &'a Tensor<R>,
}

/// Banded score storage for one query row: support columns and, per head,
/// the softmax weights over that support.
#[derive(Debug, Clone)]
pub struct AttnRow<R: Real> {
    pub cols: Vec<u32>,
    /// Whether each support column is read through the global projections.
    pub global_col: Vec<bool>,
    /// Uses the global query projection (the row itself is global).
    pub global_row: bool,
    /// `weights[h][s]` = softmax weight of support column `s` in head `h`.
    pub weights: Vec<Vec<R>>,
}

pub struct AttnCache<R: Real> {
    pub rows: Vec<Option<AttnRow<R>>>,
}

/// Support of query `i`: window band plus all global columns, real tokens
/// only. Global rows attend to every real token.
fn support(i: usize, n: usize, spec: &AttentionSpec, mask: &[bool]) -> (Vec<u32>, Vec<bool>, bool) {
    let global_row = spec.is_global(i);
    let mut cols = Vec::new();
    let mut flags = Vec::new();
    if global_row {
        for j in 0..n {
            if mask[j] {
                cols.push(j as u32);
                flags.push(true);
            }
        }
    } else {
        let half = spec.window / 2;
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let mut gi = 0usize;
        let globals = &spec.global_indices;
        let push = |j: usize, cols: &mut Vec<u32>, flags: &mut Vec<bool>| {
            if mask[j] {
                cols.push(j as u32);
                flags.push(spec.is_global(j));
            }
        };
        // merge globals below the window, the window band, globals above
        while gi < globals.len() && globals[gi] < lo {
            push(globals[gi], &mut cols, &mut flags);
            gi += 1;
        }
        for j in lo..=hi {
            push(j, &mut cols, &mut flags);
        }
        while gi < globals.len() && globals[gi] < n {
            if globals[gi] > hi {
                push(globals[gi], &mut cols, &mut flags);
            }
            gi += 1;
        }
    }
    (cols, flags, global_row)
}

/// Sliding-window + global attention. Token `i` attends to `|i - j| <=
/// window/2` plus all global tokens; global tokens attend to everything.
/// Softmax is taken over exactly that support; padded positions are excluded
/// everywhere and produce zero output rows. Returns the output and the
/// banded weight cache for the backward pass.
pub fn sliding_global_attention<R: Real>(
    inp: &SlidingInputs<R>,
    spec: &AttentionSpec,
    mask: &[bool],
) -> Result<(Tensor<R>, AttnCache<R>)> {
    let n = inp.q.shape()[0];
    spec.validate_for_len(n)?;
    let hidden = spec.hidden();
    if inp.q.last_dim() != hidden {
        return Err(Error::ShapeMismatch {
            op: "sliding_global_attention",
            lhs: inp.q.shape().to_vec(),
            rhs: vec![n, hidden],
        });
    }
    let d = spec.head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..n {
        if mask[i] && support(i, n, spec, mask).0.is_empty() {
            return Err(Error::DegenerateRow { row: i });
        }
    }
    let rows: Vec<Option<(AttnRow<R>, Vec<R>)>> = par::map_indices(n, |i| {
        if !mask[i] {
            return None;
        }
        let (cols, global_col, global_row) = support(i, n, spec, mask);
        let q_src = if global_row { inp.qg } else { inp.q };
        let mut weights = Vec::with_capacity(spec.n_heads);
        let mut out_row = vec![R::zero(); hidden];
        for h in 0..spec.n_heads {
            let off = h * d;
            let qi = &q_src.row(i)[off..off + d];
            let mut scores = Vec::with_capacity(cols.len());
            let mut max = f64::NEG_INFINITY;
            for (s, &j) in cols.iter().enumerate() {
                let k_src = if global_col[s] { inp.kg } else { inp.k };
                let kj = &k_src.row(j as usize)[off..off + d];
                let sc: f64 = qi.iter().zip(kj).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() * scale;
                scores.push(sc);
                max = max.max(sc);
            }
            let mut sum = 0.0f64;
            for sc in scores.iter_mut() {
                *sc = (*sc - max).exp();
                sum += *sc;
            }
            let w: Vec<R> = scores.iter().map(|&e| R::of(e / sum)).collect();
            let mut acc = vec![0.0f64; d];
            for (s, &j) in cols.iter().enumerate() {
                let v_src = if global_col[s] { inp.vg } else { inp.v };
                let vj = &v_src.row(j as usize)[off..off + d];
                let wj = w[s].f64();
                for (a, b) in acc.iter_mut().zip(vj) {
                    *a += wj * b.f64();
                }
            }
            for (o, a) in out_row[off..off + d].iter_mut().zip(acc) {
                *o = R::of(a);
            }
            weights.push(w);
        }
        Some((
            AttnRow {
                cols,
                global_col,
                global_row,
                weights,
            },
            out_row,
        ))
    });
    let mut out = Tensor::zeros(vec![n, hidden]);
    let mut cache_rows = Vec::with_capacity(n);
    for (i, r) in rows.into_iter().enumerate() {
        match r {
            Some((row, out_row)) => {
                out.row_mut(i).copy_from_slice(&out_row);
                cache_rows.push(Some(row));
            }
            None => cache_rows.push(None),
        }
    }
    Ok((out, AttnCache { rows: cache_rows }))
}

/// Gradients of the sparse kernel for all six projection inputs.
pub struct SlidingGrads<R: Real> {
    pub dq: Tensor<R>,
    pub dk: Tensor<R>,
    pub dv: Tensor<R>,
    pub dqg: Tensor<R>,
    pub dkg: Tensor<R>,
    pub dvg: Tensor<R>,
}

pub fn sliding_global_attention_backward<R: Real>(
    inp: &SlidingInputs<R>,
    spec: &AttentionSpec,
    cache: &AttnCache<R>,
    grad_out: &Tensor<R>,
) -> SlidingGrads<R> {
    let n = inp.q.shape()[0];
    let hidden = spec.hidden();
    let d = spec.head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let shape = vec![n, hidden];
    let mut g = SlidingGrads {
        dq: Tensor::zeros(shape.clone()),
        dk: Tensor::zeros(shape.clone()),
        dv: Tensor::zeros(shape.clone()),
        dqg: Tensor::zeros(shape.clone()),
        dkg: Tensor::zeros(shape.clone()),
        dvg: Tensor::zeros(shape),
    };
    // Key/value gradients scatter across rows, so this pass is sequential;
    // the order is fixed, keeping results bit-stable.
    for i in 0..n {
        let Some(row) = &cache.rows[i] else { continue };
        let q_src = if row.global_row { inp.qg } else { inp.q };
        for h in 0..spec.n_heads {
            let off = h * d;
            let qi = &q_src.row(i)[off..off + d];
            let go = &grad_out.row(i)[off..off + d];
            let w = &row.weights[h];
            // ds_s = dOut . v_s ; dot = sum_s w_s ds_s
            let mut ds = vec![0.0f64; row.cols.len()];
            let mut dot = 0.0f64;
            for (s, &j) in row.cols.iter().enumerate() {
                let v_src = if row.global_col[s] { inp.vg } else { inp.v };
                let vj = &v_src.row(j as usize)[off..off + d];
                let d_s: f64 = go.iter().zip(vj).map(|(a, b)| a.f64() * b.f64()).sum();
                ds[s] = d_s;
                dot += w[s].f64() * d_s;
            }
            let mut dq_acc = vec![0.0f64; d];
            for (s, &j) in row.cols.iter().enumerate() {
                let j = j as usize;
                let ws = w[s].f64();
                let dscore = ws * (ds[s] - dot) * scale;
                let (k_src, dk_dst, dv_dst) = if row.global_col[s] {
                    (inp.kg, &mut g.dkg, &mut g.dvg)
                } else {
                    (inp.k, &mut g.dk, &mut g.dv)
                };
                let kj = &k_src.row(j)[off..off + d];
                for (a, b) in dq_acc.iter_mut().zip(kj) {
                    *a += dscore * b.f64();
                }
                {
                    let dk_row = &mut dk_dst.row_mut(j)[off..off + d];
                    for (a, b) in dk_row.iter_mut().zip(qi) {
                        *a = *a + R::of(dscore * b.f64());
                    }
                }
                let dv_row = &mut dv_dst.row_mut(j)[off..off + d];
                for (a, b) in dv_row.iter_mut().zip(go) {
                    *a = *a + R::of(ws * b.f64());
                }
            }
            let dq_dst = if row.global_row { &mut g.dqg } else { &mut g.dq };
            let dq_row = &mut dq_dst.row_mut(i)[off..off + d];
            for (a, b) in dq_row.iter_mut().zip(dq_acc) {
                *a = *a + R::of(b);
            }
        }
    }
    g
}

/// Dense `n x n` allowed-pair matrix of the sparse pattern; test scaffolding
/// for masked-dense oracle comparisons.
pub fn support_mask(n: usize, spec: &AttentionSpec) -> Vec<bool> {
    let half = spec.window / 2;
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let in_window = i.abs_diff(j) <= half;
            m[i * n + j] = spec.is_global(i) || spec.is_global(j) || in_window;
        }
    }
    m
}
