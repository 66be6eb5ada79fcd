//! Transformer encoder: embeddings, attention + FFN blocks (post-layer-norm,
//! BERT layout), pooler and the four task heads. Two geometries are
//! supported: BERT-shaped (512 positions, effectively full attention) and
//! Longformer-shaped (4,096 positions, sliding-window + global attention with
//! separate global projections). Both run through the same sparse kernel; a
//! BERT-shaped model simply uses a window covering the whole sequence and no
//! global positions.

use serde::{Deserialize, Serialize};

use crate::attention::{
    sliding_global_attention, sliding_global_attention_backward, AttentionSpec, AttnCache, SlidingInputs,
};
use crate::error::{Error, Result};
use crate::numerics::{ops, Parameter, Real, Tensor};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Which sparse pattern and position budget the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelShape {
    /// 512 positions, full attention (window spans the sequence).
    Bert,
    /// 4,096 positions, sliding window + global attention.
    Longformer,
}

/// Special token ids, fixed by the vocabulary layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
    pub eos: u32,
}

impl Default for SpecialIds {
    fn default() -> Self {
        SpecialIds { pad: 0, unk: 1, cls: 2, sep: 3, mask: 4, eos: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Defaults to 4 x hidden.
    #[serde(default)]
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub shape: ModelShape,
    /// Sliding-window span for Longformer-shaped models.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub specials: SpecialIds,
}

fn default_hidden() -> usize { 768 }
fn default_layers() -> usize { 12 }
fn default_heads() -> usize { 12 }
fn default_window() -> usize { 512 }
fn default_dropout() -> f64 { 0.1 }

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be a positive multiple of n_heads ({})",
                self.hidden, self.n_heads
            )));
        }
        if self.window < 2 || self.window % 2 != 0 {
            return Err(Error::Config(format!("window must be even and >= 2, got {}", self.window)));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.n_layers == 0 {
            return Err(Error::Config("vocab_size, max_positions and n_layers must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        if self.ffn_dim == 0 { 4 * self.hidden } else { self.ffn_dim }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// The attention pattern for a given sequence length. BERT-shaped models
    /// get a window covering everything (i.e. full attention) and ignore
    /// global positions.
    pub fn attention_spec(&self, seq_len: usize, globals: &[usize]) -> Result<AttentionSpec> {
        match self.shape {
            ModelShape::Bert => {
                AttentionSpec::new(self.n_heads, self.head_dim(), 2 * self.max_positions.max(seq_len), vec![])
            }
            ModelShape::Longformer => {
                AttentionSpec::new(self.n_heads, self.head_dim(), self.window, globals.to_vec())
            }
        }
    }
}

/// One task head. Exactly one is active per fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear over per-token hidden states.
    TokenCls,
    /// Linear over the pooled output.
    SeqCls,
    /// Scalar over the pooled output.
    StsReg,
    /// Untied vocabulary projection at masked positions.
    Mlm,
}

#[derive(Debug, Clone)]
pub struct HeadParams<R: Real = f32> {
    pub kind: HeadKind,
    pub weight: Parameter<R>, // [in x out]
    pub bias: Parameter<R>,   // [out]
}

#[derive(Debug, Clone)]
pub struct GlobalProj<R: Real = f32> {
    pub wq: Parameter<R>,
    pub bq: Parameter<R>,
    pub wk: Parameter<R>,
    pub bk: Parameter<R>,
    pub wv: Parameter<R>,
    pub bv: Parameter<R>,
}

#[derive(Debug, Clone)]
pub struct LayerParams<R: Real = f32> {
    pub wq: Parameter<R>,
    pub bq: Parameter<R>,
    pub wk: Parameter<R>,
    pub bk: Parameter<R>,
    pub wv: Parameter<R>,
    pub bv: Parameter<R>,
    /// Global attention projections; present only on Longformer-shaped models.
    pub global: Option<GlobalProj<R>>,
    pub wo: Parameter<R>,
    pub bo: Parameter<R>,
    pub ln1_gamma: Parameter<R>,
    pub ln1_beta: Parameter<R>,
    pub w_ff1: Parameter<R>,
    pub b_ff1: Parameter<R>,
    pub w_ff2: Parameter<R>,
    pub b_ff2: Parameter<R>,
    pub ln2_gamma: Parameter<R>,
    pub ln2_beta: Parameter<R>,
}

#[derive(Debug, Clone)]
pub struct EncoderState<R: Real = f32> {
    pub config: ModelConfig,
    pub tok_emb: Parameter<R>, // [vocab x hidden]
    pub pos_emb: Parameter<R>, // [max_positions x hidden]
    pub emb_ln_gamma: Parameter<R>,
    pub emb_ln_beta: Parameter<R>,
    pub layers: Vec<LayerParams<R>>,
    pub pooler_w: Parameter<R>,
    pub pooler_b: Parameter<R>,
    pub head: Option<HeadParams<R>>,
}

impl<R: Real> EncoderState<R> {
    /// Truncated-normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let h = config.hidden;
        let ffn = config.ffn_dim();
        let weight = |shape: Vec<usize>, rng: &mut Rng| {
            let n: usize = shape.iter().product();
            let data: Vec<R> = (0..n).map(|_| R::of(rng.next_trunc_normal(0.02))).collect();
            Parameter::new(Tensor::new(shape, data).unwrap())
        };
        let zeros = |shape: Vec<usize>| Parameter::new(Tensor::zeros(shape));
        let ones = |shape: Vec<usize>| Parameter::new(Tensor::full(shape, 1.0));
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let global = match config.shape {
                ModelShape::Bert => None,
                ModelShape::Longformer => Some(GlobalProj {
                    wq: weight(vec![h, h], &mut rng),
                    bq: zeros(vec![h]),
                    wk: weight(vec![h, h], &mut rng),
                    bk: zeros(vec![h]),
                    wv: weight(vec![h, h], &mut rng),
                    bv: zeros(vec![h]),
                }),
            };
            layers.push(LayerParams {
                wq: weight(vec![h, h], &mut rng),
                bq: zeros(vec![h]),
                wk: weight(vec![h, h], &mut rng),
                bk: zeros(vec![h]),
                wv: weight(vec![h, h], &mut rng),
                bv: zeros(vec![h]),
                global,
                wo: weight(vec![h, h], &mut rng),
                bo: zeros(vec![h]),
                ln1_gamma: ones(vec![h]),
                ln1_beta: zeros(vec![h]),
                w_ff1: weight(vec![h, ffn], &mut rng),
                b_ff1: zeros(vec![ffn]),
                w_ff2: weight(vec![ffn, h], &mut rng),
                b_ff2: zeros(vec![h]),
                ln2_gamma: ones(vec![h]),
                ln2_beta: zeros(vec![h]),
            });
        }
        Ok(EncoderState {
            tok_emb: weight(vec![config.vocab_size, h], &mut rng),
            pos_emb: weight(vec![config.max_positions, h], &mut rng),
            emb_ln_gamma: ones(vec![h]),
            emb_ln_beta: zeros(vec![h]),
            layers,
            pooler_w: weight(vec![h, h], &mut rng),
            pooler_b: zeros(vec![h]),
            head: None,
            config,
        })
    }

    pub fn attach_head(&mut self, kind: HeadKind, n_out: usize, seed: u64) {
        let mut rng = Rng::new(seed);
        let h = self.config.hidden;
        let n: usize = h * n_out;
        let data: Vec<R> = (0..n).map(|_| R::of(rng.next_trunc_normal(0.02))).collect();
        self.head = Some(HeadParams {
            kind,
            weight: Parameter::new(Tensor::new(vec![h, n_out], data).unwrap()),
            bias: Parameter::new(Tensor::zeros(vec![n_out])),
        });
    }

    /// Visit every parameter in canonical (name-sorted-stable) order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Parameter<R>)) {
        f("embeddings.token".into(), &self.tok_emb);
        f("embeddings.position".into(), &self.pos_emb);
        f("embeddings.ln.gamma".into(), &self.emb_ln_gamma);
        f("embeddings.ln.beta".into(), &self.emb_ln_beta);
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layer.{i:02}.{s}");
            f(p("attn.q.weight"), &l.wq);
            f(p("attn.q.bias"), &l.bq);
            f(p("attn.k.weight"), &l.wk);
            f(p("attn.k.bias"), &l.bk);
            f(p("attn.v.weight"), &l.wv);
            f(p("attn.v.bias"), &l.bv);
            if let Some(g) = &l.global {
                f(p("attn.q_global.weight"), &g.wq);
                f(p("attn.q_global.bias"), &g.bq);
                f(p("attn.k_global.weight"), &g.wk);
                f(p("attn.k_global.bias"), &g.bk);
                f(p("attn.v_global.weight"), &g.wv);
                f(p("attn.v_global.bias"), &g.bv);
            }
            f(p("attn.output.weight"), &l.wo);
            f(p("attn.output.bias"), &l.bo);
            f(p("ln1.gamma"), &l.ln1_gamma);
            f(p("ln1.beta"), &l.ln1_beta);
            f(p("ffn.w1.weight"), &l.w_ff1);
            f(p("ffn.w1.bias"), &l.b_ff1);
            f(p("ffn.w2.weight"), &l.w_ff2);
            f(p("ffn.w2.bias"), &l.b_ff2);
            f(p("ln2.gamma"), &l.ln2_gamma);
            f(p("ln2.beta"), &l.ln2_beta);
        }
        f("pooler.weight".into(), &self.pooler_w);
        f("pooler.bias".into(), &self.pooler_b);
        if let Some(head) = &self.head {
            f("head.weight".into(), &head.weight);
            f("head.bias".into(), &head.bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter<R>)) {
        f("embeddings.token".into(), &mut self.tok_emb);
        f("embeddings.position".into(), &mut self.pos_emb);
        f("embeddings.ln.gamma".into(), &mut self.emb_ln_gamma);
        f("embeddings.ln.beta".into(), &mut self.emb_ln_beta);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layer.{i:02}.{s}");
            f(p("attn.q.weight"), &mut l.wq);
            f(p("attn.q.bias"), &mut l.bq);
            f(p("attn.k.weight"), &mut l.wk);
            f(p("attn.k.bias"), &mut l.bk);
            f(p("attn.v.weight"), &mut l.wv);
            f(p("attn.v.bias"), &mut l.bv);
            if let Some(g) = &mut l.global {
                f(p("attn.q_global.weight"), &mut g.wq);
                f(p("attn.q_global.bias"), &mut g.bq);
                f(p("attn.k_global.weight"), &mut g.wk);
                f(p("attn.k_global.bias"), &mut g.bk);
                f(p("attn.v_global.weight"), &mut g.wv);
                f(p("attn.v_global.bias"), &mut g.bv);
            }
            f(p("attn.output.weight"), &mut l.wo);
            f(p("attn.output.bias"), &mut l.bo);
            f(p("ln1.gamma"), &mut l.ln1_gamma);
            f(p("ln1.beta"), &mut l.ln1_beta);
            f(p("ffn.w1.weight"), &mut l.w_ff1);
            f(p("ffn.w1.bias"), &mut l.b_ff1);
            f(p("ffn.w2.weight"), &mut l.w_ff2);
            f(p("ffn.w2.bias"), &mut l.b_ff2);
            f(p("ln2.gamma"), &mut l.ln2_gamma);
            f(p("ln2.beta"), &mut l.ln2_beta);
        }
        f("pooler.weight".into(), &mut self.pooler_w);
        f("pooler.bias".into(), &mut self.pooler_b);
        if let Some(head) = &mut self.head {
            f("head.weight".into(), &mut head.weight);
            f("head.bias".into(), &mut head.bias);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.numel());
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn cast<S: Real>(&self) -> EncoderState<S> {
        let cp = |p: &Parameter<R>| Parameter::new(p.value.cast::<S>());
        EncoderState {
            config: self.config.clone(),
            tok_emb: cp(&self.tok_emb),
            pos_emb: cp(&self.pos_emb),
            emb_ln_gamma: cp(&self.emb_ln_gamma),
            emb_ln_beta: cp(&self.emb_ln_beta),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: cp(&l.wq),
                    bq: cp(&l.bq),
                    wk: cp(&l.wk),
                    bk: cp(&l.bk),
                    wv: cp(&l.wv),
                    bv: cp(&l.bv),
                    global: l.global.as_ref().map(|g| GlobalProj {
                        wq: cp(&g.wq),
                        bq: cp(&g.bq),
                        wk: cp(&g.wk),
                        bk: cp(&g.bk),
                        wv: cp(&g.wv),
                        bv: cp(&g.bv),
                    }),
                    wo: cp(&l.wo),
                    bo: cp(&l.bo),
                    ln1_gamma: cp(&l.ln1_gamma),
                    ln1_beta: cp(&l.ln1_beta),
                    w_ff1: cp(&l.w_ff1),
                    b_ff1: cp(&l.b_ff1),
                    w_ff2: cp(&l.w_ff2),
                    b_ff2: cp(&l.b_ff2),
                    ln2_gamma: cp(&l.ln2_gamma),
                    ln2_beta: cp(&l.ln2_beta),
                })
                .collect(),
            pooler_w: cp(&self.pooler_w),
            pooler_b: cp(&self.pooler_b),
            head: self.head.as_ref().map(|h| HeadParams {
                kind: h.kind,
                weight: cp(&h.weight),
                bias: cp(&h.bias),
            }),
        }
    }

    /// Flatten parameter values in canonical order (for the gradient checker
    /// and the optimizer).
    pub fn flat_values(&self) -> Vec<Tensor<R>> {
        let mut v = Vec::new();
        self.visit_params(&mut |_, p| v.push(p.value.clone()));
        v
    }

    pub fn flat_grads(&self) -> Vec<Tensor<R>> {
        let mut v = Vec::new();
        self.visit_params(&mut |_, p| v.push(p.grad.clone()));
        v
    }

    pub fn set_flat_values(&mut self, values: &[Tensor<R>]) {
        let mut i = 0;
        self.visit_params_mut(&mut |_, p| {
            p.value = values[i].clone();
            i += 1;
        });
        assert_eq!(i, values.len(), "parameter count mismatch");
    }
}

/// Forward-mode options. Dropout draws from `rng` only when `train` is set
/// and the configured rate is positive.
pub struct ForwardOpts {
    pub train: bool,
    pub rng: Option<Rng>,
    /// Capture last-layer attention rows for the first global/CLS query.
    pub capture_cls_attention: bool,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        ForwardOpts { train: false, rng: None, capture_cls_attention: false }
    }
    pub fn train(rng: Rng) -> Self {
        ForwardOpts { train: true, rng: Some(rng), capture_cls_attention: false }
    }
}

struct DropoutMask {
    keep: Vec<bool>,
    scale: f64,
}

fn apply_dropout<R: Real>(x: &mut Tensor<R>, rate: f64, rng: &mut Rng) -> DropoutMask {
    let keep: Vec<bool> = (0..x.numel()).map(|_| rng.next_f64() >= rate).collect();
    let scale = 1.0 / (1.0 - rate);
    for (v, &k) in x.data_mut().iter_mut().zip(&keep) {
        *v = if k { R::of(v.f64() * scale) } else { R::zero() };
    }
    DropoutMask { keep, scale }
}

fn dropout_backward<R: Real>(grad: &mut Tensor<R>, mask: &DropoutMask) {
    for (g, &k) in grad.data_mut().iter_mut().zip(&mask.keep) {
        *g = if k { R::of(g.f64() * mask.scale) } else { R::zero() };
    }
}

struct LayerCache<R: Real> {
    x_in: Tensor<R>,
    q: Tensor<R>,
    k: Tensor<R>,
    v: Tensor<R>,
    qg: Option<Tensor<R>>,
    kg: Option<Tensor<R>>,
    vg: Option<Tensor<R>>,
    attn: AttnCache<R>,
    attn_concat: Tensor<R>,
    res1: Tensor<R>,
    x_mid: Tensor<R>,
    ff_pre: Tensor<R>,
    ff_act: Tensor<R>,
    res2: Tensor<R>,
    drop_attn: Option<DropoutMask>,
    drop_ffn: Option<DropoutMask>,
}

pub struct EncodeCache<R: Real> {
    tokens: Vec<u32>,
    spec: AttentionSpec,
    pub mask: Vec<bool>,
    emb_sum: Tensor<R>,
    layers: Vec<LayerCache<R>>,
    /// Last-layer attention of the CLS (position 0) query: per head, the
    /// (column, weight) support, captured on request.
    pub cls_attention: Option<Vec<Vec<(u32, f64)>>>,
}

impl<R: Real> EncoderState<R> {
    /// Evaluation-mode forward pass: deterministic, no state mutation.
    pub fn encode(&self, tokens: &[u32], globals: &[usize]) -> Result<Tensor<R>> {
        Ok(self.encode_with(tokens, globals, &mut ForwardOpts::eval())?.0)
    }

    /// Forward pass returning the cache needed by `backward`.
    ///
    /// `tokens` may contain trailing [PAD]; padded positions are excluded
    /// from attention and produce zero rows.
    pub fn encode_with(
        &self,
        tokens: &[u32],
        globals: &[usize],
        opts: &mut ForwardOpts,
    ) -> Result<(Tensor<R>, EncodeCache<R>)> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Config("empty input".into()));
        }
        if n > self.config.max_positions {
            return Err(Error::Data(format!(
                "input length {n} exceeds max_positions {}; truncate explicitly",
                self.config.max_positions
            )));
        }
        let h = self.config.hidden;
        let pad = self.config.specials.pad;
        let mut mask = vec![true; n];
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Data(format!("token id {t} out of vocabulary at position {i}")));
            }
            if t == pad {
                mask[i] = false;
            }
        }
        let spec = self.config.attention_spec(n, globals)?;
        spec.validate_for_len(n)?;

        // embeddings: token + absolute position, then layer norm
        let mut emb_sum = Tensor::zeros(vec![n, h]);
        for i in 0..n {
            let t = tokens[i] as usize;
            let row = emb_sum.row_mut(i);
            let te = self.tok_emb.value.row(t);
            let pe = self.pos_emb.value.row(i);
            for j in 0..h {
                row[j] = te[j] + pe[j];
            }
        }
        let mut x = ops::layer_norm(&emb_sum, &self.emb_ln_gamma.value, &self.emb_ln_beta.value, LN_EPS)?;

        let dropout = if opts.train { self.config.dropout } else { 0.0 };
        let mut caches = Vec::with_capacity(self.layers.len());
        let n_layers = self.layers.len();
        let mut cls_attention = None;
        for (li, layer) in self.layers.iter().enumerate() {
            let x_in = x;
            let q = linear(&x_in, &layer.wq.value, &layer.bq.value)?;
            let k = linear(&x_in, &layer.wk.value, &layer.bk.value)?;
            let v = linear(&x_in, &layer.wv.value, &layer.bv.value)?;
            let (qg, kg, vg) = match &layer.global {
                Some(g) => (
                    Some(linear(&x_in, &g.wq.value, &g.bq.value)?),
                    Some(linear(&x_in, &g.wk.value, &g.bk.value)?),
                    Some(linear(&x_in, &g.wv.value, &g.bv.value)?),
                ),
                None => (None, None, None),
            };
            let inputs = SlidingInputs {
                q: &q,
                k: &k,
                v: &v,
                qg: qg.as_ref().unwrap_or(&q),
                kg: kg.as_ref().unwrap_or(&k),
                vg: vg.as_ref().unwrap_or(&v),
            };
            let (attn_concat, attn) = sliding_global_attention(&inputs, &spec, &mask)?;
            if opts.capture_cls_attention && li == n_layers - 1 {
                cls_attention = attn.rows[0].as_ref().map(|row| {
                    row.weights
                        .iter()
                        .map(|w| {
                            row.cols
                                .iter()
                                .zip(w.iter())
                                .map(|(&c, &wv)| (c, wv.f64()))
                                .collect::<Vec<_>>()
                        })
                        .collect::<Vec<_>>()
                });
            }
            let mut attn_proj = linear(&attn_concat, &layer.wo.value, &layer.bo.value)?;
            let drop_attn = if dropout > 0.0 {
                Some(apply_dropout(&mut attn_proj, dropout, opts.rng.as_mut().unwrap()))
            } else {
                None
            };
            let mut res1 = x_in.clone();
            res1.axpy(1.0, &attn_proj);
            let x_mid = ops::layer_norm(&res1, &layer.ln1_gamma.value, &layer.ln1_beta.value, LN_EPS)?;
            let ff_pre = linear(&x_mid, &layer.w_ff1.value, &layer.b_ff1.value)?;
            let ff_act = ops::gelu(&ff_pre);
            let mut ff_out = linear(&ff_act, &layer.w_ff2.value, &layer.b_ff2.value)?;
            let drop_ffn = if dropout > 0.0 {
                Some(apply_dropout(&mut ff_out, dropout, opts.rng.as_mut().unwrap()))
            } else {
                None
            };
            let mut res2 = x_mid.clone();
            res2.axpy(1.0, &ff_out);
            x = ops::layer_norm(&res2, &layer.ln2_gamma.value, &layer.ln2_beta.value, LN_EPS)?;
            caches.push(LayerCache {
                x_in,
                q,
                k,
                v,
                qg,
                kg,
                vg,
                attn,
                attn_concat,
                res1,
                x_mid,
                ff_pre,
                ff_act,
                res2,
                drop_attn,
                drop_ffn,
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("encode".into()));
        }
        Ok((
            x,
            EncodeCache {
                tokens: tokens.to_vec(),
                spec,
                mask,
                emb_sum,
                layers: caches,
                cls_attention,
            },
        ))
    }

    /// Backward through the encoder stack, accumulating into parameter grads.
    pub fn backward(&mut self, cache: &EncodeCache<R>, grad_hidden: &Tensor<R>) -> Result<()> {
        let mut dx = grad_hidden.clone();
        for (layer, lc) in self.layers.iter_mut().zip(cache.layers.iter()).rev() {
            // LN2
            let (d_res2, dg2, db2) = ops::layer_norm_backward(&lc.res2, &layer.ln2_gamma.value, LN_EPS, &dx);
            layer.ln2_gamma.grad.axpy(1.0, &dg2);
            layer.ln2_beta.grad.axpy(1.0, &db2);
            // FFN branch
            let mut d_ff_out = d_res2.clone();
            if let Some(m) = &lc.drop_ffn {
                dropout_backward(&mut d_ff_out, m);
            }
            let d_ff_act = linear_backward(&lc.ff_act, &mut layer.w_ff2, &mut layer.b_ff2, &d_ff_out)?;
            let d_ff_pre = ops::gelu_backward(&lc.ff_pre, &d_ff_act);
            let mut d_x_mid = linear_backward(&lc.x_mid, &mut layer.w_ff1, &mut layer.b_ff1, &d_ff_pre)?;
            d_x_mid.axpy(1.0, &d_res2); // residual
            // LN1
            let (d_res1, dg1, db1) = ops::layer_norm_backward(&lc.res1, &layer.ln1_gamma.value, LN_EPS, &d_x_mid);
            layer.ln1_gamma.grad.axpy(1.0, &dg1);
            layer.ln1_beta.grad.axpy(1.0, &db1);
            // attention branch
            let mut d_attn_proj = d_res1.clone();
            if let Some(m) = &lc.drop_attn {
                dropout_backward(&mut d_attn_proj, m);
            }
            let d_attn_concat = linear_backward(&lc.attn_concat, &mut layer.wo, &mut layer.bo, &d_attn_proj)?;
            let inputs = SlidingInputs {
                q: &lc.q,
                k: &lc.k,
                v: &lc.v,
                qg: lc.qg.as_ref().unwrap_or(&lc.q),
                kg: lc.kg.as_ref().unwrap_or(&lc.k),
                vg: lc.vg.as_ref().unwrap_or(&lc.v),
            };
            let ag = sliding_global_attention_backward(&inputs, &cache.spec, &lc.attn, &d_attn_concat);
            let mut d_x_in = d_res1; // residual
            d_x_in.axpy(1.0, &linear_backward(&lc.x_in, &mut layer.wq, &mut layer.bq, &ag.dq)?);
            d_x_in.axpy(1.0, &linear_backward(&lc.x_in, &mut layer.wk, &mut layer.bk, &ag.dk)?);
            d_x_in.axpy(1.0, &linear_backward(&lc.x_in, &mut layer.wv, &mut layer.bv, &ag.dv)?);
            if let Some(g) = &mut layer.global {
                d_x_in.axpy(1.0, &linear_backward(&lc.x_in, &mut g.wq, &mut g.bq, &ag.dqg)?);
                d_x_in.axpy(1.0, &linear_backward(&lc.x_in, &mut g.wk, &mut g.bk, &ag.dkg)?);
                d_x_in.axpy(1.0, &linear_backward(&lc.x_in, &mut g.wv, &mut g.bv, &ag.dvg)?);
            }
            dx = d_x_in;
        }
        // embedding layer norm and lookups
        let (d_emb, dg, db) = ops::layer_norm_backward(&cache.emb_sum, &self.emb_ln_gamma.value, LN_EPS, &dx);
        self.emb_ln_gamma.grad.axpy(1.0, &dg);
        self.emb_ln_beta.grad.axpy(1.0, &db);
        let h = self.config.hidden;
        for (i, &t) in cache.tokens.iter().enumerate() {
            let src = d_emb.row(i);
            let tok_row = self.tok_emb.grad.row_mut(t as usize);
            for j in 0..h {
                tok_row[j] = tok_row[j] + src[j];
            }
            let pos_row = self.pos_emb.grad.row_mut(i);
            for j in 0..h {
                pos_row[j] = pos_row[j] + src[j];
            }
        }
        Ok(())
    }

    /// [CLS] hidden state through dense + tanh (BERT pooler convention).
    pub fn pooled_output(&self, hidden: &Tensor<R>) -> Result<Tensor<R>> {
        let cls = Tensor::new(vec![1, self.config.hidden], hidden.row(0).to_vec())?;
        let pre = linear(&cls, &self.pooler_w.value, &self.pooler_b.value)?;
        Ok(ops::tanh(&pre))
    }

    /// Head logits from per-token hidden states (TokenCls/Mlm) or from the
    /// pooled output (SeqCls/StsReg).
    pub fn apply_head(&self, hidden: &Tensor<R>) -> Result<Tensor<R>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("no head attached".into()))?;
        match head.kind {
            HeadKind::TokenCls | HeadKind::Mlm => linear(hidden, &head.weight.value, &head.bias.value),
            HeadKind::SeqCls | HeadKind::StsReg => {
                let pooled = self.pooled_output(hidden)?;
                linear(&pooled, &head.weight.value, &head.bias.value)
            }
        }
    }

    /// Forward + backward through pooler and head for sequence-level heads.
    /// Returns (logits, closure input needed by `head_backward_pooled`).
    pub fn pooled_forward(&self, hidden: &Tensor<R>) -> Result<(Tensor<R>, PooledCache<R>)> {
        let cls = Tensor::new(vec![1, self.config.hidden], hidden.row(0).to_vec())?;
        let pre = linear(&cls, &self.pooler_w.value, &self.pooler_b.value)?;
        let pooled = ops::tanh(&pre);
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("no head attached".into()))?;
        let logits = linear(&pooled, &head.weight.value, &head.bias.value)?;
        Ok((logits, PooledCache { cls, pooled }))
    }

    /// Backward from sequence-level head logits to a gradient over the full
    /// hidden-state tensor (nonzero only in the CLS row).
    pub fn head_backward_pooled(
        &mut self,
        cache: &PooledCache<R>,
        n: usize,
        d_logits: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        let head = self.head.as_mut().expect("head attached");
        let d_pooled = linear_backward(&cache.pooled, &mut head.weight, &mut head.bias, d_logits)?;
        let d_pre = ops::tanh_backward(&cache.pooled, &d_pooled);
        let d_cls = linear_backward(&cache.cls, &mut self.pooler_w, &mut self.pooler_b, &d_pre)?;
        let mut d_hidden = Tensor::zeros(vec![n, self.config.hidden]);
        d_hidden.row_mut(0).copy_from_slice(d_cls.row(0));
        Ok(d_hidden)
    }

    /// Backward for token-level heads (TokenCls/Mlm): from per-token logits
    /// gradient to hidden-state gradient.
    pub fn head_backward_tokens(&mut self, hidden: &Tensor<R>, d_logits: &Tensor<R>) -> Result<Tensor<R>> {
        let head = self.head.as_mut().expect("head attached");
        linear_backward(hidden, &mut head.weight, &mut head.bias, d_logits)
    }
}

pub struct PooledCache<R: Real> {
    cls: Tensor<R>,
    pooled: Tensor<R>,
}

/// `y = x . W + b`.
pub fn linear<R: Real>(x: &Tensor<R>, w: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    Ok(ops::add_bias(&ops::matmul(x, w)?, b))
}

/// Accumulates `dW` and `db` into the parameter grads; returns `dx`.
fn linear_backward<R: Real>(
    x: &Tensor<R>,
    w: &mut Parameter<R>,
    b: &mut Parameter<R>,
    d_out: &Tensor<R>,
) -> Result<Tensor<R>> {
    let (dx, dw) = ops::matmul_backward(x, &w.value, d_out)?;
    w.grad.axpy(1.0, &dw);
    // bias gradient: column sums, f64 accumulation
    let cols = d_out.last_dim();
    let mut db = vec![0.0f64; cols];
    for i in 0..d_out.rows() {
        for (j, &g) in d_out.row(i).iter().enumerate() {
            db[j] += g.f64();
        }
    }
    b.grad.axpy(1.0, &Tensor::from_f64(vec![cols], &db)?);
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    fn toy_config(shape: ModelShape) -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            hidden: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            max_positions: 16,
            shape,
            window: 4,
            dropout: 0.0,
            specials: SpecialIds::default(),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config(ModelShape::Bert);
        c.hidden = 9;
        assert!(c.validate().is_err());
        c.hidden = 8;
        c.window = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_deterministic_and_pure() {
        let state = EncoderState::<f32>::init(toy_config(ModelShape::Longformer), 7).unwrap();
        let tokens = [2u32, 6, 7, 8, 9, 5];
        let a = state.encode(&tokens, &[0]).unwrap();
        let b = state.encode(&tokens, &[0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlength_input_is_an_error() {
        let state = EncoderState::<f32>::init(toy_config(ModelShape::Bert), 7).unwrap();
        let tokens = vec![6u32; 17];
        assert!(state.encode(&tokens, &[]).is_err());
    }

    #[test]
    fn out_of_vocab_token_is_an_error() {
        let state = EncoderState::<f32>::init(toy_config(ModelShape::Bert), 7).unwrap();
        assert!(state.encode(&[25u32], &[]).is_err());
    }

    #[test]
    fn bert_and_wide_window_longformer_agree() {
        // same weights, window covering the sequence: outputs must match
        let bert = EncoderState::<f32>::init(toy_config(ModelShape::Bert), 3).unwrap();
        let mut long_cfg = toy_config(ModelShape::Longformer);
        long_cfg.window = 32;
        let mut long = EncoderState::<f32>::init(long_cfg, 3).unwrap();
        // transplant bert weights; copy locals into globals
        for (lb, ll) in bert.layers.iter().zip(long.layers.iter_mut()) {
            ll.wq = lb.wq.clone();
            ll.bq = lb.bq.clone();
            ll.wk = lb.wk.clone();
            ll.bk = lb.bk.clone();
            ll.wv = lb.wv.clone();
            ll.bv = lb.bv.clone();
            ll.global = Some(GlobalProj {
                wq: lb.wq.clone(),
                bq: lb.bq.clone(),
                wk: lb.wk.clone(),
                bk: lb.bk.clone(),
                wv: lb.wv.clone(),
                bv: lb.bv.clone(),
            });
            ll.wo = lb.wo.clone();
            ll.bo = lb.bo.clone();
            ll.ln1_gamma = lb.ln1_gamma.clone();
            ll.ln1_beta = lb.ln1_beta.clone();
            ll.w_ff1 = lb.w_ff1.clone();
            ll.b_ff1 = lb.b_ff1.clone();
            ll.w_ff2 = lb.w_ff2.clone();
            ll.b_ff2 = lb.b_ff2.clone();
            ll.ln2_gamma = lb.ln2_gamma.clone();
            ll.ln2_beta = lb.ln2_beta.clone();
        }
        long.tok_emb = bert.tok_emb.clone();
        long.pos_emb = bert.pos_emb.clone();
        long.emb_ln_gamma = bert.emb_ln_gamma.clone();
        long.emb_ln_beta = bert.emb_ln_beta.clone();
        let tokens = [2u32, 6, 7, 8, 9, 10, 11, 5];
        let hb = bert.encode(&tokens, &[]).unwrap();
        let hl = long.encode(&tokens, &[0]).unwrap();
        assert!(hb.max_abs_diff(&hl) < 1e-5);
    }

    #[test]
    fn pooler_identity_weight_is_tanh_of_cls() {
        let mut state = EncoderState::<f32>::init(toy_config(ModelShape::Bert), 1).unwrap();
        state.pooler_w.value = ops::identity(8);
        state.pooler_b.value = Tensor::zeros(vec![8]);
        let hidden = state.encode(&[2u32, 6, 5], &[]).unwrap();
        let pooled = state.pooled_output(&hidden).unwrap();
        for j in 0..8 {
            let expect = (hidden.get2(0, j) as f64).tanh() as f32;
            assert!((pooled.data()[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn head_shapes() {
        let mut state = EncoderState::<f32>::init(toy_config(ModelShape::Bert), 1).unwrap();
        state.attach_head(HeadKind::TokenCls, 5, 9);
        let hidden = state.encode(&[2u32, 6, 7, 5], &[]).unwrap();
        assert_eq!(state.apply_head(&hidden).unwrap().shape(), &[4, 5]);
        state.attach_head(HeadKind::SeqCls, 3, 9);
        assert_eq!(state.apply_head(&hidden).unwrap().shape(), &[1, 3]);
        state.attach_head(HeadKind::StsReg, 1, 9);
        assert_eq!(state.apply_head(&hidden).unwrap().shape(), &[1, 1]);
    }

    #[test]
    fn zero_head_weights_give_uniform_logits() {
        let mut state = EncoderState::<f32>::init(toy_config(ModelShape::Bert), 1).unwrap();
        state.attach_head(HeadKind::SeqCls, 4, 9);
        state.head.as_mut().unwrap().weight.value.fill(0.0);
        let hidden = state.encode(&[2u32, 6, 5], &[]).unwrap();
        let logits = state.apply_head(&hidden).unwrap();
        assert!(logits.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mlm_loss_with_no_masked_positions_errors() {
        let mut state = EncoderState::<f32>::init(toy_config(ModelShape::Bert), 1).unwrap();
        state.attach_head(HeadKind::Mlm, 20, 9);
        let hidden = state.encode(&[2u32, 6, 5], &[]).unwrap();
        let logits = state.apply_head(&hidden).unwrap();
        let targets: Vec<Option<usize>> = vec![None; 3];
        assert!(ops::cross_entropy(&logits, &targets).is_err());
    }

    /// End-to-end gradient check: 2 layers, hidden 8, n 12, token-cls head,
    /// run in f64.
    #[test]
    fn encoder_gradient_check() {
        for seed in [3u64] {
            let mut state32 = EncoderState::<f32>::init(toy_config(ModelShape::Longformer), seed).unwrap();
            state32.attach_head(HeadKind::TokenCls, 3, seed + 100);
            let state = state32.cast::<f64>();
            let tokens: Vec<u32> = vec![2, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 5];
            let labels: Vec<Option<usize>> = tokens.iter().map(|&t| Some((t % 3) as usize)).collect();
            let globals = vec![0usize];

            let mut work = state.clone();
            work.zero_grads();
            let (hidden, cache) = work.encode_with(&tokens, &globals, &mut ForwardOpts::eval()).unwrap();
            let logits = work.apply_head(&hidden).unwrap();
            let (_, d_logits) = ops::cross_entropy(&logits, &labels).unwrap();
            let d_hidden = work.head_backward_tokens(&hidden, &d_logits).unwrap();
            work.backward(&cache, &d_hidden).unwrap();
            let analytic = work.flat_grads();
            let params = state.flat_values();

            let proto = state.clone();
            let (tk, lb, gl) = (tokens.clone(), labels.clone(), globals.clone());
            let mut f = move |p: &[Tensor<f64>]| -> crate::error::Result<f64> {
                let mut s = proto.clone();
                s.set_flat_values(p);
                let hidden = s.encode(&tk, &gl)?;
                let logits = s.apply_head(&hidden)?;
                Ok(ops::cross_entropy(&logits, &lb)?.0)
            };
            let err = finite_diff_check(&mut f, &params, &analytic, 3e-4).unwrap();
            assert!(err < 1e-3, "seed {seed}: encoder gradient error {err}");
        }
    }
}
