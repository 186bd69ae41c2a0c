//! Toy decoder-only transformer used as frozen teacher and trainable student.
//!
//! Two forward paths share one parameter set: a recorded graph path for
//! training and a gradient-free, KV-cached path for generation and scoring.
//! Both compute the same function; they differ only in float rounding.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, gemm};
use crate::autodiff::{Graph, ParamSet, Scalar, Tensor, Var};
use crate::checkpoint::{self, CheckpointManifest};
use crate::corpus::{TokenBatch, TokenId, Vocab};
use crate::error::{Result, WmError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LMConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    /// Only 0 is supported; kept so configs can state it explicitly.
    #[serde(default)]
    pub dropout: f64,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig { vocab: Vocab::SIZE, d_model: 128, n_layers: 2, n_heads: 4, max_seq: 256, dropout: 0.0 }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq == 0 {
            return Err(WmError::Config(format!("degenerate model config {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(WmError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.dropout != 0.0 {
            return Err(WmError::Config("dropout is not supported; set it to 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

const PER_LAYER: usize = 16;

// Offsets of the per-layer tensors inside one layer's block.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
    "attn.bo", "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

/// Parameter roles, used by the modification harness to decide what is
/// prunable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    LayerNorm,
    Weight,
    Bias,
}

pub fn param_role(name: &str) -> ParamRole {
    if name.ends_with("_emb") {
        ParamRole::Embedding
    } else if name.contains("ln") && (name.ends_with("gamma") || name.ends_with("beta")) {
        ParamRole::LayerNorm
    } else if name.rsplit('.').next().is_some_and(|s| s.starts_with('b')) {
        ParamRole::Bias
    } else {
        ParamRole::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalLM<F: Scalar = f32> {
    pub config: LMConfig,
    pub params: ParamSet<F>,
    pub seed: u64,
}

impl<F: Scalar> CausalLM<F> {
    /// GPT-2 style init: N(0, 0.02²) weights, residual projections scaled
    /// by 1/√(2·layers), zero biases, unit layer-norm gains.
    pub fn init(config: LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, ff) = (config.vocab, config.d_model, config.d_ff());
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers.max(1)) as f64).sqrt();
        let mut p = ParamSet::new();
        p.push("tok_emb", Tensor::randn(&[v, d], std, &mut rng).trainable());
        p.push("pos_emb", Tensor::randn(&[config.max_seq, d], std, &mut rng).trainable());
        for l in 0..config.n_layers {
            let name = |i: usize| format!("layers.{l}.{}", LAYER_NAMES[i]);
            for i in 0..PER_LAYER {
                let t = match i {
                    LN1_G | LN2_G => Tensor::full(&[d], F::one()),
                    LN1_B | LN2_B | BQ | BK | BV | BO | B2 => Tensor::zeros(&[d]),
                    B1 => Tensor::zeros(&[ff]),
                    WQ | WK | WV => Tensor::randn(&[d, d], std, &mut rng),
                    WO => Tensor::randn(&[d, d], resid_std, &mut rng),
                    W1 => Tensor::randn(&[d, ff], std, &mut rng),
                    W2 => Tensor::randn(&[ff, d], resid_std, &mut rng),
                    _ => unreachable!(),
                };
                p.push(name(i), t.trainable());
            }
        }
        p.push("ln_f.gamma", Tensor::full(&[d], F::one()).trainable());
        p.push("ln_f.beta", Tensor::zeros(&[d]).trainable());
        p.push("lm_head", Tensor::randn(&[d, v], std, &mut rng).trainable());
        Ok(CausalLM { config, params: p, seed })
    }

    /// Wraps an existing parameter set after checking its layout.
    pub fn from_params(config: LMConfig, params: ParamSet<F>, seed: u64) -> Result<Self> {
        let reference = Self::init(config, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(WmError::ArchitectureMismatch(
                "parameter names or shapes do not match the model config".into(),
            ));
        }
        Ok(CausalLM { config, params, seed })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn cast<G: Scalar>(&self) -> CausalLM<G> {
        CausalLM { config: self.config, params: self.params.cast(), seed: self.seed }
    }

    fn layer(&self, l: usize, i: usize) -> usize {
        2 + l * PER_LAYER + i
    }

    fn tail(&self) -> usize {
        2 + self.config.n_layers * PER_LAYER
    }

    pub fn check_tokens(&self, ids: &[TokenId]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab) {
            return Err(WmError::TokenOutOfRange { id, vocab: self.config.vocab });
        }
        Ok(())
    }

    /// Records the forward pass for a `[B×T]` batch and returns logits of
    /// shape `[B, T, V]`. `vars` must come from `self.params.bind`.
    pub fn forward_graph(&self, g: &mut Graph<F>, vars: &[Var], batch: &TokenBatch) -> Result<Var> {
        let c = &self.config;
        let (b, t, d, h) = (batch.batch, batch.seq_len, c.d_model, c.n_heads);
        let dh = c.head_dim();
        if t > c.max_seq {
            return Err(WmError::SequenceTooLong { len: t, max: c.max_seq });
        }
        self.check_tokens(&batch.ids)?;
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let pos: Vec<usize> = (0..b * t).map(|i| i % t).collect();
        let te = g.gather_rows(vars[0], &ids)?;
        let pe = g.gather_rows(vars[1], &pos)?;
        let mut x = g.add(te, pe)?;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        for l in 0..c.n_layers {
            let p = |i: usize| vars[self.layer(l, i)];
            let hn = g.layer_norm(x, p(LN1_G), p(LN1_B))?;
            let mut heads = |w: usize, bias: usize| -> Result<Var> {
                let y = g.matmul(hn, p(w))?;
                let y = g.add(y, p(bias))?;
                let y = g.reshape(y, &[b, t, h, dh])?;
                let y = g.swap_axes12(y)?;
                g.reshape(y, &[b * h, t, dh])
            };
            let q = heads(WQ, BQ)?;
            let k = heads(WK, BK)?;
            let v = heads(WV, BV)?;
            let scores = g.batch_matmul(q, k, true)?;
            let att = g.causal_softmax(scores, scale)?;
            let o = g.batch_matmul(att, v, false)?;
            let o = g.reshape(o, &[b, h, t, dh])?;
            let o = g.swap_axes12(o)?;
            let o = g.reshape(o, &[b * t, d])?;
            let o = g.matmul(o, p(WO))?;
            let o = g.add(o, p(BO))?;
            x = g.add(x, o)?;

            let hn = g.layer_norm(x, p(LN2_G), p(LN2_B))?;
            let m = g.matmul(hn, p(W1))?;
            let m = g.add(m, p(B1))?;
            let m = g.relu(m)?;
            let m = g.matmul(m, p(W2))?;
            let m = g.add(m, p(B2))?;
            x = g.add(x, m)?;
        }
        let tail = self.tail();
        let x = g.layer_norm(x, vars[tail], vars[tail + 1])?;
        let logits = g.matmul(x, vars[tail + 2])?;
        g.reshape(logits, &[b, t, c.vocab])
    }

    /// Graph-free logits `[B·T × V]` for a batch; each row uses a fresh cache.
    pub fn forward_plain(&self, batch: &TokenBatch) -> Result<Vec<F>> {
        let mut out = Vec::with_capacity(batch.ids.len() * self.config.vocab);
        for row in batch.rows() {
            let mut dec = self.decoder();
            out.extend(dec.extend(row)?);
        }
        Ok(out)
    }

    pub fn decoder(&self) -> Decoder<'_, F> {
        Decoder {
            model: self,
            k: vec![Vec::new(); self.config.n_layers],
            v: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }
}

impl CausalLM<f32> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = CheckpointManifest::new("causal_lm", self.seed, serde_json::to_value(self.config)?);
        checkpoint::save(dir, manifest, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, params) = checkpoint::load(dir)?;
        if m.kind != "causal_lm" {
            return Err(WmError::Config(format!("{} holds a {} checkpoint, not a model", dir.display(), m.kind)));
        }
        let config: LMConfig = serde_json::from_value(m.config)?;
        Self::from_params(config, params, m.seed)
    }
}

/// Incremental KV-cached evaluation of one sequence.
pub struct Decoder<'m, F: Scalar> {
    model: &'m CausalLM<F>,
    // per layer, `[len × d]` keys and values
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    len: usize,
}

impl<F: Scalar> Decoder<'_, F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `tokens` and returns their next-token logits, `[n × V]`.
    pub fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<F>> {
        let m = self.model;
        let c = &m.config;
        let (n, d, h, dh, ff) = (tokens.len(), c.d_model, c.n_heads, c.head_dim(), c.d_ff());
        if self.len + n > c.max_seq {
            return Err(WmError::SequenceTooLong { len: self.len + n, max: c.max_seq });
        }
        m.check_tokens(tokens)?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let p = |i: usize| m.params.get(i).data();
        let mut x = vec![F::zero(); n * d];
        for (r, &id) in tokens.iter().enumerate() {
            let te = &p(0)[id as usize * d..(id as usize + 1) * d];
            let pe = &p(1)[(self.len + r) * d..(self.len + r + 1) * d];
            for j in 0..d {
                x[r * d + j] = te[j] + pe[j];
            }
        }
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut hn = vec![F::zero(); n * d];
        let mut q = vec![F::zero(); n * d];
        let mut kn = vec![F::zero(); n * d];
        let mut vn = vec![F::zero(); n * d];
        let mut o = vec![F::zero(); n * d];
        let mut proj = vec![F::zero(); n * d];
        let mut mid = vec![F::zero(); n * ff];
        let total = self.len + n;
        let mut scores = vec![F::zero(); total];
        for l in 0..c.n_layers {
            let w = |i: usize| p(m.layer(l, i));
            layer_norm_rows(&x, w(LN1_G), w(LN1_B), &mut hn);
            linear(&hn, w(WQ), w(BQ), n, d, d, &mut q);
            linear(&hn, w(WK), w(BK), n, d, d, &mut kn);
            linear(&hn, w(WV), w(BV), n, d, d, &mut vn);
            self.k[l].extend_from_slice(&kn);
            self.v[l].extend_from_slice(&vn);
            let (kc, vc) = (&self.k[l], &self.v[l]);
            for r in 0..n {
                let abs = self.len + r;
                for hh in 0..h {
                    let qr = &q[r * d + hh * dh..r * d + (hh + 1) * dh];
                    for j in 0..=abs {
                        let kr = &kc[j * d + hh * dh..j * d + (hh + 1) * dh];
                        scores[j] = dot(qr, kr);
                    }
                    // same rounding path as the graph's causal softmax
                    let row = &scores[..=abs];
                    let max = row.iter().fold(f64::NEG_INFINITY, |mx, &s| mx.max((s * scale).f64()));
                    let mut probs: Vec<f64> = row.iter().map(|&s| ((s * scale).f64() - max).exp()).collect();
                    let sum: f64 = probs.iter().sum();
                    probs.iter_mut().for_each(|pv| *pv = F::of(*pv / sum).f64());
                    let out = &mut o[r * d + hh * dh..r * d + (hh + 1) * dh];
                    out.iter_mut().for_each(|v| *v = F::zero());
                    for (j, &pj) in probs.iter().enumerate() {
                        let pj = F::of(pj);
                        let vr = &vc[j * d + hh * dh..j * d + (hh + 1) * dh];
                        for (ov, &vv) in out.iter_mut().zip(vr) {
                            *ov = *ov + pj * vv;
                        }
                    }
                }
            }
            linear(&o, w(WO), w(BO), n, d, d, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, &b)| *a = *a + b);
            layer_norm_rows(&x, w(LN2_G), w(LN2_B), &mut hn);
            linear(&hn, w(W1), w(B1), n, d, ff, &mut mid);
            kernels::relu_inplace(&mut mid);
            linear(&mid, w(W2), w(B2), n, ff, d, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, &b)| *a = *a + b);
        }
        let tail = m.tail();
        layer_norm_rows(&x, p(tail), p(tail + 1), &mut hn);
        let mut logits = vec![F::zero(); n * c.vocab];
        gemm(n, d, c.vocab, &hn, false, p(tail + 2), false, &mut logits, false);
        if !kernels::all_finite(&logits) {
            return Err(WmError::NonFinite { op: "decoder" });
        }
        self.len = total;
        Ok(logits)
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

fn linear<F: Scalar>(x: &[F], w: &[F], b: &[F], rows: usize, k: usize, n: usize, out: &mut [F]) {
    gemm(rows, k, n, x, false, w, false, &mut out[..rows * n], false);
    kernels::add_bias_rows(&mut out[..rows * n], b);
}

fn layer_norm_rows<F: Scalar>(x: &[F], g: &[F], b: &[F], out: &mut [F]) {
    let d = g.len();
    for (o, row) in out.chunks_mut(d).zip(x.chunks(d)) {
        kernels::layer_norm_row(row, g, b, o);
    }
}

/// Chooses the next token from raw model logits and the context so far.
/// Decoding watermarks plug in here.
pub trait NextToken {
    fn next_token(&mut self, context: &[TokenId], logits: &[f32], rng: &mut ChaCha8Rng) -> Result<TokenId>;
}

/// Additive per-context logit bias (watermark logits, green-list bias, ...).
pub trait LogitBias {
    fn add_bias(&self, context: &[TokenId], logits: &mut [f64]) -> Result<()>;
}

/// Temperature sampling from `softmax((logits + bias) / temperature)`.
/// Temperature 0 is argmax with the lowest id winning ties.
pub struct Sampler<'a> {
    pub temperature: f64,
    pub bias: Option<&'a dyn LogitBias>,
}

impl<'a> Sampler<'a> {
    pub fn new(temperature: f64, bias: Option<&'a dyn LogitBias>) -> Result<Self> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(WmError::InvalidArgument(format!("temperature {temperature}")));
        }
        Ok(Sampler { temperature, bias })
    }
}

impl NextToken for Sampler<'_> {
    fn next_token(&mut self, context: &[TokenId], logits: &[f32], rng: &mut ChaCha8Rng) -> Result<TokenId> {
        let mut z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        if let Some(b) = self.bias {
            b.add_bias(context, &mut z)?;
        }
        if self.temperature == 0.0 {
            return Ok(argmax_lowest(&z) as TokenId);
        }
        z.iter_mut().for_each(|v| *v /= self.temperature);
        Ok(sample_categorical(&z, rng) as TokenId)
    }
}

/// Index of the maximum; the first (lowest) index wins ties.
pub fn argmax_lowest(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `softmax(logits)` using one uniform variate.
pub fn sample_categorical(logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return i;
        }
    }
    // rounding left u at the very top; take the last token with mass
    w.iter().rposition(|&wi| wi > 0.0).unwrap_or(0)
}

/// Generates `max_new` tokens after `prompt` and returns only the new ones.
/// An empty prompt starts from BOS.
pub fn generate(
    model: &CausalLM<f32>,
    prompt: &[TokenId],
    max_new: usize,
    chooser: &mut dyn NextToken,
    seed: u64,
) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut context: Vec<TokenId> = if prompt.is_empty() { vec![Vocab::BOS] } else { prompt.to_vec() };
    let start = context.len();
    if start + max_new > model.config.max_seq + 1 {
        return Err(WmError::SequenceTooLong { len: start + max_new, max: model.config.max_seq });
    }
    let mut dec = model.decoder();
    let v = model.config.vocab;
    let mut logits = dec.extend(&context)?;
    let mut last = logits.len() - v;
    for step in 0..max_new {
        let tok = chooser.next_token(&context, &logits[last..last + v], &mut rng)?;
        context.push(tok);
        if step + 1 < max_new {
            logits = dec.extend(&[tok])?;
            last = 0;
        }
    }
    Ok(context[start..].to_vec())
}

/// Temperature sampling with an optional additive bias.
pub fn sample_with_bias(
    model: &CausalLM<f32>,
    prompt: &[TokenId],
    max_new: usize,
    temperature: f64,
    bias: Option<&dyn LogitBias>,
    seed: u64,
) -> Result<Vec<TokenId>> {
    let mut s = Sampler::new(temperature, bias)?;
    generate(model, prompt, max_new, &mut s, seed)
}

/// Mean next-token negative log-likelihood of `text[from..]` given the
/// preceding tokens.
pub fn mean_nll(model: &CausalLM<f32>, text: &[TokenId], from: usize) -> Result<f64> {
    if text.len() < 2 {
        return Err(WmError::InsufficientLength { need: 1, got: text.len() });
    }
    let from = from.max(1);
    if from >= text.len() {
        return Err(WmError::InvalidArgument(format!("scoring starts at {from} of {}", text.len())));
    }
    let v = model.config.vocab;
    let logits = model.decoder().extend(&text[..text.len() - 1])?;
    let mut buf = vec![0.0f32; v];
    let mut total = 0.0;
    for t in from..text.len() {
        kernels::log_softmax_row(&logits[(t - 1) * v..t * v], &mut buf);
        total -= buf[text[t] as usize] as f64;
    }
    Ok(total / (text.len() - from) as f64)
}

/// `exp(mean next-token cross-entropy)` over the whole text.
pub fn perplexity(model: &CausalLM<f32>, text: &[TokenId]) -> Result<f64> {
    Ok(mean_nll(model, text, 1)?.exp())
}

/// Perplexity of `continuation` conditioned on `prompt`.
pub fn continuation_perplexity(model: &CausalLM<f32>, prompt: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
    let mut text = prompt.to_vec();
    text.extend_from_slice(continuation);
    Ok(mean_nll(model, &text, prompt.len())?.exp())
}
