//! The co-adaptive watermark policy: a frozen seeded n-gram embedder, a
//! trainable mapping MLP producing per-context watermark logits, the
//! normalization loss, and the mean-logit detector.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::kernels::{self, gemm};
use crate::autodiff::{Graph, ParamSet, Scalar, Tensor, Var};
use crate::checkpoint::{self, extra_field, CheckpointManifest};
use crate::corpus::{TokenId, Vocab};
use crate::error::{Result, WmError};
use crate::lm::LogitBias;
use crate::stats::upper_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub xi_seed: u64,
    pub n: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub d_e: usize,
    pub d_h: usize,
    pub vocab: usize,
    /// Seed for the mapper's initial weights (not secret).
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { xi_seed: 0, n: 1, delta: 1.0, epsilon: 0.2, d_e: 64, d_h: 128, vocab: Vocab::SIZE, init_seed: 0 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(WmError::Config("gram length n must be at least 1".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(WmError::Config(format!("delta {} must be finite and non-negative", self.delta)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(WmError::Config(format!("epsilon {} must be non-negative", self.epsilon)));
        }
        if self.d_e == 0 || self.d_h == 0 || self.vocab == 0 {
            return Err(WmError::Config("policy dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen pseudo-random token table, mean-pooled over the n-gram.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramEmbedder {
    xi_seed: u64,
    n: usize,
    d_e: usize,
    vocab: usize,
    table: Vec<f32>,
}

impl NGramEmbedder {
    /// Table entries are i.i.d. N(0, 1), drawn in row-major order from
    /// ChaCha8 seeded with `xi_seed`.
    pub fn new(xi_seed: u64, n: usize, d_e: usize, vocab: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(xi_seed);
        let table = (0..vocab * d_e)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        NGramEmbedder { xi_seed, n, d_e, vocab, table }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d_e
    }

    pub fn row(&self, id: TokenId) -> &[f32] {
        &self.table[id as usize * self.d_e..(id as usize + 1) * self.d_e]
    }

    pub fn table(&self) -> &[f32] {
        &self.table
    }

    pub fn embed_ngram(&self, gram: &[TokenId]) -> Result<Vec<f32>> {
        if gram.len() != self.n {
            return Err(WmError::InvalidArgument(format!("expected {} tokens, got {}", self.n, gram.len())));
        }
        let mut out = vec![0.0f32; self.d_e];
        self.embed_into(gram, &mut out)?;
        Ok(out)
    }

    fn embed_into(&self, gram: &[TokenId], out: &mut [f32]) -> Result<()> {
        let mut acc = vec![0.0f64; self.d_e];
        for &id in gram {
            if id as usize >= self.vocab {
                return Err(WmError::TokenOutOfRange { id, vocab: self.vocab });
            }
            acc.iter_mut().zip(self.row(id)).for_each(|(a, &v)| *a += v as f64);
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = (a / gram.len() as f64) as f32;
        }
        Ok(())
    }

    /// Embeddings of the n-grams ending just before each position in
    /// `positions`, as a `[len × d_e]` block.
    pub fn embed_positions(&self, text: &[TokenId], positions: impl Iterator<Item = usize>) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        let mut row = vec![0.0f32; self.d_e];
        for i in positions {
            if i < self.n || i > text.len() {
                return Err(WmError::InsufficientLength { need: self.n, got: i });
            }
            self.embed_into(&text[i - self.n..i], &mut row)?;
            out.extend_from_slice(&row);
        }
        Ok(out)
    }
}

const MAPPER_NAMES: [&str; 12] = [
    "in.w", "in.b", "res0.w1", "res0.b1", "res0.w2", "res0.b2", "res1.w1", "res1.b1", "res1.w2", "res1.b2", "out.w",
    "out.b",
];

/// `tanh(W_out · R₁(R₀(W_in e + b_in)) + b_out)` with residual blocks
/// `R(h) = h + W₂ relu(W₁ h + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingMlp<F: Scalar = f32> {
    pub d_e: usize,
    pub d_h: usize,
    pub vocab: usize,
    pub params: ParamSet<F>,
}

impl<F: Scalar> MappingMlp<F> {
    /// He-style normal init (std √(2/fan_in)); the output layer uses
    /// std 1/√fan_in so tanh starts well inside its linear range.
    pub fn init(d_e: usize, d_h: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let he = |fan: usize| (2.0 / fan as f64).sqrt();
        p.push(MAPPER_NAMES[0], Tensor::randn(&[d_e, d_h], he(d_e), &mut rng).trainable());
        p.push(MAPPER_NAMES[1], Tensor::zeros(&[d_h]).trainable());
        for blk in 0..2 {
            let base = 2 + 4 * blk;
            p.push(MAPPER_NAMES[base], Tensor::randn(&[d_h, d_h], he(d_h), &mut rng).trainable());
            p.push(MAPPER_NAMES[base + 1], Tensor::zeros(&[d_h]).trainable());
            // damped second layer keeps the residual stream from growing
            p.push(MAPPER_NAMES[base + 2], Tensor::randn(&[d_h, d_h], 0.5 * he(d_h), &mut rng).trainable());
            p.push(MAPPER_NAMES[base + 3], Tensor::zeros(&[d_h]).trainable());
        }
        let std_out = 1.0 / (d_h as f64).sqrt() / 3.0;
        p.push(MAPPER_NAMES[10], Tensor::randn(&[d_h, vocab], std_out, &mut rng).trainable());
        p.push(MAPPER_NAMES[11], Tensor::zeros(&[vocab]).trainable());
        MappingMlp { d_e, d_h, vocab, params: p }
    }

    pub fn cast<G: Scalar>(&self) -> MappingMlp<G> {
        MappingMlp { d_e: self.d_e, d_h: self.d_h, vocab: self.vocab, params: self.params.cast() }
    }

    /// Records the mapper on `inputs` (`[N × d_e]`) and returns `[N × V]`.
    pub fn forward_graph(&self, g: &mut Graph<F>, vars: &[Var], inputs: Var) -> Result<Var> {
        let mut h = g.matmul(inputs, vars[0])?;
        h = g.add(h, vars[1])?;
        for blk in 0..2 {
            let b = 2 + 4 * blk;
            let r = g.matmul(h, vars[b])?;
            let r = g.add(r, vars[b + 1])?;
            let r = g.relu(r)?;
            let r = g.matmul(r, vars[b + 2])?;
            let r = g.add(r, vars[b + 3])?;
            h = g.add(h, r)?;
        }
        let o = g.matmul(h, vars[10])?;
        let o = g.add(o, vars[11])?;
        g.tanh(o)
    }

    /// Graph-free forward of `rows` inputs.
    pub fn forward_plain(&self, inputs: &[F], rows: usize) -> Vec<F> {
        let p = |i: usize| self.params.get(i).data();
        let (de, dh, v) = (self.d_e, self.d_h, self.vocab);
        let mut h = vec![F::zero(); rows * dh];
        gemm(rows, de, dh, inputs, false, p(0), false, &mut h, false);
        kernels::add_bias_rows(&mut h, p(1));
        let mut t = vec![F::zero(); rows * dh];
        let mut r = vec![F::zero(); rows * dh];
        for blk in 0..2 {
            let b = 2 + 4 * blk;
            gemm(rows, dh, dh, &h, false, p(b), false, &mut t, false);
            kernels::add_bias_rows(&mut t, p(b + 1));
            kernels::relu_inplace(&mut t);
            gemm(rows, dh, dh, &t, false, p(b + 2), false, &mut r, false);
            kernels::add_bias_rows(&mut r, p(b + 3));
            h.iter_mut().zip(&r).for_each(|(a, &x)| *a = *a + x);
        }
        let mut out = vec![F::zero(); rows * v];
        gemm(rows, dh, v, &h, false, p(10), false, &mut out, false);
        kernels::add_bias_rows(&mut out, p(11));
        out.iter_mut().for_each(|x| *x = x.tanh());
        out
    }
}

/// `L_norm = Σ_i |mean_j out[i][j]| + Σ_j |mean_i out[i][j]|
///           + λ1 Σ_{i,j} max(0, ε − |out[i][j]|)`, recorded on the graph.
pub fn norm_loss<F: Scalar>(g: &mut Graph<F>, outputs: Var, epsilon: f64, lambda1: f64) -> Result<Var> {
    if epsilon < 0.0 {
        return Err(WmError::InvalidArgument(format!("epsilon {epsilon} < 0")));
    }
    if g.shape(outputs).len() != 2 {
        return Err(WmError::shape("norm_loss", format!("{:?} is not [N, V]", g.shape(outputs))));
    }
    let row_means = g.mean_axis(outputs, 1)?;
    let t1 = g.abs(row_means)?;
    let t1 = g.sum(t1)?;
    let col_means = g.mean_axis(outputs, 0)?;
    let t2 = g.abs(col_means)?;
    let t2 = g.sum(t2)?;
    let mag = g.abs(outputs)?;
    let gap = g.scale(mag, F::of(-1.0))?;
    let gap = g.add_scalar(gap, F::of(epsilon))?;
    let hinge = g.relu(gap)?;
    let t3 = g.sum(hinge)?;
    let t3 = g.scale(t3, F::of(lambda1))?;
    let s = g.add(t1, t2)?;
    g.add(s, t3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub z: f64,
    pub per_position_logits: Vec<f64>,
    pub n_scored: usize,
    pub threshold: Option<f64>,
    pub decision: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkPolicy {
    pub config: PolicyConfig,
    pub embedder: NGramEmbedder,
    pub mapper: MappingMlp<f32>,
    /// Calibrated detection threshold on `z`, if any.
    pub threshold: Option<f64>,
}

impl WatermarkPolicy {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        Ok(WatermarkPolicy {
            embedder: NGramEmbedder::new(config.xi_seed, config.n, config.d_e, config.vocab),
            mapper: MappingMlp::init(config.d_e, config.d_h, config.vocab, config.init_seed),
            config,
            threshold: None,
        })
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn delta(&self) -> f64 {
        self.config.delta
    }

    /// Raw mapper outputs `M(E(gram))` for the n-grams preceding each
    /// position, `[len × V]`.
    pub fn mapper_outputs(&self, text: &[TokenId], positions: std::ops::Range<usize>) -> Result<Vec<f32>> {
        let rows = positions.len();
        let emb = self.embedder.embed_positions(text, positions)?;
        Ok(self.mapper.forward_plain(&emb, rows))
    }

    /// `δ · M(E(last n tokens of context))`.
    pub fn watermark_logits(&self, context: &[TokenId]) -> Result<Vec<f32>> {
        let n = self.n();
        if context.len() < n {
            return Err(WmError::InsufficientLength { need: n, got: context.len() });
        }
        let out = self.mapper_outputs(context, context.len()..context.len() + 1)?;
        let d = self.delta() as f32;
        Ok(out.into_iter().map(|v| v * d).collect())
    }

    pub fn detect_z(&self, text: &[TokenId]) -> Result<DetectionResult> {
        let n = self.n();
        if text.len() <= n {
            return Err(WmError::InsufficientLength { need: n, got: text.len() });
        }
        let v = self.config.vocab;
        let out = self.mapper_outputs(text, n..text.len())?;
        let per: Vec<f64> = (n..text.len())
            .enumerate()
            .map(|(r, i)| {
                let tok = text[i] as usize;
                if tok >= v {
                    return Err(WmError::TokenOutOfRange { id: text[i], vocab: v });
                }
                Ok(out[r * v + tok] as f64)
            })
            .collect::<Result<_>>()?;
        let z = per.iter().sum::<f64>() / per.len() as f64;
        Ok(DetectionResult {
            z,
            n_scored: per.len(),
            per_position_logits: per,
            threshold: self.threshold,
            decision: self.threshold.map(|t| z > t),
        })
    }

    /// Threshold at the `(1 − fpr)` quantile of the null z-scores.
    pub fn calibrate_threshold(&self, null_texts: &[Vec<TokenId>], target_fpr: f64) -> Result<f64> {
        if null_texts.len() < 100 {
            return Err(WmError::TooFewSamples { need: 100, got: null_texts.len() });
        }
        let scores = null_texts.iter().map(|t| self.detect_z(t).map(|r| r.z)).collect::<Result<Vec<_>>>()?;
        threshold_from_null(&scores, target_fpr)
    }

    /// Bias view with the sign of the watermark flipped.
    pub fn inverted(&self) -> InvertedPolicy<'_> {
        InvertedPolicy(self)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let mut m = CheckpointManifest::new("watermark_policy", c.init_seed, serde_json::to_value(c)?);
        for (k, v) in [
            ("xi_seed", json!(c.xi_seed)),
            ("n", json!(c.n)),
            ("delta", json!(c.delta)),
            ("epsilon", json!(c.epsilon)),
            ("d_e", json!(c.d_e)),
            ("d_h", json!(c.d_h)),
            ("threshold", json!(self.threshold)),
        ] {
            m.extra.insert(k.into(), v);
        }
        checkpoint::save(dir, m, &self.mapper.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, params) = checkpoint::load(dir)?;
        if m.kind != "watermark_policy" {
            return Err(WmError::Config(format!("{} holds a {} checkpoint, not a policy", dir.display(), m.kind)));
        }
        let mut config: PolicyConfig = serde_json::from_value(m.config.clone())?;
        // top-level fields are authoritative
        config.xi_seed = extra_field(&m, "xi_seed")?;
        config.n = extra_field(&m, "n")?;
        config.delta = extra_field(&m, "delta")?;
        config.epsilon = extra_field(&m, "epsilon")?;
        let mut p = WatermarkPolicy::new(config)?;
        if !p.mapper.params.same_layout(&params) {
            return Err(WmError::ArchitectureMismatch("mapper parameters do not match d_e/d_h/vocab".into()));
        }
        p.mapper.params = params;
        p.threshold = extra_field(&m, "threshold")?;
        Ok(p)
    }
}

/// `(1 − fpr)` upper quantile of null scores.
pub fn threshold_from_null(scores: &[f64], target_fpr: f64) -> Result<f64> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(WmError::InvalidArgument(format!("target fpr {target_fpr} outside (0, 1)")));
    }
    upper_quantile(scores, 1.0 - target_fpr)
}

impl LogitBias for WatermarkPolicy {
    /// Contexts shorter than `n` receive no bias.
    fn add_bias(&self, context: &[TokenId], logits: &mut [f64]) -> Result<()> {
        if context.len() < self.n() {
            return Ok(());
        }
        for (l, w) in logits.iter_mut().zip(self.watermark_logits(context)?) {
            *l += w as f64;
        }
        Ok(())
    }
}

pub struct InvertedPolicy<'a>(&'a WatermarkPolicy);

impl LogitBias for InvertedPolicy<'_> {
    fn add_bias(&self, context: &[TokenId], logits: &mut [f64]) -> Result<()> {
        if context.len() < self.0.n() {
            return Ok(());
        }
        for (l, w) in logits.iter_mut().zip(self.0.watermark_logits(context)?) {
            *l -= w as f64;
        }
        Ok(())
    }
}
