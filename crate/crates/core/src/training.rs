//! Training loops: teacher pretraining, watermark distillation into the
//! student with a co-trained mapper, the perturbation-aware student update,
//! and the sampling/logit distillation baselines.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::autodiff::{clip_grad_norm, cosine_lr, global_norm, AdamW, AdamWConfig, Graph, ParamSet, Scalar, Var};
use crate::corpus::{Corpus, Split, TokenBatch, TokenId, Vocab};
use crate::error::{Result, WmError};
use crate::lm::{sample_with_bias, CausalLM, LogitBias};
use crate::policy::{norm_loss, MappingMlp, PolicyConfig, WatermarkPolicy};
use crate::stats::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Watermark strength, margin and gram length of the policy being trained.
    pub delta: f64,
    pub epsilon: f64,
    pub n: usize,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Anti-watermarked batches are regenerated every `anti_refresh` steps.
    pub anti_refresh: usize,
    /// Length of anti-watermarked rows; `None` means `seq_len / 2`.
    pub anti_len: Option<usize>,
    /// Corpus prefix length used to seed each anti-watermarked row.
    pub anti_prompt_len: usize,
    /// Where a diverging run dumps the offending batch.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            alpha: 0.1,
            beta: 5.0,
            delta: 1.0,
            epsilon: 0.2,
            n: 1,
            steps: 2000,
            batch: 4,
            seq_len: 128,
            lr: 3e-4,
            warmup_frac: 0.1,
            grad_clip: 1.0,
            weight_decay: 0.0,
            seed: 0,
            anti_refresh: 10,
            anti_len: None,
            anti_prompt_len: 8,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(WmError::Config("alpha and beta must be non-negative".into()));
        }
        if self.beta > 0.0 && self.alpha <= 0.0 {
            return Err(WmError::Config("beta > 0 requires alpha > 0".into()));
        }
        if self.batch == 0 || self.seq_len <= self.n {
            return Err(WmError::Config(format!(
                "batch ({}) must be positive and seq_len ({}) must exceed n ({})",
                self.batch, self.seq_len, self.n
            )));
        }
        if self.anti_refresh == 0 {
            return Err(WmError::Config("anti_refresh must be at least 1".into()));
        }
        if self.anti_len() <= self.anti_prompt_len.max(self.n) {
            return Err(WmError::Config("anti_len must exceed both anti_prompt_len and n".into()));
        }
        Ok(())
    }

    /// Policy settings implied by this config.
    pub fn policy_config(&self, xi_seed: u64, d_e: usize, d_h: usize, init_seed: u64) -> PolicyConfig {
        PolicyConfig { xi_seed, n: self.n, delta: self.delta, epsilon: self.epsilon, d_e, d_h, vocab: Vocab::SIZE, init_seed }
    }

    pub fn anti_len(&self) -> usize {
        self.anti_len.unwrap_or(self.seq_len / 2)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// One record per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub l_sim: f64,
    pub l_norm: Option<f64>,
    pub l_mapper: Option<f64>,
    pub l_anti_pre: Option<f64>,
    pub l_anti_post: Option<f64>,
    /// `L_anti(θ) − L_anti(θ − α ĝ)`.
    pub vulnerability_gap: Option<f64>,
    pub perturbation_skipped: bool,
    pub grad_norm_student: f64,
    pub grad_norm_mapper: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| WmError::io(path, e))?;
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n").map_err(|e| WmError::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| WmError::io(path, e))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| WmError::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(TrainLog { records })
    }

    /// Mean `L_sim` over the first and last `frac` of the records.
    pub fn sim_head_tail(&self, frac: f64) -> Option<(f64, f64)> {
        let k = ((self.records.len() as f64 * frac).ceil() as usize).max(1);
        if self.records.len() < 2 * k {
            return None;
        }
        let mean = |rs: &[TrainRecord]| rs.iter().map(|r| r.l_sim).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..k]), mean(&self.records[self.records.len() - k..])))
    }
}

/// Per-row targets for the distillation losses of one batch: which
/// student logit rows are scored, the frozen teacher logits there, and the
/// n-gram embeddings the mapper sees.
#[derive(Debug, Clone)]
pub struct WatermarkTargets {
    pub rows: Vec<usize>,
    pub teacher: Vec<f32>,
    pub embeddings: Vec<f32>,
}

impl WatermarkTargets {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Logit rows `p = n−1 … L−2` of every sequence (the ones predicting a
/// token with a full n-gram prefix), with teacher logits and embeddings.
pub fn watermark_targets(teacher: &CausalLM<f32>, policy: &WatermarkPolicy, batch: &TokenBatch) -> Result<WatermarkTargets> {
    let n = policy.n();
    let l = batch.seq_len;
    if l <= n {
        return Err(WmError::InsufficientLength { need: n, got: l });
    }
    let v = teacher.config.vocab;
    let all = teacher.forward_plain(batch)?;
    let mut rows = Vec::with_capacity(batch.batch * (l - n));
    let mut tl = Vec::with_capacity(batch.batch * (l - n) * v);
    let mut emb = Vec::new();
    for b in 0..batch.batch {
        let row = batch.row(b);
        emb.extend(policy.embedder.embed_positions(row, n..l)?);
        for p in n - 1..l - 1 {
            rows.push(b * l + p);
            tl.extend_from_slice(&all[(b * l + p) * v..(b * l + p + 1) * v]);
        }
    }
    Ok(WatermarkTargets { rows, teacher: tl, embeddings: emb })
}

/// `teacher + sign·δ·M` per scored row.
fn shifted_targets(policy: &WatermarkPolicy, t: &WatermarkTargets, sign: f64) -> Vec<f32> {
    let m = policy.mapper.forward_plain(&t.embeddings, t.len());
    let s = (sign * policy.delta()) as f32;
    t.teacher.iter().zip(&m).map(|(&a, &w)| a + s * w).collect()
}

fn mean_kl_plain(p_logits: &[f32], q_logits: &[f32], v: usize) -> f64 {
    let mut lp = vec![0.0f32; v];
    let mut lq = vec![0.0f32; v];
    let mut total = 0.0;
    let rows = p_logits.len() / v;
    for (pr, qr) in p_logits.chunks(v).zip(q_logits.chunks(v)) {
        kernels::log_softmax_row(pr, &mut lp);
        kernels::log_softmax_row(qr, &mut lq);
        total += lp.iter().zip(&lq).map(|(&a, &b)| (a as f64).exp() * (a as f64 - b as f64)).sum::<f64>().max(0.0);
    }
    total / rows as f64
}

fn student_rows(student: &CausalLM<f32>, batch: &TokenBatch, rows: &[usize]) -> Result<Vec<f32>> {
    let v = student.config.vocab;
    let all = student.forward_plain(batch)?;
    let mut out = Vec::with_capacity(rows.len() * v);
    for &r in rows {
        out.extend_from_slice(&all[r * v..(r + 1) * v]);
    }
    Ok(out)
}

fn signed_kl_loss(
    teacher: &CausalLM<f32>,
    policy: &WatermarkPolicy,
    student: &CausalLM<f32>,
    batch: &TokenBatch,
    sign: f64,
) -> Result<f64> {
    let t = watermark_targets(teacher, policy, batch)?;
    let target = shifted_targets(policy, &t, sign);
    let s = student_rows(student, batch, &t.rows)?;
    Ok(mean_kl_plain(&target, &s, teacher.config.vocab))
}

/// Mean over scored positions of `KL(softmax(teacher + δM) ‖ softmax(student))`.
pub fn sim_loss(teacher: &CausalLM<f32>, policy: &WatermarkPolicy, student: &CausalLM<f32>, batch: &TokenBatch) -> Result<f64> {
    signed_kl_loss(teacher, policy, student, batch, 1.0)
}

/// As [`sim_loss`] with the watermark term sign-flipped.
pub fn anti_loss(teacher: &CausalLM<f32>, policy: &WatermarkPolicy, student: &CausalLM<f32>, batch: &TokenBatch) -> Result<f64> {
    signed_kl_loss(teacher, policy, student, batch, -1.0)
}

/// `L_M = L_sim + λ2 · L_norm`.
pub fn mapping_objective(sim: f64, norm: f64, lambda2: f64) -> f64 {
    sim + lambda2 * norm
}

/// Records `mean_rows KL(target ‖ student rows)` with constant targets;
/// returns the loss node.
pub fn student_kl_graph<F: Scalar>(
    g: &mut Graph<F>,
    student: &CausalLM<F>,
    vars: &[Var],
    batch: &TokenBatch,
    rows: &[usize],
    targets: &[F],
) -> Result<Var> {
    let v = student.config.vocab;
    let logits = student.forward_graph(g, vars, batch)?;
    let flat = g.reshape(logits, &[batch.batch * batch.seq_len, v])?;
    let picked = g.gather_rows(flat, rows)?;
    let target = g.leaf(vec![rows.len(), v], targets.to_vec(), false)?;
    let kl = g.kl_rows(target, picked)?;
    g.mean(kl)
}

/// Records the mapper objective with the student's logits held constant.
/// Returns `(L_sim, L_norm, L_M)`.
#[allow(clippy::too_many_arguments)]
pub fn mapper_objective_graph<F: Scalar>(
    g: &mut Graph<F>,
    mapper: &MappingMlp<F>,
    vars: &[Var],
    embeddings: &[F],
    teacher_rows: &[F],
    student_rows: &[F],
    delta: f64,
    epsilon: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<(Var, Var, Var)> {
    let v = mapper.vocab;
    let n = teacher_rows.len() / v;
    let inp = g.leaf(vec![n, mapper.d_e], embeddings.to_vec(), false)?;
    let out = mapper.forward_graph(g, vars, inp)?;
    let wm = g.scale(out, F::of(delta))?;
    let t = g.leaf(vec![n, v], teacher_rows.to_vec(), false)?;
    let target = g.add(t, wm)?;
    let s = g.leaf(vec![n, v], student_rows.to_vec(), false)?;
    let kl = g.kl_rows(target, s)?;
    let l_sim = g.mean(kl)?;
    let l_norm = norm_loss(g, out, epsilon, lambda1)?;
    let weighted = g.scale(l_norm, F::of(lambda2))?;
    let l_m = g.add(l_sim, weighted)?;
    Ok((l_sim, l_norm, l_m))
}

fn graph_grads<F: Scalar>(g: &Graph<F>, vars: &[Var], params: &ParamSet<F>) -> Vec<Vec<F>> {
    vars.iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.grad(v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); t.numel()]))
        .collect()
}

/// Loss value and parameter gradients of the student KL objective.
fn student_kl_grad(student: &CausalLM<f32>, batch: &TokenBatch, rows: &[usize], targets: &[f32]) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let vars = student.params.bind(&mut g, Some(true));
    let loss = student_kl_graph(&mut g, student, &vars, batch, rows, targets)?;
    g.backward(loss)?;
    Ok((g.scalar(loss) as f64, graph_grads(&g, &vars, &student.params)))
}

/// Outcome of the three-pass perturbation-aware gradient.
#[derive(Debug, Clone)]
pub struct FplGradient {
    pub grads: Vec<Vec<f32>>,
    pub l_sim: f64,
    pub l_anti_pre: Option<f64>,
    pub l_anti_post: Option<f64>,
    pub skipped: bool,
}

/// `∇L_sim(θ) + β (∇L_anti(θ) − ∇L_anti(θ − α ĝ))`, with `ĝ` the normalized
/// anti gradient. The student is perturbed temporarily and restored from a
/// copy, so its parameters are bit-identical on return.
pub fn fpl_gradient(
    student: &mut CausalLM<f32>,
    teacher: &CausalLM<f32>,
    policy: &WatermarkPolicy,
    wm_batch: &TokenBatch,
    anti_batch: Option<&TokenBatch>,
    cfg: &TrainConfig,
) -> Result<FplGradient> {
    let wt = watermark_targets(teacher, policy, wm_batch)?;
    let target = shifted_targets(policy, &wt, 1.0);
    let (l_sim, mut grads) = student_kl_grad(student, wm_batch, &wt.rows, &target)?;
    let mut out = FplGradient { grads: Vec::new(), l_sim, l_anti_pre: None, l_anti_post: None, skipped: false };
    let anti = match anti_batch {
        Some(a) if cfg.beta > 0.0 => a,
        _ => {
            out.grads = grads;
            return Ok(out);
        }
    };
    let at = watermark_targets(teacher, policy, anti)?;
    let anti_target = shifted_targets(policy, &at, -1.0);
    let (l_pre, g_pre) = student_kl_grad(student, anti, &at.rows, &anti_target)?;
    out.l_anti_pre = Some(l_pre);
    let norm = global_norm(&g_pre);
    if !(norm >= 1e-12) {
        out.skipped = true;
        out.grads = grads;
        return Ok(out);
    }
    let saved: Vec<Vec<f32>> = student.params.tensors().iter().map(|t| t.data().to_vec()).collect();
    let step = cfg.alpha / norm;
    for (t, gp) in student.params.tensors_mut().iter_mut().zip(&g_pre) {
        for (w, &gv) in t.data_mut().iter_mut().zip(gp) {
            *w = (*w as f64 - step * gv as f64) as f32;
        }
    }
    let post = student_kl_grad(student, anti, &at.rows, &anti_target);
    for (t, s) in student.params.tensors_mut().iter_mut().zip(saved) {
        t.data_mut().copy_from_slice(&s);
    }
    let (l_post, g_post) = post?;
    out.l_anti_post = Some(l_post);
    for ((gs, gp), gq) in grads.iter_mut().zip(&g_pre).zip(&g_post) {
        for ((s, &a), &b) in gs.iter_mut().zip(gp).zip(gq) {
            *s = (*s as f64 + cfg.beta * (a as f64 - b as f64)) as f32;
        }
    }
    out.grads = grads;
    Ok(out)
}

fn apply_update(params: &mut ParamSet<f32>, mut grads: Vec<Vec<f32>>, opt: &mut AdamW<f32>, clip: f64, lr: f64) -> Result<f64> {
    let norm = if clip > 0.0 { clip_grad_norm(&mut grads, clip) } else { global_norm(&grads) };
    for (t, g) in params.tensors_mut().iter_mut().zip(grads) {
        t.set_grad(g)?;
    }
    opt.lr = lr;
    opt.step(params)?;
    params.clear_grads();
    Ok(norm)
}

/// One perturbation-aware student update (clipped AdamW).
#[allow(clippy::too_many_arguments)]
pub fn fpl_step(
    student: &mut CausalLM<f32>,
    teacher: &CausalLM<f32>,
    policy: &WatermarkPolicy,
    wm_batch: &TokenBatch,
    anti_batch: Option<&TokenBatch>,
    cfg: &TrainConfig,
    opt: &mut AdamW<f32>,
    step: usize,
    lr: f64,
) -> Result<TrainRecord> {
    let fg = fpl_gradient(student, teacher, policy, wm_batch, anti_batch, cfg)?;
    let losses = [Some(fg.l_sim), fg.l_anti_pre, fg.l_anti_post];
    if losses.iter().flatten().any(|l| !l.is_finite()) {
        return Err(WmError::Diverged { step, detail: format!("non-finite loss {losses:?}") });
    }
    let grad_norm = apply_update(&mut student.params, fg.grads, opt, cfg.grad_clip, lr)?;
    Ok(TrainRecord {
        step,
        lr,
        l_sim: fg.l_sim,
        l_norm: None,
        l_mapper: None,
        l_anti_pre: fg.l_anti_pre,
        l_anti_post: fg.l_anti_post,
        vulnerability_gap: fg.l_anti_pre.zip(fg.l_anti_post).map(|(a, b)| a - b),
        perturbation_skipped: fg.skipped,
        grad_norm_student: grad_norm,
        grad_norm_mapper: None,
    })
}

/// Mapper update on `L_M` at the current student; the embedder is untouched.
/// Returns `(L_norm, L_M, grad norm)`.
pub fn mapper_step(
    policy: &mut WatermarkPolicy,
    student: &CausalLM<f32>,
    teacher: &CausalLM<f32>,
    wm_batch: &TokenBatch,
    cfg: &TrainConfig,
    opt: &mut AdamW<f32>,
    lr: f64,
) -> Result<(f64, f64, f64)> {
    let wt = watermark_targets(teacher, policy, wm_batch)?;
    let s = student_rows(student, wm_batch, &wt.rows)?;
    let mut g = Graph::new();
    let vars = policy.mapper.params.bind(&mut g, Some(true));
    let (_, l_norm, l_m) = mapper_objective_graph(
        &mut g,
        &policy.mapper,
        &vars,
        &wt.embeddings,
        &wt.teacher,
        &s,
        policy.delta(),
        policy.config.epsilon,
        cfg.lambda1,
        cfg.lambda2,
    )?;
    g.backward(l_m)?;
    let grads = graph_grads(&g, &vars, &policy.mapper.params);
    let (ln, lm) = (g.scalar(l_norm) as f64, g.scalar(l_m) as f64);
    let norm = apply_update(&mut policy.mapper.params, grads, opt, cfg.grad_clip, lr)?;
    Ok((ln, lm, norm))
}

/// Rows `prompt ++ continuation` of total length `len`, sampled from the
/// teacher at temperature 1 with inverted watermark logits.
pub fn gen_anti_batch(
    teacher: &CausalLM<f32>,
    policy: &WatermarkPolicy,
    prompts: &[Vec<TokenId>],
    len: usize,
    seed: u64,
) -> Result<TokenBatch> {
    let inv = policy.inverted();
    let rows = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.len() >= len {
                return Err(WmError::InvalidArgument(format!("prompt of {} tokens for rows of {len}", p.len())));
            }
            let mut row = p.clone();
            row.extend(sample_with_bias(teacher, p, len - p.len(), 1.0, Some(&inv), derive_seed(seed, i as u64))?);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    TokenBatch::from_rows(&rows)
}

fn dump_batch(cfg: &TrainConfig, step: usize, batch: &TokenBatch, detail: &str) {
    if let Some(dir) = &cfg.dump_dir {
        let rec = serde_json::json!({
            "step": step,
            "detail": detail,
            "batch": batch.batch,
            "seq_len": batch.seq_len,
            "ids": batch.ids,
        });
        let _ = std::fs::create_dir_all(dir);
        let _ = std::fs::write(dir.join("divergence_dump.json"), rec.to_string());
    }
}

/// Alternating training: each step updates the student with the
/// perturbation-aware gradient, then the mapper at the updated student.
pub fn train_cawp(
    teacher: &CausalLM<f32>,
    student: &mut CausalLM<f32>,
    policy: &mut WatermarkPolicy,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_step: Option<&mut dyn FnMut(&TrainRecord)>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let pc = &policy.config;
    if pc.n != cfg.n || pc.delta != cfg.delta || pc.epsilon != cfg.epsilon {
        return Err(WmError::Config(format!(
            "policy (n={}, delta={}, epsilon={}) disagrees with train config (n={}, delta={}, epsilon={})",
            pc.n, pc.delta, pc.epsilon, cfg.n, cfg.delta, cfg.epsilon
        )));
    }
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok(log);
    }
    let mut batches = corpus.batch_windows(Split::Train, cfg.seq_len, cfg.batch, derive_seed(cfg.seed, 1))?;
    let mut opt_s = AdamW::new(cfg.adamw(), &student.params);
    let mut opt_m = AdamW::new(cfg.adamw(), &policy.mapper.params);
    let mut anti: Option<TokenBatch> = None;
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac);
        if cfg.beta > 0.0 && step % cfg.anti_refresh == 0 {
            let refresh = (step / cfg.anti_refresh) as u64;
            let prompts = corpus.sample_prompts(
                Split::Train,
                cfg.batch,
                cfg.anti_prompt_len,
                derive_seed(cfg.seed, 2 + 2 * refresh),
            )?;
            anti = Some(gen_anti_batch(teacher, policy, &prompts, cfg.anti_len(), derive_seed(cfg.seed, 3 + 2 * refresh))?);
        }
        let batch = batches.next().expect("batch stream is endless");
        let mut rec = match fpl_step(student, teacher, policy, &batch, anti.as_ref(), cfg, &mut opt_s, step, lr) {
            Ok(r) => r,
            Err(e) => {
                dump_batch(cfg, step, &batch, &e.to_string());
                return Err(e);
            }
        };
        let (ln, lm, gm) = mapper_step(policy, student, teacher, &batch, cfg, &mut opt_m, lr)?;
        if !lm.is_finite() {
            dump_batch(cfg, step, &batch, "non-finite mapper objective");
            return Err(WmError::Diverged { step, detail: format!("mapper objective {lm}") });
        }
        rec.l_norm = Some(ln);
        rec.l_mapper = Some(lm);
        rec.grad_norm_mapper = Some(gm);
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&rec);
        }
        log.records.push(rec);
    }
    Ok(log)
}

/// Settings shared by the cross-entropy and KL fine-tuning loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Validation every `eval_every` steps (0 disables).
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Early stop after this many evaluations without improvement (0 never).
    pub patience: usize,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 3000,
            batch: 4,
            seq_len: 256,
            lr: 1e-3,
            warmup_frac: 0.05,
            grad_clip: 1.0,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 250,
            eval_batches: 8,
            patience: 3,
        }
    }
}

impl LmTrainConfig {
    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

fn ce_grad(model: &CausalLM<f32>, batch: &TokenBatch) -> Result<(f64, Vec<Vec<f32>>)> {
    let (b, l, v) = (batch.batch, batch.seq_len, model.config.vocab);
    let inputs = TokenBatch { batch: b, seq_len: l - 1, ids: batch.rows().flat_map(|r| r[..l - 1].to_vec()).collect() };
    let targets: Vec<usize> = batch.rows().flat_map(|r| r[1..].iter().map(|&t| t as usize).collect::<Vec<_>>()).collect();
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, Some(true));
    let logits = model.forward_graph(&mut g, &vars, &inputs)?;
    let flat = g.reshape(logits, &[b * (l - 1), v])?;
    let loss = g.cross_entropy(flat, &targets)?;
    g.backward(loss)?;
    Ok((g.scalar(loss) as f64, graph_grads(&g, &vars, &model.params)))
}

/// Mean next-token cross-entropy over a batch, without gradients.
pub fn batch_ce(model: &CausalLM<f32>, batch: &TokenBatch) -> Result<f64> {
    let v = model.config.vocab;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut buf = vec![0.0f32; v];
    for row in batch.rows() {
        let logits = model.decoder().extend(&row[..row.len() - 1])?;
        for (t, lr) in logits.chunks(v).enumerate() {
            kernels::log_softmax_row(lr, &mut buf);
            total -= buf[row[t + 1] as usize] as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn train_ce_on(
    model: &mut CausalLM<f32>,
    mut next_batch: impl FnMut(usize) -> Result<TokenBatch>,
    mut val: impl FnMut(&CausalLM<f32>) -> Result<Option<f64>>,
    cfg: &LmTrainConfig,
    mut on_step: Option<&mut dyn FnMut(&LmRecord)>,
) -> Result<Vec<LmRecord>> {
    let mut opt = AdamW::new(cfg.adamw(), &model.params);
    let mut log = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac);
        let batch = next_batch(step)?;
        let (loss, grads) = ce_grad(model, &batch)?;
        if !loss.is_finite() {
            return Err(WmError::Diverged { step, detail: format!("cross-entropy {loss}") });
        }
        apply_update(&mut model.params, grads, &mut opt, cfg.grad_clip, lr)?;
        let mut rec = LmRecord { step, lr, loss, val_loss: None };
        if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            rec.val_loss = val(model)?;
        }
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&rec);
        }
        let vl = rec.val_loss;
        log.push(rec);
        if let (Some(vl), true) = (vl, cfg.patience > 0) {
            if vl < best - 1e-3 {
                best = vl;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(log)
}

/// Cross-entropy training of a teacher on the train split, stopping early
/// once validation loss plateaus.
pub fn pretrain(
    model: &mut CausalLM<f32>,
    corpus: &Corpus,
    cfg: &LmTrainConfig,
    on_step: Option<&mut dyn FnMut(&LmRecord)>,
) -> Result<Vec<LmRecord>> {
    let mut it = corpus.batch_windows(Split::Train, cfg.seq_len + 1, cfg.batch, derive_seed(cfg.seed, 11))?;
    let val_batches: Vec<TokenBatch> = corpus
        .batch_windows(Split::Val, cfg.seq_len + 1, cfg.batch, derive_seed(cfg.seed, 12))?
        .take(cfg.eval_batches.max(1))
        .collect();
    train_ce_on(
        model,
        |_| Ok(it.next().expect("batch stream is endless")),
        |m| {
            let total = val_batches.iter().map(|b| batch_ce(m, b)).sum::<Result<f64>>()?;
            Ok(Some(total / val_batches.len() as f64))
        },
        cfg,
        on_step,
    )
}

/// Cross-entropy fine-tuning on a split with no validation or early stop.
pub fn finetune_split(
    model: &mut CausalLM<f32>,
    corpus: &Corpus,
    split: Split,
    cfg: &LmTrainConfig,
) -> Result<Vec<LmRecord>> {
    if corpus.split(split).is_empty() {
        return Err(WmError::InsufficientTokens { split: split.name().into(), need: cfg.seq_len + 1, have: 0 });
    }
    let mut it = corpus.batch_windows(split, cfg.seq_len + 1, cfg.batch, derive_seed(cfg.seed, 21))?;
    let cfg = LmTrainConfig { eval_every: 0, patience: 0, ..cfg.clone() };
    train_ce_on(model, |_| Ok(it.next().expect("endless")), |_| Ok(None), &cfg, None)
}

/// Sampling distillation: cross-entropy on watermarked texts. Each step
/// draws `batch` texts and trains on their first `seq_len + 1` tokens.
pub fn distill_sampling(
    student: &mut CausalLM<f32>,
    wm_texts: &[Vec<TokenId>],
    cfg: &LmTrainConfig,
    on_step: Option<&mut dyn FnMut(&LmRecord)>,
) -> Result<Vec<LmRecord>> {
    if wm_texts.is_empty() {
        return Err(WmError::InvalidArgument("no watermarked texts to distill from".into()));
    }
    let width = wm_texts.iter().map(Vec::len).min().unwrap_or(0).min(cfg.seq_len + 1);
    if width < 2 {
        return Err(WmError::InsufficientLength { need: 1, got: width });
    }
    let mut order = ShuffledIndex::new(wm_texts.len(), derive_seed(cfg.seed, 31));
    let cfg = LmTrainConfig { eval_every: 0, patience: 0, ..cfg.clone() };
    train_ce_on(
        student,
        |_| {
            let rows: Vec<Vec<TokenId>> = (0..cfg.batch).map(|_| wm_texts[order.next()][..width].to_vec()).collect();
            TokenBatch::from_rows(&rows)
        },
        |_| Ok(None),
        &cfg,
        on_step,
    )
}

/// Logit distillation: KL from `softmax(teacher + bias(context))` to the
/// student on raw train-split windows, at every position.
pub fn distill_logit(
    student: &mut CausalLM<f32>,
    teacher: &CausalLM<f32>,
    decoding_wm: &dyn LogitBias,
    corpus: &Corpus,
    cfg: &LmTrainConfig,
    mut on_step: Option<&mut dyn FnMut(&LmRecord)>,
) -> Result<Vec<LmRecord>> {
    let mut it = corpus.batch_windows(Split::Train, cfg.seq_len, cfg.batch, derive_seed(cfg.seed, 41))?;
    let mut opt = AdamW::new(cfg.adamw(), &student.params);
    let v = teacher.config.vocab;
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac);
        let batch = it.next().expect("endless");
        let targets = biased_teacher_logits(teacher, decoding_wm, &batch)?;
        let rows: Vec<usize> = (0..batch.ids.len()).collect();
        debug_assert_eq!(targets.len(), rows.len() * v);
        let (loss, grads) = student_kl_grad(student, &batch, &rows, &targets)?;
        if !loss.is_finite() {
            return Err(WmError::Diverged { step, detail: format!("distillation KL {loss}") });
        }
        apply_update(&mut student.params, grads, &mut opt, cfg.grad_clip, lr)?;
        let rec = LmRecord { step, lr, loss, val_loss: None };
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&rec);
        }
        log.push(rec);
    }
    Ok(log)
}

/// Teacher logits plus `bias(prefix)` at every position of the batch.
pub fn biased_teacher_logits(teacher: &CausalLM<f32>, bias: &dyn LogitBias, batch: &TokenBatch) -> Result<Vec<f32>> {
    let v = teacher.config.vocab;
    let mut all = teacher.forward_plain(batch)?;
    let mut buf = vec![0.0f64; v];
    for b in 0..batch.batch {
        let row = batch.row(b);
        for p in 0..batch.seq_len {
            let off = (b * batch.seq_len + p) * v;
            buf.iter_mut().for_each(|x| *x = 0.0);
            bias.add_bias(&row[..=p], &mut buf)?;
            for (t, &d) in all[off..off + v].iter_mut().zip(&buf) {
                *t += d as f32;
            }
        }
    }
    Ok(all)
}

/// Mean KL between the biased teacher and the student over a batch.
pub fn logit_distill_loss(
    student: &CausalLM<f32>,
    teacher: &CausalLM<f32>,
    bias: &dyn LogitBias,
    batch: &TokenBatch,
) -> Result<f64> {
    let t = biased_teacher_logits(teacher, bias, batch)?;
    let s = student.forward_plain(batch)?;
    Ok(mean_kl_plain(&t, &s, teacher.config.vocab))
}

/// Endless reshuffled pass over `0..n`.
struct ShuffledIndex {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl ShuffledIndex {
    fn new(n: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        ShuffledIndex { order: (0..n).collect(), pos: n, rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed) }
    }

    fn next(&mut self) -> usize {
        use rand::seq::SliceRandom;
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitFractions;
    use crate::lm::LMConfig;
    use rand::{Rng, SeedableRng};

    fn tiny_lm(seed: u64) -> CausalLM<f32> {
        let cfg = LMConfig { d_model: 16, n_layers: 1, n_heads: 2, max_seq: 64, ..Default::default() };
        CausalLM::init(cfg, seed).unwrap()
    }

    fn tiny_policy(n: usize) -> WatermarkPolicy {
        WatermarkPolicy::new(PolicyConfig { xi_seed: 5, n, d_e: 8, d_h: 16, ..Default::default() }).unwrap()
    }

    fn text_corpus() -> Corpus {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let words = ["the ", "sea ", "whale ", "ship ", "and ", "of ", "a ", "captain ", "deck ", "\n"];
        let text: String = (0..6000).map(|_| words[rng.random_range(0..words.len())]).collect();
        Corpus::from_bytes(text.as_bytes(), SplitFractions::default(), 1).unwrap()
    }

    fn batch(seed: u64, b: usize, l: usize) -> TokenBatch {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<TokenId>> = (0..b).map(|_| (0..l).map(|_| rng.random_range(0..256)).collect()).collect();
        TokenBatch::from_rows(&rows).unwrap()
    }

    fn log_softmax64(x: &[f32]) -> Vec<f64> {
        let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
        let z = x.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
        x.iter().map(|&v| v as f64 - z).collect()
    }

    /// Position-by-position oracle: score every token with a full n-gram
    /// prefix against the logits that predicted it.
    fn kl_oracle(t: &CausalLM<f32>, pol: &WatermarkPolicy, s: &CausalLM<f32>, b: &TokenBatch, sign: f64) -> f64 {
        let v = t.config.vocab;
        let (n, mut total, mut count) = (pol.n(), 0.0, 0);
        for row in b.rows() {
            let tl = t.decoder().extend(row).unwrap();
            let sl = s.decoder().extend(row).unwrap();
            for i in n..row.len() {
                let wm = pol.watermark_logits(&row[..i]).unwrap();
                let target: Vec<f32> =
                    (0..v).map(|j| tl[(i - 1) * v + j] + (sign as f32) * wm[j]).collect();
                let lp = log_softmax64(&target);
                let lq = log_softmax64(&sl[(i - 1) * v..i * v]);
                total += lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn sim_and_anti_match_oracle() {
        let (t, s) = (tiny_lm(1), tiny_lm(2));
        for n in [1, 3] {
            let pol = tiny_policy(n);
            let b = batch(9, 2, 12);
            let sim = sim_loss(&t, &pol, &s, &b).unwrap();
            let anti = anti_loss(&t, &pol, &s, &b).unwrap();
            assert!((sim - kl_oracle(&t, &pol, &s, &b, 1.0)).abs() < 1e-5, "n={n}");
            assert!((anti - kl_oracle(&t, &pol, &s, &b, -1.0)).abs() < 1e-5, "n={n}");
            assert_eq!(watermark_targets(&t, &pol, &b).unwrap().len(), 2 * (12 - n));
        }
        // identical models and zero watermark strength give zero
        let pol = WatermarkPolicy::new(PolicyConfig { delta: 0.0, d_e: 8, d_h: 16, ..Default::default() }).unwrap();
        assert!(sim_loss(&t, &pol, &t, &batch(1, 2, 10)).unwrap().abs() < 1e-9);
    }

    #[test]
    fn fpl_gradient_composes_three_passes_and_restores() {
        let t = tiny_lm(1);
        let mut s = tiny_lm(2);
        let pol = tiny_policy(1);
        let (wm, anti) = (batch(3, 2, 10), batch(4, 2, 8));
        let cfg = TrainConfig { alpha: 0.05, beta: 2.0, ..Default::default() };
        let before = s.params.checksum();
        let fg = fpl_gradient(&mut s, &t, &pol, &wm, Some(&anti), &cfg).unwrap();
        assert_eq!(s.params.checksum(), before);
        assert!(!fg.skipped);

        let wt = watermark_targets(&t, &pol, &wm).unwrap();
        let (_, g_sim) = student_kl_grad(&s, &wm, &wt.rows, &shifted_targets(&pol, &wt, 1.0)).unwrap();
        let at = watermark_targets(&t, &pol, &anti).unwrap();
        let anti_target = shifted_targets(&pol, &at, -1.0);
        let (pre, g_pre) = student_kl_grad(&s, &anti, &at.rows, &anti_target).unwrap();
        let norm = g_pre.iter().flatten().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let mut moved = s.clone();
        for (tns, g) in moved.params.tensors_mut().iter_mut().zip(&g_pre) {
            for (w, &gv) in tns.data_mut().iter_mut().zip(g) {
                *w = (*w as f64 - 0.05 * gv as f64 / norm) as f32;
            }
        }
        let (post, g_post) = student_kl_grad(&moved, &anti, &at.rows, &anti_target).unwrap();
        assert!((fg.l_anti_pre.unwrap() - pre).abs() < 1e-9);
        assert!((fg.l_anti_post.unwrap() - post).abs() < 1e-9);
        // the post point descends the anti loss
        assert!(post < pre);
        for i in 0..g_sim.len() {
            for j in 0..g_sim[i].len() {
                let want = g_sim[i][j] as f64 + 2.0 * (g_pre[i][j] as f64 - g_post[i][j] as f64);
                let got = fg.grads[i][j] as f64;
                assert!((got - want).abs() <= 1e-5 * (1.0 + want.abs()), "{i}/{j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn beta_zero_is_plain_distillation() {
        let t = tiny_lm(1);
        let mut s = tiny_lm(2);
        let pol = tiny_policy(1);
        let wm = batch(3, 2, 10);
        let cfg = TrainConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
        let fg = fpl_gradient(&mut s, &t, &pol, &wm, Some(&batch(4, 2, 8)), &cfg).unwrap();
        assert!(fg.l_anti_pre.is_none());
        let wt = watermark_targets(&t, &pol, &wm).unwrap();
        let (_, g) = student_kl_grad(&s, &wm, &wt.rows, &shifted_targets(&pol, &wt, 1.0)).unwrap();
        assert_eq!(fg.grads, g);
    }

    #[test]
    fn degenerate_anti_objective_is_harmless() {
        // student equal to teacher, zero-strength watermark: anti loss is at its minimum
        let t = tiny_lm(1);
        let mut s = t.clone();
        let pol = WatermarkPolicy::new(PolicyConfig { delta: 0.0, d_e: 8, d_h: 16, ..Default::default() }).unwrap();
        let cfg = TrainConfig::default();
        let before = s.params.checksum();
        let fg = fpl_gradient(&mut s, &t, &pol, &batch(3, 2, 10), Some(&batch(4, 2, 8)), &cfg).unwrap();
        assert!(fg.l_anti_pre.unwrap() < 1e-6);
        assert_eq!(s.params.checksum(), before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { alpha: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { alpha: 0.0, beta: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { alpha: 0.0, beta: 0.0, ..Default::default() }.validate().is_ok());
        let parsed: TrainConfig = serde_json::from_str(r#"{"beta": 2.0}"#).unwrap();
        assert_eq!(parsed.beta, 2.0);
        assert_eq!(parsed.anti_len(), 64);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"betta": 2.0}"#).is_err());
    }

    #[test]
    fn anti_batch_is_prompt_plus_continuation() {
        let t = tiny_lm(1);
        let pol = tiny_policy(1);
        let prompts = vec![vec![10, 20, 30], vec![40, 50, 60]];
        let a = gen_anti_batch(&t, &pol, &prompts, 12, 7).unwrap();
        assert_eq!((a.batch, a.seq_len), (2, 12));
        assert_eq!(&a.row(1)[..3], &[40, 50, 60]);
        assert_eq!(a.ids, gen_anti_batch(&t, &pol, &prompts, 12, 7).unwrap().ids);
        assert!(gen_anti_batch(&t, &pol, &prompts, 3, 7).is_err());
    }

    #[test]
    fn short_cawp_run_logs_and_keeps_embedder() {
        let corpus = text_corpus();
        let t = tiny_lm(1);
        let mut s = t.clone();
        let mut pol = tiny_policy(1);
        let table = pol.embedder.table().to_vec();
        let cfg = TrainConfig { steps: 6, batch: 2, seq_len: 24, anti_len: Some(16), anti_refresh: 3, lr: 1e-3, ..Default::default() };
        let mut seen = 0;
        let mut cb = |_: &TrainRecord| seen += 1;
        let log = train_cawp(&t, &mut s, &mut pol, &corpus, &cfg, Some(&mut cb)).unwrap();
        assert_eq!(seen, 6);
        assert_eq!(log.records.len(), 6);
        assert!(log.records.iter().all(|r| r.l_anti_pre.is_some() && r.l_mapper.is_some()));
        assert_eq!(pol.embedder.table(), &table[..]);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        log.write_jsonl(&p).unwrap();
        assert_eq!(TrainLog::read_jsonl(&p).unwrap(), log);
    }

    #[test]
    fn pretraining_lowers_loss() {
        let corpus = text_corpus();
        let mut m = tiny_lm(4);
        let cfg = LmTrainConfig { steps: 40, batch: 4, seq_len: 32, lr: 3e-3, eval_every: 20, eval_batches: 2, ..Default::default() };
        let log = pretrain(&mut m, &corpus, &cfg, None).unwrap();
        let first = log[0].loss;
        let last = log.last().unwrap().loss;
        assert!(last < first - 1.0, "{first} -> {last}");
        assert!(log.last().unwrap().val_loss.is_some());
    }

    #[test]
    fn logit_distillation_targets_include_bias() {
        struct Const;
        impl LogitBias for Const {
            fn add_bias(&self, _: &[TokenId], logits: &mut [f64]) -> Result<()> {
                logits[7] += 2.0;
                Ok(())
            }
        }
        let t = tiny_lm(1);
        let b = batch(2, 1, 5);
        let raw = t.forward_plain(&b).unwrap();
        let biased = biased_teacher_logits(&t, &Const, &b).unwrap();
        let v = t.config.vocab;
        for p in 0..5 {
            assert!((biased[p * v + 7] - raw[p * v + 7] - 2.0).abs() < 1e-6);
            assert_eq!(biased[p * v + 8], raw[p * v + 8]);
        }
        assert!(logit_distill_loss(&t, &t, &Const, &b).unwrap() > 0.0);
    }
}
