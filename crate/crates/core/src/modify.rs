//! User-side weight modifications applied to a watermarked model: SLERP
//! merging, round-to-nearest quantization, magnitude pruning and raw-text
//! fine-tuning.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Split};
use crate::error::{Result, WmError};
use crate::lm::{param_role, CausalLM, ParamRole};
use crate::training::{finetune_split, LmTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModificationSpec {
    /// SLERP toward the unwatermarked base at interpolation weight `t`.
    Merge { t: f64 },
    Quantize { bits: u32 },
    Prune { sparsity: f64 },
    Finetune {
        steps: usize,
        #[serde(default = "default_ft_lr")]
        lr: f64,
        #[serde(default = "default_ft_split")]
        split: Split,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_ft_batch")]
        batch: usize,
        #[serde(default = "default_ft_seq")]
        seq_len: usize,
    },
}

fn default_ft_lr() -> f64 {
    1e-4
}
fn default_ft_split() -> Split {
    Split::Heldout
}
fn default_ft_batch() -> usize {
    4
}
fn default_ft_seq() -> usize {
    128
}

impl ModificationSpec {
    pub fn finetune(steps: usize, seed: u64) -> Self {
        ModificationSpec::Finetune {
            steps,
            lr: default_ft_lr(),
            split: default_ft_split(),
            seed,
            batch: default_ft_batch(),
            seq_len: default_ft_seq(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModificationSpec::Merge { t } if !(0.0..=1.0).contains(&t) => {
                Err(WmError::Config(format!("merge t={t} outside [0, 1]")))
            }
            ModificationSpec::Quantize { bits } if bits != 4 && bits != 8 => {
                Err(WmError::Config(format!("quantization supports 4 or 8 bits, got {bits}")))
            }
            ModificationSpec::Prune { sparsity } if !(0.0..=1.0).contains(&sparsity) => {
                Err(WmError::Config(format!("sparsity {sparsity} outside [0, 1]")))
            }
            ModificationSpec::Finetune { lr, batch, seq_len, .. } if !(lr >= 0.0) || batch == 0 || seq_len < 2 => {
                Err(WmError::Config("finetune needs lr >= 0, batch >= 1, seq_len >= 2".into()))
            }
            _ => Ok(()),
        }
    }

    /// Short label for tables, e.g. `merge_t0.5`.
    pub fn label(&self) -> String {
        match self {
            ModificationSpec::Merge { t } => format!("merge_t{t}"),
            ModificationSpec::Quantize { bits } => format!("int{bits}"),
            ModificationSpec::Prune { sparsity } => format!("prune_{sparsity}"),
            ModificationSpec::Finetune { steps, .. } => format!("finetune_{steps}"),
        }
    }

    /// First 16 hex digits of SHA-256 over the spec's JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Per-tensor spherical interpolation; falls back to linear interpolation
/// when the angle is below 1e-6 or either tensor is zero.
pub fn slerp_merge(a: &CausalLM<f32>, b: &CausalLM<f32>, t: f64) -> Result<CausalLM<f32>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(WmError::InvalidArgument(format!("merge t={t} outside [0, 1]")));
    }
    if a.config != b.config || !a.params.same_layout(&b.params) {
        return Err(WmError::ArchitectureMismatch("merge partners differ in layout".into()));
    }
    let mut out = a.clone();
    for (dst, src) in out.params.tensors_mut().iter_mut().zip(b.params.tensors()) {
        let merged = slerp_vec(dst.data(), src.data(), t);
        dst.data_mut().copy_from_slice(&merged);
    }
    Ok(out)
}

pub fn slerp_vec(a: &[f32], b: &[f32], t: f64) -> Vec<f32> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    let denom = (na * nb).sqrt();
    let omega = if denom > 0.0 { (dot / denom).clamp(-1.0, 1.0).acos() } else { 0.0 };
    let (ca, cb) = if omega < 1e-6 {
        (1.0 - t, t)
    } else {
        let s = omega.sin();
        (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s)
    };
    a.iter().zip(b).map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32).collect()
}

/// Symmetric per-tensor round-to-nearest, returned dequantized.
pub fn quantize_rtn(model: &CausalLM<f32>, bits: u32) -> Result<CausalLM<f32>> {
    if bits != 4 && bits != 8 {
        return Err(WmError::InvalidArgument(format!("quantization supports 4 or 8 bits, got {bits}")));
    }
    let mut out = model.clone();
    for t in out.params.tensors_mut() {
        quantize_slice(t.data_mut(), bits);
    }
    Ok(out)
}

pub fn quantize_slice(w: &mut [f32], bits: u32) {
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let max = w.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()));
    if max == 0.0 {
        return;
    }
    let scale = max / levels;
    for x in w.iter_mut() {
        *x = ((*x as f64 / scale).round() * scale) as f32;
    }
}

/// Zeroes the `sparsity` fraction of smallest-magnitude entries among all
/// weight matrices, under one global threshold. Embeddings, layer-norm
/// parameters and biases are left alone.
pub fn prune_magnitude(model: &CausalLM<f32>, sparsity: f64) -> Result<CausalLM<f32>> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(WmError::InvalidArgument(format!("sparsity {sparsity} outside [0, 1]")));
    }
    let mut out = model.clone();
    let prunable: Vec<usize> = (0..out.params.len())
        .filter(|&i| param_role(&out.params.names()[i]) == ParamRole::Weight)
        .collect();
    // (|w|, tensor, index); sorting the full list gives an exact count
    let mut entries: Vec<(f32, usize, usize)> = prunable
        .iter()
        .flat_map(|&ti| out.params.get(ti).data().iter().enumerate().map(move |(j, &w)| (w.abs(), ti, j)))
        .collect();
    let k = (sparsity * entries.len() as f64).round() as usize;
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, ti, j) in &entries[..k] {
        out.params.get_mut(ti).data_mut()[j] = 0.0;
    }
    Ok(out)
}

/// Fraction of zero entries among prunable weights.
pub fn weight_sparsity(model: &CausalLM<f32>) -> f64 {
    let (mut zeros, mut total) = (0usize, 0usize);
    for (name, t) in model.params.iter() {
        if param_role(name) == ParamRole::Weight {
            zeros += t.data().iter().filter(|&&w| w == 0.0).count();
            total += t.numel();
        }
    }
    zeros as f64 / total.max(1) as f64
}

/// Cross-entropy AdamW fine-tuning on raw text from `split`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_raw(
    model: &CausalLM<f32>,
    corpus: &Corpus,
    split: Split,
    steps: usize,
    lr: f64,
    seed: u64,
    batch: usize,
    seq_len: usize,
) -> Result<CausalLM<f32>> {
    let mut out = model.clone();
    let cfg = LmTrainConfig { steps, batch, seq_len, lr, seed, warmup_frac: 0.0, weight_decay: 0.0, ..Default::default() };
    finetune_split(&mut out, corpus, split, &cfg)?;
    Ok(out)
}

/// What a modification may need besides the model itself.
#[derive(Clone, Copy, Default)]
pub struct ModContext<'a> {
    /// Merge partner (the unwatermarked base).
    pub base: Option<&'a CausalLM<f32>>,
    pub corpus: Option<&'a Corpus>,
}

pub fn apply(model: &CausalLM<f32>, spec: &ModificationSpec, ctx: ModContext<'_>) -> Result<CausalLM<f32>> {
    spec.validate()?;
    match *spec {
        ModificationSpec::Merge { t } => {
            let base = ctx.base.ok_or_else(|| WmError::Config("merge needs a base model".into()))?;
            slerp_merge(model, base, t)
        }
        ModificationSpec::Quantize { bits } => quantize_rtn(model, bits),
        ModificationSpec::Prune { sparsity } => prune_magnitude(model, sparsity),
        ModificationSpec::Finetune { steps, lr, split, seed, batch, seq_len } => {
            let corpus = ctx.corpus.ok_or_else(|| WmError::Config("finetune needs a corpus".into()))?;
            finetune_raw(model, corpus, split, steps, lr, seed, batch, seq_len)
        }
    }
}

/// `out/<run>/<spec-hash>/`.
pub fn modified_dir(out: &Path, run: &str, spec: &ModificationSpec) -> PathBuf {
    out.join(run).join(spec.hash())
}

/// Applies `spec` and writes the result plus the spec next to it. The
/// input checkpoint is only read.
pub fn apply_and_save(
    model: &CausalLM<f32>,
    spec: &ModificationSpec,
    ctx: ModContext<'_>,
    out: &Path,
    run: &str,
) -> Result<(CausalLM<f32>, PathBuf)> {
    let modified = apply(model, spec, ctx)?;
    let dir = modified_dir(out, run, spec);
    modified.save(&dir)?;
    let spec_path = dir.join("modification.json");
    std::fs::write(&spec_path, serde_json::to_vec_pretty(spec)?).map_err(|e| WmError::io(&spec_path, e))?;
    Ok((modified, dir))
}
