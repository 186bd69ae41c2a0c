//! Detection and quality metrics, and the experiment runner that generates
//! watermarked and null continuations, scores them and writes reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{DecodingScheme, KgwScheme, KthScheme, SchemeKey};
use crate::corpus::{Corpus, Split, TokenId};
use crate::error::{Result, WmError};
use crate::lm::{continuation_perplexity, generate, sample_with_bias, CausalLM, LogitBias};
use crate::modify::{self, ModContext, ModificationSpec};
use crate::policy::WatermarkPolicy;
use crate::stats::{derive_seed, median, upper_quantile};

/// FPR levels reported in every [`Metrics::tpr_at`].
pub const FPR_GRID: [f64; 4] = [0.001, 0.01, 0.05, 0.10];

fn check_nonempty(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(WmError::TooFewSamples { need: 1, got: pos.len().min(neg.len()) });
    }
    Ok(())
}

/// Mann–Whitney AUC with ties counted as one half.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_nonempty(pos, neg)?;
    let mut sorted = neg.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in pos {
        let below = sorted.partition_point(|&x| x < p);
        let upto = sorted.partition_point(|&x| x <= p);
        wins += below as f64 + 0.5 * (upto - below) as f64;
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

/// Fraction of `pos` strictly above the `(1 − fpr)` upper quantile of `neg`.
pub fn tpr_at_fpr(pos: &[f64], neg: &[f64], fpr: f64) -> Result<f64> {
    check_nonempty(pos, neg)?;
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(WmError::InvalidArgument(format!("fpr {fpr} outside (0, 1)")));
    }
    let thr = upper_quantile(neg, 1.0 - fpr)?;
    Ok(pos.iter().filter(|&&p| p > thr).count() as f64 / pos.len() as f64)
}

/// Fraction of scored positions whose token is green under its context.
pub fn green_ratio(scheme: &KgwScheme, texts: &[Vec<TokenId>]) -> Result<f64> {
    let (mut green, mut total) = (0, 0);
    for t in texts {
        if t.len() <= scheme.k {
            continue;
        }
        let (g, n) = scheme.green_count(t)?;
        green += g;
        total += n;
    }
    if total == 0 {
        return Err(WmError::TooFewSamples { need: 1, got: 0 });
    }
    Ok(green as f64 / total as f64)
}

/// Scores a continuation; larger means more watermark-like.
pub enum Detector<'a> {
    /// Mean mapper output at the realized tokens.
    Pro(&'a WatermarkPolicy),
    /// Green-count z statistic.
    Kgw(&'a KgwScheme),
    /// Negated minimum alignment cost.
    Kth(&'a KthScheme),
}

impl Detector<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            Detector::Pro(_) => "pro",
            Detector::Kgw(_) => "kgw",
            Detector::Kth(_) => "kth",
        }
    }

    pub fn score(&self, text: &[TokenId]) -> Result<f64> {
        match self {
            Detector::Pro(p) => Ok(p.detect_z(text)?.z),
            Detector::Kgw(s) => Ok(s.detect(text)?.z),
            Detector::Kth(s) => {
                if text.is_empty() {
                    return Err(WmError::InsufficientLength { need: 0, got: 0 });
                }
                Ok(-s.d_min(text))
            }
        }
    }

    pub fn score_all(&self, texts: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        texts.iter().map(|t| self.score(t)).collect()
    }
}

/// How continuations are produced from a model.
pub enum Generator<'a> {
    /// Temperature-1 sampling.
    Sample,
    /// Temperature-1 sampling with an additive decoding bias.
    Biased(&'a dyn LogitBias),
    /// Exponential-minimum decoding.
    Kth(&'a KthScheme),
}

/// One continuation of `gen_len` tokens per prompt; text `i` uses a seed
/// derived from `(seed, i)`.
pub fn generate_texts(
    model: &CausalLM<f32>,
    how: &Generator<'_>,
    prompts: &[Vec<TokenId>],
    gen_len: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = derive_seed(seed, i as u64);
            match how {
                Generator::Sample => sample_with_bias(model, p, gen_len, 1.0, None, s),
                Generator::Biased(b) => sample_with_bias(model, p, gen_len, 1.0, Some(*b), s),
                Generator::Kth(k) => generate(model, p, gen_len, &mut k.sampler(derive_seed(s, 1)), s),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    /// Keyed by the FPR formatted with `{}`.
    pub tpr_at: BTreeMap<String, f64>,
    pub ppl_median_wm: f64,
    pub ppl_median_null: f64,
    pub z_mean_wm: f64,
    pub z_mean_null: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub green_ratio: Option<f64>,
}

/// Metrics from scores and perplexities already computed.
pub fn metrics_from_scores(pos: &[f64], neg: &[f64], ppl_wm: &[f64], ppl_null: &[f64]) -> Result<Metrics> {
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut tpr_at = BTreeMap::new();
    for f in FPR_GRID {
        tpr_at.insert(format!("{f}"), tpr_at_fpr(pos, neg, f)?);
    }
    Ok(Metrics {
        auc: roc_auc(pos, neg)?,
        tpr_at,
        ppl_median_wm: median(ppl_wm)?,
        ppl_median_null: median(ppl_null)?,
        z_mean_wm: mean(pos),
        z_mean_null: mean(neg),
        green_ratio: None,
    })
}

/// Perplexity of each continuation under `reference`, given its prompt.
pub fn perplexities(reference: &CausalLM<f32>, prompts: &[Vec<TokenId>], conts: &[Vec<TokenId>]) -> Result<Vec<f64>> {
    prompts.iter().zip(conts).map(|(p, c)| continuation_perplexity(reference, p, c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Texts per class.
    pub n_samples: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub prompt_split: Split,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_samples: 200, prompt_len: 50, gen_len: 200, prompt_split: Split::Heldout, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub config_hash: String,
    pub watermark_kind: String,
    pub modification: Option<ModificationSpec>,
    pub metrics: Metrics,
    pub n_wm: usize,
    pub n_null: usize,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let m = &self.metrics;
        if !(0.0..=1.0).contains(&m.auc) || self.n_wm == 0 || self.n_null == 0 {
            return Err(WmError::Config("report has AUC outside [0, 1] or empty classes".into()));
        }
        let mut last = -1.0;
        for f in FPR_GRID {
            let t = m.tpr_at.get(&format!("{f}")).copied().unwrap_or(f64::NAN);
            if !(t >= last) {
                return Err(WmError::Config("TPR must be nondecreasing in FPR".into()));
            }
            last = t;
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| WmError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| WmError::io(path, e))?;
        Ok(serde_json::from_slice(&raw)?)
    }
}

pub const CSV_HEADER: &str = "run_id,config_hash,watermark_kind,modification,auc,tpr@0.001,tpr@0.01,tpr@0.05,tpr@0.1,ppl_median_wm,ppl_median_null,z_mean_wm,z_mean_null,green_ratio,n_wm,n_null";

/// One CSV row per report, header first.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let m = &r.metrics;
        let tpr = |f: f64| m.tpr_at.get(&format!("{f}")).map(|v| v.to_string()).unwrap_or_default();
        let row = [
            r.run_id.clone(),
            r.config_hash.clone(),
            r.watermark_kind.clone(),
            r.modification.as_ref().map(ModificationSpec::label).unwrap_or_else(|| "none".into()),
            m.auc.to_string(),
            tpr(0.001),
            tpr(0.01),
            tpr(0.05),
            tpr(0.1),
            m.ppl_median_wm.to_string(),
            m.ppl_median_null.to_string(),
            m.z_mean_wm.to_string(),
            m.z_mean_null.to_string(),
            m.green_ratio.map(|g| g.to_string()).unwrap_or_default(),
            r.n_wm.to_string(),
            r.n_null.to_string(),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// SHA-256 hex of the compact JSON of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

/// Which watermark an experiment measures and how the watermarked texts
/// are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WatermarkKind {
    Pro,
    Kgw,
    Kth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    /// Plain sampling from the model (learned watermarks and controls).
    Sample,
    /// The model decodes with the watermark applied at sampling time.
    Decode,
}

/// File-level experiment description. Paths are resolved relative to the
/// working directory; `secret` falls back to `WM_SECRET_PATH`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub corpus: PathBuf,
    /// Frozen reference model: null texts and perplexity.
    pub teacher: PathBuf,
    /// Model generating the watermarked class; the teacher when absent.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Merge partner; the teacher when absent.
    #[serde(default)]
    pub base: Option<PathBuf>,
    pub watermark: WatermarkKind,
    #[serde(default)]
    pub secret: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: GenerationMode,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub modifications: Vec<ModificationSpec>,
}

fn default_run_id() -> String {
    "run".into()
}
fn default_mode() -> GenerationMode {
    GenerationMode::Sample
}

pub const SECRET_ENV: &str = "WM_SECRET_PATH";

/// Config value, else the `WM_SECRET_PATH` environment variable.
pub fn resolve_secret(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(SECRET_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| WmError::Config(format!("no secret path given and {SECRET_ENV} is unset")))
}

/// Loaded watermark material.
pub enum Secret {
    Pro(WatermarkPolicy),
    Kgw(KgwScheme),
    Kth(KthScheme),
}

impl Secret {
    pub fn load(kind: WatermarkKind, path: &Path) -> Result<Self> {
        match kind {
            WatermarkKind::Pro => {
                if path.is_file() {
                    return Err(WmError::Config(format!(
                        "watermark kind pro expects a policy checkpoint directory, got file {}",
                        path.display()
                    )));
                }
                Ok(Secret::Pro(WatermarkPolicy::load(path)?))
            }
            WatermarkKind::Kgw | WatermarkKind::Kth => {
                if !path.exists() {
                    return Err(WmError::MissingCheckpoint(path.to_path_buf()));
                }
                match (kind, SchemeKey::load(path)?.build()?) {
                    (WatermarkKind::Kgw, DecodingScheme::Kgw(s)) => Ok(Secret::Kgw(s)),
                    (WatermarkKind::Kth, DecodingScheme::Kth(s)) => Ok(Secret::Kth(s)),
                    _ => Err(WmError::Config(format!("key file {} does not hold a {kind:?} key", path.display()))),
                }
            }
        }
    }

    pub fn detector(&self) -> Detector<'_> {
        match self {
            Secret::Pro(p) => Detector::Pro(p),
            Secret::Kgw(s) => Detector::Kgw(s),
            Secret::Kth(s) => Detector::Kth(s),
        }
    }

    pub fn decoder(&self) -> Generator<'_> {
        match self {
            Secret::Pro(p) => Generator::Biased(p),
            Secret::Kgw(s) => Generator::Biased(s),
            Secret::Kth(s) => Generator::Kth(s),
        }
    }
}

/// Continuations of one model with their detection scores and
/// perplexities under the teacher.
pub struct ModelSample {
    pub texts: Vec<Vec<TokenId>>,
    pub scores: Vec<f64>,
    pub ppl: Vec<f64>,
}

/// Everything an experiment needs in memory.
pub struct Experiment<'a> {
    pub run_id: String,
    pub config_hash: String,
    pub teacher: &'a CausalLM<f32>,
    pub model: &'a CausalLM<f32>,
    pub base: &'a CausalLM<f32>,
    pub corpus: &'a Corpus,
    pub secret: &'a Secret,
    pub mode: GenerationMode,
    pub eval: EvalConfig,
}

/// Null continuations with their scores and perplexities; reused across
/// the cells of a grid.
pub struct NullSet {
    pub prompts: Vec<Vec<TokenId>>,
    pub texts: Vec<Vec<TokenId>>,
    pub scores: Vec<f64>,
    pub ppl: Vec<f64>,
}

impl Experiment<'_> {
    pub fn prompts(&self) -> Result<Vec<Vec<TokenId>>> {
        self.corpus.sample_prompts(self.eval.prompt_split, self.eval.n_samples, self.eval.prompt_len, derive_seed(self.eval.seed, 101))
    }

    pub fn null_set(&self) -> Result<NullSet> {
        let prompts = self.prompts()?;
        let texts = generate_texts(self.teacher, &Generator::Sample, &prompts, self.eval.gen_len, derive_seed(self.eval.seed, 202))?;
        let scores = self.secret.detector().score_all(&texts)?;
        let ppl = perplexities(self.teacher, &prompts, &texts)?;
        Ok(NullSet { prompts, texts, scores, ppl })
    }

    /// Generates from `model` on the null set's prompts and scores the
    /// continuations.
    pub fn sample_model(&self, model: &CausalLM<f32>, null: &NullSet) -> Result<ModelSample> {
        let how = match self.mode {
            GenerationMode::Sample => Generator::Sample,
            GenerationMode::Decode => self.secret.decoder(),
        };
        let texts = generate_texts(model, &how, &null.prompts, self.eval.gen_len, derive_seed(self.eval.seed, 303))?;
        let scores = self.secret.detector().score_all(&texts)?;
        let ppl = perplexities(self.teacher, &null.prompts, &texts)?;
        Ok(ModelSample { texts, scores, ppl })
    }

    pub fn report(&self, sample: &ModelSample, null: &NullSet, modification: Option<ModificationSpec>) -> Result<EvalReport> {
        let mut metrics = metrics_from_scores(&sample.scores, &null.scores, &sample.ppl, &null.ppl)?;
        if let Secret::Kgw(s) = self.secret {
            metrics.green_ratio = Some(green_ratio(s, &sample.texts)?);
        }
        Ok(EvalReport {
            run_id: self.run_id.clone(),
            config_hash: self.config_hash.clone(),
            watermark_kind: self.secret.detector().kind().into(),
            modification,
            metrics,
            n_wm: sample.texts.len(),
            n_null: null.texts.len(),
            seeds: vec![self.eval.seed],
        })
    }

    /// Scores one (possibly modified) model against the null set.
    pub fn evaluate_model(&self, model: &CausalLM<f32>, null: &NullSet, modification: Option<ModificationSpec>) -> Result<EvalReport> {
        self.report(&self.sample_model(model, null)?, null, modification)
    }

    /// The unaltered report followed by one report per modification.
    pub fn run(&self, modifications: &[ModificationSpec], out: Option<&Path>) -> Result<Vec<EvalReport>> {
        let null = self.null_set()?;
        let mut reports = vec![self.evaluate_model(self.model, &null, None)?];
        let ctx = ModContext { base: Some(self.base), corpus: Some(self.corpus) };
        for spec in modifications {
            let modified = match out {
                Some(dir) => modify::apply_and_save(self.model, spec, ctx, dir, &self.run_id)?.0,
                None => modify::apply(self.model, spec, ctx)?,
            };
            reports.push(self.evaluate_model(&modified, &null, Some(spec.clone()))?);
        }
        Ok(reports)
    }
}

/// Loads everything named by `cfg` and runs it; reports are written to
/// `out/report.json` and `out/report.csv` when `out` is given.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<EvalReport>> {
    let corpus = Corpus::from_manifest(&cfg.corpus)?;
    let teacher = CausalLM::load(&cfg.teacher)?;
    let model = match &cfg.model {
        Some(p) => CausalLM::load(p)?,
        None => teacher.clone(),
    };
    let base = match &cfg.base {
        Some(p) => CausalLM::load(p)?,
        None => teacher.clone(),
    };
    let secret = Secret::load(cfg.watermark, &resolve_secret(cfg.secret.as_deref())?)?;
    let exp = Experiment {
        run_id: cfg.run_id.clone(),
        config_hash: config_hash(cfg)?,
        teacher: &teacher,
        model: &model,
        base: &base,
        corpus: &corpus,
        secret: &secret,
        mode: cfg.mode,
        eval: cfg.eval.clone(),
    };
    let reports = exp.run(&cfg.modifications, out)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| WmError::io(dir, e))?;
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&reports)?).map_err(|e| WmError::io(&path, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, reports_to_csv(&reports)).map_err(|e| WmError::io(&csv, e))?;
    }
    Ok(reports)
}
