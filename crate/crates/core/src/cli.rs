//! Command-line front end. Every subcommand reads one JSON config (all
//! fields optional where a default exists), applies `--set key=value`
//! overrides, runs, and leaves its artifacts plus a `run_manifest.json`
//! under `--out`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Corpus, Split, TokenId, Vocab};
use crate::error::{Result, WmError};
use crate::eval::{
    config_hash, generate_texts, reports_to_csv, resolve_secret, run_experiment, EvalReport, ExperimentConfig, Generator,
    Secret, WatermarkKind,
};
use crate::gradcheck;
use crate::lm::{CausalLM, LMConfig};
use crate::modify::{self, ModContext, ModificationSpec};
use crate::policy::WatermarkPolicy;
use crate::stats::derive_seed;
use crate::training::{distill_logit, distill_sampling, pretrain, train_cawp, LmRecord, LmTrainConfig, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING_CHECKPOINT: i32 = 4;
pub const EXIT_INPUT: i32 = 5;
pub const EXIT_DIVERGED: i32 = 6;
pub const EXIT_IO: i32 = 7;
pub const EXIT_CHECK_FAILED: i32 = 8;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  other error
  2  usage error (unknown subcommand or flag)
  3  malformed config or override
  4  missing checkpoint
  5  invalid input (e.g. text too short to score)
  6  training diverged
  7  I/O error
  8  gradcheck found a failing case

Errors are also printed to stderr as one JSON record:
  {\"error\": <kind>, \"message\": <text>, \"exit_code\": <n>}

Secrets (the policy seed, KGW/KTH keys) are read from files named in the
config (`secret`) or from the WM_SECRET_PATH environment variable.";

#[derive(Debug, Parser)]
#[command(name = "weightmark", version, about = "Train, apply and detect weight-embedded text watermarks", after_help = EXIT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.beta=0`. Values are
    /// parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher language model from scratch.
    Pretrain(Common),
    /// Train the student and the watermark policy jointly.
    TrainPro(Common),
    /// Distill a KGW-watermarked teacher into a student.
    DistillKgw(Common),
    /// Distill a KTH-watermarked teacher into a student.
    DistillKth(Common),
    /// Sample continuations and write them to files.
    Generate(Common),
    /// Score text files; one JSON line per file on stdout.
    Detect(DetectArgs),
    /// Apply a weight modification to a checkpoint.
    Modify(Common),
    /// Generate, score and report detection and quality metrics.
    Eval(Common),
    /// Check autodiff gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a grid of configs through another subcommand.
    Sweep(Common),
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Text files to score (raw bytes).
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for an error.
pub fn exit_code(e: &WmError) -> i32 {
    match e {
        WmError::Config(_) | WmError::Json(_) => EXIT_CONFIG,
        WmError::MissingCheckpoint(_) => EXIT_MISSING_CHECKPOINT,
        WmError::InsufficientLength { .. }
        | WmError::InsufficientTokens { .. }
        | WmError::TokenOutOfRange { .. }
        | WmError::SequenceTooLong { .. }
        | WmError::TooFewSamples { .. }
        | WmError::InvalidArgument(_)
        | WmError::ArchitectureMismatch(_) => EXIT_INPUT,
        WmError::Diverged { .. } | WmError::NonFinite { .. } | WmError::NonFiniteGradient(_) => EXIT_DIVERGED,
        WmError::Io { .. } => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

pub fn error_record(kind: &str, message: &str, code: i32) -> Value {
    json!({ "error": kind, "message": message, "exit_code": code })
}

/// Parses `argv` and runs the command, writing JSON results to `stdout`
/// and error records to `stderr`. Returns the process exit code.
pub fn run_with(argv: &[String], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let _ = writeln!(stderr, "{}", error_record("usage", msg.trim(), EXIT_USAGE));
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(stderr, "{}", error_record(e.kind(), &e.to_string(), code));
            code
        }
    }
}

pub fn run(argv: &[String]) -> i32 {
    run_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

/// Record written next to every run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: Value,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub build: String,
    pub out_dir: PathBuf,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

fn build_id() -> String {
    format!("weightmark {}", env!("CARGO_PKG_VERSION"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| WmError::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| WmError::io(path, e))
}

fn write_manifest(command: &str, common: &Common, config: &Value, seeds: BTreeMap<String, u64>, out: &Path) -> Result<()> {
    let m = RunManifest {
        command: command.into(),
        config_path: common.config.clone(),
        config: config.clone(),
        config_hash: config_hash(config)?,
        seeds,
        build: build_id(),
        out_dir: out.to_path_buf(),
    };
    write_json(&out.join(RUN_MANIFEST), &m)
}

/// Sets a dotted path inside a JSON object, creating objects on the way.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(WmError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(WmError::Config(format!("override `{key}` descends into a non-object")));
        }
        cur = cur.as_object_mut().unwrap().entry(p.to_string()).or_insert_with(|| json!({}));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(WmError::Config(format!("override `{key}` descends into a non-object"))),
    }
}

pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| WmError::Config(format!("override `{s}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Config file (or `{}`) with overrides applied.
pub fn resolve_config(common: &Common) -> Result<Value> {
    let mut v = match &common.config {
        Some(p) => {
            let raw = std::fs::read(p).map_err(|e| WmError::io(p, e))?;
            serde_json::from_slice(&raw).map_err(|e| WmError::Config(format!("{}: {e}", p.display())))?
        }
        None => json!({}),
    };
    for o in &common.overrides {
        let (k, val) = parse_override(o)?;
        set_path(&mut v, &k, val)?;
    }
    Ok(v)
}

fn typed<T: DeserializeOwned>(v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| WmError::Config(e.to_string()))
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = common.out.clone().ok_or_else(|| WmError::Config("--out is required".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| WmError::io(&out, e))?;
    Ok(out)
}

/// Reads a secret seed file: a bare JSON integer or `{"seed": n}`.
pub fn read_seed_file(path: &Path) -> Result<u64> {
    let raw = std::fs::read_to_string(path).map_err(|e| WmError::io(path, e))?;
    let v: Value = serde_json::from_str(raw.trim()).map_err(|e| WmError::Config(format!("{}: {e}", path.display())))?;
    v.as_u64()
        .or_else(|| v.get("seed").and_then(Value::as_u64))
        .ok_or_else(|| WmError::Config(format!("{} holds no integer seed", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub corpus: PathBuf,
    pub model: LMConfig,
    pub train: LmTrainConfig,
    pub init_seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            corpus: PathBuf::from("data/corpus/manifest.json"),
            model: LMConfig::default(),
            train: LmTrainConfig::default(),
            init_seed: 0,
        }
    }
}

fn jsonl_logger(path: &Path) -> Result<impl FnMut(&LmRecord)> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| WmError::io(path, e))?);
    Ok(move |r: &LmRecord| {
        let _ = serde_json::to_writer(&mut f, r);
        let _ = f.write_all(b"\n");
        let _ = f.flush();
    })
}

fn cmd_pretrain(common: &Common) -> Result<Value> {
    let v = resolve_config(common)?;
    let cfg: PretrainConfig = typed(&v)?;
    let out = out_dir(common)?;
    let corpus = Corpus::from_manifest(&cfg.corpus)?;
    let mut model = CausalLM::init(cfg.model, cfg.init_seed)?;
    let mut log = jsonl_logger(&out.join("train_log.jsonl"))?;
    let records = pretrain(&mut model, &corpus, &cfg.train, Some(&mut log))?;
    model.save(&out.join("teacher"))?;
    let seeds = BTreeMap::from([("init".into(), cfg.init_seed), ("train".into(), cfg.train.seed)]);
    write_manifest("pretrain", common, &serde_json::to_value(&cfg)?, seeds, &out)?;
    let last = records.last();
    Ok(json!({
        "checkpoint": out.join("teacher"),
        "steps": records.len(),
        "final_loss": last.map(|r| r.loss),
        "final_val_loss": records.iter().rev().find_map(|r| r.val_loss),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_texts: usize,
    pub fpr: f64,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { n_texts: 200, fpr: 0.05, prompt_len: 50, gen_len: 200, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProConfig {
    pub corpus: PathBuf,
    pub teacher: PathBuf,
    /// Student initialization; a copy of the teacher when absent.
    pub student: Option<PathBuf>,
    /// File holding the embedder seed; falls back to `WM_SECRET_PATH`.
    pub secret: Option<PathBuf>,
    pub d_e: usize,
    pub d_h: usize,
    pub mapper_init_seed: u64,
    pub train: TrainConfig,
    /// Null-text threshold calibration after training; skipped when null.
    pub calibration: Option<CalibrationConfig>,
}

impl Default for ProConfig {
    fn default() -> Self {
        ProConfig {
            corpus: PathBuf::from("data/corpus/manifest.json"),
            teacher: PathBuf::from("runs/pretrain/teacher"),
            student: None,
            secret: None,
            d_e: 64,
            d_h: 128,
            mapper_init_seed: 0,
            train: TrainConfig::default(),
            calibration: Some(CalibrationConfig::default()),
        }
    }
}

/// Calibrates the policy threshold on teacher generations from held-out
/// prompts.
pub fn calibrate_policy(policy: &mut WatermarkPolicy, teacher: &CausalLM<f32>, corpus: &Corpus, cal: &CalibrationConfig) -> Result<f64> {
    let prompts = corpus.sample_prompts(Split::Heldout, cal.n_texts, cal.prompt_len, derive_seed(cal.seed, 1))?;
    let texts = generate_texts(teacher, &Generator::Sample, &prompts, cal.gen_len, derive_seed(cal.seed, 2))?;
    let thr = policy.calibrate_threshold(&texts, cal.fpr)?;
    policy.threshold = Some(thr);
    Ok(thr)
}

fn cmd_train_pro(common: &Common) -> Result<Value> {
    let v = resolve_config(common)?;
    let cfg: ProConfig = typed(&v)?;
    cfg.train.validate()?;
    let out = out_dir(common)?;
    let corpus = Corpus::from_manifest(&cfg.corpus)?;
    let teacher = CausalLM::load(&cfg.teacher)?;
    let mut student = match &cfg.student {
        Some(p) => CausalLM::load(p)?,
        None => teacher.clone(),
    };
    let xi = read_seed_file(&resolve_secret(cfg.secret.as_deref())?)?;
    let mut policy = WatermarkPolicy::new(cfg.train.policy_config(xi, cfg.d_e, cfg.d_h, cfg.mapper_init_seed))?;
    let mut train = cfg.train.clone();
    if train.dump_dir.is_none() {
        train.dump_dir = Some(out.clone());
    }
    let log_path = out.join("train_log.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| WmError::io(&log_path, e))?);
    let mut cb = |r: &crate::training::TrainRecord| {
        let _ = serde_json::to_writer(&mut f, r);
        let _ = f.write_all(b"\n");
        let _ = f.flush();
    };
    let log = train_cawp(&teacher, &mut student, &mut policy, &corpus, &train, Some(&mut cb))?;
    let threshold = match &cfg.calibration {
        Some(cal) => Some(calibrate_policy(&mut policy, &teacher, &corpus, cal)?),
        None => None,
    };
    student.save(&out.join("student"))?;
    policy.save(&out.join("policy"))?;
    let seeds = BTreeMap::from([("train".into(), cfg.train.seed), ("mapper_init".into(), cfg.mapper_init_seed)]);
    write_manifest("train-pro", common, &serde_json::to_value(&cfg)?, seeds, &out)?;
    Ok(json!({
        "student": out.join("student"),
        "policy": out.join("policy"),
        "steps": log.records.len(),
        "sim_head_tail": log.sim_head_tail(0.1),
        "threshold": threshold,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMethod {
    Sampling,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub corpus: PathBuf,
    pub teacher: PathBuf,
    pub student: Option<PathBuf>,
    /// Key file; falls back to `WM_SECRET_PATH`.
    pub secret: Option<PathBuf>,
    pub method: DistillMethod,
    /// Watermarked texts generated for sampling distillation.
    pub n_texts: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub seed: u64,
    pub train: LmTrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            corpus: PathBuf::from("data/corpus/manifest.json"),
            teacher: PathBuf::from("runs/pretrain/teacher"),
            student: None,
            secret: None,
            method: DistillMethod::Sampling,
            n_texts: 400,
            prompt_len: 32,
            gen_len: 128,
            seed: 0,
            train: LmTrainConfig { steps: 1000, seq_len: 128, lr: 3e-4, eval_every: 0, patience: 0, ..Default::default() },
        }
    }
}

fn cmd_distill(common: &Common, kind: WatermarkKind) -> Result<Value> {
    let v = resolve_config(common)?;
    let cfg: DistillConfig = typed(&v)?;
    let out = out_dir(common)?;
    let corpus = Corpus::from_manifest(&cfg.corpus)?;
    let teacher = CausalLM::load(&cfg.teacher)?;
    let mut student = match &cfg.student {
        Some(p) => CausalLM::load(p)?,
        None => teacher.clone(),
    };
    let secret = Secret::load(kind, &resolve_secret(cfg.secret.as_deref())?)?;
    let mut log = jsonl_logger(&out.join("train_log.jsonl"))?;
    let records = match (cfg.method, &secret) {
        (DistillMethod::Logit, Secret::Kgw(s)) => distill_logit(&mut student, &teacher, s, &corpus, &cfg.train, Some(&mut log))?,
        (DistillMethod::Logit, _) => {
            return Err(WmError::Config("logit distillation is only defined for KGW".into()));
        }
        (DistillMethod::Sampling, _) => {
            let prompts = corpus.sample_prompts(Split::Train, cfg.n_texts, cfg.prompt_len, derive_seed(cfg.seed, 1))?;
            let conts = generate_texts(&teacher, &secret.decoder(), &prompts, cfg.gen_len, derive_seed(cfg.seed, 2))?;
            let texts: Vec<Vec<TokenId>> = prompts.iter().zip(conts).map(|(p, c)| [p.as_slice(), &c].concat()).collect();
            distill_sampling(&mut student, &texts, &cfg.train, Some(&mut log))?
        }
    };
    student.save(&out.join("student"))?;
    let seeds = BTreeMap::from([("data".into(), cfg.seed), ("train".into(), cfg.train.seed)]);
    let name = if kind == WatermarkKind::Kgw { "distill-kgw" } else { "distill-kth" };
    write_manifest(name, common, &serde_json::to_value(&cfg)?, seeds, &out)?;
    Ok(json!({ "student": out.join("student"), "steps": records.len(), "final_loss": records.last().map(|r| r.loss) }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub model: PathBuf,
    pub corpus: PathBuf,
    pub n: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub prompt_split: Split,
    pub seed: u64,
    /// Decoding-time watermark; plain temperature-1 sampling when null.
    pub watermark: Option<WatermarkKind>,
    pub secret: Option<PathBuf>,
    /// Apply the PRO watermark with inverted sign.
    pub anti: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            model: PathBuf::from("runs/pro/student"),
            corpus: PathBuf::from("data/corpus/manifest.json"),
            n: 10,
            prompt_len: 50,
            gen_len: 200,
            prompt_split: Split::Heldout,
            seed: 0,
            watermark: None,
            secret: None,
            anti: false,
        }
    }
}

fn cmd_generate(common: &Common) -> Result<Value> {
    let v = resolve_config(common)?;
    let cfg: GenerateConfig = typed(&v)?;
    let out = out_dir(common)?;
    let model = CausalLM::load(&cfg.model)?;
    let corpus = Corpus::from_manifest(&cfg.corpus)?;
    let prompts = corpus.sample_prompts(cfg.prompt_split, cfg.n, cfg.prompt_len, derive_seed(cfg.seed, 1))?;
    let secret = match cfg.watermark {
        Some(kind) => Some(Secret::load(kind, &resolve_secret(cfg.secret.as_deref())?)?),
        None => None,
    };
    let conts = match (&secret, cfg.anti) {
        (None, false) => generate_texts(&model, &Generator::Sample, &prompts, cfg.gen_len, derive_seed(cfg.seed, 2))?,
        (Some(Secret::Pro(p)), true) => {
            let inv = p.inverted();
            generate_texts(&model, &Generator::Biased(&inv), &prompts, cfg.gen_len, derive_seed(cfg.seed, 2))?
        }
        (_, true) => return Err(WmError::Config("anti generation needs watermark = \"pro\"".into())),
        (Some(s), false) => generate_texts(&model, &s.decoder(), &prompts, cfg.gen_len, derive_seed(cfg.seed, 2))?,
    };
    let texts_dir = out.join("texts");
    std::fs::create_dir_all(&texts_dir).map_err(|e| WmError::io(&texts_dir, e))?;
    let jsonl = out.join("texts.jsonl");
    let mut f = std::fs::File::create(&jsonl).map_err(|e| WmError::io(&jsonl, e))?;
    for (i, (p, c)) in prompts.iter().zip(&conts).enumerate() {
        let path = texts_dir.join(format!("{i:04}.txt"));
        std::fs::write(&path, Vocab::decode_lossy(c)).map_err(|e| WmError::io(&path, e))?;
        let rec = json!({ "index": i, "file": path, "prompt": p, "tokens": c });
        writeln!(f, "{rec}").map_err(|e| WmError::io(&jsonl, e))?;
    }
    write_manifest("generate", common, &serde_json::to_value(&cfg)?, BTreeMap::from([("seed".into(), cfg.seed)]), &out)?;
    Ok(json!({ "texts": texts_dir, "count": conts.len() }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectConfig {
    pub watermark: WatermarkKind,
    #[serde(default)]
    pub secret: Option<PathBuf>,
    /// KTH only: null reference texts (at least 20 files).
    #[serde(default)]
    pub reference: Vec<PathBuf>,
}

fn read_text(path: &Path) -> Result<Vec<TokenId>> {
    let raw = std::fs::read(path).map_err(|e| WmError::io(path, e))?;
    Ok(Vocab::encode(&raw))
}

fn cmd_detect(args: &DetectArgs, stdout: &mut dyn Write) -> Result<Value> {
    let v = resolve_config(&args.common)?;
    let cfg: DetectConfig = typed(&v)?;
    if args.files.is_empty() {
        return Err(WmError::InvalidArgument("no input files".into()));
    }
    let secret = Secret::load(cfg.watermark, &resolve_secret(cfg.secret.as_deref())?)?;
    let refs: Vec<f64> = match &secret {
        Secret::Kth(s) => cfg.reference.iter().map(|p| Ok(s.d_min(&read_text(p)?))).collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let mut records = Vec::new();
    for file in &args.files {
        let text = read_text(file)?;
        let rec = match &secret {
            Secret::Pro(p) => {
                let d = p.detect_z(&text)?;
                json!({ "file": file, "kind": "pro", "z": d.z, "n_scored": d.n_scored, "threshold": d.threshold, "decision": d.decision })
            }
            Secret::Kgw(s) => {
                let d = s.detect(&text)?;
                json!({ "file": file, "kind": "kgw", "green_count": d.green_count, "n_scored": d.n_scored, "p_value": d.p_value, "z": d.z })
            }
            Secret::Kth(s) => {
                let d = s.detect_with_reference(&text, &refs)?;
                json!({ "file": file, "kind": "kth", "d_min": d.d_min, "p_value": d.p_value, "n_scored": text.len() })
            }
        };
        writeln!(stdout, "{rec}").map_err(|e| WmError::io("<stdout>", e))?;
        records.push(rec);
    }
    if let Some(out) = &args.common.out {
        std::fs::create_dir_all(out).map_err(|e| WmError::io(out, e))?;
        write_json(&out.join("detections.json"), &records)?;
        write_manifest("detect", &args.common, &v, BTreeMap::new(), out)?;
    }
    Ok(Value::Null)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModifyConfig {
    pub model: PathBuf,
    /// Merge partner; required for merges.
    #[serde(default)]
    pub base: Option<PathBuf>,
    /// Corpus manifest; required for fine-tuning.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_run")]
    pub run: String,
    pub spec: ModificationSpec,
}

fn default_run() -> String {
    "modify".into()
}

fn cmd_modify(common: &Common) -> Result<Value> {
    let v = resolve_config(common)?;
    let cfg: ModifyConfig = typed(&v)?;
    let out = out_dir(common)?;
    let model = CausalLM::load(&cfg.model)?;
    let base = cfg.base.as_deref().map(CausalLM::load).transpose()?;
    let corpus = cfg.corpus.as_deref().map(Corpus::from_manifest).transpose()?;
    let ctx = ModContext { base: base.as_ref(), corpus: corpus.as_ref() };
    let (_, dir) = modify::apply_and_save(&model, &cfg.spec, ctx, &out, &cfg.run)?;
    write_manifest("modify", common, &v, BTreeMap::new(), &out)?;
    Ok(json!({ "checkpoint": dir, "spec_hash": cfg.spec.hash() }))
}

fn cmd_eval(common: &Common) -> Result<Value> {
    let v = resolve_config(common)?;
    let cfg: ExperimentConfig = typed(&v)?;
    let out = out_dir(common)?;
    let reports = run_experiment(&cfg, Some(&out))?;
    write_manifest("eval", common, &v, BTreeMap::from([("eval".into(), cfg.eval.seed)]), &out)?;
    Ok(json!({ "reports": reports.len(), "auc": reports.iter().map(|r| r.metrics.auc).collect::<Vec<_>>() }))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(Value, bool)> {
    let report = gradcheck::run_suite(args.seed)?;
    if let Some(out) = &args.out {
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    let worst = report.cases.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let summary = json!({
        "passed": report.passed(),
        "total": report.cases.len(),
        "max_rel_err": worst,
        "tolerance": report.tolerance,
        "failed": report.cases.iter().filter(|c| !c.passed).map(|c| &c.name).collect::<Vec<_>>(),
    });
    Ok((summary, report.all_passed()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Subcommand run for each cell (any config-driven one).
    pub command: String,
    /// Base config shared by every cell.
    pub base: Value,
    /// Dotted key -> values; the cells are the cartesian product.
    pub grid: BTreeMap<String, Vec<Value>>,
    /// Cells run concurrently.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

/// Cartesian product of the grid in key order; last key varies fastest.
pub fn grid_cells(grid: &BTreeMap<String, Vec<Value>>) -> Vec<Vec<(String, Value)>> {
    let mut cells: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (k, vals) in grid {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                vals.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

fn cmd_sweep(common: &Common) -> Result<Value> {
    let v = resolve_config(common)?;
    let cfg: SweepConfig = typed(&v)?;
    const ALLOWED: [&str; 7] = ["pretrain", "train-pro", "distill-kgw", "distill-kth", "generate", "modify", "eval"];
    if !ALLOWED.contains(&cfg.command.as_str()) {
        return Err(WmError::Config(format!("sweep cannot run `{}`", cfg.command)));
    }
    let out = out_dir(common)?;
    let cells = grid_cells(&cfg.grid);
    let mut jobs = Vec::new();
    for cell in &cells {
        let mut c = cfg.base.clone();
        for (k, val) in cell {
            set_path(&mut c, k, val.clone())?;
        }
        let dir = out.join(format!("cell-{}", &config_hash(&c)?[..12]));
        let path = dir.join("cell_config.json");
        write_json(&path, &c)?;
        jobs.push((cell.clone(), dir, path));
    }
    let workers = cfg.workers.max(1);
    let mut results: Vec<Option<Result<Value>>> = (0..jobs.len()).map(|_| None).collect();
    for chunk_start in (0..jobs.len()).step_by(workers) {
        let end = (chunk_start + workers).min(jobs.len());
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs[chunk_start..end]
                .iter()
                .map(|(_, dir, path)| {
                    let common = Common { config: Some(path.clone()), overrides: Vec::new(), out: Some(dir.clone()) };
                    let command = cfg.command.clone();
                    s.spawn(move || run_config_command(&command, &common))
                })
                .collect();
            for (i, h) in handles.into_iter().enumerate() {
                results[chunk_start + i] = Some(h.join().unwrap_or_else(|_| Err(WmError::InvalidArgument("cell panicked".into()))));
            }
        });
    }
    let mut summary = Vec::new();
    let mut reports: Vec<EvalReport> = Vec::new();
    for ((cell, dir, _), res) in jobs.iter().zip(results) {
        let cell_map: serde_json::Map<String, Value> = cell.iter().cloned().collect();
        match res.expect("every cell ran") {
            Ok(r) => {
                if cfg.command == "eval" {
                    let raw = std::fs::read(dir.join("report.json")).map_err(|e| WmError::io(dir, e))?;
                    reports.extend(serde_json::from_slice::<Vec<EvalReport>>(&raw)?);
                }
                summary.push(json!({ "cell": cell_map, "dir": dir, "result": r }));
            }
            Err(e) => summary.push(json!({ "cell": cell_map, "dir": dir, "error": e.kind(), "message": e.to_string() })),
        }
    }
    write_json(&out.join("sweep.json"), &summary)?;
    if !reports.is_empty() {
        let csv = out.join("sweep.csv");
        std::fs::write(&csv, reports_to_csv(&reports)).map_err(|e| WmError::io(&csv, e))?;
    }
    write_manifest("sweep", common, &v, BTreeMap::new(), &out)?;
    let failed = summary.iter().filter(|s| s.get("error").is_some()).count();
    if failed > 0 {
        return Err(WmError::InvalidArgument(format!("{failed} of {} sweep cells failed; see sweep.json", summary.len())));
    }
    Ok(json!({ "cells": summary.len() }))
}

fn run_config_command(command: &str, common: &Common) -> Result<Value> {
    match command {
        "pretrain" => cmd_pretrain(common),
        "train-pro" => cmd_train_pro(common),
        "distill-kgw" => cmd_distill(common, WatermarkKind::Kgw),
        "distill-kth" => cmd_distill(common, WatermarkKind::Kth),
        "generate" => cmd_generate(common),
        "modify" => cmd_modify(common),
        "eval" => cmd_eval(common),
        "sweep" => cmd_sweep(common),
        other => Err(WmError::Config(format!("unknown command `{other}`"))),
    }
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> Result<i32> {
    let (value, code) = match &command {
        Command::Pretrain(c) => (cmd_pretrain(c)?, EXIT_OK),
        Command::TrainPro(c) => (cmd_train_pro(c)?, EXIT_OK),
        Command::DistillKgw(c) => (cmd_distill(c, WatermarkKind::Kgw)?, EXIT_OK),
        Command::DistillKth(c) => (cmd_distill(c, WatermarkKind::Kth)?, EXIT_OK),
        Command::Generate(c) => (cmd_generate(c)?, EXIT_OK),
        Command::Detect(a) => (cmd_detect(a, stdout)?, EXIT_OK),
        Command::Modify(c) => (cmd_modify(c)?, EXIT_OK),
        Command::Eval(c) => (cmd_eval(c)?, EXIT_OK),
        Command::Gradcheck(a) => {
            let (v, ok) = cmd_gradcheck(a)?;
            (v, if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::Sweep(c) => (cmd_sweep(c)?, EXIT_OK),
    };
    if !value.is_null() {
        writeln!(stdout, "{value}").map_err(|e| WmError::io("<stdout>", e))?;
    }
    Ok(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse() {
        let mut v = json!({ "train": { "beta": 5.0 } });
        for o in ["train.beta=0", "train.dump_dir=/tmp/x", "eval.n_samples=20", "flag=true"] {
            let (k, val) = parse_override(o).unwrap();
            set_path(&mut v, &k, val).unwrap();
        }
        assert_eq!(v["train"]["beta"], json!(0));
        assert_eq!(v["train"]["dump_dir"], json!("/tmp/x"));
        assert_eq!(v["eval"]["n_samples"], json!(20));
        assert_eq!(v["flag"], json!(true));
        assert!(parse_override("novalue").is_err());
        assert!(set_path(&mut v, "train.beta.x", json!(1)).is_err());
    }

    #[test]
    fn grid_is_cartesian() {
        let grid = BTreeMap::from([
            ("a".to_string(), vec![json!(1), json!(2)]),
            ("b".to_string(), vec![json!("x"), json!("y"), json!("z")]),
        ]);
        let cells = grid_cells(&grid);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1], vec![("a".into(), json!(1)), ("b".into(), json!("y"))]);
    }

    #[test]
    fn seed_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        std::fs::write(&a, "42\n").unwrap();
        assert_eq!(read_seed_file(&a).unwrap(), 42);
        std::fs::write(&a, r#"{"seed": 7}"#).unwrap();
        assert_eq!(read_seed_file(&a).unwrap(), 7);
        std::fs::write(&a, "\"x\"").unwrap();
        assert!(read_seed_file(&a).is_err());
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&WmError::Config("x".into())),
            exit_code(&WmError::MissingCheckpoint("p".into())),
            exit_code(&WmError::InsufficientLength { need: 1, got: 0 }),
            exit_code(&WmError::Diverged { step: 0, detail: String::new() }),
            exit_code(&WmError::io("p", std::io::Error::other("x"))),
        ];
        let mut sorted = codes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
        assert!(!codes.contains(&EXIT_USAGE));
    }
}
