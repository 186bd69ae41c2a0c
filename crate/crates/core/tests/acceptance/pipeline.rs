//! The desk-scale experiment behind the end-to-end criteria: pretrain a
//! teacher, train watermarked students for several seeds and two values of
//! β, and evaluate each against the modification grid. Every stage is
//! cached on disk under a hash of its inputs, so reruns only redo what
//! changed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use weightmark::baselines::KgwScheme;
use weightmark::corpus::{Corpus, Split, TokenId};
use weightmark::eval::{config_hash, generate_texts, perplexities, EvalConfig, EvalReport, Experiment, GenerationMode, Generator, ModelSample, NullSet, Secret};
use weightmark::lm::{CausalLM, LMConfig};
use weightmark::modify::{self, ModContext, ModificationSpec};
use weightmark::policy::WatermarkPolicy;
use weightmark::stats::derive_seed;
use weightmark::training::{pretrain, train_cawp, LmTrainConfig, TrainConfig, TrainLog};

#[derive(Debug, Clone, Serialize)]
pub struct Plan {
    pub name: &'static str,
    pub model: LMConfig,
    pub pretrain: LmTrainConfig,
    pub cawp: TrainConfig,
    pub d_e: usize,
    pub d_h: usize,
    pub seeds: Vec<u64>,
    pub betas: Vec<f64>,
    pub eval: EvalConfig,
    pub merge_ts: Vec<f64>,
    pub finetune_steps: Vec<usize>,
    pub finetune_lr: f64,
    /// Fresh null texts for the calibration check, and as many again to
    /// calibrate on.
    pub calibration_texts: usize,
}

impl Plan {
    pub fn full() -> Plan {
        Plan {
            name: "full",
            model: LMConfig::default(),
            pretrain: LmTrainConfig::default(),
            cawp: TrainConfig::default(),
            d_e: 64,
            d_h: 128,
            seeds: vec![0, 1, 2],
            betas: vec![5.0, 0.0],
            eval: EvalConfig { seed: 4242, ..Default::default() },
            merge_ts: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            finetune_steps: vec![300, 600, 900, 1200, 1500],
            finetune_lr: 1e-4,
            calibration_texts: 1000,
        }
    }

    /// Same shape, minutes instead of hours; for checking the plumbing.
    pub fn pilot() -> Plan {
        let full = Plan::full();
        Plan {
            name: "pilot",
            cawp: TrainConfig { steps: 300, ..full.cawp.clone() },
            seeds: vec![0],
            eval: EvalConfig { n_samples: 60, ..full.eval.clone() },
            merge_ts: vec![0.3, 0.7],
            finetune_steps: vec![100, 300],
            calibration_texts: 200,
            ..full
        }
    }

    /// The fine-tune cell compared in the β ablation.
    pub fn ablation_finetune(&self) -> usize {
        *self.finetune_steps.iter().find(|&&s| s >= 300).unwrap_or(&self.finetune_steps[0])
    }

    pub fn ft_spec(&self, steps: usize) -> ModificationSpec {
        ModificationSpec::Finetune { steps, lr: self.finetune_lr, split: Split::Heldout, seed: 17, batch: 4, seq_len: 128 }
    }

    /// Modifications evaluated for a run; the β = 0 runs only need the
    /// ablation cells.
    pub fn grid(&self, beta: f64) -> Vec<ModificationSpec> {
        if beta == 0.0 {
            return vec![ModificationSpec::Merge { t: 0.5 }, self.ft_spec(self.ablation_finetune())];
        }
        let mut g: Vec<ModificationSpec> = self.merge_ts.iter().map(|&t| ModificationSpec::Merge { t }).collect();
        g.extend(self.finetune_steps.iter().map(|&s| self.ft_spec(s)));
        g.push(ModificationSpec::Quantize { bits: 8 });
        g.push(ModificationSpec::Prune { sparsity: 0.2 });
        if !g.contains(&ModificationSpec::Merge { t: 0.5 }) {
            g.push(ModificationSpec::Merge { t: 0.5 });
        }
        g
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[pipeline] {}", msg.as_ref());
}

fn hash_of<T: Serialize>(v: &T) -> String {
    config_hash(v).expect("serializable")[..16].to_string()
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Option<T> {
    let raw = std::fs::read(path).ok()?;
    serde_json::from_slice(&raw).ok()
}

fn save_json<T: Serialize>(path: &Path, v: &T) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(v).unwrap()).unwrap();
    std::fs::rename(&tmp, path).unwrap();
}

/// Loads `path` or computes, stores and returns the value.
fn cached<T: Serialize + DeserializeOwned>(path: &Path, what: &str, f: impl FnOnce() -> T) -> T {
    if let Some(v) = load_json(path) {
        return v;
    }
    log(format!("computing {what}"));
    let t = Instant::now();
    let v = f();
    log(format!("{what} done in {:.0} s", t.elapsed().as_secs_f64()));
    save_json(path, &v);
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timed {
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub report: EvalReport,
    pub scores: Vec<f64>,
    pub ppl: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullTexts {
    pub prompts: Vec<Vec<TokenId>>,
    pub texts: Vec<Vec<TokenId>>,
    pub ppl: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub beta: f64,
    pub log: TrainLog,
    pub train_seconds: f64,
    pub unaltered: CellResult,
    pub null_scores: Vec<f64>,
    pub cells: Vec<(ModificationSpec, CellResult)>,
    /// Anti-watermarked continuations scored by the run's policy.
    pub anti_scores: Vec<f64>,
    pub dir: PathBuf,
}

impl RunResult {
    pub fn auc(&self, spec: &ModificationSpec) -> Option<f64> {
        self.cells.iter().find(|(s, _)| s == spec).map(|(_, c)| c.report.metrics.auc)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub calibration_scores: Vec<f64>,
    pub fresh_scores: Vec<f64>,
    pub kgw_p_values: Vec<f64>,
}

pub struct Outcome {
    pub plan: Plan,
    pub teacher_seconds: f64,
    pub null_seconds: f64,
    pub runs: Vec<RunResult>,
    pub calibration: Calibration,
}

impl Outcome {
    pub fn runs_with(&self, beta: f64) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.beta == beta)
    }
}

pub fn corpus_manifest() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus/manifest.json")
}

pub fn cache_root() -> PathBuf {
    std::env::var_os("WEIGHTMARK_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn teacher_stage(plan: &Plan, corpus: &Corpus, root: &Path) -> (CausalLM<f32>, PathBuf, f64) {
    let key = hash_of(&json!({ "model": plan.model, "pretrain": plan.pretrain, "corpus": corpus.sources() }));
    let dir = root.join(format!("teacher-{key}"));
    let timing: Timed = cached(&dir.join("timing.json"), "teacher pretraining", || {
        let t = Instant::now();
        let mut m = CausalLM::init(plan.model, 0).unwrap();
        let mut last = Instant::now();
        let mut cb = |r: &weightmark::training::LmRecord| {
            if r.val_loss.is_some() || last.elapsed().as_secs() >= 60 {
                last = Instant::now();
                log(format!("  pretrain step {} loss {:.3} val {:?}", r.step, r.loss, r.val_loss));
            }
        };
        let records = pretrain(&mut m, corpus, &plan.pretrain, Some(&mut cb)).unwrap();
        save_json(&dir.join("pretrain_log.json"), &records);
        m.save(&dir.join("model")).unwrap();
        Timed { seconds: t.elapsed().as_secs_f64() }
    });
    (CausalLM::load(&dir.join("model")).unwrap(), dir, timing.seconds)
}

/// Teacher samples on the evaluation prompts, shared by every run.
fn null_texts(teacher: &CausalLM<f32>, corpus: &Corpus, eval: &EvalConfig, teacher_dir: &Path) -> NullTexts {
    let path = teacher_dir.join(format!("null-{}.json", hash_of(eval)));
    cached(&path, "null texts", || {
        let t = Instant::now();
        let prompts = corpus.sample_prompts(eval.prompt_split, eval.n_samples, eval.prompt_len, derive_seed(eval.seed, 101)).unwrap();
        let texts = generate_texts(teacher, &Generator::Sample, &prompts, eval.gen_len, derive_seed(eval.seed, 202)).unwrap();
        let ppl = perplexities(teacher, &prompts, &texts).unwrap();
        NullTexts { prompts, texts, ppl, seconds: t.elapsed().as_secs_f64() }
    })
}

fn extra_null(teacher: &CausalLM<f32>, corpus: &Corpus, plan: &Plan, salt: u64, teacher_dir: &Path) -> Vec<Vec<TokenId>> {
    let e = &plan.eval;
    let key = hash_of(&json!({ "eval": e, "n": plan.calibration_texts, "salt": salt }));
    cached(&teacher_dir.join(format!("extra-null-{key}.json")), "calibration null texts", || {
        let seed = derive_seed(e.seed, 1000 + salt);
        let prompts = corpus.sample_prompts(e.prompt_split, plan.calibration_texts, e.prompt_len, derive_seed(seed, 1)).unwrap();
        generate_texts(teacher, &Generator::Sample, &prompts, e.gen_len, derive_seed(seed, 2)).unwrap()
    })
}

fn train_stage(plan: &Plan, teacher: &CausalLM<f32>, corpus: &Corpus, teacher_dir: &Path, seed: u64, beta: f64) -> (PathBuf, TrainLog, f64) {
    let cfg = TrainConfig { beta, seed, ..plan.cawp.clone() };
    let xi = derive_seed(0x5e_ed0f_ca3b, seed);
    let key = hash_of(&json!({ "teacher": teacher_dir.file_name().unwrap().to_string_lossy(), "cfg": cfg, "d_e": plan.d_e, "d_h": plan.d_h, "xi": xi }));
    let dir = teacher_dir.join(format!("pro-s{seed}-b{beta}-{key}"));
    let timing: Timed = cached(&dir.join("timing.json"), &format!("watermark training seed {seed} beta {beta}"), || {
        let t = Instant::now();
        let mut student = teacher.clone();
        let mut policy = WatermarkPolicy::new(cfg.policy_config(xi, plan.d_e, plan.d_h, seed)).unwrap();
        let mut last = Instant::now();
        let mut cb = |r: &weightmark::training::TrainRecord| {
            if last.elapsed().as_secs() >= 30 {
                last = Instant::now();
                log(format!("  step {} l_sim {:.4} l_norm {:?} gap {:?}", r.step, r.l_sim, r.l_norm, r.vulnerability_gap));
            }
        };
        let log_ = train_cawp(teacher, &mut student, &mut policy, corpus, &cfg, Some(&mut cb)).unwrap();
        std::fs::create_dir_all(&dir).unwrap();
        log_.write_jsonl(&dir.join("train_log.jsonl")).unwrap();
        student.save(&dir.join("student")).unwrap();
        policy.save(&dir.join("policy")).unwrap();
        Timed { seconds: t.elapsed().as_secs_f64() }
    });
    (dir.clone(), TrainLog::read_jsonl(&dir.join("train_log.jsonl")).unwrap(), timing.seconds)
}

fn cell(exp: &Experiment<'_>, null: &NullSet, model: &CausalLM<f32>, spec: Option<ModificationSpec>, path: &Path, what: &str) -> CellResult {
    cached(path, what, || {
        let t = Instant::now();
        let modified;
        let m = match &spec {
            Some(s) => {
                modified = modify::apply(model, s, ModContext { base: Some(exp.base), corpus: Some(exp.corpus) }).unwrap();
                &modified
            }
            None => model,
        };
        let sample: ModelSample = exp.sample_model(m, null).unwrap();
        let report = exp.report(&sample, null, spec.clone()).unwrap();
        CellResult { report, scores: sample.scores, ppl: sample.ppl, seconds: t.elapsed().as_secs_f64() }
    })
}

pub fn run(plan: Plan) -> Outcome {
    let root = cache_root();
    let corpus = Corpus::from_manifest(&corpus_manifest()).expect("corpus manifest");
    log(format!("plan {} cache {}", plan.name, root.display()));
    let (teacher, tdir, teacher_seconds) = teacher_stage(&plan, &corpus, &root);
    let nt = null_texts(&teacher, &corpus, &plan.eval, &tdir);

    let mut runs = Vec::new();
    for &seed in &plan.seeds {
        for &beta in &plan.betas {
            let (dir, log_, train_seconds) = train_stage(&plan, &teacher, &corpus, &tdir, seed, beta);
            let student = CausalLM::load(&dir.join("student")).unwrap();
            let policy = WatermarkPolicy::load(&dir.join("policy")).unwrap();
            let secret = Secret::Pro(policy);
            let exp = Experiment {
                run_id: format!("s{seed}-b{beta}"),
                config_hash: hash_of(&json!({ "plan": plan.name, "run": dir.file_name().unwrap().to_string_lossy() })),
                teacher: &teacher,
                model: &student,
                base: &teacher,
                corpus: &corpus,
                secret: &secret,
                mode: GenerationMode::Sample,
                eval: plan.eval.clone(),
            };
            let null_scores = secret.detector().score_all(&nt.texts).unwrap();
            let null = NullSet { prompts: nt.prompts.clone(), texts: nt.texts.clone(), scores: null_scores.clone(), ppl: nt.ppl.clone() };
            let eh = hash_of(&plan.eval);
            let unaltered = cell(&exp, &null, &student, None, &dir.join(format!("eval-{eh}-unaltered.json")), &format!("s{seed} b{beta} unaltered"));
            let mut cells = Vec::new();
            for spec in plan.grid(beta) {
                let path = dir.join(format!("eval-{eh}-{}.json", spec.hash()));
                let c = cell(&exp, &null, &student, Some(spec.clone()), &path, &format!("s{seed} b{beta} {}", spec.label()));
                cells.push((spec, c));
            }
            let anti_scores: Vec<f64> = cached(&dir.join(format!("anti-{eh}.json")), &format!("s{seed} b{beta} anti texts"), || {
                let Secret::Pro(p) = &secret else { unreachable!() };
                let inv = p.inverted();
                let texts = generate_texts(&teacher, &Generator::Biased(&inv), &nt.prompts, plan.eval.gen_len, derive_seed(plan.eval.seed, 404)).unwrap();
                secret.detector().score_all(&texts).unwrap()
            });
            runs.push(RunResult { seed, beta, log: log_, train_seconds, unaltered, null_scores, cells, anti_scores, dir });
        }
    }

    let first = runs.iter().find(|r| r.beta != 0.0).expect("a watermarked run");
    let calib_texts = extra_null(&teacher, &corpus, &plan, 1, &tdir);
    let fresh_texts = extra_null(&teacher, &corpus, &plan, 2, &tdir);
    let calibration = cached(&first.dir.join(format!("calibration-{}.json", plan.calibration_texts)), "null calibration", || {
        let policy = WatermarkPolicy::load(&first.dir.join("policy")).unwrap();
        let calibration_scores: Vec<f64> = calib_texts.iter().map(|t| policy.detect_z(t).unwrap().z).collect();
        let threshold = policy.calibrate_threshold(&calib_texts, 0.05).unwrap();
        let fresh_scores: Vec<f64> = fresh_texts.iter().map(|t| policy.detect_z(t).unwrap().z).collect();
        let kgw = KgwScheme::new(derive_seed(99, 1), 1, 0.25, 2.0).unwrap();
        let kgw_p_values = fresh_texts.iter().map(|t| kgw.detect(t).unwrap().p_value).collect();
        Calibration { threshold, calibration_scores, fresh_scores, kgw_p_values }
    });
    Outcome { plan, teacher_seconds, null_seconds: nt.seconds, runs, calibration }
}
