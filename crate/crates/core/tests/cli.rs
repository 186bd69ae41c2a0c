//! End-to-end runs of the `weightmark` binary on a tiny corpus and model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_weightmark"));
    c.env_remove("WM_SECRET_PATH");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr_record(o: &Output) -> Value {
    let s = String::from_utf8_lossy(&o.stderr);
    let line = s.lines().last().unwrap_or_else(|| panic!("no stderr, stdout: {}", String::from_utf8_lossy(&o.stdout)));
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not a JSON record: {s}"))
}

fn write_json(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

fn tiny_corpus(dir: &Path) -> PathBuf {
    let text: String = (0..400)
        .map(|i| format!("the whale {} swam past ship number {} in the grey sea. ", i % 17, i % 5))
        .collect();
    std::fs::write(dir.join("text.txt"), text).unwrap();
    write_json(&dir.join("corpus.json"), &json!({ "files": ["text.txt"], "seed": 3 }))
}

fn tiny_model() -> Value {
    json!({ "vocab": 259, "d_model": 16, "n_layers": 1, "n_heads": 2, "max_seq": 64 })
}

/// Pretrains a tiny teacher; returns its checkpoint dir.
fn tiny_teacher(dir: &Path, corpus: &Path) -> PathBuf {
    let cfg = write_json(
        &dir.join("pretrain.json"),
        &json!({
            "corpus": corpus,
            "model": tiny_model(),
            "train": { "steps": 6, "batch": 2, "seq_len": 32, "eval_every": 3, "eval_batches": 1 },
        }),
    );
    let out = dir.join("pre");
    let o = run(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("run_manifest.json").is_file());
    assert!(out.join("train_log.jsonl").is_file());
    out.join("teacher")
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["gradcheck", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let r = stderr_record(&o);
    assert_eq!(r["error"], "usage");
    assert_eq!(r["exit_code"], 2);
}

#[test]
fn help_lists_exit_codes() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("Exit codes"));
    assert!(s.contains("train-pro"));
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], v["total"]);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-6);
}

#[test]
fn missing_checkpoint_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let out = dir.path().join("gen");
    let o = run(&[
        "generate",
        "--set",
        &format!("corpus={}", corpus.display()),
        "--set",
        "model=/nonexistent/ckpt",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_record(&o)["exit_code"], 4);
}

#[test]
fn malformed_config_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let o = run(&["eval", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let unknown = write_json(&dir.path().join("unk.json"), &json!({ "train": { "betta": 1 } }));
    let o = run(&["train-pro", "--config", unknown.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn detect_empty_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let key = write_json(&dir.path().join("kgw.key"), &json!({ "scheme": "kgw", "seed": 9, "k": 1, "gamma": 0.25, "delta": 2.0 }));
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, b"").unwrap();
    let o = bin()
        .env("WM_SECRET_PATH", &key)
        .args(["detect", "--set", "watermark=kgw", empty.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(stderr_record(&o)["error"], "insufficient_length");
}

#[test]
fn detect_without_secret_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("a.txt");
    std::fs::write(&f, b"some text to score here").unwrap();
    let o = run(&["detect", "--set", "watermark=kgw", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn pipeline_pretrain_train_generate_detect_modify_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = tiny_corpus(d);
    let teacher = tiny_teacher(d, &corpus);

    // Joint training with a seed-file secret.
    let seed_file = d.join("xi.seed");
    std::fs::write(&seed_file, "1234\n").unwrap();
    let pro_cfg = write_json(
        &d.join("pro.json"),
        &json!({
            "corpus": corpus,
            "teacher": teacher,
            "d_e": 8,
            "d_h": 16,
            "train": { "steps": 3, "batch": 2, "seq_len": 24, "anti_refresh": 2 },
            "calibration": { "n_texts": 100, "prompt_len": 8, "gen_len": 16, "fpr": 0.25 },
        }),
    );
    let pro = d.join("pro");
    let o = bin()
        .env("WM_SECRET_PATH", &seed_file)
        .args(["train-pro", "--config", pro_cfg.to_str().unwrap(), "--out", pro.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(pro.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let manifest: Value = serde_json::from_slice(&std::fs::read(pro.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train-pro");
    assert!(!manifest.to_string().contains("1234"), "secret leaked into the manifest");

    // Generation writes raw text files.
    let gen = d.join("gen");
    let o = run(&[
        "generate",
        "--set",
        &format!("model={}", pro.join("student").display()),
        "--set",
        &format!("corpus={}", corpus.display()),
        "--set",
        "n=3",
        "--set",
        "prompt_len=8",
        "--set",
        "gen_len=20",
        "--out",
        gen.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files: Vec<String> = (0..3).map(|i| gen.join(format!("texts/{i:04}.txt")).display().to_string()).collect();
    assert_eq!(std::fs::read_to_string(gen.join("texts.jsonl")).unwrap().lines().count(), 3);

    // PRO detection: one JSON line per file.
    let mut args = vec!["detect".to_string(), "--set".into(), "watermark=pro".into(), "--set".into()];
    args.push(format!("secret={}", pro.join("policy").display()));
    args.extend(files.iter().cloned());
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        assert!(l["z"].as_f64().unwrap().is_finite());
        assert!(l["threshold"].as_f64().is_some());
    }

    // Quantization lands in a spec-hash directory.
    let modify = d.join("mod");
    let mcfg = write_json(
        &d.join("modify.json"),
        &json!({ "model": pro.join("student"), "run": "r1", "spec": { "kind": "quantize", "bits": 4 } }),
    );
    let o = run(&["modify", "--config", mcfg.to_str().unwrap(), "--out", modify.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let ckpt = PathBuf::from(v["checkpoint"].as_str().unwrap());
    assert!(ckpt.starts_with(modify.join("r1")));
    assert!(ckpt.join("modification.json").is_file());

    // Null-vs-null KGW eval (the teacher never saw the key): AUC near chance.
    let key = write_json(&d.join("kgw.key"), &json!({ "scheme": "kgw", "seed": 5, "k": 1, "gamma": 0.25, "delta": 2.0 }));
    let ecfg = write_json(
        &d.join("eval.json"),
        &json!({
            "run_id": "null",
            "corpus": corpus,
            "teacher": teacher,
            "watermark": "kgw",
            "secret": key,
            "eval": { "n_samples": 24, "prompt_len": 8, "gen_len": 24 },
            "modifications": [{ "kind": "prune", "sparsity": 0.2 }],
        }),
    );
    let eval = d.join("eval");
    let o = run(&["eval", "--config", ecfg.to_str().unwrap(), "--out", eval.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports: Value = serde_json::from_slice(&std::fs::read(eval.join("report.json")).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    let auc = reports[0]["metrics"]["auc"].as_f64().unwrap();
    assert!((0.2..=0.8).contains(&auc), "null-vs-null auc {auc}");
    let csv = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn kgw_decode_then_detect_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = tiny_corpus(d);
    let teacher = tiny_teacher(d, &corpus);
    let key = write_json(&d.join("kgw.key"), &json!({ "scheme": "kgw", "seed": 5, "k": 1, "gamma": 0.25, "delta": 4.0 }));

    let gen = d.join("gen");
    let o = bin()
        .env("WM_SECRET_PATH", &key)
        .args(["generate", "--set", &format!("model={}", teacher.display()), "--set", &format!("corpus={}", corpus.display())])
        .args(["--set", "watermark=kgw", "--set", "n=2", "--set", "prompt_len=8", "--set", "gen_len=50"])
        .args(["--out", gen.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin()
        .env("WM_SECRET_PATH", &key)
        .args(["detect", "--set", "watermark=kgw"])
        .arg(gen.join("texts/0000.txt"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(rec["p_value"].as_f64().unwrap() < 0.01, "{rec}");

    // Sweep over quantization widths.
    let scfg = write_json(
        &d.join("sweep.json"),
        &json!({
            "command": "modify",
            "base": { "model": teacher, "run": "s", "spec": { "kind": "quantize", "bits": 8 } },
            "grid": { "spec.bits": [2, 4, 8] },
            "workers": 2,
        }),
    );
    let sweep = d.join("sweep");
    let o = run(&["sweep", "--config", scfg.to_str().unwrap(), "--out", sweep.to_str().unwrap()]);
    // 2-bit quantization is rejected, so the sweep reports one failed cell.
    assert_eq!(o.status.code(), Some(5));
    let summary: Value = serde_json::from_slice(&std::fs::read(sweep.join("sweep.json")).unwrap()).unwrap();
    let summary = summary.as_array().unwrap();
    assert_eq!(summary.len(), 3);
    assert_eq!(summary.iter().filter(|c| c.get("error").is_some()).count(), 1);
    assert_eq!(summary[0]["cell"]["spec.bits"], 2);
    let cells = std::fs::read_dir(&sweep).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("cell-")).count();
    assert_eq!(cells, 3);
}

#[test]
fn shipped_configs_parse() {
    use weightmark::baselines::SchemeKey;
    use weightmark::cli::{DistillConfig, PretrainConfig, ProConfig, SweepConfig};
    use weightmark::eval::ExperimentConfig;

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let read = |name: &str| -> Value { serde_json::from_slice(&std::fs::read(dir.join(name)).unwrap()).unwrap() };
    serde_json::from_value::<PretrainConfig>(read("pretrain.json")).unwrap();
    let pro: ProConfig = serde_json::from_value(read("train-pro.json")).unwrap();
    pro.train.validate().unwrap();
    serde_json::from_value::<ExperimentConfig>(read("eval-pro.json")).unwrap();
    serde_json::from_value::<ExperimentConfig>(read("eval-kgw.json")).unwrap();
    serde_json::from_value::<DistillConfig>(read("distill-kgw.json")).unwrap();
    let sweep: SweepConfig = serde_json::from_value(read("sweep-beta.json")).unwrap();
    assert_eq!(weightmark::cli::grid_cells(&sweep.grid).len(), 6);
    for key in ["keys/kgw-example.json", "keys/kth-example.json"] {
        SchemeKey::load(&dir.join(key)).unwrap().build().unwrap();
    }
}
