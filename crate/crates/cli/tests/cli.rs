use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_transfusion");

/// Small enough to train a few steps in well under a second.
const SMALL: &str = r#"{
  "corpus": {"count": 12, "image_hw": 8},
  "train": {
    "batch_size": 2, "warmup_steps": 2, "total_steps": 4, "diffusion_steps": 100,
    "model": {"d_model": 16, "layers": 1, "heads": 2, "ffn_hidden": 32,
              "codec": {"patch_size": 4, "image_hw": 8, "t_dim": 8}}
  },
  "generation": {"diffusion_steps": 3, "max_new_elements": 6, "cfg_weight": 1.0},
  "eval": {"heldout_count": 3, "prompt_count": 2},
  "baseline": {"codebook_size": 4, "kmeans_iters": 3}
}"#;

const PROBE: &str = r#"{"train": {"model": {"vocab_size": 16, "d_model": 16, "layers": 2, "heads": 2, "ffn_hidden": 32,
  "codec": {"kind": "linear", "patch_size": 2, "channels": 3, "image_hw": 4, "t_dim": 8, "unet_widths": [4]}}}}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("TRANSFUSION_LOG_LEVEL", "error").output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(err.contains("--set"), "{err}");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--out", path(dir.path()), "--set", "corpus.sed=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown keys are rejected"));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = run(&["sample", "--checkpoint", path(&missing), "--prompt", "x", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_probe_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", PROBE);
    let out = run(&["gradcheck", "--config", &cfg, "--stride", "7"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    let line = stdout.lines().find(|l| l.starts_with("max relative error")).expect("summary line");
    let err: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{line}");
}

#[test]
fn gen_data_writes_corpus_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--out", path(dir.path()), "--set", "corpus.count=5"]);
    assert_eq!(out.status.code(), Some(0));
    let corpus = fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 5);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["config"]["corpus"]["count"], 5);
    let hash = fs::read_to_string(dir.path().join("config_hash.txt")).unwrap();
    assert_eq!(cfg["config_hash"].as_str().unwrap(), hash.trim());
}

#[test]
fn train_is_reproducible_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["train", "--config", &cfg, "--out", path(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log_a = fs::read_to_string(a.join("log.csv")).unwrap();
    assert_eq!(log_a.lines().count(), 5);
    assert_eq!(log_a, fs::read_to_string(b.join("log.csv")).unwrap());
    assert_eq!(
        fs::read_to_string(a.join("config_hash.txt")).unwrap(),
        fs::read_to_string(b.join("config_hash.txt")).unwrap()
    );

    let ck = a.join("checkpoint");
    let s = dir.path().join("s");
    let o = run(&["sample", "--config", &cfg, "--checkpoint", path(&ck), "--prompt", "red square <image>", "--out", path(&s)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(s.join("out.txt")).unwrap();
    assert!(text.starts_with("red square <image:000>"), "{text}");
    let ppm = fs::read(s.join("out_000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
    assert!(s.join("config.json").exists());

    let e = dir.path().join("e");
    let o = run(&["eval", "--config", &cfg, "--checkpoint", path(&ck), "--out", path(&e)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(e.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["generation_prompts"], 2);
    assert_eq!(report["step"], 4);
    assert!(report["text_ppl"].as_f64().unwrap().is_finite());
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let full = dir.path().join("full");
    let half = dir.path().join("half");
    let rest = dir.path().join("rest");
    assert_eq!(run(&["train", "--config", &cfg, "--out", path(&full)]).status.code(), Some(0));
    assert_eq!(run(&["train", "--config", &cfg, "--out", path(&half), "--steps", "2"]).status.code(), Some(0));
    let ck = half.join("checkpoint");
    let o = run(&["train", "--config", &cfg, "--out", path(&rest), "--resume", path(&ck)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(full.join("log.csv")).unwrap(), fs::read_to_string(rest.join("log.csv")).unwrap());
}

#[test]
fn baseline_records_parity_key_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out = dir.path().join("base");
    let o = run(&["train-baseline", "--config", &cfg, "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let parity: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("parity.json")).unwrap()).unwrap();
    assert_eq!(parity["key"]["d_model"], 16);
    assert_eq!(parity["hash"].as_str().unwrap().len(), 64);
    assert!(out.join("checkpoint").join("codebook.bin").exists());

    let s = dir.path().join("s");
    let ck = out.join("checkpoint");
    let o = run(&["sample", "--config", &cfg, "--checkpoint", path(&ck), "--prompt", "blue <image>", "--out", path(&s)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(s.join("out_000.ppm").exists());
}

#[test]
fn inspect_mask_prints_blocks() {
    let out = run(&["inspect-mask", "--prompt", "a<image>b", "--patches", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let grid = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = grid.lines().collect();
    // BOS a BOI p0 p1 EOI b
    assert_eq!(rows.len(), 7);
    let cells = |r: &str| r.rsplit(' ').next().unwrap().to_string();
    assert_eq!(cells(rows[3]), "11111..");
    assert_eq!(cells(rows[2]), "111....");

    let causal = run(&["inspect-mask", "--prompt", "a<image>b", "--patches", "2", "--causal-only"]);
    let grid = String::from_utf8_lossy(&causal.stdout);
    assert_eq!(cells(grid.lines().nth(3).unwrap()), "1111...");
}
