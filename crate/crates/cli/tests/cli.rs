//! End-to-end runs of the `peft` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peft_core::quantize::QuantizedTensor;
use peft_core::Matrix;
use serde_json::Value;

fn peft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peft"))
        .args(args)
        .output()
        .expect("run peft")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", stderr(out));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Compare against `tests/golden/<name>`; `UPDATE_GOLDEN=1` rewrites it.
fn golden(name: &str, actual: &[u8]) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(
        String::from_utf8_lossy(actual),
        String::from_utf8_lossy(&expected),
        "output differs from {name}"
    );
}

fn write_tensor(dir: &Path, name: &str, m: &Matrix) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, m.to_bytes()).unwrap();
    p
}

fn ramp(rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| ((i * cols + j) as f32 - 128.0) / 64.0)
}

fn write_jsonl(dir: &Path, name: &str, rows: &[(&str, &str)]) -> PathBuf {
    let text: String = rows
        .iter()
        .map(|(id, text)| serde_json::json!({ "id": id, "text": text }).to_string() + "\n")
        .collect();
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMOKE_CONFIG: &str = r#"{
  "seed": 7,
  "dataset_size": 64,
  "eta": 0.5,
  "steps": 40,
  "adapter": { "kind": "lora", "r": 4 },
  "quantization": { "precision": "nf4", "block_size": 16 }
}"#;

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&peft(&["--help"])), 0);
    assert_eq!(code(&peft(&[])), 64);
    assert_eq!(code(&peft(&["frobnicate"])), 64);
    let out = peft(&["report", "--config", "x.json", "--bogus"]);
    assert_eq!(code(&out), 64);
}

#[test]
fn quantize_round_trip_and_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = ramp(16, 16);
    let input = write_tensor(dir.path(), "w.pft1", &m);
    let q = dir.path().join("w.pftq");
    let back = dir.path().join("back.pft1");
    let out = peft(&["quantize", "--in", s(&input), "--out", s(&q), "--codec", "nf4"]);
    stdout_json(&out);
    golden("quantize_nf4.json", &out.stdout);

    let out = peft(&["dequantize", "--in", s(&q), "--out", s(&back)]);
    let info = stdout_json(&out);
    assert_eq!((info["rows"].as_u64(), info["cols"].as_u64()), (Some(16), Some(16)));
    assert_eq!(info["codec"], "nf4");
    let restored = Matrix::read_from(fs::File::open(&back).unwrap()).unwrap();
    assert_eq!(restored.shape(), m.shape());
}

#[test]
fn single_value_blocks_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = Matrix::from_fn(5, 7, |i, j| (i as f32 - 2.0) * 0.37 + j as f32 * 1e-3);
    let input = write_tensor(dir.path(), "w.pft1", &m);
    let q = dir.path().join("w.pftq");
    let back = dir.path().join("back.pft1");
    let args = [
        "quantize",
        "--in",
        s(&input),
        "--out",
        s(&q),
        "--codec",
        "int8",
        "--mode",
        "asym",
        "--block",
        "1",
    ];
    stdout_json(&peft(&args));
    stdout_json(&peft(&["dequantize", "--in", s(&q), "--out", s(&back)]));
    let restored = Matrix::read_from(fs::File::open(&back).unwrap()).unwrap();
    assert_eq!(restored.max_abs_diff(&m).unwrap(), 0.0);
}

#[test]
fn double_quant_shrinks_constants() {
    let dir = tempfile::tempdir().unwrap();
    let m = Matrix::from_fn(1024, 1024, |i, j| (((i * 31 + j * 17) % 97) as f32 - 48.0) / 50.0);
    let input = write_tensor(dir.path(), "big.pft1", &m);
    let plain = dir.path().join("plain.pftq");
    let dq = dir.path().join("dq.pftq");
    let a = stdout_json(&peft(&[
        "quantize",
        "--in",
        s(&input),
        "--out",
        s(&plain),
        "--codec",
        "nf4",
    ]));
    let b = stdout_json(&peft(&[
        "quantize",
        "--in",
        s(&input),
        "--out",
        s(&dq),
        "--codec",
        "nf4",
        "--double-quant",
    ]));
    let consts = |v: &Value| v["constant_bytes"].as_u64().unwrap();
    assert!(consts(&b) < consts(&a), "{} vs {}", consts(&b), consts(&a));
    assert_eq!(a["code_bytes"], b["code_bytes"]);
    let ratio = b["compression_ratio"].as_f64().unwrap();
    assert!((7.5..=8.0).contains(&ratio), "{ratio}");
    let qt = QuantizedTensor::from_bytes(&fs::read(&dq).unwrap()).unwrap();
    assert!(qt.is_double_quantized());
    assert_eq!(fs::metadata(&dq).unwrap().len(), b["total_bytes"].as_u64().unwrap());
}

#[test]
fn quantize_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_tensor(dir.path(), "w.pft1", &ramp(4, 4));
    let out_path = dir.path().join("o.pftq");
    let o = s(&out_path);

    let missing = peft(&["quantize", "--in", "/nonexistent/w.pft1", "--out", o, "--codec", "int8"]);
    assert_eq!(code(&missing), 66);
    assert!(stderr(&missing).contains("cannot open"));

    let bad = peft(&[
        "quantize",
        "--in",
        s(&input),
        "--out",
        o,
        "--codec",
        "nf4",
        "--mode",
        "asym",
    ]);
    assert_eq!(code(&bad), 64);
    assert!(stderr(&bad).contains("usage"));

    let mut bytes = fs::read(&input).unwrap();
    bytes[0] = b'Z';
    let corrupt = dir.path().join("corrupt.pft1");
    fs::write(&corrupt, &bytes).unwrap();
    let out = peft(&["quantize", "--in", s(&corrupt), "--out", o, "--codec", "int8"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("format error"));

    let truncated = dir.path().join("short.pft1");
    fs::write(&truncated, &fs::read(&input).unwrap()[..30]).unwrap();
    assert_eq!(
        code(&peft(&[
            "quantize",
            "--in",
            s(&truncated),
            "--out",
            o,
            "--codec",
            "int8"
        ])),
        2
    );

    // a dense tensor is not a quantized one
    assert_eq!(code(&peft(&["dequantize", "--in", s(&input), "--out", o])), 2);

    let unwritable = peft(&[
        "quantize",
        "--in",
        s(&input),
        "--out",
        "/nonexistent/dir/o.pftq",
        "--codec",
        "int8",
    ]);
    assert_eq!(code(&unwritable), 66);
}

#[test]
fn train_writes_report_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, SMOKE_CONFIG).unwrap();
    let mut curves = Vec::new();
    let mut checkpoints = Vec::new();
    for run in 0..2 {
        let report = dir.path().join(format!("report{run}.json"));
        let ckpt = dir.path().join(format!("ckpt{run}"));
        let out = peft(&[
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(&report),
            "--checkpoint",
            s(&ckpt),
        ]);
        let printed = stdout_json(&out);
        let written: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
        assert_eq!(printed, written);
        assert_eq!(written["loss_curve"].as_array().unwrap().len(), 40);
        assert!(written["final_loss"].as_f64().unwrap() < written["initial_loss"].as_f64().unwrap());
        curves.push(written["loss_curve"].clone());
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&ckpt)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        assert_eq!(files.len(), 6);
        checkpoints.push(files);
    }
    assert_eq!(curves[0], curves[1]);
    assert_eq!(checkpoints[0], checkpoints[1]);

    let seq = stdout_json(&peft(&["--sequential", "train", "--config", s(&cfg)]));
    assert_eq!(seq["loss_curve"], curves[0]);
}

#[test]
fn train_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = peft(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(code(&missing), 66);
    assert!(stderr(&missing).contains("cannot open"));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{ "adapter": { "kind": "lora", "rank": 4 } }"#).unwrap();
    let out = peft(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&out), 64);
    assert!(stderr(&out).contains("adapter"), "{}", stderr(&out));

    fs::write(&cfg, r#"{ "eta": -1.0 }"#).unwrap();
    let out = peft(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&out), 64);
    assert!(stderr(&out).contains("eta"), "{}", stderr(&out));
    assert_eq!(stderr(&out).lines().count(), 1);
}

#[test]
fn audit_grads_passes_on_small_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("audit.json");
    fs::write(
        &cfg,
        r#"{
  "seed": 3,
  "dims": { "d_model": 4, "d_k": 4, "seq_len": 3 },
  "dataset_size": 8,
  "adapter": { "kind": "adalora", "r": 2, "gamma": 0.5 },
  "quantization": { "precision": "int4", "block_size": 4 }
}"#,
    )
    .unwrap();
    let v = stdout_json(&peft(&["audit-grads", "--config", s(&cfg)]));
    assert_eq!(v["passed"], true);
    assert_eq!(v["params_checked"], 3 * (2 * 8 + 2));
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-3);
}

#[test]
fn report_golden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("report.json");
    fs::write(
        &cfg,
        r#"{
  "dims": { "d_model": 1024, "d_k": 1024, "seq_len": 4 },
  "adapter": { "kind": "lora", "r": 8 },
  "quantization": { "precision": "nf4", "block_size": 64, "double_quant": true }
}"#,
    )
    .unwrap();
    let out = peft(&["report", "--config", s(&cfg)]);
    let v = stdout_json(&out);
    let nf4 = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["selected"] == true)
        .unwrap();
    assert_eq!(nf4["precision"], "nf4");
    assert_eq!(nf4["trainable_params"], 3 * 8 * 2048);
    golden("report_nf4_1024.json", &out.stdout);
}

fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let c = write_jsonl(
        dir,
        "c.jsonl",
        &[("1", "the cat sat"), ("2", "a c b"), ("3", "A, x c!")],
    );
    let r = write_jsonl(dir, "r.jsonl", &[("3", "a b c"), ("1", "the cat ran"), ("2", "a b c")]);
    (c, r)
}

#[test]
fn eval_fixture_golden() {
    let dir = tempfile::tempdir().unwrap();
    let (c, r) = fixture(dir.path());
    let rouge = peft(&["eval-rouge", "--candidates", s(&c), "--references", s(&r)]);
    let v = stdout_json(&rouge);
    let scores: Vec<f64> = v["scores"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["score"].as_f64().unwrap())
        .collect();
    assert_eq!(scores, [2.0 / 3.0, 1.0, 2.0 / 3.0]);
    golden("eval_rouge1.json", &rouge.stdout);

    let lcs = stdout_json(&peft(&[
        "eval",
        "--metric",
        "rougeL",
        "--candidates",
        s(&c),
        "--references",
        s(&r),
    ]));
    assert_eq!(lcs["scores"][1]["score"], 2.0 / 3.0);

    let w = peft(&["eval-wer", "--candidates", s(&c), "--references", s(&r)]);
    let v = stdout_json(&w);
    assert_eq!(v["scores"][2]["score"], 1.0 / 3.0);
    golden("eval_wer.json", &w.stdout);

    let seq = peft(&["--sequential", "eval-wer", "--candidates", s(&c), "--references", s(&r)]);
    assert_eq!(seq.stdout, w.stdout);
}

#[test]
fn eval_self_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (c, _) = fixture(dir.path());
    for metric in ["rouge1", "rouge2", "rougeL", "rougeS"] {
        let v = stdout_json(&peft(&[
            "eval",
            "--metric",
            metric,
            "--candidates",
            s(&c),
            "--references",
            s(&c),
        ]));
        assert!(
            v["scores"].as_array().unwrap().iter().all(|d| d["score"] == 1.0),
            "{metric}"
        );
    }
    let v = stdout_json(&peft(&["eval-wer", "--candidates", s(&c), "--references", s(&c)]));
    assert_eq!(v["mean"], 0.0);
}

#[test]
fn eval_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (c, _) = fixture(dir.path());
    let partial = write_jsonl(dir.path(), "p.jsonl", &[("1", "the cat"), ("2", "a b"), ("9", "x")]);
    let out = peft(&["eval-rouge", "--candidates", s(&c), "--references", s(&partial)]);
    assert_eq!(code(&out), 65);
    let msg = stderr(&out);
    assert!(msg.contains('3') && msg.contains('9'), "{msg}");

    let empty = write_jsonl(dir.path(), "e.jsonl", &[("1", "the cat"), ("2", ""), ("3", "a")]);
    let out = peft(&["eval-wer", "--candidates", s(&c), "--references", s(&empty)]);
    assert_eq!(code(&out), 65);
    assert!(stderr(&out).contains("undefined metric for id 2"), "{}", stderr(&out));

    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, "{\"id\": \"1\", \"text\": \"a\"}\nnot json\n").unwrap();
    let out = peft(&["eval-wer", "--candidates", s(&broken), "--references", s(&c)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(":2:"), "{}", stderr(&out));

    let out = peft(&[
        "eval-wer",
        "--candidates",
        "/nonexistent/c.jsonl",
        "--references",
        s(&c),
    ]);
    assert_eq!(code(&out), 66);
}
