use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use errata_core::manifest::{file_digest, manifest_path, RunManifest};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_errata");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// synth, split, build, classify, eval inside `dir`.
fn pipeline(dir: &Path) {
    ok(dir, &["synth", "--seed", "4", "--traces", "80", "--out", "world/"]);
    ok(dir, &["split", "--in", "world/traces.jsonl", "--seed", "4", "--train-out", "train.jsonl", "--val-out", "val.jsonl"]);
    ok(dir, &["build", "--in", "train.jsonl", "--out", "rubric.json", "--script", "world/script.json", "--stats", "stats.json"]);
    ok(dir, &["classify", "--rubric", "rubric.json", "--in", "val.jsonl", "--out", "preds.jsonl", "--script", "world/script.json", "--exemplars", "train.jsonl"]);
    ok(dir, &["eval", "--gold", "val.jsonl", "--pred", "preds.jsonl", "--out", "eval.json", "--csv", "eval.csv"]);
}

const ARTIFACTS: [&str; 9] = [
    "world/traces.jsonl",
    "world/script.json",
    "train.jsonl",
    "val.jsonl",
    "rubric.json",
    "stats.json",
    "preds.jsonl",
    "eval.json",
    "eval.csv",
];

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["grade", "split", "filter", "build", "classify", "eval", "ablate", "serve", "synth"] {
        let out = run(dir.path(), &[cmd, "--help"]);
        assert!(out.status.success(), "{cmd} --help");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn pipeline_writes_a_verifiable_manifest_chain() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root);

    // Every recorded digest matches the file on disk, and each stage's
    // inputs are exactly the outputs of the stage before it.
    let manifest = |artifact: &str| RunManifest::load(&manifest_path(&root.join(artifact))).unwrap();
    for (artifact, producer) in [
        ("train.jsonl", "split"),
        ("rubric.json", "build"),
        ("preds.jsonl", "classify"),
        ("eval.json", "eval"),
    ] {
        let m = manifest(artifact);
        assert_eq!(m.command, producer);
        let name = Path::new(artifact).file_name().unwrap().to_str().unwrap();
        assert_eq!(m.outputs[name], file_digest(&root.join(artifact)).unwrap());
    }
    let world = RunManifest::load(&root.join("world.manifest.json")).unwrap();
    assert_eq!(world.seeds["world"], 4);
    let split = manifest("train.jsonl");
    assert_eq!(split.inputs["traces.jsonl"], world.outputs["traces.jsonl"]);
    let build = manifest("rubric.json");
    assert_eq!(build.inputs["train.jsonl"], split.outputs["train.jsonl"]);
    assert_eq!(build.inputs["script.json"], world.outputs["script.json"]);
    assert!(build.provider.as_deref().unwrap().starts_with("script:"));
    let classify = manifest("preds.jsonl");
    assert_eq!(classify.inputs["rubric.json"], build.outputs["rubric.json"]);
    assert_eq!(classify.inputs["val.jsonl"], split.outputs["val.jsonl"]);
    let eval = manifest("eval.json");
    assert_eq!(eval.inputs["preds.jsonl"], classify.outputs["preds.jsonl"]);

    let report: Value = serde_json::from_slice(&std::fs::read(root.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"]["balanced_accuracy"], 1.0);
    assert_eq!(report["config"]["classify"]["mode"], "rubric");
    assert_eq!(report["config"]["pred_digest"], classify.outputs["preds.jsonl"]);
    let csv = std::fs::read_to_string(root.join("eval.csv")).unwrap();
    assert_eq!(csv, "configuration,BA,S,F0.5\npredictions,1.000,1.000,1.000\n");
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for artifact in ARTIFACTS {
        let read = |d: &Path| std::fs::read(d.join(artifact)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{artifact} differs");
        let read_manifest = |d: &Path| std::fs::read(manifest_path(&d.join(artifact))).ok();
        assert_eq!(read_manifest(a.path()), read_manifest(b.path()), "{artifact} manifest differs");
    }
}

#[test]
fn eval_with_mismatched_ids_names_them() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root);
    let preds = std::fs::read_to_string(root.join("preds.jsonl")).unwrap();
    let mut lines: Vec<&str> = preds.lines().collect();
    let dropped: Value = serde_json::from_str(lines.remove(0)).unwrap();
    std::fs::write(root.join("short.jsonl"), lines.join("\n")).unwrap();

    let out = run(root, &["eval", "--gold", "val.jsonl", "--pred", "short.jsonl", "--out", "bad.json"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let error: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(error["command"], "eval");
    assert!(error["error"].as_str().unwrap().contains(dropped["trace_id"].as_str().unwrap()));
    assert!(!root.join("bad.json").exists());
}

#[test]
fn filter_presets_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["synth", "--traces", "20", "--out", "w"]);
    ok(root, &["filter", "--in", "w/traces.jsonl", "--out", "kept.jsonl", "--preset", "rl"]);
    let m = RunManifest::load(&root.join("kept.jsonl.manifest.json")).unwrap();
    assert_eq!(m.config["max_chars"], 25_000);
    assert_eq!(m.summary["dropped"], 0);
    ok(root, &["filter", "--in", "w/traces.jsonl", "--out", "tiny.jsonl", "--max-chars", "10"]);
    assert_eq!(std::fs::read_to_string(root.join("tiny.jsonl")).unwrap(), "");

    std::fs::write(root.join("broken.jsonl"), "{not json\n").unwrap();
    let out = run(root, &["split", "--in", "broken.jsonl", "--train-out", "a", "--val-out", "b"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let error: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(error["command"], "split");
}

#[test]
fn ablate_writes_the_standard_table() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root);
    ok(root, &["ablate", "--rubric", "rubric.json", "--in", "val.jsonl", "--train", "train.jsonl", "--script", "world/script.json", "--out", "matrix.json", "--csv", "matrix.csv"]);
    let csv = std::fs::read_to_string(root.join("matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 14);
    assert!(csv.lines().any(|l| l.starts_with("size=full,")));
}

fn http(addr: &str, request: &str) -> String {
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.write_all(request.as_bytes()).unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    response
}

#[test]
fn serve_answers_and_stops_on_interrupt() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root);
    let mut child = Command::new(BIN)
        .args(["serve", "--rubric", "rubric.json", "--script", "world/script.json", "--port", "0"])
        .current_dir(root)
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let addr = loop {
        let mut line = String::new();
        assert!(stderr.read_line(&mut line).unwrap() > 0, "server exited early");
        if let Some(rest) = line.split("addr=").nth(1) {
            break rest.split_whitespace().next().unwrap().to_string();
        }
    };
    let health = http(&addr, "GET /v1/health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
    assert!(health.starts_with("HTTP/1.1 200"));
    assert!(health.contains(r#""status":"ok""#));
    let body = r#"{"question":"q","response":"Step 1: fine.\nFinal answer: 3"}"#;
    let score = http(
        &addr,
        &format!(
            "POST /v1/score HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        ),
    );
    assert!(score.contains(r#""base_reward":1"#), "{score}");

    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    assert!(child.wait().unwrap().success());
}

