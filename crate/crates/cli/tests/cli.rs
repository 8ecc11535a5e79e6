use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            let name = entry.file_name();
            if name != "cache" && name != "out" {
                copy_dir(&entry.path(), &target);
            }
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A scratch copy of `demo/`, so relative config paths resolve inside it.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo"), &dir.path().join("demo"));
    dir
}

fn kggdg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kggdg"))
        .current_dir(dir)
        .env_remove("KGGDG_LLM_URL")
        .env_remove("KGGDG_EMBED_URL")
        .env("RUST_LOG", "warn")
        .args(["--config", "demo/config.json"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kggdg(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_run_over_the_demo() {
    let ws = workspace();
    let d = ws.path();
    assert!(ok(d, &["ingest"]).contains("40 nodes, 70 edges"));
    assert!(ok(d, &["embed-nodes"]).contains("40 embedded"));
    ok(d, &["augment"]);
    ok(d, &["augment", "--mode", "unshuffled"]);
    ok(d, &["augment", "--method", "original", "--mode", "unshuffled"]);
    ok(d, &["augment", "--method", "original"]);
    let md = ok(
        d,
        &[
            "evaluate",
            "demo/out/toy.kggdg.shuffled.jsonl",
            "demo/out/toy.kggdg.unshuffled.jsonl",
            "demo/out/toy.original.shuffled.jsonl",
            "demo/out/toy.original.unshuffled.jsonl",
        ],
    );
    assert!(md.contains("## shuffled") && md.contains("## unshuffled") && md.contains("|Δ|"));
    let csv = ok(d, &["report", "--format", "csv"]);
    assert_eq!(csv.lines().next(), Some("Mode,Model,Method,toybench,toyqa,Avg."));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn seed_flag_changes_option_order() {
    let ws = workspace();
    let d = ws.path();
    let read = |p: &str| fs::read_to_string(d.join(p)).unwrap();
    ok(d, &["augment", "--method", "direct"]);
    let a = read("demo/out/toy.direct.shuffled.jsonl");
    ok(d, &["--seed", "7", "augment", "--method", "direct"]);
    let b = read("demo/out/toy.direct.shuffled.jsonl");
    assert_ne!(a, b);
    ok(d, &["augment", "--method", "direct"]);
    assert_eq!(a, read("demo/out/toy.direct.shuffled.jsonl"));
}

#[test]
fn abstentions_over_the_limit_exit_with_2() {
    let ws = workspace();
    let d = ws.path();
    ok(d, &["augment", "--method", "original"]);
    // every answer reply is unparseable once the mock only knows one rule
    fs::write(
        d.join("demo/mock_script.jsonl"),
        serde_json::json!({"match": "", "response": "no idea", "sticky": true}).to_string() + "\n",
    )
    .unwrap();
    let out = kggdg(d, &["evaluate", "demo/out/toy.original.shuffled.jsonl"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_override_fails_cleanly() {
    let ws = workspace();
    let out = kggdg(ws.path(), &["--set", "walk.width=3", "ingest"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn override_reaches_the_pipeline() {
    let ws = workspace();
    let out = kggdg(ws.path(), &["--set", "generation.k=5", "augment", "--method", "direct"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("augmenting demo/data/toy.jsonl"));
}
