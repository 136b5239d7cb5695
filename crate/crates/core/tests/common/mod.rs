#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/fixtures");

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(FIXTURES).join(rel)
}

/// Copies the synthetic fixtures into a fresh directory and writes
/// `config.json` there, with `patch` merged over the bundled config.
pub fn workspace(patch: Value) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    for f in ["crows_pairs.csv", "copa.jsonl", "hellaswag.jsonl", "table.json"] {
        std::fs::copy(fixture(&format!("synthetic/{f}")), dir.path().join(f)).unwrap();
    }
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(fixture("synthetic/config.json")).unwrap()).unwrap();
    merge(&mut cfg, patch);
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    (dir, path)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() && k != "bias_type" {
                    b.remove(&k);
                } else {
                    merge(b.entry(k).or_insert(Value::Null), v);
                }
            }
        }
        (b, p) => *b = p,
    }
}

pub fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bias-suppress"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn pipeline(config: &Path, select_args: &[&str]) {
    let c = config.to_str().unwrap();
    ok(&["build-preambles", "--config", c]);
    let mut sel = vec!["select", "--config", c];
    sel.extend_from_slice(select_args);
    ok(&sel);
    ok(&["score-bias", "--config", c, "--delta"]);
    ok(&["eval-downstream", "--config", c]);
}

pub fn read_csv(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| headers.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}
