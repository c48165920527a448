#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_oodcal"));
    c.env_remove("OODCAL_CONFIG");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn oodcal")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// SHA-256 of every regular file directly inside `dir`, by name.
pub fn digests(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            let bytes = fs::read(entry.path()).unwrap();
            let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            out.insert(entry.file_name().to_string_lossy().into_owned(), hex);
        }
    }
    out
}

/// Runs `synth` into `dir` and returns the generated config path.
pub fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", p(dir)];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(code(&out), 0, "synth failed: {}", stderr(&out));
    dir.join("config.json")
}
