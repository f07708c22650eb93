#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn ensemble(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ensemble")).args(args).output().unwrap()
}

pub fn ok(args: &[&str]) {
    let out = ensemble(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

pub fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
        .display()
        .to_string()
}

/// Runs every subcommand once under `root`.
pub fn pipeline(root: &Path) {
    let p = |s: &str| root.join(s).display().to_string();
    ok(&["gen-data", "--task", "segmentation:3", "--modality", "ms", "--n", "20", "--seed", "4", "--out", &p("ms")]);
    ok(&["gen-data", "--task", "segmentation:3", "--modality", "sar", "--n", "20", "--seed", "4", "--out", &p("sar")]);
    for (id, data) in [("ms", "ms"), ("sar", "sar")] {
        ok(&[
            "train-specialist", "--dataset", &p(data), "--id", id, "--epochs", "2", "--patience", "1", "--batch", "8",
            "--registry", &p("reg"), "--seed", "1", "--out", &p(&format!("ck_{id}")),
        ]);
    }
    ok(&["build-ensemble", "--registry", &p("reg"), "--modality", "ms", "--task", "segmentation:3", "--seed", "2", "--out", &p("ens")]);
    ok(&[
        "finetune", "--ensemble", &p("ens"), "--dataset", &p("ms"), "--epochs", "2", "--warmup", "1", "--k", "1",
        "--label-fraction", "0.5", "--seed", "3", "--out", &p("ft"),
    ]);
    ok(&["prune", "--model", &p("ft"), "--k", "1", "--out", &p("pruned")]);
    ok(&["scaling-sweep", "--registry", &p("reg"), "--dataset", &p("ms"), "--ks", "1..N", "--seeds", "0,1", "--epochs", "1", "--out", &p("sweep")]);
    ok(&["variance-report", "--registry", &p("reg"), "--dataset", &p("ms"), "--batches", "2", "--out", &p("var")]);
    ok(&["bench-dtb", "--in", &fixture("table2.csv"), "--out", &p("dtb")]);
    ok(&["aggregate-runs", "--in", &fixture("suppl_table1_runs.csv"), "--out", &p("agg")]);
}

pub fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

