mod common;

use common::{csv_files, ensemble, ok, pipeline};

#[test]
fn every_subcommand_is_repeatable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let files = csv_files(a.path());
    assert_eq!(files, csv_files(b.path()));
    for dir in ["ms", "ck_ms", "ens", "ft", "pruned", "sweep", "var", "dtb", "agg"] {
        assert!(files.iter().any(|f| f.starts_with(dir)), "no csv under {dir}");
    }
    for f in &files {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{}", f.display());
    }
    let result = std::fs::read_to_string(a.path().join("ft/result.csv")).unwrap();
    assert!(result.starts_with("model,dataset,metric,direction,score,seed\nensemble-k1,"));
    assert!(a.path().join("pruned/ensemble.manifest").exists());
}

#[test]
fn exit_codes_and_messages() {
    let out = ensemble(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ensemble(&["bench-dtb", "--bogus", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
    let tmp = tempfile::tempdir().unwrap();
    let out = ensemble(&["bench-dtb", "--in", "/definitely/missing.csv", "--out", &tmp.path().display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--in"));
    let out = ensemble(&["finetune", "--dataset", "/missing", "--ensemble", "/also-missing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ensemble"));

    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "model,dataset,direction,score\nm,a,sideways,1\n").unwrap();
    let out = ensemble(&["bench-dtb", "--in", &bad.display().to_string(), "--out", &tmp.path().display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(ensemble(&["--help"]).status.success());
}

#[test]
fn flags_beat_config_and_summary_is_written() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "seed = 9\nn = 30\n[gen-data]\nn = 20\nmodality = \"sar\"\ntask = \"classification:2\"\n").unwrap();
    let out = tmp.path().join("data");
    let summary = tmp.path().join("summary.json");
    ok(&[
        "gen-data", "--config", &cfg.display().to_string(), "--modality", "rgb", "--out", &out.display().to_string(),
        "--json-summary", &summary.display().to_string(),
    ]);
    let manifest = std::fs::read_to_string(out.join("dataset.manifest")).unwrap();
    assert!(manifest.contains("modality = \"rgb\""), "{manifest}");
    assert!(manifest.contains("n = 20"), "{manifest}");
    assert!(manifest.contains("seed = 9"), "{manifest}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(summary).unwrap()).unwrap();
    assert_eq!(json["command"], "gen-data");
    assert_eq!(json["seed"], 9);
    assert!(json["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(json["outputs"].as_array().unwrap().iter().any(|o| o.as_str().unwrap().ends_with("index.csv")));
}
