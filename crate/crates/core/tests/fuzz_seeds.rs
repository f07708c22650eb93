//! The checked-in fuzz seeds are well-formed inputs for their targets.

use std::fs;
use std::path::PathBuf;

use specialist_ensemble::bands::{BandSpec, RuleRegistry};
use specialist_ensemble::container::Container;
use specialist_ensemble::ensemble::EnsembleManifest;
use specialist_ensemble::metrics::{aggregate_runs_csv, ResultTable};
use specialist_ensemble::synthetic::{DatasetManifest, TaskSpec};
use specialist_ensemble::zoo::{decode_checkpoint, EncoderManifest};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

fn split_nul(bytes: &[u8]) -> (&str, &[u8]) {
    let at = bytes.iter().position(|&b| b == 0).unwrap();
    (text(&bytes[..at]), &bytes[at + 1..])
}

#[test]
fn text_seeds_parse() {
    for (name, b) in seeds("rule_file") {
        RuleRegistry::parse(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("band_spec") {
        text(&b).parse::<BandSpec>().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("task_spec") {
        TaskSpec::parse(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("result_csv") {
        ResultTable::from_csv(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("runs_csv") {
        aggregate_runs_csv(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("ensemble_manifest") {
        EnsembleManifest::parse(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("dataset_manifest") {
        DatasetManifest::parse(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn binary_seeds_decode() {
    for (name, b) in seeds("sample_container") {
        let c = Container::from_bytes(&b).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(c.to_bytes(), b);
    }
    for (name, b) in seeds("encoder_checkpoint") {
        let (manifest, blob) = split_nul(&b);
        let m = EncoderManifest::parse(manifest).unwrap_or_else(|e| panic!("{name}: {e}"));
        decode_checkpoint(&m, blob).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("weights_blob") {
        let (table, blob) = split_nul(&b);
        let table: toml::Table = table.parse().unwrap();
        let entries: Vec<specialist_ensemble::blob::TensorEntry> = table["tensors"].clone().try_into().unwrap_or_else(|e| panic!("{name}: {e}"));
        let tensors = specialist_ensemble::blob::decode(&entries, blob).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(tensors.len(), 2);
    }
}
