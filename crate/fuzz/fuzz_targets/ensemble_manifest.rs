#![no_main]

use libfuzzer_sys::fuzz_target;
use specialist_ensemble::*;

fuzz_target!(|text: &str| {
    let _ = ensemble::EnsembleManifest::parse(text);
});
