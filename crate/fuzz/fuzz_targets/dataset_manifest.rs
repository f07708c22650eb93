#![no_main]

use libfuzzer_sys::fuzz_target;
use specialist_ensemble::*;

fuzz_target!(|text: &str| {
    let _ = synthetic::DatasetManifest::parse(text);
});
