#![no_main]

//! Input: an encoder manifest, a NUL byte, then the weights blob.

use libfuzzer_sys::fuzz_target;
use specialist_ensemble::zoo::{decode_checkpoint, EncoderManifest};

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else { return };
    let Ok(manifest) = EncoderManifest::parse(text) else { return };
    let _ = decode_checkpoint(&manifest, data.get(split + 1..).unwrap_or(&[]));
});
