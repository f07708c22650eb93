#![no_main]

//! Input: a TOML tensor table, a NUL byte, then the blob.

use libfuzzer_sys::fuzz_target;
use serde::Deserialize;
use specialist_ensemble::blob::{decode, TensorEntry};

#[derive(Deserialize)]
struct Table {
    tensors: Vec<TensorEntry>,
}

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else { return };
    let Ok(table) = toml::from_str::<Table>(text) else { return };
    let _ = decode(&table.tensors, data.get(split + 1..).unwrap_or(&[]));
});
