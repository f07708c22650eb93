//! Encoder checkpoint directories: a TOML `manifest` plus `weights.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{build_encoder, EncoderConfig, Provenance, SpecialistEncoder};
use crate::bands::BandSpec;
use crate::blob::{self, TensorEntry};
use crate::error::{create_dir, read_file, read_text, write_file, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderManifest {
    pub format_version: u32,
    pub encoder_id: String,
    pub frozen: bool,
    pub required_spec: String,
    pub config: EncoderConfig,
    pub provenance: Provenance,
    pub tensors: Vec<TensorEntry>,
}

/// Reads `format_version` before anything else so that a future manifest
/// layout reports a version error rather than a field error.
pub(crate) fn check_version(text: &str, expected: u32) -> Result<()> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Manifest(e.message().to_string()))?;
    let found = table
        .get("format_version")
        .and_then(toml::Value::as_integer)
        .ok_or_else(|| Error::Manifest("missing integer `format_version`".into()))?;
    let found = u32::try_from(found).map_err(|_| Error::Manifest(format!("bad format_version {found}")))?;
    if found != expected {
        return Err(Error::Version { found, expected });
    }
    Ok(())
}

impl EncoderManifest {
    pub fn parse(text: &str) -> Result<Self> {
        check_version(text, FORMAT_VERSION)?;
        let m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.message().to_string()))?;
        m.config.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

pub fn save_checkpoint(encoder: &SpecialistEncoder, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let named = encoder.net.named_params();
    let (tensors, bytes) = blob::encode(&named.iter().map(|(n, t)| (n.clone(), *t)).collect::<Vec<_>>());
    let manifest = EncoderManifest {
        format_version: FORMAT_VERSION,
        encoder_id: encoder.encoder_id.clone(),
        frozen: encoder.frozen,
        required_spec: encoder.required_spec.to_string(),
        config: encoder.config.clone(),
        provenance: encoder.provenance.clone(),
        tensors,
    };
    write_file(&dir.join(MANIFEST_FILE), manifest.to_text())?;
    write_file(&dir.join(WEIGHTS_FILE), bytes)
}

/// Rebuilds an encoder from a parsed manifest and its weight blob.
pub fn decode_checkpoint(manifest: &EncoderManifest, bytes: &[u8]) -> Result<SpecialistEncoder> {
    let spec: BandSpec = manifest
        .required_spec
        .parse()
        .map_err(|e: Error| Error::Manifest(e.to_string()))?;
    let mut enc = build_encoder(&manifest.encoder_id, &manifest.config, spec, 0)
        .map_err(|e| Error::Manifest(e.to_string()))?;
    let names: Vec<String> = enc.net.named_params().into_iter().map(|(n, _)| n).collect();
    let dest = names.into_iter().zip(crate::nn::Module::params_mut(&mut enc.net)).collect();
    blob::decode_into(&manifest.tensors, bytes, dest)?;
    enc.frozen = manifest.frozen;
    enc.provenance = manifest.provenance.clone();
    Ok(enc)
}

pub fn load_checkpoint(dir: &Path) -> Result<SpecialistEncoder> {
    let manifest = EncoderManifest::parse(&read_text(&dir.join(MANIFEST_FILE))?)?;
    let bytes = read_file(&dir.join(WEIGHTS_FILE))?;
    decode_checkpoint(&manifest, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn encoder() -> SpecialistEncoder {
        let mut enc = build_encoder("sar-seg", &EncoderConfig::default(), BandSpec::sentinel1(), 11).unwrap();
        enc.frozen = true;
        enc.provenance = Provenance {
            dataset_name: "synthetic-sar".into(),
            task_kind: "segmentation".into(),
            modality: "sar".into(),
            n_train_samples: 320,
            final_val_metric: Some(0.8125),
        };
        enc
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let enc = encoder();
        save_checkpoint(&enc, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, enc);
        let x = Tensor::from_fn(&[1, 2, 32, 32], |i| (i as f64 * 0.37).sin());
        assert_eq!(enc.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn corruption_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&encoder(), dir.path()).unwrap();
        let weights = dir.path().join(WEIGHTS_FILE);
        let bytes = std::fs::read(&weights).unwrap();
        std::fs::write(&weights, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CheckpointShape(_))));
        std::fs::write(&weights, &bytes).unwrap();

        let manifest = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, text.replace("format_version = 1", "format_version = 7")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Version { found: 7, .. })));

        std::fs::write(&manifest, "format_version = 1\nencoder_id = [").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Manifest(_))));

        let shrunk = text.replacen("shape = [8, 2, 4, 4]", "shape = [8, 1, 4, 4]", 1);
        assert_ne!(shrunk, text);
        std::fs::write(&manifest, shrunk).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CheckpointShape(_))));
    }
}
