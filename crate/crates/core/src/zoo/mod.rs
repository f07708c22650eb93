//! Specialist encoders and the registry that collects them.

mod checkpoint;
mod encoder;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, load_checkpoint, save_checkpoint, EncoderManifest, FORMAT_VERSION, MANIFEST_FILE,
    WEIGHTS_FILE,
};
pub(crate) use checkpoint::check_version;
pub use encoder::{
    build_encoder, Block, EncoderConfig, FeaturePyramid, Provenance, PyramidEncoder, SpecialistEncoder, LEVELS,
    STRIDES,
};
pub(crate) use encoder::valid_id;

use crate::error::{create_dir, read_text, write_file, Error, Result};

pub const REGISTRY_FILE: &str = "registry.manifest";

/// Registration-ordered specialists. Entries are never modified once
/// registered; growth is append-only.
#[derive(Clone, Debug, Default)]
pub struct SpecialistRegistry {
    encoders: Vec<SpecialistEncoder>,
}

#[derive(Serialize, Deserialize)]
struct RegistryManifest {
    format_version: u32,
    order: Vec<String>,
}

impl SpecialistRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, encoder: SpecialistEncoder) -> Result<()> {
        if self.get(&encoder.encoder_id).is_some() {
            return Err(Error::DuplicateId(encoder.encoder_id));
        }
        self.encoders.push(encoder);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SpecialistEncoder> {
        self.encoders.iter().find(|e| e.encoder_id == id)
    }

    pub fn encoders(&self) -> &[SpecialistEncoder] {
        &self.encoders
    }

    pub fn len(&self) -> usize {
        self.encoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoders.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.encoders.iter().map(|e| e.encoder_id.as_str()).collect()
    }

    /// Writes `registry.manifest` and one checkpoint subdirectory per encoder.
    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        for enc in &self.encoders {
            save_checkpoint(enc, &dir.join(&enc.encoder_id))?;
        }
        let m = RegistryManifest {
            format_version: FORMAT_VERSION,
            order: self.ids().into_iter().map(String::from).collect(),
        };
        write_file(&dir.join(REGISTRY_FILE), toml::to_string(&m).expect("serializes"))
    }

    /// Loads in manifest order when `registry.manifest` exists, otherwise
    /// every checkpoint subdirectory in lexicographic order.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(REGISTRY_FILE);
        let order = if manifest_path.exists() {
            let text = read_text(&manifest_path)?;
            check_version(&text, FORMAT_VERSION)?;
            let m: RegistryManifest = toml::from_str(&text).map_err(|e| Error::Manifest(e.message().to_string()))?;
            m.order
        } else {
            let mut names: Vec<String> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|entry| entry.ok())
                .filter(|entry| entry.path().join(MANIFEST_FILE).is_file())
                .map(|entry| entry.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            names
        };
        let mut reg = Self::new();
        for id in order {
            if !valid_id(&id) {
                return Err(Error::Manifest(format!("invalid encoder id `{id}` in registry")));
            }
            reg.register(load_checkpoint(&dir.join(&id))?)?;
        }
        Ok(reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::BandSpec;

    #[test]
    fn registers_in_order_and_rejects_duplicates() {
        let mut reg = SpecialistRegistry::new();
        for i in 0..21 {
            let enc = build_encoder(&format!("enc-{i:02}"), &EncoderConfig::default(), BandSpec::rgb(), i).unwrap();
            reg.register(enc).unwrap();
        }
        assert_eq!(reg.len(), 21);
        assert_eq!(reg.ids()[0], "enc-00");
        assert_eq!(reg.ids()[20], "enc-20");
        let before = reg.encoders()[3].clone();
        let dup = build_encoder("enc-05", &EncoderConfig::default(), BandSpec::rgb(), 99).unwrap();
        assert!(matches!(reg.register(dup), Err(Error::DuplicateId(_))));
        assert_eq!(reg.len(), 21);
        assert_eq!(reg.encoders()[3], before);
    }

    #[test]
    fn save_and_load_preserve_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = SpecialistRegistry::new();
        for id in ["zeta", "alpha"] {
            reg.register(build_encoder(id, &EncoderConfig::default(), BandSpec::sentinel1(), 1).unwrap())
                .unwrap();
        }
        reg.save(dir.path()).unwrap();
        let back = SpecialistRegistry::load(dir.path()).unwrap();
        assert_eq!(back.ids(), ["zeta", "alpha"]);
        std::fs::remove_file(dir.path().join(REGISTRY_FILE)).unwrap();
        assert_eq!(SpecialistRegistry::load(dir.path()).unwrap().ids(), ["alpha", "zeta"]);
    }
}
