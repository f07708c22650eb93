//! Ensemble checkpoint directories.
//!
//! ```text
//! ensemble.manifest   TOML: order, input spec, normalization, k, tensor tables
//! rules               adaptation rule file
//! selection.bin fusion.bin decoder.bin normalizer.bin
//! encoders/<id>/      one encoder checkpoint each
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_ensemble, EnsembleModel, EnsembleOptions, LevelStats, NormMode};
use crate::bands::{BandSpec, RuleRegistry};
use crate::blob::{self, TensorEntry};
use crate::error::{create_dir, read_file, read_text, write_file, Error, Result};
use crate::nn::Module;
use crate::synthetic::TaskSpec;
use crate::tensor::Tensor;
use crate::zoo::{check_version, load_checkpoint, save_checkpoint, LEVELS};

pub const ENSEMBLE_MANIFEST: &str = "ensemble.manifest";
const FORMAT_VERSION: u32 = 1;
const RULES_FILE: &str = "rules";
const ENCODER_DIR: &str = "encoders";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format_version: u32,
    pub encoders: Vec<String>,
    pub input_spec: String,
    pub rules_file: String,
    pub task: String,
    pub norm_mode: NormMode,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    pub k: usize,
    pub warmup_epochs: usize,
    pub target_dims: [usize; LEVELS],
    /// Branch keys with stored running statistics, in blob order.
    pub normalizer_slots: Vec<String>,
    pub selection: Vec<TensorEntry>,
    pub fusion: Vec<TensorEntry>,
    pub decoder: Vec<TensorEntry>,
    pub normalizer: Vec<TensorEntry>,
}

impl EnsembleManifest {
    pub fn parse(text: &str) -> Result<Self> {
        check_version(text, FORMAT_VERSION)?;
        let m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.message().to_string()))?;
        if m.encoders.is_empty() {
            return Err(Error::Manifest("ensemble lists no encoders".into()));
        }
        if m.normalizer.len() != m.normalizer_slots.len() * LEVELS * 2 {
            return Err(Error::Manifest(format!(
                "{} normalizer tensors for {} slots",
                m.normalizer.len(),
                m.normalizer_slots.len()
            )));
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

fn encode_named(named: Vec<(String, &Tensor)>) -> (Vec<TensorEntry>, Vec<u8>) {
    blob::encode(&named)
}

pub fn save_ensemble(model: &EnsembleModel, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let enc_dir = dir.join(ENCODER_DIR);
    create_dir(&enc_dir)?;
    for e in &model.encoders {
        save_checkpoint(e, &enc_dir.join(&e.encoder_id))?;
    }
    let (selection, sel_bytes) = encode_named(vec![("selection.w".into(), &model.selection.w)]);
    let (fusion, fusion_bytes) = encode_named(model.fusion.named_params());
    let (decoder, decoder_bytes) = encode_named(model.decoder.named_params());
    let slots: Vec<String> = model.normalizers.slot_keys().map(str::to_string).collect();
    let stat_tensors: Vec<(String, Tensor)> = slots
        .iter()
        .flat_map(|key| {
            let stats = model.normalizers.slot(key).expect("listed slot");
            stats.iter().enumerate().flat_map(move |(j, s)| {
                [
                    (format!("{key}/{j}/mean"), Tensor::new(vec![s.mean.len()], s.mean.clone()).expect("1-d")),
                    (format!("{key}/{j}/var"), Tensor::new(vec![s.var.len()], s.var.clone()).expect("1-d")),
                ]
            })
        })
        .collect();
    let (normalizer, norm_bytes) = encode_named(stat_tensors.iter().map(|(n, t)| (n.clone(), t)).collect());
    let manifest = EnsembleManifest {
        format_version: FORMAT_VERSION,
        encoders: model.encoders.iter().map(|e| e.encoder_id.clone()).collect(),
        input_spec: model.input_spec.to_string(),
        rules_file: RULES_FILE.into(),
        task: model.task.to_string(),
        norm_mode: model.normalizers.mode,
        norm_eps: model.normalizers.eps,
        norm_momentum: model.normalizers.momentum,
        k: model.selection.k,
        warmup_epochs: model.selection.warmup_epochs,
        target_dims: model.fusion.target_dims,
        normalizer_slots: slots,
        selection,
        fusion,
        decoder,
        normalizer,
    };
    write_file(&dir.join(RULES_FILE), model.rules.to_text())?;
    write_file(&dir.join("selection.bin"), sel_bytes)?;
    write_file(&dir.join("fusion.bin"), fusion_bytes)?;
    write_file(&dir.join("decoder.bin"), decoder_bytes)?;
    write_file(&dir.join("normalizer.bin"), norm_bytes)?;
    write_file(&dir.join(ENSEMBLE_MANIFEST), manifest.to_text())
}

fn decode_named(entries: &[TensorEntry], bytes: &[u8], names: Vec<String>, dest: Vec<&mut Tensor>) -> Result<()> {
    blob::decode_into(entries, bytes, names.into_iter().zip(dest).collect())
}

pub fn load_ensemble(dir: &Path) -> Result<EnsembleModel> {
    let manifest = EnsembleManifest::parse(&read_text(&dir.join(ENSEMBLE_MANIFEST))?)?;
    let manifest_err = |e: Error| Error::Manifest(e.to_string());
    let rules = RuleRegistry::parse(&read_text(&dir.join(&manifest.rules_file))?)?;
    let input_spec: BandSpec = manifest.input_spec.parse().map_err(manifest_err)?;
    let task = TaskSpec::parse(&manifest.task).map_err(manifest_err)?;
    let mut encoders = Vec::with_capacity(manifest.encoders.len());
    for id in &manifest.encoders {
        let enc = load_checkpoint(&dir.join(ENCODER_DIR).join(id))?;
        if &enc.encoder_id != id {
            return Err(Error::Manifest(format!("directory `{id}` holds encoder `{}`", enc.encoder_id)));
        }
        encoders.push(enc);
    }
    let opts = EnsembleOptions {
        norm_mode: manifest.norm_mode,
        target_dims: Some(manifest.target_dims),
        k: Some(manifest.k),
        warmup_epochs: manifest.warmup_epochs,
        seed: 0,
    };
    let mut model = build_ensemble(encoders, rules, input_spec, task, &opts)?;
    model.normalizers.eps = manifest.norm_eps;
    model.normalizers.momentum = manifest.norm_momentum;

    decode_named(
        &manifest.selection,
        &read_file(&dir.join("selection.bin"))?,
        vec!["selection.w".into()],
        vec![&mut model.selection.w],
    )?;
    let names = model.fusion.named_params().into_iter().map(|(n, _)| n).collect();
    decode_named(&manifest.fusion, &read_file(&dir.join("fusion.bin"))?, names, model.fusion.params_mut())?;
    let names = model.decoder.named_params().into_iter().map(|(n, _)| n).collect();
    decode_named(&manifest.decoder, &read_file(&dir.join("decoder.bin"))?, names, model.decoder.params_mut())?;

    let stats = blob::decode(&manifest.normalizer, &read_file(&dir.join("normalizer.bin"))?)?;
    let mut it = stats.into_iter().zip(&manifest.normalizer);
    for key in &manifest.normalizer_slots {
        let mut levels = Vec::with_capacity(LEVELS);
        for j in 0..LEVELS {
            let (mean, me) = it.next().expect("count checked");
            let (var, ve) = it.next().expect("count checked");
            if me.name != format!("{key}/{j}/mean") || ve.name != format!("{key}/{j}/var") || mean.shape() != var.shape() {
                return Err(Error::CheckpointShape(format!("normalizer tensors for `{key}` level {j} are malformed")));
            }
            levels.push(LevelStats {
                mean: mean.into_data(),
                var: var.into_data(),
            });
        }
        model.normalizers.insert_slot(key, levels)?;
    }
    Ok(model)
}
