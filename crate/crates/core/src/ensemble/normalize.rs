//! Non-parametric feature normalization, one statistics slot per branch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{standardize_values, NormAxis};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{FeaturePyramid, LEVELS};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    None,
    /// Per sample and position, over channels.
    Layer,
    /// Per channel, over batch and positions, with running statistics.
    #[default]
    Batch,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::Layer => "layer",
            NormMode::Batch => "batch",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormMode::None),
            "layer" => Ok(NormMode::Layer),
            "batch" => Ok(NormMode::Batch),
            _ => Err(Error::Config(format!("unknown normalization mode `{s}` (none, layer, batch)"))),
        }
    }
}

/// Running per-channel statistics of one level of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelStats {
    pub mean: Vec<f64>,
    /// Unbiased.
    pub var: Vec<f64>,
}

impl LevelStats {
    /// The neutral state: mean 0, variance 1.
    pub fn neutral(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizerBank {
    pub mode: NormMode,
    pub eps: f64,
    pub momentum: f64,
    slots: BTreeMap<String, Vec<LevelStats>>,
}

impl NormalizerBank {
    pub fn new(mode: NormMode) -> Self {
        Self {
            mode,
            eps: NORM_EPS,
            momentum: NORM_MOMENTUM,
            slots: BTreeMap::new(),
        }
    }

    pub fn slot(&self, key: &str) -> Option<&[LevelStats]> {
        self.slots.get(key).map(Vec::as_slice)
    }

    pub fn slot_keys(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn insert_slot(&mut self, key: &str, stats: Vec<LevelStats>) -> Result<()> {
        if stats.len() != LEVELS {
            return Err(Error::Shape(format!("slot `{key}` needs {LEVELS} levels, got {}", stats.len())));
        }
        self.slots.insert(key.to_string(), stats);
        Ok(())
    }

    pub fn remove_slot(&mut self, key: &str) -> Option<Vec<LevelStats>> {
        self.slots.remove(key)
    }

    /// Normalizes one branch's pyramid. In batch mode a training call uses
    /// the batch moments and folds them into the running statistics; an
    /// inference call uses the running statistics.
    pub fn normalize(&mut self, features: &FeaturePyramid, key: &str, training: bool) -> Result<FeaturePyramid> {
        if self.mode == NormMode::Batch && training {
            let mut out = Vec::with_capacity(LEVELS);
            let mut batch_stats = Vec::with_capacity(LEVELS);
            for level in &features.levels {
                let (y, stats) = standardize_values(level, NormAxis::Batch, self.eps);
                let count = level.numel() / level.shape()[1].max(1);
                batch_stats.push((stats, count));
                out.push(y);
            }
            let slot = self
                .slots
                .entry(key.to_string())
                .or_insert_with(|| features.levels.iter().map(|t| LevelStats::neutral(t.shape()[1])).collect());
            for (running, (stats, count)) in slot.iter_mut().zip(batch_stats) {
                if running.mean.len() != stats.len() {
                    return Err(Error::Shape(format!(
                        "slot `{key}` tracks {} channels, features have {}",
                        running.mean.len(),
                        stats.len()
                    )));
                }
                let correction = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                for (c, (m, v)) in stats.into_iter().enumerate() {
                    let rm = (1.0 - self.momentum) * running.mean[c] + self.momentum * m;
                    let rv = (1.0 - self.momentum) * running.var[c] + self.momentum * v * correction;
                    running.mean[c] = f64::from(rm as f32);
                    running.var[c] = f64::from(rv as f32);
                }
            }
            return Ok(FeaturePyramid { levels: out });
        }
        self.apply(features, key)
    }

    /// Inference-mode normalization; never mutates.
    pub fn apply(&self, features: &FeaturePyramid, key: &str) -> Result<FeaturePyramid> {
        match self.mode {
            NormMode::None => Ok(features.clone()),
            NormMode::Layer => Ok(FeaturePyramid {
                levels: features
                    .levels
                    .iter()
                    .map(|t| standardize_values(t, NormAxis::Channel, self.eps).0)
                    .collect(),
            }),
            NormMode::Batch => {
                let slot = self.slots.get(key).ok_or_else(|| Error::UninitializedStats(key.to_string()))?;
                let levels = features
                    .levels
                    .iter()
                    .zip(slot)
                    .map(|(t, s)| standardize_with(t, &s.mean, &s.var, self.eps, key))
                    .collect::<Result<Vec<_>>>()?;
                Ok(FeaturePyramid { levels })
            }
        }
    }
}

fn standardize_with(x: &Tensor, mean: &[f64], var: &[f64], eps: f64, key: &str) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c != mean.len() {
        return Err(Error::Shape(format!("slot `{key}` tracks {} channels, features have {c}", mean.len())));
    }
    let hw = h * w;
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            for v in &mut out.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = (*v - mean[ch]) * inv;
            }
        }
    }
    Ok(out)
}

/// Free-function form of [`NormalizerBank::normalize`].
pub fn normalize(
    features: &FeaturePyramid,
    bank: &mut NormalizerBank,
    branch_key: &str,
    training: bool,
) -> Result<FeaturePyramid> {
    bank.normalize(features, branch_key, training)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pyramid(f: impl Fn(usize, usize) -> f64) -> FeaturePyramid {
        FeaturePyramid {
            levels: (0..LEVELS)
                .map(|j| Tensor::from_fn(&[4, 2 << j, 4, 4], |i| f(j, i)))
                .collect(),
        }
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut bank = NormalizerBank::new(NormMode::Batch);
        let out = bank.normalize(&pyramid(|_, _| 3.5), "a/identity", true).unwrap();
        assert!(out.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn plus_minus_one_is_preserved() {
        let mut bank = NormalizerBank::new(NormMode::Batch);
        let p = pyramid(|_, i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let out = bank.normalize(&p, "k", true).unwrap();
        for (a, b) in out.levels.iter().zip(&p.levels) {
            assert!(a.max_abs_diff(b) < 1e-3);
        }
    }

    #[test]
    fn none_mode_is_passthrough_and_batch_eval_needs_stats() {
        let p = pyramid(|j, i| (i * 7 + j) as f64 * 0.013);
        let bank = NormalizerBank::new(NormMode::None);
        assert_eq!(bank.apply(&p, "x").unwrap(), p);
        let bank = NormalizerBank::new(NormMode::Batch);
        assert!(matches!(bank.apply(&p, "x"), Err(Error::UninitializedStats(_))));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bank = NormalizerBank::new(NormMode::Batch);
        let p = pyramid(|_, _| 2.0);
        bank.normalize(&p, "k", true).unwrap();
        let s = &bank.slot("k").unwrap()[0];
        assert!((s.mean[0] - 0.2).abs() < 1e-6);
        assert!((s.var[0] - 0.9).abs() < 1e-6);
        let eval = bank.apply(&p, "k").unwrap();
        assert!((eval.levels[0].data()[0] - 1.8 / 0.90001f64.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn layer_mode_standardizes_each_position() {
        let bank = NormalizerBank::new(NormMode::Layer);
        let out = bank.apply(&pyramid(|j, i| ((i * 31 + j) % 17) as f64), "k").unwrap();
        let t = &out.levels[1];
        let (c, hw) = (t.shape()[1], 16);
        let mean: f64 = (0..c).map(|ch| t.data()[ch * hw + 5]).sum::<f64>() / c as f64;
        assert!(mean.abs() < 1e-9);
    }
}
