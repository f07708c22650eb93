//! Frozen-encoder adaptation: only selection weights, fusion and decoder
//! are trained, and the best validation epoch is kept.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::ensemble::{top_k, EnsembleModel};
use crate::error::{Error, Result};
use crate::nn::{shuffled, Adam};
use crate::synthetic::{Dataset, Sample, TaskKind, TaskSpec};
use crate::tensor::Tensor;
use crate::training::{score, stack_images, task_loss, Predictions, TrainHistory};
use crate::zoo::FeaturePyramid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of training labels kept by stratified subsampling.
    pub label_fraction: f64,
    pub seed: u64,
    /// Final sparsity; `None` keeps the model's.
    pub k: Option<usize>,
    /// Epochs run with every encoder active before top-k masking starts.
    pub warmup_epochs: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 8,
            learning_rate: 3e-3,
            label_fraction: 1.0,
            seed: 0,
            k: None,
            warmup_epochs: crate::ensemble::DEFAULT_WARMUP_EPOCHS,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label fraction {} must be in (0, 1]", self.label_fraction)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.k == Some(0) {
            return Err(Error::Config("k must be positive".into()));
        }
        Ok(())
    }
}

/// Stratum of a sample: scene class, dominant mask class (lowest on ties),
/// or quartile of the mean target.
fn strata(samples: &[Sample], task: &TaskSpec) -> Vec<usize> {
    match task.kind {
        TaskKind::Classification => samples.iter().map(|s| s.scene_class).collect(),
        TaskKind::Segmentation => samples
            .iter()
            .map(|s| {
                let mut counts = vec![0usize; s.mask.iter().copied().max().map_or(0, |m| m + 1)];
                for &l in &s.mask {
                    counts[l] += 1;
                }
                (0..counts.len()).fold(0, |best, c| if counts[c] > counts[best] { c } else { best })
            })
            .collect(),
        TaskKind::Regression => {
            let means: Vec<f64> = samples.iter().map(|s| s.height.sum() / s.height.numel() as f64).collect();
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
            let mut q = vec![0; samples.len()];
            for (rank, &i) in order.iter().enumerate() {
                q[i] = rank * 4 / samples.len();
            }
            q
        }
    }
}

/// Sorted indices of a stratified subset: per stratum
/// `max(1, round(fraction × size))` samples.
pub fn subsample_indices(samples: &[Sample], task: &TaskSpec, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Err(Error::Empty("cannot subsample an empty split".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} must be in (0, 1]")));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata(samples, task).into_iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for members in groups.values() {
        let take = ((fraction * members.len() as f64).round() as usize).max(1);
        let order = shuffled(members.len(), &mut rng);
        out.extend(order[..take].iter().map(|&j| members[j]));
    }
    out.sort_unstable();
    Ok(out)
}

/// The dataset with its training split stratified-subsampled.
pub fn subsample_stratified(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let idx = subsample_indices(&dataset.train, &dataset.config.task, fraction, seed)?;
    let mut out = dataset.clone();
    out.train = idx.into_iter().map(|i| dataset.train[i].clone()).collect();
    Ok(out)
}

/// Raw branch pyramids of every sample, computed once with all encoders
/// active. Encoders are frozen, so these never change during adaptation.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    /// `[sample][branch]`, each with a batch axis of one.
    pub features: Vec<Vec<FeaturePyramid>>,
    pub hw: (usize, usize),
}

impl FeatureCache {
    pub fn build(model: &EnsembleModel, samples: &[Sample], batch_size: usize) -> Result<Self> {
        let all = vec![true; model.len()];
        let mut features = Vec::with_capacity(samples.len());
        let mut hw = (0, 0);
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let images = stack_images(&refs)?;
            hw = (images.shape()[2], images.shape()[3]);
            let raw = model.branch_features(&images, &all)?;
            for i in 0..chunk.len() {
                features.push(raw.iter().map(|p| p.as_ref().expect("all active").sample(i)).collect());
            }
        }
        Ok(Self { features, hw })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Batched raw pyramids for `indices`, `None` for inactive encoders.
    fn batch(&self, model: &EnsembleModel, indices: &[usize], active: &[bool]) -> Result<Vec<Option<FeaturePyramid>>> {
        model
            .branches()
            .iter()
            .enumerate()
            .map(|(b, info)| {
                if !active[info.encoder_index] {
                    return Ok(None);
                }
                let items: Vec<&FeaturePyramid> = indices.iter().map(|&i| &self.features[i][b]).collect();
                FeaturePyramid::batch(&items).map(Some)
            })
            .collect()
    }
}

fn check_inputs(model: &EnsembleModel, dataset: &Dataset) -> Result<()> {
    if dataset.spec() != model.input_spec {
        return Err(Error::UnsupportedInput(format!(
            "unsupported input spec: model adapts {}, dataset provides {}",
            model.input_spec,
            dataset.spec()
        )));
    }
    if let Some(e) = model.encoders.iter().find(|e| !e.frozen) {
        return Err(Error::Config(format!("encoder `{}` is not frozen", e.encoder_id)));
    }
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Empty("dataset needs train and val samples".into()));
    }
    Ok(())
}

/// Trains selection, fusion and decoder on `dataset` and returns the best
/// validation checkpoint. `on_epoch` sees the model after every epoch.
pub fn finetune(
    model: &EnsembleModel,
    dataset: &Dataset,
    cfg: &DownstreamConfig,
    on_epoch: impl FnMut(usize, &EnsembleModel),
) -> Result<(EnsembleModel, TrainHistory)> {
    cfg.validate()?;
    check_inputs(model, dataset)?;
    let train_set = if cfg.label_fraction < 1.0 {
        subsample_stratified(dataset, cfg.label_fraction, cfg.seed)?.train
    } else {
        dataset.train.clone()
    };
    let train = FeatureCache::build(model, &train_set, cfg.batch_size)?;
    let val = FeatureCache::build(model, &dataset.val, cfg.batch_size)?;
    finetune_cached(model, &train_set, &train, &dataset.val, &val, cfg, on_epoch)
}

/// [`finetune`] on precomputed features of the exact samples given.
pub fn finetune_cached(
    model: &EnsembleModel,
    train_samples: &[Sample],
    train: &FeatureCache,
    val_samples: &[Sample],
    val: &FeatureCache,
    cfg: &DownstreamConfig,
    mut on_epoch: impl FnMut(usize, &EnsembleModel),
) -> Result<(EnsembleModel, TrainHistory)> {
    cfg.validate()?;
    if train.len() != train_samples.len() || val.len() != val_samples.len() || train.is_empty() || val.is_empty() {
        return Err(Error::Empty("feature caches must cover non-empty train and val splits".into()));
    }
    let n = model.len();
    let k_final = cfg.k.unwrap_or(model.selection.k);
    top_k(model.selection.weights(), k_final)?;
    let task = model.task.clone();
    let mut model = model.clone();
    model.selection.k = k_final;
    model.selection.warmup_epochs = cfg.warmup_epochs;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    for epoch in 0..cfg.epochs {
        let k = if epoch < cfg.warmup_epochs { n } else { k_final };
        let active = model.active_encoders(k)?;
        let mut epoch_loss = 0.0;
        for chunk in shuffled(train.len(), &mut rng).chunks(cfg.batch_size) {
            let raw = train.batch(&model, chunk, &active)?;
            let normalized = model.normalize_branches(&raw, true)?;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let fused = model.fuse_graph(&mut g, &bound, &normalized, chunk.len(), train.hw)?;
            let out = model.head_graph(&mut g, &bound, &fused, train.hw);
            let loss = task_loss(&mut g, out, &task, &batch)?;
            epoch_loss += g.value(loss).data()[0] * chunk.len() as f64;
            g.backward(loss);
            let grads: Vec<Tensor> = bound.all().iter().map(|&v| g.grad_or_zeros(v)).collect();
            // Masked weights get no gradient; keep optimizer momentum from moving them.
            let held = model.selection.w.clone();
            adam.step(model.trainable_params_mut(), &grads);
            for (i, &on) in active.iter().enumerate() {
                if !on {
                    model.selection.w.data_mut()[i] = held.data()[i];
                }
            }
        }
        let val_metric = evaluate_cached(&model, val_samples, val, cfg.batch_size)?;
        if history.record(epoch_loss / train.len() as f64, val_metric, &task) {
            best = model.clone();
        }
        on_epoch(epoch + 1, &model);
    }
    Ok((best, history))
}

/// Predictions on cached features at the model's `k` (pure).
pub fn predict_cached(model: &EnsembleModel, cache: &FeatureCache, batch_size: usize) -> Result<Predictions> {
    let active = model.active_encoders(model.selection.k)?;
    let idx: Vec<usize> = (0..cache.len()).collect();
    let mut preds: Option<Predictions> = None;
    for chunk in idx.chunks(batch_size.max(1)) {
        let raw = cache.batch(model, chunk, &active)?;
        let p = Predictions::from_output(&model.task, &model.predict_from_features(&raw)?);
        match preds.as_mut() {
            Some(all) => all.extend(p),
            None => preds = Some(p),
        }
    }
    preds.ok_or_else(|| Error::Empty("no samples to predict".into()))
}

fn evaluate_cached(model: &EnsembleModel, samples: &[Sample], cache: &FeatureCache, batch_size: usize) -> Result<f64> {
    score(&model.task, &predict_cached(model, cache, batch_size)?, samples)
}

/// Hard predictions of the model on `samples`.
pub fn predict(model: &EnsembleModel, samples: &[Sample], batch_size: usize) -> Result<Predictions> {
    let cache = FeatureCache::build(model, samples, batch_size)?;
    predict_cached(model, &cache, batch_size)
}

/// Task metric of the model on `samples`; `task` must be the model's.
pub fn evaluate(model: &EnsembleModel, samples: &[Sample], task: &TaskSpec) -> Result<f64> {
    if task != &model.task {
        return Err(Error::Task(format!("model was adapted for {}, not {task}", model.task)));
    }
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    score(task, &predict(model, samples, 16)?, samples)
}
