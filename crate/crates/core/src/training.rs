//! Supervised training of one specialist encoder with a disposable head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{shuffled, Adam, Conv2d, Linear, Module, ParamCursor};
use crate::synthetic::{Dataset, Sample, TaskKind, TaskSpec};
use crate::tensor::Tensor;
use crate::zoo::{SpecialistEncoder, LEVELS};

pub const DECODER_WIDTH: usize = 32;

/// Per-level 1×1 laterals to a common width, bilinear upsampling to the
/// stride-4 grid, sum, 3×3 conv + GELU, 1×1 predictor, upsampling to the
/// input size.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidDecoder {
    pub lateral: Vec<Conv2d>,
    pub smooth: Conv2d,
    pub predictor: Conv2d,
}

impl PyramidDecoder {
    pub fn new(dims: &[usize; LEVELS], width: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            lateral: dims.iter().map(|&d| Conv2d::pointwise(d, width, &mut rng)).collect(),
            smooth: Conv2d::new(width, width, 3, 1, 1, 1, &mut rng),
            predictor: Conv2d::pointwise(width, outputs, &mut rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &mut ParamCursor<'_>, levels: &[Var], out_hw: (usize, usize)) -> Var {
        let (_, _, h0, w0) = g.value(levels[0]).dims4().expect("4-d level");
        let mut sum = None;
        for (conv, &level) in self.lateral.iter().zip(levels) {
            let y = conv.forward(g, p, level);
            let y = if g.value(y).shape()[2..] == [h0, w0] {
                y
            } else {
                g.resize(y, h0, w0)
            };
            sum = Some(match sum {
                None => y,
                Some(s) => g.add(s, y),
            });
        }
        let y = self.smooth.forward(g, p, sum.expect("four levels"));
        let y = g.gelu(y);
        let y = self.predictor.forward(g, p, y);
        g.resize(y, out_hw.0, out_hw.1)
    }
}

impl Module for PyramidDecoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.lateral.iter().flat_map(Module::params).collect();
        out.extend(self.smooth.params());
        out.extend(self.predictor.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.lateral.iter_mut().flat_map(Module::params_mut).collect();
        out.extend(self.smooth.params_mut());
        out.extend(self.predictor.params_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskHead {
    /// Global average pool of the deepest level, then a linear layer.
    Classifier(Linear),
    Dense(PyramidDecoder),
}

impl TaskHead {
    /// Logits `n×K` for classification, `n×K×H×W` for segmentation,
    /// `n×1×H×W` for regression.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], levels: &[Var], out_hw: (usize, usize)) -> Var {
        let mut p = ParamCursor::new(vars);
        let out = match self {
            TaskHead::Classifier(linear) => {
                let pooled = g.global_avg_pool(levels[LEVELS - 1]);
                linear.forward(g, &mut p, pooled)
            }
            TaskHead::Dense(decoder) => decoder.forward(g, &mut p, levels, out_hw),
        };
        debug_assert!(p.finished());
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            TaskHead::Classifier(l) => vec![("head.weight".into(), &l.weight), ("head.bias".into(), &l.bias)],
            TaskHead::Dense(d) => {
                let mut out = Vec::new();
                for (j, c) in d.lateral.iter().enumerate() {
                    out.push((format!("lateral.{j}.weight"), &c.weight));
                    out.push((format!("lateral.{j}.bias"), &c.bias));
                }
                out.push(("smooth.weight".into(), &d.smooth.weight));
                out.push(("smooth.bias".into(), &d.smooth.bias));
                out.push(("predictor.weight".into(), &d.predictor.weight));
                out.push(("predictor.bias".into(), &d.predictor.bias));
                out
            }
        }
    }
}

impl Module for TaskHead {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            TaskHead::Classifier(l) => l.params(),
            TaskHead::Dense(d) => d.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            TaskHead::Classifier(l) => l.params_mut(),
            TaskHead::Dense(d) => d.params_mut(),
        }
    }
}

pub fn attach_head(task: &TaskSpec, dims: &[usize; LEVELS], seed: u64) -> Result<TaskHead> {
    task.validate()?;
    Ok(match task.kind {
        TaskKind::Classification => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            TaskHead::Classifier(Linear::new(dims[LEVELS - 1], task.num_classes, &mut rng))
        }
        TaskKind::Segmentation | TaskKind::Regression => {
            TaskHead::Dense(PyramidDecoder::new(dims, DECODER_WIDTH, task.outputs(), seed))
        }
    })
}

/// Stacks sample images into one `n×C×H×W` batch.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    Tensor::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())
}

/// Task loss of `out` against the samples' labels.
pub fn task_loss(g: &mut Graph, out: Var, task: &TaskSpec, samples: &[&Sample]) -> Result<Var> {
    match task.kind {
        TaskKind::Classification => {
            let labels: Vec<usize> = samples.iter().map(|s| s.scene_class).collect();
            check_labels(&labels, task.num_classes)?;
            Ok(g.softmax_cross_entropy(out, &labels))
        }
        TaskKind::Segmentation => {
            let labels: Vec<usize> = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
            check_labels(&labels, task.num_classes)?;
            Ok(g.softmax_cross_entropy(out, &labels))
        }
        TaskKind::Regression => {
            let shape = g.value(out).shape().to_vec();
            let data: Vec<f64> = samples.iter().flat_map(|s| s.height.data().iter().copied()).collect();
            Ok(g.mse(out, &Tensor::new(shape, data)?))
        }
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= k) {
        Some(l) => Err(Error::Task(format!("label {l} outside the task's {k} classes"))),
        None => Ok(()),
    }
}

/// Hard predictions extracted from head outputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    /// One class per sample (classification) or per pixel (segmentation).
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

impl Predictions {
    pub fn from_output(task: &TaskSpec, out: &Tensor) -> Self {
        match task.kind {
            TaskKind::Regression => Predictions::Values(out.data().to_vec()),
            _ => {
                let (n, k) = (out.shape()[0], out.shape()[1]);
                let hw: usize = out.shape()[2..].iter().product();
                let d = out.data();
                let mut labels = Vec::with_capacity(n * hw);
                for b in 0..n {
                    for p in 0..hw {
                        let at = |c: usize| d[(b * k + c) * hw + p];
                        let best = (1..k).fold(0, |best, c| if at(c) > at(best) { c } else { best });
                        labels.push(best);
                    }
                }
                Predictions::Labels(labels)
            }
        }
    }

    pub fn extend(&mut self, other: Predictions) {
        match (self, other) {
            (Predictions::Labels(a), Predictions::Labels(b)) => a.extend(b),
            (Predictions::Values(a), Predictions::Values(b)) => a.extend(b),
            _ => panic!("mixed prediction kinds"),
        }
    }
}

/// Scores predictions for `samples` with the task's metric kernel.
pub fn score(task: &TaskSpec, preds: &Predictions, samples: &[Sample]) -> Result<f64> {
    match (task.kind, preds) {
        (TaskKind::Classification, Predictions::Labels(p)) => {
            let gt: Vec<usize> = samples.iter().map(|s| s.scene_class).collect();
            metrics::accuracy(p, &gt)
        }
        (TaskKind::Segmentation, Predictions::Labels(p)) => {
            let gt: Vec<usize> = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
            metrics::miou(p, &gt, task.num_classes)
        }
        (TaskKind::Regression, Predictions::Values(p)) => {
            let gt: Vec<f64> = samples.iter().flat_map(|s| s.height.data().iter().copied()).collect();
            metrics::rmse(p, &gt)
        }
        _ => Err(Error::Task(format!("predictions do not fit task {task}"))),
    }
}

/// Anchors of `patch`-wide windows covering `len`: a regular grid plus one
/// window flush with the far edge when the grid leaves a remainder.
pub fn tile_anchors(len: usize, patch: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * patch).take_while(|a| a + patch <= len).collect();
    if out.last().map_or(true, |a| a + patch < len) {
        out.push(len - patch);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    /// `C×patch×patch`.
    pub data: Tensor,
}

/// Row-major tiles of a `C×H×W` image.
pub fn tile(image: &Tensor, patch: usize) -> Result<Vec<Tile>> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::Shape(format!("tile expects C×H×W, got {:?}", image.shape())));
    };
    if patch == 0 || patch % 32 != 0 {
        return Err(Error::Config(format!("patch {patch} must be a positive multiple of 32")));
    }
    if patch > h || patch > w {
        return Err(Error::Config(format!("patch {patch} exceeds image {h}×{w}")));
    }
    let mut tiles = Vec::new();
    for &row in &tile_anchors(h, patch) {
        for &col in &tile_anchors(w, patch) {
            let mut data = Vec::with_capacity(c * patch * patch);
            for ch in 0..c {
                for y in row..row + patch {
                    let start = (ch * h + y) * w + col;
                    data.extend_from_slice(&image.data()[start..start + patch]);
                }
            }
            tiles.push(Tile {
                row,
                col,
                data: Tensor::new(vec![c, patch, patch], data)?,
            });
        }
    }
    Ok(tiles)
}

/// Writes tiles back in order; overlapping border regions take the later tile.
pub fn untile(tiles: &[Tile], height: usize, width: usize) -> Result<Tensor> {
    let first = tiles.first().ok_or_else(|| Error::Empty("no tiles".into()))?;
    let (c, patch) = (first.data.shape()[0], first.data.shape()[1]);
    let mut out = Tensor::zeros(&[c, height, width]);
    for t in tiles {
        if t.data.shape() != [c, patch, patch] || t.row + patch > height || t.col + patch > width {
            return Err(Error::Shape(format!("tile at ({}, {}) does not fit {height}×{width}", t.row, t.col)));
        }
        for ch in 0..c {
            for y in 0..patch {
                let src = (ch * patch + y) * patch;
                let dst = (ch * height + t.row + y) * width + t.col;
                out.data_mut()[dst..dst + patch].copy_from_slice(&t.data.data()[src..src + patch]);
            }
        }
    }
    Ok(out)
}

/// Splits a sample (image and dense labels) into `patch`-sized samples.
pub fn tile_sample(sample: &Sample, patch: usize) -> Result<Vec<Sample>> {
    let (h, w) = (sample.height.shape()[0], sample.height.shape()[1]);
    let mask = Tensor::new(vec![1, h, w], sample.mask.iter().map(|&v| v as f64).collect())?;
    let height = sample.height.clone().reshape(&[1, h, w])?;
    let images = tile(&sample.image, patch)?;
    let masks = tile(&mask, patch)?;
    let heights = tile(&height, patch)?;
    Ok(images
        .into_iter()
        .zip(masks)
        .zip(heights)
        .map(|((img, m), ht)| Sample {
            index: sample.index,
            scene_seed: sample.scene_seed,
            image: img.data,
            scene_class: sample.scene_class,
            mask: m.data.data().iter().map(|&v| v as usize).collect(),
            height: ht.data.reshape(&[patch, patch]).expect("same numel"),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
    pub tile_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            patience: 5,
            seed: 0,
            tile_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, batch size and patience must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.tile_size == Some(0) {
            return Err(Error::Config("tile size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based; 0 while empty.
    pub best_epoch: usize,
    pub best_val: f64,
    /// Mean training loss of the model before the first update.
    pub initial_loss: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "val_metric"]).expect("in-memory write");
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), format!("{:.6}", e.train_loss), format!("{:.6}", e.val_metric)])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Records an epoch and reports whether it is the new best.
    pub(crate) fn record(&mut self, train_loss: f64, val_metric: f64, task: &TaskSpec) -> bool {
        let epoch = self.epochs.len() + 1;
        self.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        let improved = self.best_epoch == 0 || task.direction.better(val_metric, self.best_val);
        if improved {
            self.best_epoch = epoch;
            self.best_val = val_metric;
        }
        improved
    }
}

fn specialist_output(enc: &SpecialistEncoder, head: &TaskHead, batch: &[&Sample]) -> Result<Tensor> {
    let x = stack_images(batch)?;
    let hw = (x.shape()[2], x.shape()[3]);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (levels, _) = enc.forward_graph(&mut g, xv, false)?;
    let hv = head.bind(&mut g, false);
    let out = head.forward(&mut g, &hv, &levels, hw);
    Ok(g.value(out).clone())
}

/// Scores an encoder and head on `samples` (pure).
pub fn evaluate_specialist(
    enc: &SpecialistEncoder,
    head: &TaskHead,
    samples: &[Sample],
    task: &TaskSpec,
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let mut preds: Option<Predictions> = None;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let p = Predictions::from_output(task, &specialist_output(enc, head, &refs)?);
        match preds.as_mut() {
            Some(all) => all.extend(p),
            None => preds = Some(p),
        }
    }
    score(task, &preds.expect("non-empty"), samples)
}

fn mean_loss(enc: &SpecialistEncoder, head: &TaskHead, samples: &[Sample], task: &TaskSpec, bs: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(bs) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = stack_images(&refs)?;
        let hw = (x.shape()[2], x.shape()[3]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (levels, _) = enc.forward_graph(&mut g, xv, false)?;
        let hv = head.bind(&mut g, false);
        let out = head.forward(&mut g, &hv, &levels, hw);
        let loss = task_loss(&mut g, out, task, &refs)?;
        total += g.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the best validation epoch, provenance filled in.
    pub encoder: SpecialistEncoder,
    /// The head trained alongside; usually discarded.
    pub head: TaskHead,
    pub history: TrainHistory,
}

fn expand_tiles(samples: &[Sample], tile_size: Option<usize>) -> Result<Vec<Sample>> {
    match tile_size {
        Some(p) if samples.iter().any(|s| s.height.shape()[0] > p || s.height.shape()[1] > p) => {
            let mut out = Vec::new();
            for s in samples {
                out.extend(tile_sample(s, p)?);
            }
            Ok(out)
        }
        _ => Ok(samples.to_vec()),
    }
}

/// Trains `encoder` on `dataset` for `task` with early stopping and returns
/// the best-validation weights.
pub fn train_specialist(
    encoder: &SpecialistEncoder,
    dataset: &Dataset,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.validate()?;
    if encoder.frozen {
        return Err(Error::Config(format!("encoder `{}` is frozen", encoder.encoder_id)));
    }
    if dataset.spec() != encoder.required_spec {
        return Err(Error::Dataset(format!(
            "dataset modality {} ({}) does not match encoder `{}` ({})",
            dataset.config.modality,
            dataset.spec(),
            encoder.encoder_id,
            encoder.required_spec
        )));
    }
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Empty("dataset needs train and val samples".into()));
    }
    if task.num_classes >= 2 && task.num_classes != dataset.config.scene_classes {
        return Err(Error::Task(format!(
            "task has {} classes, dataset scenes have {}",
            task.num_classes, dataset.config.scene_classes
        )));
    }
    let train = expand_tiles(&dataset.train, cfg.tile_size)?;
    let val = expand_tiles(&dataset.val, cfg.tile_size)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc = encoder.clone();
    let mut head = attach_head(task, &enc.config.dims, cfg.seed.wrapping_add(0x9e37_79b9))?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = TrainHistory {
        initial_loss: mean_loss(&enc, &head, &train, task, cfg.batch_size)?,
        ..TrainHistory::default()
    };
    let mut best = (enc.net.clone(), head.clone());
    let mut stale = 0;
    for _ in 0..cfg.max_epochs {
        let order = shuffled(train.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let x = stack_images(&batch)?;
            let hw = (x.shape()[2], x.shape()[3]);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let (levels, enc_vars) = enc.forward_graph(&mut g, xv, true)?;
            let head_vars = head.bind(&mut g, true);
            let out = head.forward(&mut g, &head_vars, &levels, hw);
            let loss = task_loss(&mut g, out, task, &batch)?;
            epoch_loss += g.value(loss).data()[0] * batch.len() as f64;
            g.backward(loss);
            let grads: Vec<Tensor> = enc_vars.iter().chain(&head_vars).map(|&v| g.grad_or_zeros(v)).collect();
            let mut params = enc.net.params_mut();
            params.extend(head.params_mut());
            adam.step(params, &grads);
        }
        let val_metric = evaluate_specialist(&enc, &head, &val, task, cfg.batch_size)?;
        if history.record(epoch_loss / train.len() as f64, val_metric, task) {
            best = (enc.net.clone(), head.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    enc.net = best.0;
    enc.provenance.dataset_name = dataset.config.name.clone();
    enc.provenance.task_kind = task.to_string();
    enc.provenance.modality = dataset.config.modality.to_string();
    enc.provenance.n_train_samples = dataset.train.len();
    enc.provenance.final_val_metric = Some(history.best_val);
    Ok(TrainOutcome {
        encoder: enc,
        head: best.1,
        history,
    })
}
