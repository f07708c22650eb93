//! The ensemble forward path: band adaptation, frozen encoders, per-branch
//! normalization, selection with top-k masking and per-level fusion.

mod checkpoint;
mod normalize;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Graph, Var};
use crate::bands::{apply_rule, AdaptationRule, BandSpec, Branch, RuleRegistry};
use crate::error::{Error, Result};
use crate::nn::{digest, Conv2d, Module, ParamCursor};
use crate::synthetic::{Dataset, TaskSpec};
use crate::tensor::Tensor;
use crate::training::{attach_head, stack_images, TaskHead};
use crate::zoo::{FeaturePyramid, SpecialistEncoder, LEVELS, STRIDES};

pub use checkpoint::{load_ensemble, save_ensemble, EnsembleManifest, ENSEMBLE_MANIFEST};
pub use normalize::{normalize, LevelStats, NormMode, NormalizerBank, NORM_EPS, NORM_MOMENTUM};

pub const DEFAULT_WARMUP_EPOCHS: usize = 3;

/// Indices of the `k` largest weights, in ascending index order. Ties go to
/// the lower index.
pub fn top_k(w: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = w.len();
    if k == 0 || k > n {
        return Err(Error::Sparsity { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionWeights {
    /// One weight per encoder, shape `[N]`.
    pub w: Tensor,
    pub k: usize,
    pub warmup_epochs: usize,
}

impl SelectionWeights {
    pub fn new(n: usize) -> Self {
        Self {
            w: Tensor::full(&[n], 1.0),
            k: n,
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
        }
    }

    pub fn len(&self) -> usize {
        self.w.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.w.numel() == 0
    }

    pub fn weights(&self) -> &[f64] {
        self.w.data()
    }

    pub fn mask(&self, k: usize) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.len()];
        for i in top_k(self.weights(), k)? {
            mask[i] = true;
        }
        Ok(mask)
    }

    /// Whether every weight is equal, so top-k reduces to registration order.
    pub fn is_uniform(&self) -> bool {
        self.weights().windows(2).all(|p| p[0] == p[1])
    }
}

/// Scales each pyramid by its encoder's weight and zeroes branches of
/// encoders outside the top `sel.k`.
pub fn select(pyramids: &[(usize, FeaturePyramid)], sel: &SelectionWeights) -> Result<Vec<FeaturePyramid>> {
    let mask = sel.mask(sel.k)?;
    pyramids
        .iter()
        .map(|(enc, p)| {
            let &keep = mask
                .get(*enc)
                .ok_or_else(|| Error::Shape(format!("no selection weight for encoder {enc}")))?;
            let f = if keep { sel.weights()[*enc] } else { 0.0 };
            Ok(FeaturePyramid {
                levels: p.levels.iter().map(|t| t.map(|v| f * v)).collect(),
            })
        })
        .collect()
}

/// Four independent 1×1 maps from concatenated branch channels to
/// `target_dims`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayer {
    pub levels: Vec<Conv2d>,
    pub target_dims: [usize; LEVELS],
}

impl FusionLayer {
    pub fn new(input_widths: [usize; LEVELS], target_dims: [usize; LEVELS], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            levels: input_widths
                .iter()
                .zip(target_dims)
                .map(|(&cin, cout)| Conv2d::pointwise(cin, cout, &mut rng))
                .collect(),
            target_dims,
        }
    }

    pub fn input_widths(&self) -> [usize; LEVELS] {
        std::array::from_fn(|j| self.levels[j].in_channels())
    }

    /// Concatenates the branch maps per level and applies the linear map.
    pub fn fuse(&self, selected: &[FeaturePyramid]) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let parts: Vec<Vec<Var>> = (0..LEVELS)
            .map(|j| selected.iter().map(|p| g.constant(p.levels[j].clone())).collect())
            .collect();
        let out = self.forward(&mut g, &vars, parts)?;
        Ok(FeaturePyramid {
            levels: out.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], parts: Vec<Vec<Var>>) -> Result<Vec<Var>> {
        let mut p = ParamCursor::new(vars);
        let mut out = Vec::with_capacity(LEVELS);
        for (j, (conv, level_parts)) in self.levels.iter().zip(parts).enumerate() {
            if level_parts.is_empty() {
                return Err(Error::Shape("fusion needs at least one branch".into()));
            }
            let width: usize = level_parts.iter().map(|&v| g.value(v).shape()[1]).sum();
            if width != conv.in_channels() {
                return Err(Error::Shape(format!(
                    "level {j}: branches carry {width} channels, fusion expects {}",
                    conv.in_channels()
                )));
            }
            let x = if level_parts.len() == 1 {
                level_parts[0]
            } else {
                g.concat_channels(&level_parts)
            };
            out.push(conv.forward(g, &mut p, x));
        }
        Ok(out)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(j, c)| [(format!("fusion.{j}.weight"), &c.weight), (format!("fusion.{j}.bias"), &c.bias)])
            .collect()
    }

    /// Keeps only the given input column ranges of every level.
    fn slice_columns(&self, ranges: &[Vec<Range<usize>>]) -> Self {
        let levels = self
            .levels
            .iter()
            .zip(ranges)
            .map(|(conv, keep)| {
                let (cout, cin) = (conv.out_channels(), conv.in_channels());
                let width: usize = keep.iter().map(|r| r.len()).sum();
                let mut data = Vec::with_capacity(cout * width);
                for o in 0..cout {
                    for r in keep {
                        data.extend_from_slice(&conv.weight.data()[o * cin + r.start..o * cin + r.end]);
                    }
                }
                Conv2d {
                    weight: Tensor::new(vec![cout, width, 1, 1], data).expect("sizes computed"),
                    ..conv.clone()
                }
            })
            .collect();
        Self {
            levels,
            target_dims: self.target_dims,
        }
    }

    /// Appends `extra[j]` zero input columns to level `j`.
    fn append_zero_columns(&mut self, extra: [usize; LEVELS]) {
        for (conv, add) in self.levels.iter_mut().zip(extra) {
            let (cout, cin) = (conv.out_channels(), conv.in_channels());
            let mut data = Vec::with_capacity(cout * (cin + add));
            for o in 0..cout {
                data.extend_from_slice(&conv.weight.data()[o * cin..(o + 1) * cin]);
                data.extend(std::iter::repeat_n(0.0, add));
            }
            conv.weight = Tensor::new(vec![cout, cin + add, 1, 1], data).expect("sizes computed");
        }
    }
}

impl Module for FusionLayer {
    fn params(&self) -> Vec<&Tensor> {
        self.levels.iter().flat_map(Module::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.levels.iter_mut().flat_map(Module::params_mut).collect()
    }
}

/// Free-function form of [`FusionLayer::fuse`].
pub fn fuse(selected: &[FeaturePyramid], fusion: &FusionLayer) -> Result<FeaturePyramid> {
    fusion.fuse(selected)
}

/// A branch resolved against the model's encoder list.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchInfo {
    pub branch: Branch,
    pub encoder_index: usize,
    pub rule: AdaptationRule,
}

#[derive(Clone, Debug)]
pub struct EnsembleOptions {
    pub norm_mode: NormMode,
    /// Defaults to the first encoder's dims.
    pub target_dims: Option<[usize; LEVELS]>,
    /// Defaults to the ensemble size.
    pub k: Option<usize>,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            norm_mode: NormMode::Batch,
            target_dims: None,
            k: None,
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
            seed: 0,
        }
    }
}

/// Graph leaves of the trainable parameters: selection, fusion, decoder.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub w: Var,
    pub fusion: Vec<Var>,
    pub decoder: Vec<Var>,
}

impl BoundParams {
    /// In [`EnsembleModel::trainable_params_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.w];
        out.extend(&self.fusion);
        out.extend(&self.decoder);
        out
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleModel {
    pub encoders: Vec<SpecialistEncoder>,
    pub rules: RuleRegistry,
    pub input_spec: BandSpec,
    pub normalizers: NormalizerBank,
    pub selection: SelectionWeights,
    pub fusion: FusionLayer,
    pub decoder: TaskHead,
    pub task: TaskSpec,
    branches: Vec<BranchInfo>,
}

fn resolve_branches(
    encoders: &[SpecialistEncoder],
    rules: &RuleRegistry,
    input_spec: &BandSpec,
) -> Result<Vec<BranchInfo>> {
    rules
        .enumerate_branches(input_spec, encoders.iter().map(|e| (e.encoder_id.as_str(), &e.required_spec)))
        .into_iter()
        .map(|branch| {
            let encoder_index = encoders
                .iter()
                .position(|e| e.encoder_id == branch.encoder_id)
                .expect("branch names a listed encoder");
            let rule = rules.resolve(&branch.rule_id, input_spec)?;
            Ok(BranchInfo {
                branch,
                encoder_index,
                rule,
            })
        })
        .collect()
}

fn fusion_widths(encoders: &[SpecialistEncoder], branches: &[BranchInfo]) -> [usize; LEVELS] {
    std::array::from_fn(|j| branches.iter().map(|b| encoders[b.encoder_index].config.dims[j]).sum())
}

/// Assembles an ensemble over the `encoders` that some rule (or identity)
/// can feed from `input_spec`. Encoders are frozen.
pub fn build_ensemble(
    encoders: Vec<SpecialistEncoder>,
    rules: RuleRegistry,
    input_spec: BandSpec,
    task: TaskSpec,
    opts: &EnsembleOptions,
) -> Result<EnsembleModel> {
    if encoders.is_empty() {
        return Err(Error::Empty("an ensemble needs at least one encoder".into()));
    }
    for (i, e) in encoders.iter().enumerate() {
        if encoders[..i].iter().any(|o| o.encoder_id == e.encoder_id) {
            return Err(Error::DuplicateId(e.encoder_id.clone()));
        }
    }
    // Encoders no rule can feed would only hold a selection weight that
    // never trains, so they are left out.
    let encoders: Vec<SpecialistEncoder> = encoders
        .into_iter()
        .filter(|e| !rules.applicable_rules(&input_spec, &e.required_spec).is_empty())
        .map(|mut e| {
            e.frozen = true;
            e
        })
        .collect();
    let branches = resolve_branches(&encoders, &rules, &input_spec)?;
    if branches.is_empty() {
        return Err(Error::UnsupportedInput(format!(
            "unsupported input spec: no rule maps {input_spec} to any encoder"
        )));
    }
    let target = opts.target_dims.unwrap_or(encoders[0].config.dims);
    let n = encoders.len();
    let mut selection = SelectionWeights::new(n);
    selection.k = opts.k.unwrap_or(n);
    selection.warmup_epochs = opts.warmup_epochs;
    top_k(selection.weights(), selection.k)?;
    Ok(EnsembleModel {
        fusion: FusionLayer::new(fusion_widths(&encoders, &branches), target, opts.seed),
        decoder: attach_head(&task, &target, opts.seed.wrapping_add(1))?,
        normalizers: NormalizerBank::new(opts.norm_mode),
        selection,
        task,
        encoders,
        rules,
        input_spec,
        branches,
    })
}

impl EnsembleModel {
    pub fn branches(&self) -> &[BranchInfo] {
        &self.branches
    }

    pub fn len(&self) -> usize {
        self.encoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoders.is_empty()
    }

    pub fn encoder_ids(&self) -> Vec<&str> {
        self.encoders.iter().map(|e| e.encoder_id.as_str()).collect()
    }

    /// Which encoders survive top-`k` masking.
    pub fn active_encoders(&self, k: usize) -> Result<Vec<bool>> {
        self.selection.mask(k)
    }

    /// Raw (pre-normalization) pyramids of every branch whose encoder is
    /// active; `None` for masked branches. Branches run in parallel.
    pub fn branch_features(&self, images: &Tensor, active: &[bool]) -> Result<Vec<Option<FeaturePyramid>>> {
        let c = images.shape().get(1).copied().unwrap_or(0);
        if images.ndim() != 4 || c != self.input_spec.count() {
            return Err(Error::Shape(format!(
                "ensemble expects N×{}×H×W for {}, got {:?}",
                self.input_spec.count(),
                self.input_spec,
                images.shape()
            )));
        }
        self.branches
            .par_iter()
            .map(|b| {
                if !active[b.encoder_index] {
                    return Ok(None);
                }
                let x = apply_rule(images, &b.rule)?;
                self.encoders[b.encoder_index].forward(&x).map(Some)
            })
            .collect()
    }

    /// Normalizes raw branch pyramids; training calls update running stats.
    pub fn normalize_branches(
        &mut self,
        raw: &[Option<FeaturePyramid>],
        training: bool,
    ) -> Result<Vec<Option<FeaturePyramid>>> {
        let keys: Vec<String> = self.branches.iter().map(|b| b.branch.key()).collect();
        raw.iter()
            .zip(&keys)
            .map(|(p, key)| match p {
                Some(p) => self.normalizers.normalize(p, key, training).map(Some),
                None => Ok(None),
            })
            .collect()
    }

    /// Inference-mode normalization.
    pub fn normalize_branches_eval(&self, raw: &[Option<FeaturePyramid>]) -> Result<Vec<Option<FeaturePyramid>>> {
        raw.iter()
            .zip(&self.branches)
            .map(|(p, b)| match p {
                Some(p) => self.normalizers.apply(p, &b.branch.key()).map(Some),
                None => Ok(None),
            })
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams {
            w: g.leaf(self.selection.w.clone(), trainable),
            fusion: self.fusion.bind(g, trainable),
            decoder: self.decoder.bind(g, trainable),
        }
    }

    /// Selection and fusion on the graph. Masked branches enter as zero
    /// constants, so their encoders' weights receive no gradient.
    pub fn fuse_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        normalized: &[Option<FeaturePyramid>],
        batch: usize,
        in_hw: (usize, usize),
    ) -> Result<Vec<Var>> {
        if normalized.len() != self.branches.len() {
            return Err(Error::Shape(format!(
                "{} branch pyramids for {} branches",
                normalized.len(),
                self.branches.len()
            )));
        }
        let parts = (0..LEVELS)
            .map(|j| {
                self.branches
                    .iter()
                    .zip(normalized)
                    .map(|(b, p)| match p {
                        Some(p) => {
                            let x = g.constant(p.levels[j].clone());
                            g.scale_by_element(x, bound.w, b.encoder_index)
                        }
                        None => {
                            let c = self.encoders[b.encoder_index].config.dims[j];
                            g.constant(Tensor::zeros(&[batch, c, in_hw.0 / STRIDES[j], in_hw.1 / STRIDES[j]]))
                        }
                    })
                    .collect()
            })
            .collect();
        self.fusion.forward(g, &bound.fusion, parts)
    }

    pub fn head_graph(&self, g: &mut Graph, bound: &BoundParams, fused: &[Var], out_hw: (usize, usize)) -> Var {
        self.decoder.forward(g, &bound.decoder, fused, out_hw)
    }

    fn fused_tensors(&self, normalized: &[Option<FeaturePyramid>], batch: usize, hw: (usize, usize)) -> Result<(Graph, BoundParams, Vec<Var>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let fused = self.fuse_graph(&mut g, &bound, normalized, batch, hw)?;
        Ok((g, bound, fused))
    }

    /// The fused pyramid at sparsity `k`.
    pub fn forward_k(&mut self, images: &Tensor, k: usize, training: bool) -> Result<FeaturePyramid> {
        let active = self.active_encoders(k)?;
        let raw = self.branch_features(images, &active)?;
        let normalized = if training {
            self.normalize_branches(&raw, true)?
        } else {
            self.normalize_branches_eval(&raw)?
        };
        let (_, _, h, w) = images.dims4()?;
        let (g, _, fused) = self.fused_tensors(&normalized, images.shape()[0], (h, w))?;
        Ok(FeaturePyramid {
            levels: fused.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Task-head output for a batch, in inference mode at the model's `k`.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let active = self.active_encoders(self.selection.k)?;
        let raw = self.branch_features(images, &active)?;
        self.predict_from_features(&raw)
    }

    /// As [`EnsembleModel::predict`], from precomputed raw branch pyramids.
    pub fn predict_from_features(&self, raw: &[Option<FeaturePyramid>]) -> Result<Tensor> {
        let active = self.active_encoders(self.selection.k)?;
        let raw: Vec<Option<FeaturePyramid>> = raw
            .iter()
            .zip(&self.branches)
            .map(|(p, b)| p.clone().filter(|_| active[b.encoder_index]))
            .collect();
        let first = raw
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::Empty("every branch is masked".into()))?;
        let batch = first.levels[0].shape()[0];
        let hw = (first.levels[0].shape()[2] * STRIDES[0], first.levels[0].shape()[3] * STRIDES[0]);
        let normalized = self.normalize_branches_eval(&raw)?;
        let (mut g, bound, fused) = self.fused_tensors(&normalized, batch, hw)?;
        let out = self.head_graph(&mut g, &bound, &fused, hw);
        Ok(g.value(out).clone())
    }

    /// Selection weight, fusion and decoder tensors, in [`BoundParams::all`] order.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.selection.w];
        out.extend(self.fusion.params_mut());
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn trainable_digest(&self) -> String {
        let mut params = vec![&self.selection.w];
        params.extend(self.fusion.params());
        params.extend(self.decoder.params());
        digest(&params)
    }

    pub fn encoder_digests(&self) -> Vec<String> {
        self.encoders.iter().map(SpecialistEncoder::weights_digest).collect()
    }

    /// Encoders, fusion, selection weights and decoder.
    pub fn param_count(&self) -> usize {
        self.encoders.iter().map(SpecialistEncoder::param_count).sum::<usize>()
            + self.fusion.param_count()
            + self.selection.len()
            + self.decoder.param_count()
    }

    /// Input column range of every branch at each level of the fusion layer.
    pub fn branch_columns(&self) -> Vec<Vec<Range<usize>>> {
        (0..LEVELS)
            .map(|j| {
                let mut start = 0;
                self.branches
                    .iter()
                    .map(|b| {
                        let c = self.encoders[b.encoder_index].config.dims[j];
                        start += c;
                        start - c..start
                    })
                    .collect()
            })
            .collect()
    }

    /// Keeps the given encoders (ascending indices) and everything attached
    /// to their branches.
    pub(crate) fn restrict(&self, keep: &[usize]) -> Result<EnsembleModel> {
        let columns = self.branch_columns();
        let kept_branch: Vec<bool> = self.branches.iter().map(|b| keep.contains(&b.encoder_index)).collect();
        let ranges: Vec<Vec<Range<usize>>> = columns
            .iter()
            .map(|level| {
                level
                    .iter()
                    .zip(&kept_branch)
                    .filter(|(_, &k)| k)
                    .map(|(r, _)| r.clone())
                    .collect()
            })
            .collect();
        let encoders: Vec<SpecialistEncoder> = keep.iter().map(|&i| self.encoders[i].clone()).collect();
        let branches = resolve_branches(&encoders, &self.rules, &self.input_spec)?;
        if branches.is_empty() {
            return Err(Error::UnsupportedInput(format!(
                "unsupported input spec: no kept encoder accepts {}",
                self.input_spec
            )));
        }
        let mut normalizers = NormalizerBank::new(self.normalizers.mode);
        normalizers.eps = self.normalizers.eps;
        normalizers.momentum = self.normalizers.momentum;
        for b in &branches {
            if let Some(s) = self.normalizers.slot(&b.branch.key()) {
                normalizers.insert_slot(&b.branch.key(), s.to_vec())?;
            }
        }
        let w: Vec<f64> = keep.iter().map(|&i| self.selection.weights()[i]).collect();
        Ok(EnsembleModel {
            encoders,
            rules: self.rules.clone(),
            input_spec: self.input_spec.clone(),
            normalizers,
            selection: SelectionWeights {
                w: Tensor::new(vec![keep.len()], w)?,
                k: keep.len().min(self.selection.k),
                warmup_epochs: self.selection.warmup_epochs,
            },
            fusion: self.fusion.slice_columns(&ranges),
            decoder: self.decoder.clone(),
            task: self.task.clone(),
            branches,
        })
    }
}

/// Free-function form of [`EnsembleModel::forward_k`] at the model's `k`.
pub fn ensemble_forward(model: &mut EnsembleModel, images: &Tensor, training: bool) -> Result<FeaturePyramid> {
    let k = model.selection.k;
    model.forward_k(images, k, training)
}

/// Adds a frozen encoder without changing the forward output: its weight
/// starts at 1, its fusion columns at zero and its normalizer slots at the
/// neutral state. A model using every encoder keeps doing so.
pub fn extend_ensemble(model: &EnsembleModel, new_encoder: SpecialistEncoder) -> Result<EnsembleModel> {
    if model.encoders.iter().any(|e| e.encoder_id == new_encoder.encoder_id) {
        return Err(Error::DuplicateId(new_encoder.encoder_id));
    }
    let mut out = model.clone();
    let mut enc = new_encoder;
    enc.frozen = true;
    let dims = enc.config.dims;
    out.encoders.push(enc);
    let n = out.encoders.len();
    let mut w = model.selection.weights().to_vec();
    w.push(1.0);
    out.selection.w = Tensor::new(vec![n], w)?;
    if model.selection.k == model.len() {
        out.selection.k = n;
    }
    out.branches = resolve_branches(&out.encoders, &out.rules, &out.input_spec)?;
    let added: Vec<&BranchInfo> = out.branches.iter().filter(|b| b.encoder_index == n - 1).collect();
    out.fusion.append_zero_columns(std::array::from_fn(|j| added.len() * dims[j]));
    if out.normalizers.mode == NormMode::Batch {
        for b in added {
            out.normalizers
                .insert_slot(&b.branch.key(), dims.iter().map(|&c| LevelStats::neutral(c)).collect())?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceRow {
    pub encoder_id: String,
    pub variance: f64,
    pub count: usize,
}

/// Population variance of every encoder's raw deepest-level features, over
/// all of its branches and the first `n_batches` batches of `samples`.
pub fn feature_variance_report(
    model: &EnsembleModel,
    samples: &[crate::synthetic::Sample],
    input_spec: &BandSpec,
    n_batches: usize,
    batch_size: usize,
) -> Result<Vec<VarianceRow>> {
    let branches = resolve_branches(&model.encoders, &model.rules, input_spec)?;
    let mut rows = Vec::with_capacity(model.len());
    for (i, enc) in model.encoders.iter().enumerate() {
        let mine: Vec<&BranchInfo> = branches.iter().filter(|b| b.encoder_index == i).collect();
        if mine.is_empty() {
            return Err(Error::UnsupportedInput(format!(
                "unsupported input spec: {input_spec} cannot feed encoder `{}`",
                enc.encoder_id
            )));
        }
        let (mut count, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        let mut values = Vec::new();
        for chunk in samples.chunks(batch_size.max(1)).take(n_batches) {
            let refs: Vec<_> = chunk.iter().collect();
            let images = stack_images(&refs)?;
            for b in &mine {
                let f = enc.forward(&apply_rule(&images, &b.rule)?)?;
                values.extend_from_slice(f.levels[LEVELS - 1].data());
            }
        }
        // Two passes keep the result exact enough for tiny variances.
        for &v in &values {
            count += 1;
            sum += v;
        }
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        for &v in &values {
            sq += (v - mean).powi(2);
        }
        rows.push(VarianceRow {
            encoder_id: enc.encoder_id.clone(),
            variance: if count > 0 { sq / count as f64 } else { 0.0 },
            count,
        });
    }
    Ok(rows)
}

/// Dataset-level wrapper of [`feature_variance_report`] on the train split.
pub fn dataset_variance_report(
    model: &EnsembleModel,
    dataset: &Dataset,
    n_batches: usize,
    batch_size: usize,
) -> Result<Vec<VarianceRow>> {
    feature_variance_report(model, &dataset.train, &dataset.spec(), n_batches, batch_size)
}

pub fn variance_csv(rows: &[VarianceRow]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["encoder_id", "variance"]).expect("in-memory write");
    for r in rows {
        w.write_record([r.encoder_id.clone(), format!("{:.8e}", r.variance)]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn variance_svg(rows: &[VarianceRow]) -> String {
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.encoder_id.clone(), r.variance)).collect();
    crate::plot::bar_chart("Feature variance per encoder", &bars)
}
