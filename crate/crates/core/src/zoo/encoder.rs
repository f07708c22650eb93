use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NormAxis, Var};
use crate::bands::BandSpec;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, ParamCursor};
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;
pub const STEM_STRIDE: usize = 4;
/// Output stride of each pyramid level.
pub const STRIDES: [usize; LEVELS] = [4, 8, 16, 32];
const BLOCK_EXPANSION: usize = 4;
const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depths: [usize; LEVELS],
    pub dims: [usize; LEVELS],
    pub stem_stride: usize,
    pub kernel_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depths: [1, 1, 2, 1],
            dims: [8, 16, 32, 64],
            stem_stride: STEM_STRIDE,
            kernel_size: 7,
        }
    }
}

impl EncoderConfig {
    /// Full-size backbone widths; valid but far too slow for the test suite.
    pub fn atto() -> Self {
        Self {
            depths: [2, 2, 6, 2],
            dims: [40, 80, 160, 320],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.contains(&0) {
            return Err(Error::Config(format!("depths must be positive, got {:?}", self.depths)));
        }
        if self.dims[0] == 0 || self.dims.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "dims must be positive and strictly increasing, got {:?}",
                self.dims
            )));
        }
        if self.stem_stride != STEM_STRIDE {
            return Err(Error::Config(format!(
                "stem stride must be {STEM_STRIDE} so levels sit at strides {STRIDES:?}"
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        Ok(())
    }
}

/// The `n = 4` maps an encoder emits, level `j` at stride `STRIDES[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|t| t.shape()[1]).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Sample `i` of every level, keeping a batch axis of one.
    pub fn sample(&self, i: usize) -> FeaturePyramid {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|t| {
                    let s = t.index_outer(i);
                    let mut shape = vec![1];
                    shape.extend_from_slice(s.shape());
                    s.reshape(&shape).expect("same numel")
                })
                .collect(),
        }
    }

    /// Concatenates single-sample pyramids along the batch axis.
    pub fn batch(items: &[&FeaturePyramid]) -> Result<FeaturePyramid> {
        let levels = (0..LEVELS)
            .map(|j| {
                let per: Vec<Tensor> = items
                    .iter()
                    .map(|p| p.levels[j].index_outer(0))
                    .collect();
                Tensor::stack(&per.iter().collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels })
    }
}

/// Depthwise conv, channel standardization, ×4 pointwise expansion, GELU,
/// pointwise projection, residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub dw: Conv2d,
    pub expand: Conv2d,
    pub project: Conv2d,
}

impl Block {
    fn new(dim: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dw: Conv2d::new(dim, dim, kernel, 1, kernel / 2, dim, rng),
            expand: Conv2d::pointwise(dim, dim * BLOCK_EXPANSION, rng),
            project: Conv2d::pointwise(dim * BLOCK_EXPANSION, dim, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &mut ParamCursor<'_>, x: Var) -> Var {
        let y = self.dw.forward(g, p, x);
        let (y, _) = g.standardize(y, NormAxis::Channel, NORM_EPS);
        let y = self.expand.forward(g, p, y);
        let y = g.gelu(y);
        let y = self.project.forward(g, p, y);
        g.add(x, y)
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        [("dw", &self.dw), ("expand", &self.expand), ("project", &self.project)]
            .into_iter()
            .flat_map(|(n, c)| {
                [
                    (format!("{prefix}.{n}.weight"), &c.weight),
                    (format!("{prefix}.{n}.bias"), &c.bias),
                ]
            })
            .collect()
    }
}

/// Patchify stem, then four stages of residual blocks separated by 2×2
/// stride-2 downsampling convs.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidEncoder {
    pub stem: Conv2d,
    pub downsample: Vec<Conv2d>,
    pub stages: Vec<Vec<Block>>,
}

impl PyramidEncoder {
    pub fn new(config: &EncoderConfig, in_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.stem_stride;
        let stem = Conv2d::new(in_channels, config.dims[0], s, s, 0, 1, &mut rng);
        let mut downsample = Vec::new();
        let mut stages = Vec::new();
        for j in 0..LEVELS {
            if j > 0 {
                downsample.push(Conv2d::new(config.dims[j - 1], config.dims[j], 2, 2, 0, 1, &mut rng));
            }
            stages.push(
                (0..config.depths[j])
                    .map(|_| Block::new(config.dims[j], config.kernel_size, &mut rng))
                    .collect(),
            );
        }
        Ok(Self {
            stem,
            downsample,
            stages,
        })
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Vec<Var> {
        let mut p = ParamCursor::new(vars);
        let mut h = self.stem.forward(g, &mut p, x);
        let mut levels = Vec::with_capacity(LEVELS);
        for (j, stage) in self.stages.iter().enumerate() {
            if j > 0 {
                h = self.downsample[j - 1].forward(g, &mut p, h);
            }
            for block in stage {
                h = block.forward(g, &mut p, h);
            }
            levels.push(h);
        }
        debug_assert!(p.finished());
        levels
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("stem.weight".to_string(), &self.stem.weight),
            ("stem.bias".to_string(), &self.stem.bias),
        ];
        for (j, stage) in self.stages.iter().enumerate() {
            if j > 0 {
                let ds = &self.downsample[j - 1];
                out.push((format!("downsample.{j}.weight"), &ds.weight));
                out.push((format!("downsample.{j}.bias"), &ds.bias));
            }
            for (b, block) in stage.iter().enumerate() {
                out.extend(block.named_params(&format!("stages.{j}.{b}")));
            }
        }
        out
    }
}

impl Module for PyramidEncoder {
    fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.stem.params_mut();
        let mut ds = self.downsample.iter_mut();
        for (j, stage) in self.stages.iter_mut().enumerate() {
            if j > 0 {
                out.extend(ds.next().expect("one downsample per later stage").params_mut());
            }
            for block in stage {
                out.extend(block.dw.params_mut());
                out.extend(block.expand.params_mut());
                out.extend(block.project.params_mut());
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_name: String,
    pub task_kind: String,
    pub modality: String,
    pub n_train_samples: usize,
    pub final_val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecialistEncoder {
    pub encoder_id: String,
    pub config: EncoderConfig,
    pub required_spec: BandSpec,
    pub net: PyramidEncoder,
    pub frozen: bool,
    pub provenance: Provenance,
}

pub(crate) fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

/// Builds an encoder whose weights are fully determined by `(config, seed)`.
pub fn build_encoder(
    encoder_id: &str,
    config: &EncoderConfig,
    required_spec: BandSpec,
    seed: u64,
) -> Result<SpecialistEncoder> {
    if !valid_id(encoder_id) {
        return Err(Error::Config(format!(
            "encoder id `{encoder_id}` must be non-empty [A-Za-z0-9_.-]"
        )));
    }
    let net = PyramidEncoder::new(config, required_spec.count(), seed)?;
    Ok(SpecialistEncoder {
        encoder_id: encoder_id.to_string(),
        config: config.clone(),
        required_spec,
        net,
        frozen: false,
        provenance: Provenance::default(),
    })
}

impl SpecialistEncoder {
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(Error::Shape(format!("encoder input must be N×C×H×W, got {shape:?}")));
        };
        if c != self.required_spec.count() {
            return Err(Error::Shape(format!(
                "encoder `{}` expects {} channels, got {c}",
                self.encoder_id,
                self.required_spec.count()
            )));
        }
        let m = STRIDES[LEVELS - 1];
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("spatial size {h}×{w} is not divisible by {m}")));
        }
        Ok(())
    }

    /// Forward on an existing graph. Parameters enter as leaves that require
    /// gradients only when `trainable` is set and the encoder is not frozen.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_input(g.value(x).shape())?;
        let vars = self.net.bind(g, trainable && !self.frozen);
        let levels = self.net.forward(g, &vars, x);
        Ok((levels, vars))
    }

    /// Gradient-free forward.
    pub fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let (levels, _) = self.forward_graph(&mut g, x, false)?;
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn weights_digest(&self) -> String {
        crate::nn::digest(&self.net.params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb_encoder(seed: u64) -> SpecialistEncoder {
        build_encoder("rgb", &EncoderConfig::default(), BandSpec::rgb(), seed).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let enc = rgb_encoder(0);
        let x = Tensor::from_fn(&[2, 3, 64, 64], |i| ((i % 17) as f64) / 17.0);
        let p = enc.forward(&x).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 8, 16, 16], vec![2, 16, 8, 8], vec![2, 32, 4, 4], vec![2, 64, 2, 2]]);
    }

    #[test]
    fn zero_input_is_finite() {
        let enc = rgb_encoder(1);
        let p = enc.forward(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(p.levels.iter().all(Tensor::is_finite));
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let enc = rgb_encoder(0);
        assert!(enc.forward(&Tensor::zeros(&[1, 4, 32, 32])).is_err());
        assert!(enc.forward(&Tensor::zeros(&[1, 3, 48, 32])).is_err());
        let cfg = EncoderConfig {
            dims: [8, 8, 8, 8],
            ..EncoderConfig::default()
        };
        assert!(build_encoder("x", &cfg, BandSpec::rgb(), 0).is_err());
        assert!(build_encoder("../x", &EncoderConfig::default(), BandSpec::rgb(), 0).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(rgb_encoder(5).net, rgb_encoder(5).net);
        assert_ne!(rgb_encoder(5).net, rgb_encoder(6).net);
    }

    /// Parameter count from the architecture description alone.
    fn shape_walk_count(cfg: &EncoderConfig, cin: usize) -> usize {
        let conv = |ci: usize, co: usize, k: usize, groups: usize| co * (ci / groups) * k * k + co;
        let mut total = conv(cin, cfg.dims[0], cfg.stem_stride, 1);
        for j in 0..4 {
            if j > 0 {
                total += conv(cfg.dims[j - 1], cfg.dims[j], 2, 1);
            }
            let d = cfg.dims[j];
            let block = conv(d, d, cfg.kernel_size, d) + conv(d, 4 * d, 1, 1) + conv(4 * d, d, 1, 1);
            total += cfg.depths[j] * block;
        }
        total
    }

    #[test]
    fn param_count_matches_shape_walk() {
        let cfg = EncoderConfig::default();
        let enc = rgb_encoder(0);
        assert_eq!(enc.param_count(), shape_walk_count(&cfg, 3));
        assert_eq!(enc.param_count(), rgb_encoder(9).param_count());
        let wide = EncoderConfig {
            dims: [16, 32, 64, 128],
            ..cfg.clone()
        };
        let big = build_encoder("w", &wide, BandSpec::rgb(), 0).unwrap();
        assert!(big.param_count() > enc.param_count());
        assert_eq!(big.param_count(), shape_walk_count(&wide, 3));
        let atto = build_encoder("a", &EncoderConfig::atto(), BandSpec::rgb(), 0).unwrap();
        assert_eq!(atto.param_count(), shape_walk_count(&EncoderConfig::atto(), 3));
    }

    #[test]
    fn named_and_mutable_params_align() {
        let mut enc = rgb_encoder(0);
        let shapes: Vec<Vec<usize>> = enc.net.params().iter().map(|t| t.shape().to_vec()).collect();
        let mut_shapes: Vec<Vec<usize>> = enc.net.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = EncoderConfig {
            depths: [1, 1, 1, 1],
            dims: [4, 6, 8, 10],
            ..EncoderConfig::default()
        };
        let enc = build_encoder("p", &cfg, BandSpec::sentinel1(), 3).unwrap();
        let x = Tensor::from_fn(&[1, 2, 32, 32], |i| ((i * 7919 % 101) as f64 / 101.0) - 0.5);
        let probes: Vec<Tensor> = {
            let p = enc.forward(&x).unwrap();
            p.levels
                .iter()
                .map(|t| Tensor::from_fn(t.shape(), |i| ((i * 31 % 13) as f64 - 6.0) / 13.0))
                .collect()
        };
        let loss = |g: &mut Graph, xv: Var| {
            let (levels, _) = enc.forward_graph(g, xv, false).unwrap();
            let mut total = g.weighted_sum(levels[0], &probes[0]);
            for j in 1..LEVELS {
                let part = g.weighted_sum(levels[j], &probes[j]);
                total = g.add(total, part);
            }
            total
        };
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let out = loss(&mut g, xv);
        g.backward(out);
        let grad = g.grad_or_zeros(xv);
        let h = 1e-4;
        // A 2-channel 8x8 window of input positions.
        let positions =
            (0..2).flat_map(|c| (0..8).flat_map(move |y| (0..8).map(move |xx| c * 1024 + (y + 3) * 32 + xx + 5)));
        for i in positions {
            let eval = |d: f64| {
                let mut t = x.clone();
                t.data_mut()[i] += d;
                let mut g = Graph::new();
                let xv = g.constant(t);
                let out = loss(&mut g, xv);
                g.value(out).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grad.data()[i];
            assert!(
                (analytic - numeric).abs() <= 1e-3 * numeric.abs().max(1e-3),
                "pos {i}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn frozen_forward_leaves_weights_untouched() {
        let mut enc = rgb_encoder(2);
        enc.frozen = true;
        let before = enc.weights_digest();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 3, 32, 32], 0.3), true);
        let (levels, vars) = enc.forward_graph(&mut g, x, true).unwrap();
        let probe = Tensor::full(g.value(levels[3]).shape(), 1.0);
        let out = g.weighted_sum(levels[3], &probe);
        g.backward(out);
        assert!(vars.iter().all(|v| g.grad(*v).is_none()));
        assert!(g.grad(x).is_some());
        assert_eq!(before, enc.weights_digest());
    }
}
