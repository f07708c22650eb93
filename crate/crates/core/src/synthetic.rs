//! Paired multi-modal synthetic scenes and on-disk datasets built from them.
//!
//! A scene is a smooth class field rendered through fixed per-class
//! signatures. The 13 multispectral bands are split into a visible group
//! (B2, B3, B4, B8, which is everything RGB and IR-R-G can see) and an
//! exclusive group (all other bands). SAR has its own backscatter table. A
//! [`CueLayout`] decides which groups tell classes apart, so a task can be
//! made solvable from one modality only, or only from several together.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::bands::BandSpec;
use crate::container::{ArrayData, Container};
use crate::error::{create_dir, read_file, read_text, write_file, Error, Result};
use crate::metrics::Direction;
use crate::tensor::Tensor;

pub const MS_BANDS: usize = 13;
/// MS band indices visible to RGB (3, 2, 1) and IR-R-G (7, 3, 2).
pub const VISIBLE_BANDS: [usize; 4] = [1, 2, 3, 7];
pub const RGB_FROM_MS: [usize; 3] = [3, 2, 1];
pub const IRRG_FROM_MS: [usize; 3] = [7, 3, 2];
pub const MS_NOISE_STD: f64 = 0.04;
/// Equivalent number of looks of the SAR speckle.
pub const SPECKLE_LOOKS: f64 = 4.0;
const LATENT_CELL: usize = 8;
const SCENE_CLASS_BONUS: f64 = 1.2;
const HEIGHT_SCALE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Ms,
    Sar,
    Irrg,
    /// Multispectral and SAR stacked into one 15-band image.
    MsSar,
}

impl Modality {
    pub const ALL: [Modality; 5] = [Modality::Rgb, Modality::Ms, Modality::Sar, Modality::Irrg, Modality::MsSar];

    pub fn spec(self) -> BandSpec {
        match self {
            Modality::Rgb => BandSpec::rgb(),
            Modality::Ms => BandSpec::sentinel2(),
            Modality::Sar => BandSpec::sentinel1(),
            Modality::Irrg => BandSpec::irrg(),
            Modality::MsSar => BandSpec::sentinel2_sentinel1(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ms => "ms",
            Modality::Sar => "sar",
            Modality::Irrg => "irrg",
            Modality::MsSar => "ms_sar",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality `{s}` (rgb, ms, sar, irrg, ms_sar)")))
    }
}

/// Which sensor groups carry the class identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueLayout {
    /// Every group distinguishes every class.
    #[default]
    Shared,
    /// Only the exclusive MS bands differ between classes; visible bands and
    /// SAR are identical for all classes.
    MsExclusive,
    /// Class bit 0 lives in the exclusive MS bands, bit 1 in the visible
    /// bands, bit 2 in SAR; higher bits are shared by all groups.
    Split,
}

impl CueLayout {
    pub fn as_str(self) -> &'static str {
        match self {
            CueLayout::Shared => "shared",
            CueLayout::MsExclusive => "ms_exclusive",
            CueLayout::Split => "split",
        }
    }

    /// `(visible, exclusive, sar)` signature codes of class `c`.
    pub fn codes(self, c: usize) -> (usize, usize, usize) {
        match self {
            CueLayout::Shared => (c, c, c),
            CueLayout::MsExclusive => (0, c, 0),
            CueLayout::Split => {
                let high = 2 * (c >> 3);
                (((c >> 1) & 1) + high, (c & 1) + high, ((c >> 2) & 1) + high)
            }
        }
    }
}

impl FromStr for CueLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [CueLayout::Shared, CueLayout::MsExclusive, CueLayout::Split]
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown cue layout `{s}` (shared, ms_exclusive, split)")))
    }
}

fn frac(x: f64) -> f64 {
    x - x.floor()
}

/// Reflectance of band `b` for a class signature. Codes walk each band along
/// an irrational rotation so neighbouring codes stay well apart.
fn reflectance(code: usize, band: usize) -> f64 {
    let step = frac(((band + 2) as f64).sqrt() * 7.0);
    let offset = frac(band as f64 * 0.381_966);
    0.1 + 0.8 * frac(offset + code as f64 * (0.25 + 0.5 * step))
}

/// Mean multispectral signature of class `c` under `cues`.
pub fn ms_signature(cues: CueLayout, c: usize) -> [f64; MS_BANDS] {
    let (visible, exclusive, _) = cues.codes(c);
    std::array::from_fn(|b| {
        if VISIBLE_BANDS.contains(&b) {
            reflectance(visible, b)
        } else {
            reflectance(exclusive, b)
        }
    })
}

/// Mean (VV, VH) backscatter of class `c` under `cues`.
pub fn sar_signature(cues: CueLayout, c: usize) -> [f64; 2] {
    let (_, _, code) = cues.codes(c);
    let vv = 0.08 + 0.5 * frac(code as f64 * 0.618_034);
    let vh = vv * (0.2 + 0.3 * frac(0.5 + code as f64 * 0.754_878));
    [vv, vh]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Miou,
    Rmse,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Miou => "miou",
            Metric::Rmse => "rmse",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// 0 for regression.
    pub num_classes: usize,
    pub metric: Metric,
    pub direction: Direction,
}

impl TaskSpec {
    pub fn classification(num_classes: usize) -> Self {
        Self {
            kind: TaskKind::Classification,
            num_classes,
            metric: Metric::Accuracy,
            direction: Direction::HigherBetter,
        }
    }

    pub fn segmentation(num_classes: usize) -> Self {
        Self {
            kind: TaskKind::Segmentation,
            num_classes,
            metric: Metric::Miou,
            direction: Direction::HigherBetter,
        }
    }

    pub fn regression() -> Self {
        Self {
            kind: TaskKind::Regression,
            num_classes: 0,
            metric: Metric::Rmse,
            direction: Direction::LowerBetter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            TaskKind::Classification => {
                self.metric == Metric::Accuracy && self.direction == Direction::HigherBetter && self.num_classes >= 2
            }
            TaskKind::Segmentation => {
                self.metric == Metric::Miou && self.direction == Direction::HigherBetter && self.num_classes >= 2
            }
            TaskKind::Regression => {
                self.metric == Metric::Rmse && self.direction == Direction::LowerBetter && self.num_classes == 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Task(format!("inconsistent task {self:?}")))
        }
    }

    /// Number of predictor outputs.
    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::Regression => 1,
            _ => self.num_classes,
        }
    }

    /// Parses `classification:K`, `segmentation:K` or `regression`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, k) = s.split_once(':').unwrap_or((s, ""));
        let classes = || {
            k.parse::<usize>()
                .map_err(|_| Error::Task(format!("`{s}` needs a class count, e.g. `{kind}:4`")))
        };
        let task = match kind {
            "classification" => Self::classification(classes()?),
            "segmentation" => Self::segmentation(classes()?),
            "regression" if k.is_empty() => Self::regression(),
            _ => return Err(Error::Task(format!("unknown task `{s}`"))),
        };
        task.validate()?;
        Ok(task)
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TaskKind::Classification => write!(f, "classification:{}", self.num_classes),
            TaskKind::Segmentation => write!(f, "segmentation:{}", self.num_classes),
            TaskKind::Regression => f.write_str("regression"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub size: usize,
    pub num_classes: usize,
    pub cues: CueLayout,
    /// Row-major class field; also the segmentation mask.
    pub latent: Vec<usize>,
    pub scene_class: usize,
    /// `13×H×W` multispectral rendering.
    pub ms: Tensor,
    /// `2×H×W` SAR rendering.
    pub sar: Tensor,
    /// `H×W` regression target: scaled distance inside class 0 to the
    /// nearest pixel of another class.
    pub height: Tensor,
}

fn upsample(coarse: Tensor, size: usize) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(coarse);
    let r = g.resize(v, size, size);
    let out = g.value(r).clone();
    let numel = out.numel();
    out.reshape(&[numel]).expect("flat")
}

fn gather(image: &Tensor, channels: &[usize]) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    debug_assert!(channels.iter().all(|&i| i < c));
    let hw = h * w;
    let mut data = Vec::with_capacity(channels.len() * hw);
    for &ch in channels {
        data.extend_from_slice(&image.data()[ch * hw..(ch + 1) * hw]);
    }
    Tensor::new(vec![channels.len(), h, w], data).expect("sizes computed")
}

impl SyntheticScene {
    pub fn render(&self, modality: Modality) -> Tensor {
        match modality {
            Modality::Ms => self.ms.clone(),
            Modality::Sar => self.sar.clone(),
            Modality::Rgb => gather(&self.ms, &RGB_FROM_MS),
            Modality::Irrg => gather(&self.ms, &IRRG_FROM_MS),
            Modality::MsSar => {
                let mut data = self.ms.data().to_vec();
                data.extend_from_slice(self.sar.data());
                Tensor::new(vec![MS_BANDS + 2, self.size, self.size], data).expect("sizes computed")
            }
        }
    }
}

fn check_scene_args(size: usize, num_classes: usize) -> Result<()> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!("scene size must be a positive multiple of 32, got {size}")));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    Ok(())
}

/// Generates one scene. Fully determined by the arguments.
pub fn generate_scene(seed: u64, size: usize, num_classes: usize, cues: CueLayout) -> Result<SyntheticScene> {
    check_scene_args(size, num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_class = rng.random_range(0..num_classes);
    let cells = size / LATENT_CELL;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut best = vec![f64::NEG_INFINITY; size * size];
    let mut latent = vec![0usize; size * size];
    for c in 0..num_classes {
        let coarse = Tensor::from_fn(&[1, 1, cells, cells], |_| normal.sample(&mut rng));
        let field = upsample(coarse, size);
        let bonus = if c == scene_class { SCENE_CLASS_BONUS } else { 0.0 };
        for (p, v) in field.data().iter().enumerate() {
            if v + bonus > best[p] {
                best[p] = v + bonus;
                latent[p] = c;
            }
        }
    }
    render_latent(&mut rng, seed, size, num_classes, cues, latent, scene_class)
}

/// Renders a given class field. The scene class is recorded as given.
pub fn render_scene(
    seed: u64,
    size: usize,
    num_classes: usize,
    cues: CueLayout,
    latent: Vec<usize>,
    scene_class: usize,
) -> Result<SyntheticScene> {
    check_scene_args(size, num_classes)?;
    if latent.len() != size * size || latent.iter().any(|&c| c >= num_classes) || scene_class >= num_classes {
        return Err(Error::Shape(format!("latent must be {size}×{size} labels below {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_latent(&mut rng, seed, size, num_classes, cues, latent, scene_class)
}

fn render_latent(
    rng: &mut ChaCha8Rng,
    seed: u64,
    size: usize,
    num_classes: usize,
    cues: CueLayout,
    latent: Vec<usize>,
    scene_class: usize,
) -> Result<SyntheticScene> {
    let hw = size * size;
    let cells = size / LATENT_CELL;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let coarse = Tensor::from_fn(&[1, 1, cells, cells], |_| normal.sample(rng));
    let brightness = upsample(coarse, size).map(|v| 1.0 + 0.05 * v);
    let spectra: Vec<[f64; MS_BANDS]> = (0..num_classes).map(|c| ms_signature(cues, c)).collect();
    let backscatter: Vec<[f64; 2]> = (0..num_classes).map(|c| sar_signature(cues, c)).collect();

    let noise = Normal::new(0.0, MS_NOISE_STD).expect("finite std");
    let mut ms = vec![0.0; MS_BANDS * hw];
    for b in 0..MS_BANDS {
        for p in 0..hw {
            ms[b * hw + p] = spectra[latent[p]][b] * brightness.data()[p] + noise.sample(rng);
        }
    }
    let speckle = Gamma::new(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS).expect("valid gamma");
    let mut sar = vec![0.0; 2 * hw];
    for ch in 0..2 {
        for p in 0..hw {
            sar[ch * hw + p] = backscatter[latent[p]][ch] * speckle.sample(rng);
        }
    }
    let mut ms = Tensor::new(vec![MS_BANDS, size, size], ms)?;
    let mut sar = Tensor::new(vec![2, size, size], sar)?;
    ms.round_to_f32();
    sar.round_to_f32();
    let mut height = Tensor::new(
        vec![size, size],
        distance_to_other(&latent, size, 0).into_iter().map(|d| d * HEIGHT_SCALE).collect(),
    )?;
    height.round_to_f32();
    Ok(SyntheticScene {
        seed,
        size,
        num_classes,
        cues,
        latent,
        scene_class,
        ms,
        sar,
        height,
    })
}

/// Exact Euclidean distance from every `class` pixel to the nearest pixel of
/// another class (0 outside `class`). Separable lower-envelope transform.
pub fn distance_to_other(latent: &[usize], size: usize, class: usize) -> Vec<f64> {
    let far = (2 * size * size) as f64;
    let mut grid: Vec<f64> = latent.iter().map(|&c| if c == class { far } else { 0.0 }).collect();
    let mut line = vec![0.0; size];
    for x in 0..size {
        for y in 0..size {
            line[y] = grid[y * size + x];
        }
        let out = lower_envelope(&line);
        for y in 0..size {
            grid[y * size + x] = out[y];
        }
    }
    for y in 0..size {
        let out = lower_envelope(&grid[y * size..(y + 1) * size]);
        grid[y * size..(y + 1) * size].copy_from_slice(&out);
    }
    grid.into_iter().map(|d| d.min(far).sqrt()).collect()
}

/// `out[q] = min_p (q − p)² + f[p]` in linear time.
fn lower_envelope(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut out = vec![0.0; n];
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
    out
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Global index in the dataset; pairs samples across modalities.
    pub index: usize,
    pub scene_seed: u64,
    /// `C×H×W`.
    pub image: Tensor,
    pub scene_class: usize,
    pub mask: Vec<usize>,
    /// `H×W`.
    pub height: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub task: TaskSpec,
    pub modality: Modality,
    #[serde(default)]
    pub cues: CueLayout,
    pub n: usize,
    pub seed: u64,
    pub size: usize,
    /// Latent classes; defaults to the task's class count, or 4 for regression.
    pub scene_classes: usize,
    pub ratios: [f64; 3],
}

impl DatasetConfig {
    pub fn new(task: TaskSpec, modality: Modality, n: usize, seed: u64, ratios: [f64; 3]) -> Self {
        Self {
            name: format!("synthetic-{modality}-{}", task.to_string().replace(':', "")),
            task,
            modality,
            cues: CueLayout::Shared,
            n,
            seed,
            size: 32,
            scene_classes: if task.num_classes >= 2 { task.num_classes } else { 4 },
            ratios,
        }
    }

    pub fn with_cues(mut self, cues: CueLayout) -> Self {
        self.cues = cues;
        self
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.size = size;
        self
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    /// `(train, val, test)` sizes: val and test are rounded, train takes
    /// the remainder.
    pub fn split_sizes(&self) -> Result<[usize; 3]> {
        let [rt, rv, rs] = self.ratios;
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
            return Err(Error::Dataset(format!("split ratios {:?} must be non-negative and sum to 1", self.ratios)));
        }
        if self.n < 10 {
            return Err(Error::Dataset(format!("need at least 10 samples, got {}", self.n)));
        }
        let val = (self.n as f64 * rv).round() as usize;
        let test = (self.n as f64 * rs).round() as usize;
        let train = self.n.checked_sub(val + test).unwrap_or(0);
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::Dataset(format!(
                "{} samples with ratios {:?} leave an empty split",
                self.n, self.ratios
            )));
        }
        Ok([train, val, test])
    }

    fn validate(&self) -> Result<()> {
        self.task.validate()?;
        check_scene_args(self.size, self.scene_classes)?;
        if self.task.num_classes >= 2 && self.task.num_classes != self.scene_classes {
            return Err(Error::Dataset(format!(
                "task has {} classes but scenes have {}",
                self.task.num_classes, self.scene_classes
            )));
        }
        self.split_sizes().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generates every split. Scene `i` is the same under every modality for a
/// given `(seed, size, scene_classes, cues)`.
pub fn make_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let [train, val, _] = config.split_sizes()?;
    let samples = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let seed = scene_seed(config.seed, i);
            let scene = generate_scene(seed, config.size, config.scene_classes, config.cues)?;
            Ok(Sample {
                index: i,
                scene_seed: seed,
                image: scene.render(config.modality),
                scene_class: scene.scene_class,
                mask: scene.latent,
                height: scene.height,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = samples.into_iter();
    Ok(Dataset {
        config: config.clone(),
        train: it.by_ref().take(train).collect(),
        val: it.by_ref().take(val).collect(),
        test: it.collect(),
    })
}

pub const DATASET_MANIFEST: &str = "dataset.manifest";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        crate::zoo::check_version(text, DATASET_FORMAT_VERSION)?;
        let m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.message().to_string()))?;
        m.config.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        Ok(m)
    }
}

impl Sample {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push_u32("index", &[1], vec![self.index as u32]);
        c.push_u32("scene_seed", &[2], vec![self.scene_seed as u32, (self.scene_seed >> 32) as u32]);
        c.push_f32("image", self.image.shape(), self.image.data().iter().map(|&v| v as f32).collect());
        c.push_u32("scene_class", &[1], vec![self.scene_class as u32]);
        let (h, w) = (self.height.shape()[0], self.height.shape()[1]);
        c.push_u32("mask", &[h, w], self.mask.iter().map(|&v| v as u32).collect());
        c.push_f32("height", &[h, w], self.height.data().iter().map(|&v| v as f32).collect());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        fn u32s<'a>(c: &'a Container, name: &str) -> Result<(&'a [usize], &'a [u32])> {
            match c.get(name) {
                Some(a) => match &a.data {
                    ArrayData::U32(v) => Ok((&a.shape, v)),
                    ArrayData::F32(_) => Err(Error::Container(format!("`{name}` must be u32"))),
                },
                None => Err(Error::Container(format!("missing array `{name}`"))),
            }
        }
        fn f32s(c: &Container, name: &str) -> Result<Tensor> {
            match c.get(name) {
                Some(a) => match &a.data {
                    ArrayData::F32(v) => Tensor::new(a.shape.clone(), v.iter().map(|&x| f64::from(x)).collect())
                        .map_err(|e| Error::Container(e.to_string())),
                    ArrayData::U32(_) => Err(Error::Container(format!("`{name}` must be f32"))),
                },
                None => Err(Error::Container(format!("missing array `{name}`"))),
            }
        }
        let scalar = |name: &str| -> Result<u32> {
            match u32s(c, name)? {
                (_, [v]) => Ok(*v),
                _ => Err(Error::Container(format!("`{name}` must hold one value"))),
            }
        };
        let seed = match u32s(c, "scene_seed")? {
            (_, [lo, hi]) => u64::from(*lo) | (u64::from(*hi) << 32),
            _ => return Err(Error::Container("`scene_seed` must hold two words".into())),
        };
        let image = f32s(c, "image")?;
        let height = f32s(c, "height")?;
        let (mask_shape, mask) = u32s(c, "mask")?;
        if image.ndim() != 3 || height.ndim() != 2 || mask_shape != height.shape() || image.shape()[1..] != *height.shape()
        {
            return Err(Error::Container("image, mask and height shapes disagree".into()));
        }
        Ok(Sample {
            index: scalar("index")? as usize,
            scene_seed: seed,
            image,
            scene_class: scalar("scene_class")? as usize,
            mask: mask.iter().map(|&v| v as usize).collect(),
            height,
        })
    }
}

impl Dataset {
    pub fn spec(&self) -> BandSpec {
        self.config.modality.spec()
    }

    pub fn task(&self) -> TaskSpec {
        self.config.task
    }

    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `dataset.manifest` and one container per sample under
    /// `root/<split>/<index>.sample`.
    pub fn save(&self, root: &Path) -> Result<()> {
        create_dir(root)?;
        for split in SplitName::ALL {
            let dir = root.join(split.as_str());
            create_dir(&dir)?;
            for s in self.split(split) {
                write_file(&dir.join(format!("{:06}.sample", s.index)), s.to_container().to_bytes())?;
            }
        }
        let m = DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            config: self.config.clone(),
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        };
        write_file(&root.join(DATASET_MANIFEST), toml::to_string(&m).expect("serializes"))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let m = DatasetManifest::parse(&read_text(&root.join(DATASET_MANIFEST))?)?;
        let expected = m.config.split_sizes()?;
        let mut splits: Vec<Vec<Sample>> = Vec::new();
        let mut first = 0;
        for (split, count) in SplitName::ALL.into_iter().zip([m.train, m.val, m.test]) {
            if count != expected[splits.len()] {
                return Err(Error::Manifest(format!("{} split lists {count} samples", split.as_str())));
            }
            let dir = root.join(split.as_str());
            let samples = (first..first + count)
                .into_par_iter()
                .map(|i| {
                    let path = dir.join(format!("{i:06}.sample"));
                    let sample = Sample::from_container(&Container::from_bytes(&read_file(&path)?)?)?;
                    if sample.index != i {
                        return Err(Error::Container(format!("{} holds index {}", path.display(), sample.index)));
                    }
                    Ok(sample)
                })
                .collect::<Result<Vec<_>>>()?;
            first += count;
            splits.push(samples);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Dataset {
            config: m.config,
            train,
            val,
            test,
        })
    }
}
