//! Parameterized layers, the parameter-binding convention, and Adam.
//!
//! A module lists its tensors through [`Module::params`] and consumes the
//! matching graph leaves, in the same order, through a [`ParamCursor`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::tensor::Tensor;

pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Leaves for every parameter, in [`Module::params`] order.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }
}

/// SHA-256 over the `f32` little-endian bytes of a parameter list.
pub fn digest(params: &[&Tensor]) -> String {
    let mut hasher = Sha256::new();
    for t in params {
        for d in t.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            hasher.update((*v as f32).to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub struct ParamCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next_var(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn finished(&self) -> bool {
        self.pos == self.vars.len()
    }
}

pub(crate) fn normal_init(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut t = Tensor::from_fn(shape, |_| normal.sample(rng));
    t.round_to_f32();
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin / groups) * kernel * kernel;
        Self {
            weight: normal_init(&[cout, cin / groups, kernel, kernel], (1.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding,
            groups,
        }
    }

    pub fn pointwise(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(cin, cout, 1, 1, 0, 1, rng)
    }

    /// A 1x1 conv with all-zero weight and bias.
    pub fn zeroed_pointwise(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, 1, 1]),
            bias: Tensor::zeros(&[cout]),
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, p: &mut ParamCursor<'_>, x: Var) -> Var {
        let w = p.next_var();
        let b = p.next_var();
        g.conv2d(
            x,
            w,
            b,
            ConvSpec {
                stride: self.stride,
                padding: self.padding,
                groups: self.groups,
            },
        )
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: normal_init(&[cout, cin], (1.0 / cin as f64).sqrt(), rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut ParamCursor<'_>, x: Var) -> Var {
        let w = p.next_var();
        let b = p.next_var();
        g.linear(x, w, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Adam with bias correction. Updated parameters are snapped to the `f32`
/// grid so they serialize losslessly.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p.data_mut()[i] -= update;
            }
            p.round_to_f32();
        }
    }
}

pub(crate) fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
