//! A small reverse-mode tape over NCHW tensors.
//!
//! Every forward pass builds a fresh [`Graph`]. Parameters enter as leaves;
//! leaves created with `requires_grad = false` (frozen encoders, inputs) are
//! never differentiated, and nothing downstream of only such leaves is either.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    Add(Var, Var),
    ScaleByElement {
        x: Var,
        s: Var,
        idx: usize,
    },
    Gelu(Var),
    Concat(Vec<Var>),
    /// Non-parametric standardization; `inv_std` per group, normalized output
    /// is the node value itself.
    Standardize {
        x: Var,
        axis: NormAxis,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
    Resize {
        x: Var,
        rows: Vec<Interp>,
        cols: Vec<Interp>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

/// Statistics grouping for [`Graph::standardize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// One group per channel, over batch and spatial positions.
    Batch,
    /// One group per (sample, position), over channels.
    Channel,
}

#[derive(Clone, Copy, Debug)]
struct Interp {
    i0: usize,
    i1: usize,
    frac: f64,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), spec);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, rg, Op::Conv2d { x, w, b, spec })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add on mismatched shapes");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape checked");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Add(a, b))
    }

    /// `s[idx] * x` for a vector-valued `s`.
    pub fn scale_by_element(&mut self, x: Var, s: Var, idx: usize) -> Var {
        let factor = self.value(s).data()[idx];
        let out = self.value(x).map(|v| factor * v);
        let rg = self.rg(x) || self.rg(s);
        self.push(out, rg, Op::ScaleByElement { x, s, idx })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, rg, Op::Gelu(x))
    }

    /// Channel concatenation of 4-d tensors sharing batch and spatial size.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4().expect("concat expects 4-d");
        let total_c: usize = parts
            .iter()
            .map(|p| self.value(*p).shape()[1])
            .sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let (pn, c, ph, pw) = t.dims4().expect("concat expects 4-d");
                assert_eq!((pn, ph, pw), (n, h, w), "concat on mismatched shapes");
                data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(vec![n, total_c, h, w], data).expect("sizes computed");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, rg, Op::Concat(parts.to_vec()))
    }

    /// Zero-mean, unit-variance standardization without any affine
    /// parameters. Returns the output and the per-group (mean, biased var).
    pub fn standardize(&mut self, x: Var, axis: NormAxis, eps: f64) -> (Var, Vec<(f64, f64)>) {
        let (out, stats, inv_std) = standardize_forward(self.value(x), axis, eps);
        let rg = self.rg(x);
        let v = self.push(out, rg, Op::Standardize { x, axis, inv_std });
        (v, stats)
    }

    /// `(x - shift[c]) * scale[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, shift: &[f64], scale: &[f64]) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4().expect("affine expects 4-d");
        assert_eq!(shift.len(), c);
        let hw = h * w;
        let mut out = t.clone();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for v in &mut out.data_mut()[off..off + hw] {
                    *v = (*v - shift[ch]) * scale[ch];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            rg,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
        )
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4().expect("resize expects 4-d");
        let rows = interp_table(h, out_h);
        let cols = interp_table(w, out_w);
        let mut out = vec![0.0; n * c * out_h * out_w];
        for nc in 0..n * c {
            let src = &t.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * out_h * out_w..(nc + 1) * out_h * out_w];
            for (oy, ry) in rows.iter().enumerate() {
                for (ox, rx) in cols.iter().enumerate() {
                    let top = src[ry.i0 * w + rx.i0] * (1.0 - rx.frac) + src[ry.i0 * w + rx.i1] * rx.frac;
                    let bot = src[ry.i1 * w + rx.i0] * (1.0 - rx.frac) + src[ry.i1 * w + rx.i1] * rx.frac;
                    dst[oy * out_w + ox] = top * (1.0 - ry.frac) + bot * ry.frac;
                }
            }
        }
        let out = Tensor::new(vec![n, c, out_h, out_w], out).expect("sizes computed");
        let rg = self.rg(x);
        self.push(out, rg, Op::Resize { x, rows, cols })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4().expect("pool expects 4-d");
        let hw = h * w;
        let data = (0..n * c)
            .map(|i| t.data()[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data).expect("sizes computed");
        let rg = self.rg(x);
        self.push(out, rg, Op::GlobalAvgPool(x))
    }

    /// `x · wᵀ + b` for `x: n×in`, `w: out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, cin) = (tx.shape()[0], tx.shape()[1]);
        let cout = tw.shape()[0];
        assert_eq!(tw.shape()[1], cin, "linear width mismatch");
        let mut out = vec![0.0; n * cout];
        for i in 0..n {
            let row = &tx.data()[i * cin..(i + 1) * cin];
            for o in 0..cout {
                let wr = &tw.data()[o * cin..(o + 1) * cin];
                out[i * cout + o] = tb.data()[o] + dot(row, wr);
            }
        }
        let out = Tensor::new(vec![n, cout], out).expect("sizes computed");
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, rg, Op::Linear { x, w, b })
    }

    /// Mean cross-entropy over every position. `logits` is `n×k` or
    /// `n×k×h×w`; `targets` lists one class per sample or per pixel.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = self.value(logits);
        let (n, k) = (t.shape()[0], t.shape()[1]);
        let hw: usize = t.shape()[2..].iter().product();
        assert_eq!(targets.len(), n * hw, "one target per position");
        let mut probs = vec![0.0; t.numel()];
        let mut loss = 0.0;
        for b in 0..n {
            for p in 0..hw {
                let at = |c: usize| (b * k + c) * hw + p;
                let max = (0..k).map(|c| t.data()[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..k).map(|c| (t.data()[at(c)] - max).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = (t.data()[at(c)] - max).exp() / denom;
                }
                let target = targets[b * hw + p];
                loss -= (t.data()[at(target)] - max) - denom.ln();
            }
        }
        let m = (n * hw) as f64;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / m),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse on mismatched shapes");
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.numel() as f64;
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(loss),
            rg,
            Op::Mse {
                pred,
                target: target.clone(),
            },
        )
    }

    /// `Σ x ⊙ weights`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Var {
        let v = dot(self.value(x).data(), weights.data());
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(v),
            rg,
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
        )
    }

    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0).reshape(self.value(loss).shape()).unwrap());
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
        }
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, gout: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (gx, gw, gb) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    *spec,
                    self.rg(*x),
                    self.rg(*w) || self.rg(*b),
                );
                if let Some(gx) = gx {
                    self.accumulate(*x, gx);
                }
                if let Some((gw, gb)) = gw.zip(gb) {
                    self.accumulate(*w, gw);
                    self.accumulate(*b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, gout.clone());
                self.accumulate(*b, gout.clone());
            }
            Op::ScaleByElement { x, s, idx } => {
                let factor = self.value(*s).data()[*idx];
                if self.rg(*s) {
                    let mut gs = Tensor::zeros(self.value(*s).shape());
                    gs.data_mut()[*idx] = dot(self.value(*x).data(), gout.data());
                    self.accumulate(*s, gs);
                }
                self.accumulate(*x, gout.map(|g| g * factor));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&v, &g)| g * gelu_grad(v))
                    .collect();
                let gx = Tensor::new(xv.shape().to_vec(), data).unwrap();
                self.accumulate(*x, gx);
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = gout.dims4().unwrap();
                let hw = h * w;
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    if self.rg(*p) {
                        let mut data = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * total_c + offset) * hw;
                            data.extend_from_slice(&gout.data()[start..start + c * hw]);
                        }
                        self.accumulate(*p, Tensor::new(vec![n, c, h, w], data).unwrap());
                    }
                    offset += c;
                }
            }
            Op::Standardize { x, axis, inv_std } => {
                let xhat = &self.nodes[i].value;
                let gx = standardize_backward(xhat, gout, *axis, inv_std);
                self.accumulate(*x, gx);
            }
            Op::ChannelAffine { x, scale } => {
                let (n, c, h, w) = gout.dims4().unwrap();
                let hw = h * w;
                let mut gx = gout.clone();
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for v in &mut gx.data_mut()[off..off + hw] {
                            *v *= scale[ch];
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Resize { x, rows, cols } => {
                let (n, c, h, w) = self.value(*x).dims4().unwrap();
                let (out_h, out_w) = (rows.len(), cols.len());
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    let src = &gout.data()[nc * out_h * out_w..(nc + 1) * out_h * out_w];
                    let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
                    for (oy, ry) in rows.iter().enumerate() {
                        for (ox, rx) in cols.iter().enumerate() {
                            let g = src[oy * out_w + ox];
                            let (top, bot) = (g * (1.0 - ry.frac), g * ry.frac);
                            dst[ry.i0 * w + rx.i0] += top * (1.0 - rx.frac);
                            dst[ry.i0 * w + rx.i1] += top * rx.frac;
                            dst[ry.i1 * w + rx.i0] += bot * (1.0 - rx.frac);
                            dst[ry.i1 * w + rx.i1] += bot * rx.frac;
                        }
                    }
                }
                self.accumulate(*x, Tensor::new(vec![n, c, h, w], gx).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4().unwrap();
                let hw = h * w;
                let mut gx = Vec::with_capacity(n * c * hw);
                for &g in gout.data() {
                    gx.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                self.accumulate(*x, Tensor::new(vec![n, c, h, w], gx).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x).clone(), self.value(*w).clone());
                let (n, cin) = (tx.shape()[0], tx.shape()[1]);
                let cout = tw.shape()[0];
                let g = gout.data();
                if self.rg(*w) || self.rg(*b) {
                    let mut gw = vec![0.0; cout * cin];
                    let mut gb = vec![0.0; cout];
                    for s in 0..n {
                        let row = &tx.data()[s * cin..(s + 1) * cin];
                        for o in 0..cout {
                            let go = g[s * cout + o];
                            gb[o] += go;
                            axpy(go, row, &mut gw[o * cin..(o + 1) * cin]);
                        }
                    }
                    let gw = Tensor::new(vec![cout, cin], gw).unwrap();
                    self.accumulate(*w, gw);
                    self.accumulate(*b, Tensor::new(vec![cout], gb).unwrap());
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * cin];
                    for s in 0..n {
                        for o in 0..cout {
                            let go = g[s * cout + o];
                            axpy(go, &tw.data()[o * cin..(o + 1) * cin], &mut gx[s * cin..(s + 1) * cin]);
                        }
                    }
                    self.accumulate(*x, Tensor::new(vec![n, cin], gx).unwrap());
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let t = self.value(*logits);
                let (n, k) = (t.shape()[0], t.shape()[1]);
                let hw: usize = t.shape()[2..].iter().product();
                let scale = gout.data()[0] / (n * hw) as f64;
                let mut g = probs.clone();
                for b in 0..n {
                    for p in 0..hw {
                        g[(b * k + targets[b * hw + p]) * hw + p] -= 1.0;
                    }
                }
                for v in &mut g {
                    *v *= scale;
                }
                let shape = t.shape().to_vec();
                self.accumulate(*logits, Tensor::new(shape, g).unwrap());
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let scale = 2.0 * gout.data()[0] / p.numel() as f64;
                let data = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                let g = Tensor::new(p.shape().to_vec(), data).unwrap();
                self.accumulate(*pred, g);
            }
            Op::WeightedSum { x, weights } => {
                let g = gout.data()[0];
                self.accumulate(*x, weights.map(|v| v * g));
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn interp_table(input: usize, output: usize) -> Vec<Interp> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Interp {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

/// Output positions `o` in `[lo, hi)` whose input coordinate
/// `o * stride + k - pad` lands inside `[0, size)`.
fn valid_range(size: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Tensor {
    let (n, cin, h, wd) = x.dims4().expect("conv input must be 4-d");
    let (cout, cin_g, kh, kw) = w.dims4().expect("conv weight must be 4-d");
    let g = spec.groups;
    assert_eq!(cin_g * g, cin, "conv input channels {cin} vs weight {cin_g}x{g}");
    assert_eq!(cout % g, 0);
    let cout_g = cout / g;
    let (s, p) = (spec.stride, spec.padding);
    let oh = conv_out_size(h, kh, s, p);
    let ow = conv_out_size(wd, kw, s, p);
    let mut out = vec![0.0; n * cout * oh * ow];
    let xd = x.data();
    let wdata = w.data();
    for bi in 0..n {
        for oc in 0..cout {
            let grp = oc / cout_g;
            let dst = &mut out[(bi * cout + oc) * oh * ow..(bi * cout + oc + 1) * oh * ow];
            dst.fill(b.data()[oc]);
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let src = &xd[(bi * cin + ic) * h * wd..(bi * cin + ic + 1) * h * wd];
                if kh == 1 && kw == 1 && s == 1 && p == 0 {
                    axpy(wdata[oc * cin_g + icg], src, dst);
                    continue;
                }
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(h, oh, ky, s, p);
                    for kx in 0..kw {
                        let wv = wdata[((oc * cin_g + icg) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(wd, ow, kx, s, p);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let row = &src[iy * wd..(iy + 1) * wd];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                drow[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).expect("sizes computed")
}

type ConvGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    spec: ConvSpec,
    need_x: bool,
    need_w: bool,
) -> ConvGrads {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, cin_g, kh, kw) = w.dims4().unwrap();
    let cout_g = cout / spec.groups;
    let (s, p) = (spec.stride, spec.padding);
    let (_, _, oh, ow) = gout.dims4().unwrap();
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0; w.numel()]);
    let mut gb = need_w.then(|| vec![0.0; cout]);
    let xd = x.data();
    let wdata = w.data();
    for bi in 0..n {
        for oc in 0..cout {
            let grp = oc / cout_g;
            let go = &gout.data()[(bi * cout + oc) * oh * ow..(bi * cout + oc + 1) * oh * ow];
            if let Some(gb) = gb.as_mut() {
                gb[oc] += go.iter().sum::<f64>();
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xoff = (bi * cin + ic) * h * wd;
                let src = &xd[xoff..xoff + h * wd];
                if kh == 1 && kw == 1 && s == 1 && p == 0 {
                    let widx = oc * cin_g + icg;
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += dot(go, src);
                    }
                    if let Some(gx) = gx.as_mut() {
                        axpy(wdata[widx], go, &mut gx[xoff..xoff + h * wd]);
                    }
                    continue;
                }
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(h, oh, ky, s, p);
                    for kx in 0..kw {
                        let widx = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                        let wv = wdata[widx];
                        let (ox0, ox1) = valid_range(wd, ow, kx, s, p);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            for ox in ox0..ox1 {
                                let ix = ox * s + kx - p;
                                let g = go[oy * ow + ox];
                                acc += g * src[iy * wd + ix];
                                if let Some(gx) = gx.as_mut() {
                                    gx[xoff + iy * wd + ix] += wv * g;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        gw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
        gb.map(|d| Tensor::new(vec![cout], d).unwrap()),
    )
}

/// Element offsets of each standardization group.
fn norm_groups(shape: &[usize], axis: NormAxis) -> Vec<Vec<usize>> {
    let (n, c, hw) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    match axis {
        NormAxis::Batch => (0..c)
            .map(|ch| {
                (0..n)
                    .flat_map(|b| ((b * c + ch) * hw..(b * c + ch + 1) * hw).collect::<Vec<_>>())
                    .collect()
            })
            .collect(),
        NormAxis::Channel => (0..n)
            .flat_map(|b| (0..hw).map(move |p| (0..c).map(|ch| (b * c + ch) * hw + p).collect()))
            .collect(),
    }
}

type StandardizeOut = (Tensor, Vec<(f64, f64)>, Vec<f64>);

fn standardize_forward(x: &Tensor, axis: NormAxis, eps: f64) -> StandardizeOut {
    let mut out = x.clone();
    let groups = norm_groups(x.shape(), axis);
    let mut stats = Vec::with_capacity(groups.len());
    let mut inv = Vec::with_capacity(groups.len());
    for idx in &groups {
        let m = idx.len() as f64;
        let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / m;
        let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / m;
        let inv_std = 1.0 / (var + eps).sqrt();
        for &i in idx {
            out.data_mut()[i] = (x.data()[i] - mean) * inv_std;
        }
        stats.push((mean, var));
        inv.push(inv_std);
    }
    (out, stats, inv)
}

/// Graph-free standardization; returns the output and per-group (mean, biased var).
pub(crate) fn standardize_values(x: &Tensor, axis: NormAxis, eps: f64) -> (Tensor, Vec<(f64, f64)>) {
    let (out, stats, _) = standardize_forward(x, axis, eps);
    (out, stats)
}

fn standardize_backward(xhat: &Tensor, gout: &Tensor, axis: NormAxis, inv_std: &[f64]) -> Tensor {
    let mut gx = Tensor::zeros(xhat.shape());
    for (idx, &inv) in norm_groups(xhat.shape(), axis).iter().zip(inv_std) {
        let m = idx.len() as f64;
        let sum_g: f64 = idx.iter().map(|&i| gout.data()[i]).sum();
        let sum_gx: f64 = idx.iter().map(|&i| gout.data()[i] * xhat.data()[i]).sum();
        for &i in idx {
            gx.data_mut()[i] = inv * (gout.data()[i] - sum_g / m - xhat.data()[i] * sum_gx / m);
        }
    }
    gx
}
