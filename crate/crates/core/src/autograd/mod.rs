//! Tape-based reverse-mode differentiation over single-sample tensors.
//!
//! A [`Graph`] records every op as it runs. [`Graph::backward`] walks the
//! tape in reverse and returns a [`Gradients`] table. Graphs are cheap and
//! meant to be built once per sample; batch gradients are summed outside.

pub mod kernels;

use std::collections::HashMap;

use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use kernels::{ConvGeom, DeformGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Deform {
        x: Var,
        offset: Var,
        w: Var,
        b: Var,
        k: usize,
        pad: usize,
        gamma: f64,
    },
    AdaptivePool(Var),
    Upsample(Var),
    ReflectPad(Var, usize),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    StackTime(Vec<Var>),
    Reshape(Var),
    Softmax(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen_prefixes: Vec<String>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
            frozen_prefixes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph that tracks no gradients; used for inference and selection passes.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Parameters whose name starts with `prefix` enter as constants.
    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (inputs under gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v`'s value cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let name = store.name(id);
        let trainable = !self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.numel(), vb.numel(), "add: {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.numel(), vb.numel(), "sub: {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.numel(), vb.numel(), "mul: {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// `w · flatten(x) + b` with `w` shaped `out × in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (out, inp) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.numel(), inp, "linear: input {:?} vs weight {:?}", vx.shape(), vw.shape());
        let mut y = vb.data().to_vec();
        kernels::gemm_nt(vx.data(), vw.data(), &mut y, 1, inp, out);
        let t = Tensor::new(&[out], y);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(t, Op::Linear { x, w, b }, rg)
    }

    /// 2-D convolution, stride 1, zero padding. `x`: `c × h × w`,
    /// `w`: `c_out × c × k × k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d expects c×h×w input, got {:?}", xs);
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch {:?} vs {:?}", xs, ws);
        let geom = ConvGeom {
            c_in: xs[0],
            t: 1,
            h: xs[1],
            w: xs[2],
            c_out: ws[0],
            kt: 1,
            k: ws[2],
            pad_t: 0,
            pad,
        };
        let out = self.conv_forward(x, w, b, &geom);
        let t = Tensor::new(&[geom.c_out, geom.out_h(), geom.out_w()], out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(t, Op::Conv { x, w, b, geom }, rg)
    }

    /// 3-D convolution over `c × t × h × w`, weight `c_out × c × kt × k × k`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, pad_t: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv3d expects c×t×h×w input, got {:?}", xs);
        assert_eq!(ws[1], xs[0], "conv3d channel mismatch {:?} vs {:?}", xs, ws);
        let geom = ConvGeom {
            c_in: xs[0],
            t: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kt: ws[2],
            k: ws[3],
            pad_t,
            pad,
        };
        let out = self.conv_forward(x, w, b, &geom);
        let t = Tensor::new(&[geom.c_out, geom.out_t(), geom.out_h(), geom.out_w()], out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(t, Op::Conv { x, w, b, geom }, rg)
    }

    fn conv_forward(&self, x: Var, w: Var, b: Var, geom: &ConvGeom) -> Vec<f64> {
        let col = kernels::im2col(self.value(x).data(), geom);
        let nq = geom.out_len();
        let mut out = vec![0.0; geom.c_out * nq];
        for (co, &bias) in self.value(b).data().iter().enumerate() {
            out[co * nq..(co + 1) * nq].fill(bias);
        }
        kernels::gemm_nn(
            self.value(w).data(),
            &col,
            &mut out,
            geom.c_out,
            geom.col_rows(),
            nq,
        );
        out
    }

    /// Deformable 2-D convolution. `offset` is `2·k·k × ho × wo`; sampling
    /// positions are the regular grid plus `gamma · offset`.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offset: Var,
        w: Var,
        b: Var,
        pad: usize,
        gamma: f64,
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let k = ws[2];
        let geom = DeformGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            k,
            pad,
            gamma,
        };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        assert_eq!(self.value(offset).shape(), &[2 * k * k, ho, wo]);
        let col = kernels::deform_im2col(self.value(x).data(), self.value(offset).data(), &geom);
        let nq = ho * wo;
        let mut out = vec![0.0; ws[0] * nq];
        for (co, &bias) in self.value(b).data().iter().enumerate() {
            out[co * nq..(co + 1) * nq].fill(bias);
        }
        kernels::gemm_nn(self.value(w).data(), &col, &mut out, ws[0], xs[0] * k * k, nq);
        let t = Tensor::new(&[ws[0], ho, wo], out);
        let rg = self.rg(x) || self.rg(offset) || self.rg(w) || self.rg(b);
        self.push(
            t,
            Op::Deform {
                x,
                offset,
                w,
                b,
                k,
                pad,
                gamma,
            },
            rg,
        )
    }

    /// Adaptive average pool of `c × h × w` to `c × oh × ow`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let out = kernels::adaptive_avg_pool(v.data(), s[0], s[1], s[2], oh, ow);
        let t = Tensor::new(&[s[0], oh, ow], out);
        let rg = self.rg(x);
        self.push(t, Op::AdaptivePool(x), rg)
    }

    /// Mean over everything but the leading (channel) axis, as a flat vector.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let rest: usize = s[1..].iter().product();
        let flat = self.reshape(x, &[s[0], 1, rest]);
        let pooled = self.adaptive_avg_pool(flat, 1, 1);
        self.reshape(pooled, &[s[0]])
    }

    /// Bilinear resize (aligned corners) of `c × h × w` to `c × oh × ow`.
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let out = kernels::upsample_bilinear(v.data(), s[0], s[1], s[2], oh, ow);
        let t = Tensor::new(&[s[0], oh, ow], out);
        let rg = self.rg(x);
        self.push(t, Op::Upsample(x), rg)
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Var {
        let v = self.value(x);
        let s = v.shape();
        assert!(s[1] > pad && s[2] > pad, "reflect pad {} too large for {:?}", pad, s);
        let out = kernels::reflect_pad(v.data(), s[0], s[1], s[2], pad);
        let t = Tensor::new(&[s[0], s[1] + 2 * pad, s[2] + 2 * pad], out);
        let rg = self.rg(x);
        self.push(t, Op::ReflectPad(x, pad), rg)
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &first[1..], "concat: trailing dims differ");
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), rg)
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let mut shape = v.shape().to_vec();
        let per: usize = shape[1..].iter().product();
        assert!(start + len <= shape[0]);
        let data = v.data()[start * per..(start + len) * per].to_vec();
        shape[0] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, data), Op::Slice { x, start }, rg)
    }

    /// Stack `c × h × w` frames into `c × t × h × w`.
    pub fn stack_time(&mut self, frames: &[Var]) -> Var {
        let s = self.shape(frames[0]).to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        let t = frames.len();
        let mut data = vec![0.0; c * t * hw];
        for (ti, &f) in frames.iter().enumerate() {
            let v = self.value(f);
            assert_eq!(v.shape(), &s[..], "stack_time: frame shapes differ");
            for ch in 0..c {
                data[(ch * t + ti) * hw..(ch * t + ti + 1) * hw]
                    .copy_from_slice(&v.data()[ch * hw..(ch + 1) * hw]);
            }
        }
        let rg = frames.iter().any(|&f| self.rg(f));
        self.push(
            Tensor::new(&[c, t, s[1], s[2]], data),
            Op::StackTime(frames.to_vec()),
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.data().iter().map(|&z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let t = Tensor::new(v.shape(), e.into_iter().map(|z| z / s).collect());
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.numel(), targets.len());
        let n = targets.len() as f64;
        let loss: f64 = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            let shape = self.shape(v);
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(Tensor::new(shape, g)),
            }
        };
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, go.to_vec());
                acc(*b, go.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, go.to_vec());
                acc(*b, go.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    acc(*a, go.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, go.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, go.iter().map(|g| g * s).collect()),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(
                    *a,
                    go.iter()
                        .zip(va)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, go.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, go.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect());
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                acc(
                    *a,
                    go.iter()
                        .zip(va)
                        .map(|(g, &x)| {
                            if x > 0.0 {
                                *g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                acc(*a, go.iter().zip(va).map(|(g, x)| 2.0 * g * x).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![go[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![go[0] / n as f64; n]);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (out, inp) = (vw.shape()[0], vw.shape()[1]);
                if self.rg(*x) {
                    let mut gx = vec![0.0; inp];
                    kernels::gemm_nn(go, vw.data(), &mut gx, 1, out, inp);
                    acc(*x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; out * inp];
                    kernels::gemm_tn(go, vx.data(), &mut gw, 1, out, inp);
                    acc(*w, gw);
                }
                acc(*b, go.to_vec());
            }
            Op::Conv { x, w, b, geom } => {
                let nq = geom.out_len();
                let rows = geom.col_rows();
                if self.rg(*w) {
                    let col = kernels::im2col(self.value(*x).data(), geom);
                    let mut gw = vec![0.0; geom.c_out * rows];
                    kernels::gemm_nt(go, &col, &mut gw, geom.c_out, nq, rows);
                    acc(*w, gw);
                }
                if self.rg(*b) {
                    acc(
                        *b,
                        (0..geom.c_out)
                            .map(|co| go[co * nq..(co + 1) * nq].iter().sum())
                            .collect(),
                    );
                }
                if self.rg(*x) {
                    let mut gcol = vec![0.0; rows * nq];
                    kernels::gemm_tn(self.value(*w).data(), go, &mut gcol, geom.c_out, rows, nq);
                    acc(*x, kernels::col2im(&gcol, geom));
                }
            }
            Op::Deform {
                x,
                offset,
                w,
                b,
                k,
                pad,
                gamma,
            } => {
                let xs = self.value(*x).shape();
                let geom = DeformGeom {
                    c_in: xs[0],
                    h: xs[1],
                    w: xs[2],
                    k: *k,
                    pad: *pad,
                    gamma: *gamma,
                };
                let nq = geom.out_h() * geom.out_w();
                let rows = geom.c_in * k * k;
                let c_out = self.shape(*w)[0];
                let (vx, voff) = (self.value(*x).data(), self.value(*offset).data());
                if self.rg(*w) {
                    let col = kernels::deform_im2col(vx, voff, &geom);
                    let mut gw = vec![0.0; c_out * rows];
                    kernels::gemm_nt(go, &col, &mut gw, c_out, nq, rows);
                    acc(*w, gw);
                }
                if self.rg(*b) {
                    acc(
                        *b,
                        (0..c_out)
                            .map(|co| go[co * nq..(co + 1) * nq].iter().sum())
                            .collect(),
                    );
                }
                let (want_x, want_off) = (self.rg(*x), self.rg(*offset));
                if want_x || want_off {
                    let mut gcol = vec![0.0; rows * nq];
                    kernels::gemm_tn(self.value(*w).data(), go, &mut gcol, c_out, rows, nq);
                    let (gx, goff) =
                        kernels::deform_col2im(vx, voff, &gcol, &geom, want_x, want_off);
                    if want_x {
                        acc(*x, gx);
                    }
                    if want_off {
                        acc(*offset, goff);
                    }
                }
            }
            Op::AdaptivePool(x) => {
                let s = self.shape(*x);
                let os = node.value.shape();
                acc(
                    *x,
                    kernels::adaptive_avg_pool_backward(go, s[0], s[1], s[2], os[1], os[2]),
                );
            }
            Op::Upsample(x) => {
                let s = self.shape(*x);
                let os = node.value.shape();
                acc(
                    *x,
                    kernels::upsample_bilinear_backward(go, s[0], s[1], s[2], os[1], os[2]),
                );
            }
            Op::ReflectPad(x, pad) => {
                let s = self.shape(*x);
                acc(*x, kernels::reflect_pad_backward(go, s[0], s[1], s[2], *pad));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, go[start..start + n].to_vec());
                    start += n;
                }
            }
            Op::Slice { x, start } => {
                let v = self.value(*x);
                let per: usize = v.shape()[1..].iter().product();
                let mut g = vec![0.0; v.numel()];
                g[start * per..start * per + go.len()].copy_from_slice(go);
                acc(*x, g);
            }
            Op::StackTime(frames) => {
                let s = node.value.shape();
                let (c, t, hw) = (s[0], s[1], s[2] * s[3]);
                for (ti, &f) in frames.iter().enumerate() {
                    let mut g = vec![0.0; c * hw];
                    for ch in 0..c {
                        g[ch * hw..(ch + 1) * hw]
                            .copy_from_slice(&go[(ch * t + ti) * hw..(ch * t + ti + 1) * hw]);
                    }
                    acc(f, g);
                }
            }
            Op::Reshape(x) => acc(*x, go.to_vec()),
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: f64 = go.iter().zip(y).map(|(g, p)| g * p).sum();
                acc(*x, y.iter().zip(go).map(|(p, g)| p * (g - dot)).collect());
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let n = targets.len() as f64;
                acc(
                    *logits,
                    z.iter()
                        .zip(targets)
                        .map(|(&z, &y)| go[0] * (sigmoid(z) - y) / n)
                        .collect(),
                );
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every trainable parameter touched by the graph.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}
