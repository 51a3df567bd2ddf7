//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] walks it in reverse. Parameters are borrowed
//! from a [`ParamStore`]; their gradients are collected into [`Gradients`].
//!
//! Matrices are row-major `[rows, cols]`. Feature maps travel as `[C, H*W]`
//! and are reshaped to `[C, H, W]` only around convolutions.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddColBias(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectCols(Var, Vec<usize>),
    Reshape(Var),
    MaxCols(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    BroadcastCols(Var),
    BroadcastRows(Var),
    OuterAdd(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize, cols: Vec<f64> },
    DepthwiseConv2d { x: Var, w: Var, stride: usize, pad: usize },
    L2NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    /// Whether any parameter or tracked input feeds this node.
    tracked: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRowBias(a, b) | Op::AddColBias(a, b) | Op::OuterAdd(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::SoftmaxRows(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::SelectCols(a, _)
            | Op::Reshape(a)
            | Op::MaxCols(a, _)
            | Op::MeanRows(a)
            | Op::SumAll(a)
            | Op::BroadcastCols(a)
            | Op::BroadcastRows(a) => vec![*a],
            Op::LayerNormRows { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::Conv2d { x, w, .. } | Op::DepthwiseConv2d { x, w, .. } => vec![*x, *w],
            Op::L2NormalizeRows { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Result of a backward pass.
pub struct Backprop {
    nodes: Vec<Option<Tensor>>,
    params: Gradients,
}

impl Backprop {
    /// Gradient of the loss with respect to an arbitrary recorded value.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value: Some(value), op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A value that needs no gradient; work on constant-only subgraphs is skipped in [`Self::backward`].
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A leaf whose gradient is wanted, readable through [`Backprop::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Leaf, tracked: true });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), tracked: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// `a[m,n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let b = self.value(bias);
        assert_eq!(b.len(), n, "row bias length");
        let mut out = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] += b.data()[j];
            }
        }
        self.push(out, Op::AddRowBias(a, bias))
    }

    /// `a[m,n] + bias[m]` broadcast over columns.
    pub fn add_col_bias(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let b = self.value(bias);
        assert_eq!(b.len(), m, "column bias length");
        let mut out = self.value(a).clone();
        for i in 0..m {
            let bi = b.data()[i];
            out.data_mut()[i * n..(i + 1) * n].iter_mut().for_each(|x| *x += bi);
        }
        self.push(out, Op::AddColBias(a, bias))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine `gamma[n]`, `beta[n]`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.value(x).dims2();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(Tensor::new([m, n], out), Op::LayerNormRows { x, gamma, beta, xhat, inv_std })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2();
            assert_eq!(pn, n, "concat_rows column mismatch");
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        self.push(Tensor::new([m, n], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.value(p).dims2();
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(Tensor::new([m, n], out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= m);
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.push(Tensor::new([len, n], data), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= n);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::new([m, len], data), Op::SliceCols(a, start))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let k = idx.len();
        let mut data = vec![0.0; m * k];
        for i in 0..m {
            for (c, &j) in idx.iter().enumerate() {
                assert!(j < n);
                data[i * k + c] = src[i * n + j];
            }
        }
        self.push(Tensor::new([m, k], data), Op::SelectCols(a, idx.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape.to_vec());
        self.push(out, Op::Reshape(a))
    }

    /// Max over columns of `a[m,n]` → `[m]` (global max pooling of a `[C, H*W]` map).
    pub fn max_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut arg = vec![0; m];
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            arg[i] = best;
            out[i] = row[best];
        }
        self.push(Tensor::new([m], out), Op::MaxCols(a, arg))
    }

    /// Mean over rows of `a[m,n]` → `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        out.iter_mut().for_each(|x| *x /= m as f64);
        self.push(Tensor::new([n], out), Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// `v[m]` tiled to `[m, n]`.
    pub fn broadcast_cols(&mut self, v: Var, n: usize) -> Var {
        let src = self.value(v).data();
        let m = src.len();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            out[i * n..(i + 1) * n].iter_mut().for_each(|x| *x = src[i]);
        }
        self.push(Tensor::new([m, n], out), Op::BroadcastCols(v))
    }

    /// `v[n]` tiled to `[m, n]`.
    pub fn broadcast_rows(&mut self, v: Var, m: usize) -> Var {
        let src = self.value(v).data().to_vec();
        let n = src.len();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&src);
        }
        self.push(Tensor::new([m, n], out), Op::BroadcastRows(v))
    }

    /// `out[i,j] = a[i] + b[j]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (m, n) = (av.len(), bv.len());
        let out = Tensor::from_fn([m, n], |idx| av[idx / n] + bv[idx % n]);
        self.push(out, Op::OuterAdd(a, b))
    }

    /// Dense 2-D convolution of `x[Cin,H,W]` with `w[Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let cols = im2col(self.value(x).data(), cin, h, wd, k, stride, pad, ho, wo);
        let mut out = vec![0.0; cout * ho * wo];
        gemm(cout, cin * k * k, ho * wo, self.value(w).data(), false, &cols, false, &mut out, false);
        self.push(Tensor::new([cout, ho, wo], out), Op::Conv2d { x, w, stride, pad, cols })
    }

    /// Per-channel 2-D convolution of `x[C,H,W]` with `w[C,k,k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        assert_eq!(ws[0], c, "depthwise channel mismatch");
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += wv[(ch * k + ky) * k + kx] * xv[(ch * h + iy as usize) * wd + ix as usize];
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = acc;
                }
            }
        }
        self.push(Tensor::new([c, ho, wo], out), Op::DepthwiseConv2d { x, w, stride, pad })
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (m, n) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut norms = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = norm;
            let d = norm.max(eps);
            for j in 0..n {
                out[i * n + j] = row[j] / d;
            }
        }
        self.push(Tensor::new([m, n], out), Op::L2NormalizeRows { x, norms, eps })
    }

    /// Mean over rows of `-ln softmax(logits)[label]`, with the log clamped at `1e-12`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (m, n) = self.value(logits).dims2();
        assert_eq!(labels.len(), m, "one label per row");
        let probs = softmax_rows(self.value(logits)).into_data();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < n);
            loss -= probs[i * n + y].max(1e-12).ln();
        }
        loss /= m as f64;
        self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Backprop {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Gradients::zeros_like(self.store);
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Backprop { nodes: grads, params }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], params: &mut Gradients) {
        let out_shape = self.value(Var(i)).shape().to_vec();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.tracked(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut ga, false);
                    acc(grads, *a, Tensor::new([m, k], ga));
                }
                if self.tracked(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut gb, false);
                    acc(grads, *b, Tensor::new([k, n], gb));
                }
            }
            Op::Transpose(a) => acc(grads, *a, g.t()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.tracked(*b) {
                    acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::AddRowBias(a, b) => {
                let (m, n) = g.dims2();
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        gb[c] += g.data()[r * n + c];
                    }
                }
                acc(grads, *a, g.clone());
                let bshape = self.shape(*b);
                acc(grads, *b, Tensor::new(bshape, gb));
            }
            Op::AddColBias(a, b) => {
                let (m, n) = g.dims2();
                let gb: Vec<f64> = (0..m).map(|r| g.data()[r * n..(r + 1) * n].iter().sum()).collect();
                acc(grads, *a, g.clone());
                let bshape = self.shape(*b);
                acc(grads, *b, Tensor::new(bshape, gb));
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(i));
                acc(grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y)));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(grads, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                acc(grads, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { slope * g }));
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(Var(i));
                let (m, n) = y.dims2();
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *a, Tensor::new([m, n], gx));
            }
            Op::LayerNormRows { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = g.dims2();
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for r in 0..m {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_gh = 0.0;
                    let mut sum_ghh = 0.0;
                    for c in 0..n {
                        gg[c] += gr[c] * hr[c];
                        gbeta[c] += gr[c];
                        let gh = gr[c] * gam[c];
                        sum_gh += gh;
                        sum_ghh += gh * hr[c];
                    }
                    let nf = n as f64;
                    for c in 0..n {
                        let gh = gr[c] * gam[c];
                        gx[r * n + c] = inv_std[r] / nf * (nf * gh - sum_gh - hr[c] * sum_ghh);
                    }
                }
                acc(grads, *x, Tensor::new([m, n], gx));
                let gs = self.shape(*gamma);
                acc(grads, *gamma, Tensor::new(gs, gg));
                let bs = self.shape(*beta);
                acc(grads, *beta, Tensor::new(bs, gbeta));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let shape = self.shape(p);
                    acc(grads, p, Tensor::new(shape, g.data()[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    let mut data = Vec::with_capacity(m * w);
                    for r in 0..m {
                        data.extend_from_slice(&g.data()[r * n + off..r * n + off + w]);
                    }
                    acc(grads, p, Tensor::new([m, w], data));
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let shape = self.shape(*a);
                let n = shape[1];
                let mut full = Tensor::zeros(shape);
                full.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(grads, *a, full);
            }
            Op::SliceCols(a, start) => {
                let shape = self.shape(*a);
                let n = shape[1];
                let (m, len) = g.dims2();
                let mut full = Tensor::zeros(shape);
                for r in 0..m {
                    full.data_mut()[r * n + start..r * n + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *a, full);
            }
            Op::SelectCols(a, idx) => {
                let shape = self.shape(*a);
                let n = shape[1];
                let (m, k) = g.dims2();
                let mut full = Tensor::zeros(shape);
                for r in 0..m {
                    for (c, &j) in idx.iter().enumerate() {
                        full.data_mut()[r * n + j] += g.data()[r * k + c];
                    }
                }
                acc(grads, *a, full);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a);
                acc(grads, *a, g.clone().reshape(shape));
            }
            Op::MaxCols(a, arg) => {
                let shape = self.shape(*a);
                let n = shape[1];
                let mut full = Tensor::zeros(shape);
                for (r, &j) in arg.iter().enumerate() {
                    full.data_mut()[r * n + j] += g.data()[r];
                }
                acc(grads, *a, full);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2();
                let full = Tensor::from_fn([m, n], |idx| g.data()[idx % n] / m as f64);
                acc(grads, *a, full);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a);
                acc(grads, *a, Tensor::full(shape, g.data()[0]));
            }
            Op::BroadcastCols(v) => {
                let (m, n) = (out_shape[0], out_shape[1]);
                let gv: Vec<f64> = (0..m).map(|r| g.data()[r * n..(r + 1) * n].iter().sum()).collect();
                let shape = self.shape(*v);
                acc(grads, *v, Tensor::new(shape, gv));
            }
            Op::BroadcastRows(v) => {
                let (m, n) = (out_shape[0], out_shape[1]);
                let mut gv = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        gv[c] += g.data()[r * n + c];
                    }
                }
                let shape = self.shape(*v);
                acc(grads, *v, Tensor::new(shape, gv));
            }
            Op::OuterAdd(a, b) => {
                let (m, n) = (out_shape[0], out_shape[1]);
                let mut ga = vec![0.0; m];
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        let v = g.data()[r * n + c];
                        ga[r] += v;
                        gb[c] += v;
                    }
                }
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                acc(grads, *a, Tensor::new(sa, ga));
                acc(grads, *b, Tensor::new(sb, gb));
            }
            Op::Conv2d { x, w, stride, pad, cols } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let kk = cin * k * k;
                if self.tracked(*w) {
                    let mut gw = vec![0.0; cout * kk];
                    gemm(cout, ho * wo, kk, g.data(), false, cols, true, &mut gw, false);
                    acc(grads, *w, Tensor::new(ws, gw));
                }
                if self.tracked(*x) {
                    let mut gcols = vec![0.0; kk * ho * wo];
                    gemm(kk, cout, ho * wo, self.value(*w).data(), true, g.data(), false, &mut gcols, false);
                    let gx = col2im(&gcols, cin, h, wd, k, *stride, *pad, ho, wo);
                    acc(grads, *x, Tensor::new(xs, gx));
                }
            }
            Op::DepthwiseConv2d { x, w, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let k = ws[1];
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g.data()[(ch * ho + oy) * wo + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = (ch * h + iy as usize) * wd + ix as usize;
                                    let wi = (ch * k + ky) * k + kx;
                                    gw[wi] += go * xv[xi];
                                    gx[xi] += go * wv[wi];
                                }
                            }
                        }
                    }
                }
                acc(grads, *w, Tensor::new(ws, gw));
                if self.tracked(*x) {
                    acc(grads, *x, Tensor::new(xs, gx));
                }
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let y = self.value(Var(i));
                let (m, n) = y.dims2();
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    if norms[r] > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gx[r * n + c] = (gr[c] - yr[c] * dot) / norms[r];
                        }
                    } else {
                        for c in 0..n {
                            gx[r * n + c] = gr[c] / eps;
                        }
                    }
                }
                acc(grads, *x, Tensor::new([m, n], gx));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (m, n) = self.value(*logits).dims2();
                let scale = g.data()[0] / m as f64;
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * n + y] -= 1.0;
                }
                gl.iter_mut().for_each(|x| *x *= scale);
                acc(grads, *logits, Tensor::new([m, n], gl));
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax of a 2-D tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (m, n) = t.dims2();
    let mut out = t.data().to_vec();
    for r in 0..m {
        let row = &mut out[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
    Tensor::new([m, n], out)
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut cols = vec![0.0; cin * k * k * ho * wo];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[(c * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut x = vec![0.0; cin * h * w];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}
