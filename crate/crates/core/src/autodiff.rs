//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its output and whatever it needs for the backward pass, and returns
//! a [`Var`] handle. [`Graph::backward`] walks the tape in reverse.
//!
//! Graphs are cheap and single-use: one is built per frame per step, which is
//! what makes frames independent units of parallel work.

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::roi::RoiSampling;
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    FillMasked {
        kept: Var,
        token: Var,
        kept_mask: Vec<bool>,
    },
    MeanRows(Var),
    RoiTokens(Var, RoiSampling),
    MaskedMse {
        pred: Var,
        diff: Vec<f64>,
        row_mask: Vec<bool>,
        count: usize,
    },
    GaussianNll {
        raw: Var,
        targets: Vec<f64>,
        floor: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Shape bookkeeping for a 2-d convolution over a `[c, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        let mut cols = vec![0.0; self.col_rows() * oh * ow];
        for c in 0..self.in_channels {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                plane[iy as usize * self.in_w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient w.r.t. a node, `None` if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node[v.0].as_deref()
    }

    /// Parameter gradients in the order parameters were first used.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.by_node[node].as_deref().map(|g| (id, g)))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A trainable parameter. Repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_nodes.insert(id, v);
        self.param_order.push((id, v.0));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = crate::tensor::matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// `a[m, n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let n = va.cols();
        assert_eq!(vr.len(), n, "add_row width mismatch");
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect());
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| gelu(x)).collect());
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Normalizes each row of `x[m, n]` then applies `gain[n]` and `bias[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        let m = vx.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product self-attention over a packed
    /// `[n, 3d]` query/key/value matrix; returns `[n, d]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let v = self.value(qkv);
        let n = v.rows();
        assert_eq!(v.cols() % 3, 0);
        let d = v.cols() / 3;
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let rs = 3 * d as isize;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = v.data();
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        let mut head_out = vec![0.0; n * dh];
        for h in 0..heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            // scores = Q_h K_h^T
            gemm(
                n,
                dh,
                n,
                &x[h * dh..],
                (rs, 1),
                &x[d + h * dh..],
                (1, rs),
                0.0,
                p,
            );
            for row in p.chunks_mut(n) {
                let mut mx = f64::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    mx = mx.max(*s);
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            gemm(
                n,
                n,
                dh,
                p,
                (n as isize, 1),
                &x[2 * d + h * dh..],
                (rs, 1),
                0.0,
                &mut head_out,
            );
            for r in 0..n {
                out[r * d + h * dh..r * d + (h + 1) * dh]
                    .copy_from_slice(&head_out[r * dh..(r + 1) * dh]);
            }
        }
        let out = Tensor::new(vec![n, d], out);
        let ng = self.ng(qkv);
        self.push(out, Op::Attention { qkv, heads, probs }, ng)
    }

    /// Convolution of `x[c, h, w]` with `weight[out, c*k*k]` and `bias[out]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 3, "conv2d expects [c, h, w]");
        let vw = self.value(weight);
        let out_c = vw.rows();
        let in_c = s[0];
        let kk = vw.cols() / in_c;
        let kernel = (kk as f64).sqrt().round() as usize;
        assert_eq!(kernel * kernel * in_c, vw.cols(), "conv weight shape mismatch");
        let geom = ConvGeom {
            in_channels: in_c,
            in_h: s[1],
            in_w: s[2],
            kernel,
            stride,
            pad,
        };
        let cols = geom.im2col(vx.data());
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let p = oh * ow;
        let mut out = vec![0.0; out_c * p];
        for (o, b) in self.value(bias).data().iter().enumerate() {
            out[o * p..(o + 1) * p].fill(*b);
        }
        let kr = geom.col_rows();
        gemm(
            out_c,
            kr,
            p,
            vw.data(),
            (kr as isize, 1),
            &cols,
            (p as isize, 1),
            1.0,
            &mut out,
        );
        let out = Tensor::new(vec![out_c, oh, ow], out);
        let ng = self.ng(x) || self.ng(weight) || self.ng(bias);
        self.push(
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            },
            ng,
        )
    }

    /// Nearest-neighbour 2x upsampling of `[c, h, w]`, cropped to `[c, out_h, out_w]`.
    pub fn upsample2x(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(out_h <= 2 * h && out_w <= 2 * w);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for y in 0..out_h {
                for xx in 0..out_w {
                    out[(ch * out_h + y) * out_w + xx] = vx.at3(ch, y / 2, xx / 2);
                }
            }
        }
        let out = Tensor::new(vec![c, out_h, out_w], out);
        let ng = self.ng(x);
        self.push(out, Op::Upsample2x(x), ng)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape()[1..], vb.shape()[1..], "concat spatial mismatch");
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let out = Tensor::new(shape, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatChannels(a, b), ng)
    }

    /// Stacks `[r_i, n]` matrices into `[sum r_i, n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), n, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let ng = self.ng(a);
        self.push(
            Tensor::new(vec![idx.len(), n], data),
            Op::GatherRows(a, idx.to_vec()),
            ng,
        )
    }

    /// Builds a full `[len(kept_mask), d]` sequence: rows of `kept` in order
    /// where the mask is true, a copy of `token[1, d]` elsewhere.
    pub fn fill_masked(&mut self, kept: Var, token: Var, kept_mask: &[bool]) -> Var {
        let (vk, vt) = (self.value(kept), self.value(token));
        let d = vk.cols();
        assert_eq!(vt.len(), d);
        assert_eq!(
            kept_mask.iter().filter(|&&k| k).count(),
            vk.rows(),
            "kept rows do not match mask"
        );
        let mut data = Vec::with_capacity(kept_mask.len() * d);
        let mut next = 0;
        for &k in kept_mask {
            if k {
                data.extend_from_slice(vk.row(next));
                next += 1;
            } else {
                data.extend_from_slice(vt.data());
            }
        }
        let ng = self.ng(kept) || self.ng(token);
        self.push(
            Tensor::new(vec![kept_mask.len(), d], data),
            Op::FillMasked {
                kept,
                token,
                kept_mask: kept_mask.to_vec(),
            },
            ng,
        )
    }

    /// Column means of `[m, n]` as `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![1, n], out), Op::MeanRows(a), ng)
    }

    /// RoIAlign of `fm[c, h, w]` followed by row-major tokenization: `[bins, c]`.
    pub fn roi_tokens(&mut self, fm: Var, sampling: RoiSampling) -> Var {
        let out = sampling.apply_tokens(self.value(fm));
        let ng = self.ng(fm);
        self.push(out, Op::RoiTokens(fm, sampling), ng)
    }

    /// Mean squared error over the rows selected by `row_mask`.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, row_mask: &[bool]) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "mse shape mismatch");
        assert_eq!(vp.rows(), row_mask.len());
        let k = vp.cols();
        let diff: Vec<f64> = vp.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
        let mut sum = 0.0;
        let mut count = 0;
        for (r, &sel) in row_mask.iter().enumerate() {
            if sel {
                sum += diff[r * k..(r + 1) * k].iter().map(|e| e * e).sum::<f64>();
                count += k;
            }
        }
        let loss = if count == 0 { 0.0 } else { sum / count as f64 };
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                diff,
                row_mask: row_mask.to_vec(),
                count,
            },
            ng,
        )
    }

    /// Summed Gaussian negative log-likelihood of `targets` under
    /// `raw[n, 2] = (mu, s)` with `sigma2 = softplus(s) + floor`.
    /// The constant `0.5 ln 2pi` is omitted.
    pub fn gaussian_nll(&mut self, raw: Var, targets: &[f64], floor: f64) -> Var {
        let vr = self.value(raw);
        assert_eq!(vr.cols(), 2);
        assert_eq!(vr.rows(), targets.len());
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let (mu, s) = (vr.row(i)[0], vr.row(i)[1]);
                let var = softplus(s) + floor;
                0.5 * (var.ln() + (t - mu) * (t - mu) / var)
            })
            .sum();
        let ng = self.ng(raw);
        self.push(
            Tensor::scalar(loss),
            Op::GaussianNll {
                raw,
                targets: targets.to_vec(),
                floor,
            },
            ng,
        )
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients {
            by_node: grads,
            params: self.param_order.clone(),
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                acc(*a, &mut |da| {
                    gemm(m, n, k, g, (n as isize, 1), vb.data(), (1, n as isize), 1.0, da)
                });
                acc(*b, &mut |db| {
                    gemm(k, m, n, va.data(), (1, k as isize), g, (n as isize, 1), 1.0, db)
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = self.value(*row).len();
                acc(*row, &mut |d| {
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * gelu_grad(va[j]);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*x).cols();
                let gv = self.value(*gain).data();
                acc(*gain, &mut |d| {
                    for (r, chunk) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            d[j] += chunk[j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*x, &mut |d| {
                    for (r, chunk) in g.chunks(n).enumerate() {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let dxh = chunk[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            let dxh = chunk[j] * gv[j];
                            d[r * n + j] += inv_std[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Attention { qkv, heads, probs } => {
                let vx = self.value(*qkv);
                let n = vx.rows();
                let d = vx.cols() / 3;
                let dh = d / heads;
                let rs = 3 * d as isize;
                let scale = 1.0 / (dh as f64).sqrt();
                let x = vx.data();
                acc(*qkv, &mut |dx| {
                    let mut dp = vec![0.0; n * n];
                    for h in 0..*heads {
                        let p = &probs[h * n * n..(h + 1) * n * n];
                        let go = &g[h * dh..];
                        // dP = dO V^T
                        gemm(n, dh, n, go, (d as isize, 1), &x[2 * d + h * dh..], (1, rs), 0.0, &mut dp);
                        // dV = P^T dO
                        let mut dv = vec![0.0; n * dh];
                        gemm(n, n, dh, p, (1, n as isize), go, (d as isize, 1), 0.0, &mut dv);
                        // dS = P * (dP - rowsum(dP * P)), pre-scaled
                        for r in 0..n {
                            let pr = &p[r * n..(r + 1) * n];
                            let dr = &mut dp[r * n..(r + 1) * n];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for c in 0..n {
                                dr[c] = pr[c] * (dr[c] - dot) * scale;
                            }
                        }
                        let mut dq = vec![0.0; n * dh];
                        let mut dk = vec![0.0; n * dh];
                        gemm(n, n, dh, &dp, (n as isize, 1), &x[d + h * dh..], (rs, 1), 0.0, &mut dq);
                        gemm(n, n, dh, &dp, (1, n as isize), &x[h * dh..], (rs, 1), 0.0, &mut dk);
                        for r in 0..n {
                            let base = r * 3 * d;
                            for j in 0..dh {
                                dx[base + h * dh + j] += dq[r * dh + j];
                                dx[base + d + h * dh + j] += dk[r * dh + j];
                                dx[base + 2 * d + h * dh + j] += dv[r * dh + j];
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            } => {
                let vw = self.value(*weight);
                let out_c = vw.rows();
                let kr = geom.col_rows();
                let p = geom.out_h() * geom.out_w();
                acc(*bias, &mut |db| {
                    for (o, chunk) in g.chunks(p).enumerate() {
                        db[o] += chunk.iter().sum::<f64>();
                    }
                });
                acc(*weight, &mut |dw| {
                    gemm(out_c, p, kr, g, (p as isize, 1), cols, (1, p as isize), 1.0, dw)
                });
                acc(*x, &mut |dx| {
                    let mut dcols = vec![0.0; kr * p];
                    gemm(kr, out_c, p, vw.data(), (1, kr as isize), g, (p as isize, 1), 0.0, &mut dcols);
                    geom.col2im(&dcols, dx);
                });
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape().to_vec();
                let (h, w) = (s[1], s[2]);
                let os = node.value.shape();
                let (oh, ow) = (os[1], os[2]);
                acc(*x, &mut |dx| {
                    for ch in 0..s[0] {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let na = self.value(*a).len();
                acc(*a, &mut |d| d.iter_mut().zip(&g[..na]).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(&g[na..]).for_each(|(x, y)| *x += y));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |d| d.iter_mut().zip(slice).for_each(|(x, y)| *x += y));
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = self.value(*a).cols();
                acc(*a, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            d[i * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::FillMasked {
                kept,
                token,
                kept_mask,
            } => {
                let d = self.value(*token).len();
                acc(*kept, &mut |dk| {
                    let mut next = 0;
                    for (r, &k) in kept_mask.iter().enumerate() {
                        if k {
                            for j in 0..d {
                                dk[next * d + j] += g[r * d + j];
                            }
                            next += 1;
                        }
                    }
                });
                acc(*token, &mut |dt| {
                    for (r, &k) in kept_mask.iter().enumerate() {
                        if !k {
                            for j in 0..d {
                                dt[j] += g[r * d + j];
                            }
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let m = va.rows() as f64;
                acc(*a, &mut |d| {
                    for chunk in d.chunks_mut(g.len()) {
                        chunk.iter_mut().zip(g).for_each(|(x, y)| *x += y / m);
                    }
                });
            }
            Op::RoiTokens(fm, sampling) => {
                acc(*fm, &mut |d| sampling.backward_tokens(g, d));
            }
            Op::MaskedMse {
                pred,
                diff,
                row_mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let k = self.value(*pred).cols();
                let c = 2.0 * g[0] / *count as f64;
                acc(*pred, &mut |d| {
                    for (r, &sel) in row_mask.iter().enumerate() {
                        if sel {
                            for j in r * k..(r + 1) * k {
                                d[j] += c * diff[j];
                            }
                        }
                    }
                });
            }
            Op::GaussianNll {
                raw,
                targets,
                floor,
            } => {
                let vr = self.value(*raw);
                acc(*raw, &mut |d| {
                    for (i, &t) in targets.iter().enumerate() {
                        let (mu, s) = (vr.row(i)[0], vr.row(i)[1]);
                        let var = softplus(s) + floor;
                        let e = t - mu;
                        d[2 * i] += g[0] * (-e / var);
                        let dvar = 0.5 * (1.0 / var - e * e / (var * var));
                        d[2 * i + 1] += g[0] * dvar * sigmoid(s);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Central-difference check of `build` w.r.t. each leaf input.
    /// `build` receives the graph and leaf vars and returns a Var of any shape;
    /// the scalar objective is a fixed random projection of it.
    pub fn check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let proj_of = |len: usize| -> Vec<f64> {
            (0..len).map(|i| ((i as f64 * 0.7131).sin() + 0.3).cos()).collect()
        };
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &vars);
            let w = proj_of(g.value(out).len());
            g.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let w = Tensor::new(vec![g.value(out).len()], proj_of(g.value(out).len()));
        let wv = g.constant(w);
        let flat = g.reshape(out, &[g.value(out).len()]);
        let prod = g.mul(flat, wv);
        let ones = g.constant(Tensor::filled(&[1, g.value(prod).len()], 1.0));
        let prod2 = g.reshape(prod, &[g.value(prod).len(), 1]);
        let root = g.matmul(ones, prod2);
        let grads = g.backward(root);
        let h = 1e-6;
        for (ii, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[ii]).map(|s| s.to_vec()).unwrap_or(vec![0.0; input.len()]);
            for (j, &a) in analytic.iter().enumerate() {
                let mut plus = inputs.to_vec();
                plus[ii].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[ii].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = numeric.abs().max(a.abs()).max(1e-3);
                let rel = (numeric - a).abs() / denom;
                assert!(rel < tol, "input {ii} elem {j}: analytic {a} numeric {numeric} rel {rel}");
            }
        }
    }

    pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check, rand_tensor};
    use super::*;

    const TOL: f64 = 1e-6;

    #[test]
    fn grad_matmul_add_row() {
        let ins = [rand_tensor(&[3, 4], 1), rand_tensor(&[4, 5], 2), rand_tensor(&[5], 3)];
        check(
            &ins,
            &|g, v| {
                let m = g.matmul(v[0], v[1]);
                g.add_row(m, v[2])
            },
            TOL,
        );
    }

    #[test]
    fn grad_elementwise() {
        let ins = [rand_tensor(&[2, 3], 4), rand_tensor(&[2, 3], 5)];
        check(
            &ins,
            &|g, v| {
                let a = g.mul(v[0], v[1]);
                let b = g.gelu(a);
                let c = g.add(b, v[0]);
                g.scale(c, -1.7)
            },
            TOL,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let ins = [rand_tensor(&[3, 6], 6), rand_tensor(&[6], 7), rand_tensor(&[6], 8)];
        check(&ins, &|g, v| g.layer_norm(v[0], v[1], v[2]), 1e-5);
    }

    #[test]
    fn grad_attention() {
        let ins = [rand_tensor(&[5, 12], 9)];
        check(&ins, &|g, v| g.attention(v[0], 2), 1e-5);
    }

    #[test]
    fn grad_conv_upsample_concat() {
        let ins = [
            rand_tensor(&[2, 7, 6], 10),
            rand_tensor(&[3, 2 * 9], 11),
            rand_tensor(&[3], 12),
        ];
        check(
            &ins,
            &|g, v| {
                let c = g.conv2d(v[0], v[1], v[2], 2, 1);
                let u = g.upsample2x(c, 7, 6);
                g.concat_channels(u, v[0])
            },
            1e-5,
        );
    }

    #[test]
    fn grad_row_ops() {
        let ins = [rand_tensor(&[4, 3], 13), rand_tensor(&[1, 3], 14)];
        check(
            &ins,
            &|g, v| {
                let kept = g.gather_rows(v[0], &[2, 0]);
                let full = g.fill_masked(kept, v[1], &[true, false, true, false]);
                let m = g.mean_rows(full);
                g.concat_rows(&[full, m, v[1]])
            },
            TOL,
        );
    }

    #[test]
    fn grad_losses() {
        let target = rand_tensor(&[3, 4], 16);
        let ins = [rand_tensor(&[3, 4], 15), rand_tensor(&[4, 2], 17)];
        check(
            &ins,
            &|g, v| {
                let a = g.masked_mse(v[0], &target, &[true, false, true]);
                let b = g.gaussian_nll(v[1], &[0.5, 1.5, -0.2, 2.0], 1e-6);
                g.add(a, b)
            },
            1e-5,
        );
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut g = Graph::new();
        // identical values in every row: output equals that value
        let mut data = rand_tensor(&[4, 6], 20).into_data();
        for r in 0..4 {
            data[r * 6 + 4] = 3.0;
            data[r * 6 + 5] = -1.0;
        }
        let v = g.constant(Tensor::new(vec![4, 6], data));
        let out = g.attention(v, 1);
        for r in 0..4 {
            assert!((g.value(out).row(r)[0] - 3.0).abs() < 1e-12);
            assert!((g.value(out).row(r)[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
