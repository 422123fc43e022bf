//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Values
//! are kept alive on the tape so [`Graph::backward`] can walk it in reverse.
//! Parameter leaves borrow their tensors from a [`ParamStore`] instead of
//! copying them.

use std::borrow::Cow;
use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Float, MatMut, MatRef, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous row range `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }
}

/// Marker for "keep the base value" in [`Graph::overlay`] maps.
pub const KEEP_BASE: u32 = u32::MAX;

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel(Var, Var),
    Silu(Var),
    Tanh(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<T> },
    Attention { q: Var, k: Var, v: Var, q_seg: Vec<Segment>, kv_seg: Vec<Segment>, heads: usize, probs: Vec<T> },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    NchwToRows(Var),
    RowsToNchw(Var),
    Overlay { base: Var, src: Var, map: Vec<u32> },
    Mse(Var, Var),
    Mean(Var),
}

struct Node<'p, T: Float> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    /// Gradient with respect to an input created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}

pub struct Graph<'p, T: Float> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    param_vars: HashMap<ParamId, Var>,
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store;
        self.nodes.push(Node { value: Cow::Borrowed(store.get(id)), op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `x[b, c, ...] + v[b, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (vx, vv) = (self.value(x), self.value(v));
        let s = vx.shape();
        assert!(s.len() >= 2 && vv.shape() == [s[0], s[1]], "add_channel expects [B,C,..] + [B,C]");
        let inner: usize = s[2..].iter().product();
        let mut data = vx.data().to_vec();
        for (bc, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            let add = vv.data()[bc];
            for e in chunk {
                *e += add;
            }
        }
        let out = Tensor::new(s.to_vec(), data);
        let ng = self.ng(x) || self.ng(v);
        self.push(out, Op::AddChannel(x, v), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let ws = vw.shape();
        assert_eq!(ws.len(), 2, "linear weight must be 2-d");
        let (din, dout) = (ws[0], ws[1]);
        let xs = vx.shape();
        assert_eq!(*xs.last().expect("linear input rank"), din, "linear input width");
        let rows = vx.numel() / din;
        let mut data = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.shape(), [dout], "linear bias shape");
            for row in data.chunks_mut(dout) {
                row.copy_from_slice(vb.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::dense(vx.data(), 0, rows, din),
            MatRef::dense(vw.data(), 0, din, dout),
            beta,
            MatMut::dense(&mut data, 0, rows, dout),
        );
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("rank") = dout;
        let out = Tensor::new(shape, data);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// 2-d convolution, `x: [B, Cin, H, W]`, `w: [Cout, Cin, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        let ws = vw.shape();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d expects 4-d input and weight");
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        assert_eq!(ws[3], k, "conv2d kernel must be square");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geo = ConvGeom { cin, h, w: wd, k, stride, pad, ho, wo };
        let ckk = cin * k * k;
        let hw_out = ho * wo;
        let mut data = vec![T::zero(); bsz * cout * hw_out];
        let bias = b.map(|b| self.value(b).data().to_vec());
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw_out] };
        for bi in 0..bsz {
            let xb = &vx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let colref: &[T] = if geo.is_pointwise() {
                xb
            } else {
                im2col(xb, &geo, &mut col);
                &col
            };
            let ob = &mut data[bi * cout * hw_out..(bi + 1) * cout * hw_out];
            if let Some(bias) = &bias {
                for (c, row) in ob.chunks_mut(hw_out).enumerate() {
                    row.fill(bias[c]);
                }
            }
            gemm(
                T::one(),
                MatRef::dense(vw.data(), 0, cout, ckk),
                MatRef::dense(colref, 0, ckk, hw_out),
                if bias.is_some() { T::one() } else { T::zero() },
                MatMut::dense(ob, 0, cout, hw_out),
            );
        }
        let out = Tensor::new([bsz, cout, ho, wo], data);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let (bsz, c) = (s[0], s[1]);
        assert!(c % groups == 0, "channels must divide into groups");
        let spatial: usize = s[2..].iter().product();
        let cg = c / groups;
        let n = cg * spatial;
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = vec![T::zero(); vx.numel()];
        let mut stats = Vec::with_capacity(bsz * groups * 2);
        for bi in 0..bsz {
            for gi in 0..groups {
                let off = (bi * c + gi * cg) * spatial;
                let xs = &vx.data()[off..off + n];
                let (mean, rstd) = moments(xs);
                stats.push(T::of(mean));
                stats.push(T::of(rstd));
                let (mean_t, rstd_t) = (T::of(mean), T::of(rstd));
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let (ga, be) = (g[ch], bt[ch]);
                    let base = ci * spatial;
                    for j in 0..spatial {
                        data[off + base + j] = (xs[base + j] - mean_t) * rstd_t * ga + be;
                    }
                }
            }
        }
        let out = Tensor::new(s.to_vec(), data);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, ng)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("layer_norm rank");
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), d, "layer_norm gamma width");
        let mut data = vec![T::zero(); vx.numel()];
        let mut stats = Vec::with_capacity(vx.numel() / d * 2);
        for (row, out) in vx.data().chunks(d).zip(data.chunks_mut(d)) {
            let (mean, rstd) = moments(row);
            let (mean_t, rstd_t) = (T::of(mean), T::of(rstd));
            stats.push(mean_t);
            stats.push(rstd_t);
            for j in 0..d {
                out[j] = (row[j] - mean_t) * rstd_t * g[j] + bt[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, stats }, ng)
    }

    /// Multi-head scaled dot-product attention over row segments.
    ///
    /// `q` is `[Nq, D]`, `k` and `v` are `[Nk, D]`. Query segment `i` attends
    /// only to key/value segment `i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_seg: Vec<Segment>,
        kv_seg: Vec<Segment>,
        heads: usize,
    ) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.shape()[1];
        assert!(vk.shape()[1] == d && vv.shape()[1] == d, "attention width mismatch");
        assert_eq!(vk.shape()[0], vv.shape()[0], "attention key/value rows");
        assert_eq!(q_seg.len(), kv_seg.len(), "attention segment count");
        assert!(d % heads == 0, "attention width must divide into heads");
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let total: usize = q_seg.iter().zip(&kv_seg).map(|(a, b)| a.len * b.len * heads).sum();
        let mut probs = vec![T::zero(); total];
        let mut data = vec![T::zero(); vq.numel()];
        let mut off = 0;
        for (qs, ks) in q_seg.iter().zip(&kv_seg) {
            assert!(ks.len > 0, "attention over an empty key segment");
            for h in 0..heads {
                let p = &mut probs[off..off + qs.len * ks.len];
                gemm(
                    scale,
                    MatRef::new(vq.data(), qs.start * d + h * dh, qs.len, dh, d, 1),
                    MatRef::new(vk.data(), ks.start * d + h * dh, ks.len, dh, d, 1).t(),
                    T::zero(),
                    MatMut::dense(p, 0, qs.len, ks.len),
                );
                for row in p.chunks_mut(ks.len) {
                    softmax_in_place(row);
                }
                gemm(
                    T::one(),
                    MatRef::dense(p, 0, qs.len, ks.len),
                    MatRef::new(vv.data(), ks.start * d + h * dh, ks.len, dh, d, 1),
                    T::zero(),
                    MatMut::new(&mut data, qs.start * d + h * dh, qs.len, dh, d, 1),
                );
                off += qs.len * ks.len;
            }
        }
        let out = Tensor::new(vq.shape().to_vec(), data);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, q_seg, kv_seg, heads, probs }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut data = vec![T::zero(); bc * 4 * h * w];
        for p in 0..bc {
            let src = &vx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new([s[0], s[1], 2 * h, 2 * w], data);
        let ng = self.ng(x);
        self.push(out, Op::Upsample2x(x), ng)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat_channels shape mismatch");
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for bi in 0..sa[0] {
            data.extend_from_slice(&va.data()[bi * ca..(bi + 1) * ca]);
            data.extend_from_slice(&vb.data()[bi * cb..(bi + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[1] = sa[1] + sb[1];
        let out = Tensor::new(shape, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatChannels(a, b), ng)
    }

    /// Stack along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], tail.as_slice(), "concat_rows trailing shape mismatch");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Gather rows along the first axis (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let inner: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in &idx {
            assert!(i < s[0], "select_rows index out of range");
            data.extend_from_slice(&vx.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(shape, data);
        let ng = self.ng(x);
        self.push(out, Op::SelectRows { x, idx }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// `[B, C, H, W] -> [B*H*W, C]`.
    pub fn nchw_to_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut data = vec![T::zero(); vx.numel()];
        let src = vx.data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for p in 0..hw {
                    data[(bi * hw + p) * c + ci] = src[base + p];
                }
            }
        }
        let out = Tensor::new([b * hw, c], data);
        let ng = self.ng(x);
        self.push(out, Op::NchwToRows(x), ng)
    }

    /// `[B*H*W, C] -> [B, C, H, W]`.
    pub fn rows_to_nchw(&mut self, x: Var, b: usize, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let c = vx.shape()[1];
        let hw = h * w;
        assert_eq!(vx.shape()[0], b * hw, "rows_to_nchw row count");
        let mut data = vec![T::zero(); vx.numel()];
        let src = vx.data();
        for bi in 0..b {
            for p in 0..hw {
                let row = (bi * hw + p) * c;
                for ci in 0..c {
                    data[(bi * c + ci) * hw + p] = src[row + ci];
                }
            }
        }
        let out = Tensor::new([b, c, h, w], data);
        let ng = self.ng(x);
        self.push(out, Op::RowsToNchw(x), ng)
    }

    /// `out[i] = src[map[i]]`, or `base[i]` where `map[i] == KEEP_BASE`.
    pub fn overlay(&mut self, base: Var, src: Var, map: Vec<u32>) -> Var {
        let (vb, vs) = (self.value(base), self.value(src));
        assert_eq!(map.len(), vb.numel(), "overlay map length");
        let data = vb
            .data()
            .iter()
            .zip(&map)
            .map(|(&b, &m)| if m == KEEP_BASE { b } else { vs.data()[m as usize] })
            .collect();
        let out = Tensor::new(vb.shape().to_vec(), data);
        let ng = self.ng(base) || self.ng(src);
        self.push(out, Op::Overlay { base, src, map }, ng)
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n = va.numel().max(1) as f64;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).to_f64c().powi(2)).sum();
        let out = Tensor::scalar(T::of(s / n));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mse(a, b), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.numel().max(1) as f64;
        let s: f64 = vx.data().iter().map(|v| v.to_f64c()).sum();
        let out = Tensor::scalar(T::of(s / n));
        let ng = self.ng(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward expects a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        let mut out = Gradients { params: vec![None; self.store.len()], leaves: HashMap::new() };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Param(id) => out.params[id.index()] = Some(g),
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                op => self.backprop(op, Var(i), g, &mut grads),
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, op: &Op<T>, out: Var, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|v| v * s));
            }
            Op::AddChannel(x, v) => {
                if self.ng(*v) {
                    let vs = self.value(*v).shape().to_vec();
                    let inner = g.numel() / vs.iter().product::<usize>();
                    let d = g.data().chunks(inner.max(1)).map(|c| c.iter().copied().sum()).collect();
                    self.acc(grads, *v, Tensor::new(vs, d));
                }
                self.acc(grads, *x, g);
            }
            Op::Silu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gy, &xv)| {
                        let s = sigmoid(xv);
                        gy * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Tanh(x) => {
                let y = self.value(out);
                let d = g.data().iter().zip(y.data()).map(|(&gy, &yv)| gy * (T::one() - yv * yv)).collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, &g, grads),
            Op::Conv2d { x, w, b, stride, pad } => self.backprop_conv(*x, *w, *b, *stride, *pad, &g, grads),
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                self.backprop_group_norm(*x, *gamma, *beta, *groups, stats, &g, grads)
            }
            Op::LayerNorm { x, gamma, beta, stats } => self.backprop_layer_norm(*x, *gamma, *beta, stats, &g, grads),
            Op::Attention { q, k, v, q_seg, kv_seg, heads, probs } => {
                self.backprop_attention(*q, *k, *v, q_seg, kv_seg, *heads, probs, &g, grads)
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape().to_vec();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut d = vec![T::zero(); bc * h * w];
                for p in 0..bc {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, d));
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(sa[0] * ca);
                let mut db = Vec::with_capacity(sb[0] * cb);
                for chunk in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    db.extend_from_slice(&chunk[ca..]);
                }
                self.acc(grads, *a, Tensor::new(sa, da));
                self.acc(grads, *b, Tensor::new(sb, db));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let s = self.value(p).shape().to_vec();
                    let n: usize = s.iter().product();
                    if self.ng(p) {
                        self.acc(grads, p, Tensor::new(s, g.data()[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::SelectRows { x, idx } => {
                let s = self.value(*x).shape().to_vec();
                let inner: usize = s[1..].iter().product();
                let mut d = vec![T::zero(); s.iter().product()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..inner {
                        d[i * inner + j] += g.data()[r * inner + j];
                    }
                }
                self.acc(grads, *x, Tensor::new(s, d));
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.reshape(s));
            }
            Op::NchwToRows(x) => {
                let s = self.value(*x).shape().to_vec();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut d = vec![T::zero(); g.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            d[(bi * c + ci) * hw + p] = g.data()[(bi * hw + p) * c + ci];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, d));
            }
            Op::RowsToNchw(x) => {
                let s = self.value(out).shape().to_vec();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut d = vec![T::zero(); g.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            d[(bi * hw + p) * c + ci] = g.data()[(bi * c + ci) * hw + p];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new([b * hw, c], d));
            }
            Op::Overlay { base, src, map } => {
                if self.ng(*src) {
                    let s = self.value(*src).shape().to_vec();
                    let mut d = vec![T::zero(); s.iter().product()];
                    for (gi, &m) in g.data().iter().zip(map) {
                        if m != KEEP_BASE {
                            d[m as usize] += *gi;
                        }
                    }
                    self.acc(grads, *src, Tensor::new(s, d));
                }
                if self.ng(*base) {
                    let d = g
                        .data()
                        .iter()
                        .zip(map)
                        .map(|(&gi, &m)| if m == KEEP_BASE { gi } else { T::zero() })
                        .collect();
                    self.acc(grads, *base, Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = va.numel().max(1) as f64;
                let k = g.item() * T::of(2.0 / n);
                let d: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * k).collect();
                if self.ng(*b) {
                    let neg = d.iter().map(|&v| -v).collect();
                    self.acc(grads, *b, Tensor::new(vb.shape().to_vec(), neg));
                }
                self.acc(grads, *a, Tensor::new(va.shape().to_vec(), d));
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let k = g.item() * T::of(1.0 / vx.numel().max(1) as f64);
                self.acc(grads, *x, Tensor::full(vx.shape().to_vec(), k));
            }
        }
    }

    fn backprop_linear(&self, x: Var, w: Var, b: Option<Var>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (din, dout) = (vw.shape()[0], vw.shape()[1]);
        let rows = vx.numel() / din;
        if self.ng(x) {
            let mut dx = vec![T::zero(); rows * din];
            gemm(
                T::one(),
                MatRef::dense(g.data(), 0, rows, dout),
                MatRef::dense(vw.data(), 0, din, dout).t(),
                T::zero(),
                MatMut::dense(&mut dx, 0, rows, din),
            );
            self.acc(grads, x, Tensor::new(vx.shape().to_vec(), dx));
        }
        if self.ng(w) {
            let mut dw = vec![T::zero(); din * dout];
            gemm(
                T::one(),
                MatRef::dense(vx.data(), 0, rows, din).t(),
                MatRef::dense(g.data(), 0, rows, dout),
                T::zero(),
                MatMut::dense(&mut dw, 0, din, dout),
            );
            self.acc(grads, w, Tensor::new([din, dout], dw));
        }
        if let Some(b) = b.filter(|&b| self.ng(b)) {
            let mut db = vec![T::zero(); dout];
            for row in g.data().chunks(dout) {
                for (a, &v) in db.iter_mut().zip(row) {
                    *a += v;
                }
            }
            self.acc(grads, b, Tensor::new([dout], db));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (vw.shape()[0], vw.shape()[2]);
        let gs = g.shape();
        let (ho, wo) = (gs[2], gs[3]);
        let geo = ConvGeom { cin, h, w: wd, k, stride, pad, ho, wo };
        let ckk = cin * k * k;
        let hw_out = ho * wo;
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut dw = if need_w { vec![T::zero(); cout * ckk] } else { Vec::new() };
        let mut dx = if need_x { vec![T::zero(); vx.numel()] } else { Vec::new() };
        let mut col = if geo.is_pointwise() || !need_w { Vec::new() } else { vec![T::zero(); ckk * hw_out] };
        let mut dcol = if geo.is_pointwise() || !need_x { Vec::new() } else { vec![T::zero(); ckk * hw_out] };
        for bi in 0..bsz {
            let gb = &g.data()[bi * cout * hw_out..(bi + 1) * cout * hw_out];
            let xb = &vx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if need_w {
                let colref: &[T] = if geo.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &geo, &mut col);
                    &col
                };
                gemm(
                    T::one(),
                    MatRef::dense(gb, 0, cout, hw_out),
                    MatRef::dense(colref, 0, ckk, hw_out).t(),
                    T::one(),
                    MatMut::dense(&mut dw, 0, cout, ckk),
                );
            }
            if need_x {
                let dxb = &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if geo.is_pointwise() {
                    gemm(
                        T::one(),
                        MatRef::dense(vw.data(), 0, cout, ckk).t(),
                        MatRef::dense(gb, 0, cout, hw_out),
                        T::zero(),
                        MatMut::dense(dxb, 0, ckk, hw_out),
                    );
                } else {
                    gemm(
                        T::one(),
                        MatRef::dense(vw.data(), 0, cout, ckk).t(),
                        MatRef::dense(gb, 0, cout, hw_out),
                        T::zero(),
                        MatMut::dense(&mut dcol, 0, ckk, hw_out),
                    );
                    col2im(&dcol, &geo, dxb);
                }
            }
        }
        if need_x {
            self.acc(grads, x, Tensor::new(xs.to_vec(), dx));
        }
        if need_w {
            self.acc(grads, w, Tensor::new(vw.shape().to_vec(), dw));
        }
        if let Some(b) = b.filter(|&b| self.ng(b)) {
            let mut db = vec![T::zero(); cout];
            for bi in 0..bsz {
                for (c, acc) in db.iter_mut().enumerate() {
                    let off = (bi * cout + c) * hw_out;
                    *acc += g.data()[off..off + hw_out].iter().copied().sum::<T>();
                }
            }
            self.acc(grads, b, Tensor::new([cout], db));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_group_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let vx = self.value(x);
        let s = vx.shape();
        let (bsz, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let cg = c / groups;
        let n = cg * spatial;
        let ga = self.value(gamma).data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); vx.numel()];
        for bi in 0..bsz {
            for gi in 0..groups {
                let off = (bi * c + gi * cg) * spatial;
                let (mean, rstd) = (stats[(bi * groups + gi) * 2], stats[(bi * groups + gi) * 2 + 1]);
                let mut sum_g = 0.0f64;
                let mut sum_gx = 0.0f64;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    for j in 0..spatial {
                        let p = off + ci * spatial + j;
                        let xh = (vx.data()[p] - mean) * rstd;
                        let gy = g.data()[p];
                        dgamma[ch] += gy * xh;
                        dbeta[ch] += gy;
                        let gh = (gy * ga[ch]).to_f64c();
                        sum_g += gh;
                        sum_gx += gh * xh.to_f64c();
                    }
                }
                let (mg, mgx) = (T::of(sum_g / n as f64), T::of(sum_gx / n as f64));
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    for j in 0..spatial {
                        let p = off + ci * spatial + j;
                        let xh = (vx.data()[p] - mean) * rstd;
                        let gh = g.data()[p] * ga[ch];
                        dx[p] = rstd * (gh - mg - xh * mgx);
                    }
                }
            }
        }
        self.acc(grads, x, Tensor::new(s.to_vec(), dx));
        self.acc(grads, gamma, Tensor::new([c], dgamma));
        self.acc(grads, beta, Tensor::new([c], dbeta));
    }

    fn backprop_layer_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("rank");
        let ga = self.value(gamma).data();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut dx = vec![T::zero(); vx.numel()];
        for (r, ((row, grow), drow)) in vx.data().chunks(d).zip(g.data().chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
            let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for j in 0..d {
                let xh = (row[j] - mean) * rstd;
                dgamma[j] += grow[j] * xh;
                dbeta[j] += grow[j];
                let gh = (grow[j] * ga[j]).to_f64c();
                sum_g += gh;
                sum_gx += gh * xh.to_f64c();
            }
            let (mg, mgx) = (T::of(sum_g / d as f64), T::of(sum_gx / d as f64));
            for j in 0..d {
                let xh = (row[j] - mean) * rstd;
                drow[j] = rstd * (grow[j] * ga[j] - mg - xh * mgx);
            }
        }
        self.acc(grads, x, Tensor::new(vx.shape().to_vec(), dx));
        self.acc(grads, gamma, Tensor::new([d], dgamma));
        self.acc(grads, beta, Tensor::new([d], dbeta));
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        q_seg: &[Segment],
        kv_seg: &[Segment],
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.shape()[1];
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); vq.numel()];
        let mut dk = vec![T::zero(); vk.numel()];
        let mut dv = vec![T::zero(); vv.numel()];
        let mut off = 0;
        let mut dp = Vec::new();
        for (qs, ks) in q_seg.iter().zip(kv_seg) {
            for h in 0..heads {
                let p = &probs[off..off + qs.len * ks.len];
                let g_view = MatRef::new(g.data(), qs.start * d + h * dh, qs.len, dh, d, 1);
                dp.clear();
                dp.resize(qs.len * ks.len, T::zero());
                gemm(
                    T::one(),
                    g_view,
                    MatRef::new(vv.data(), ks.start * d + h * dh, ks.len, dh, d, 1).t(),
                    T::zero(),
                    MatMut::dense(&mut dp, 0, qs.len, ks.len),
                );
                gemm(
                    T::one(),
                    MatRef::dense(p, 0, qs.len, ks.len).t(),
                    g_view,
                    T::one(),
                    MatMut::new(&mut dv, ks.start * d + h * dh, ks.len, dh, d, 1),
                );
                for (dprow, prow) in dp.chunks_mut(ks.len).zip(p.chunks(ks.len)) {
                    let dot: T = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (a, &b) in dprow.iter_mut().zip(prow) {
                        *a = b * (*a - dot);
                    }
                }
                gemm(
                    scale,
                    MatRef::dense(&dp, 0, qs.len, ks.len),
                    MatRef::new(vk.data(), ks.start * d + h * dh, ks.len, dh, d, 1),
                    T::one(),
                    MatMut::new(&mut dq, qs.start * d + h * dh, qs.len, dh, d, 1),
                );
                gemm(
                    scale,
                    MatRef::dense(&dp, 0, qs.len, ks.len).t(),
                    MatRef::new(vq.data(), qs.start * d + h * dh, qs.len, dh, d, 1),
                    T::one(),
                    MatMut::new(&mut dk, ks.start * d + h * dh, ks.len, dh, d, 1),
                );
                off += qs.len * ks.len;
            }
        }
        self.acc(grads, q, Tensor::new(vq.shape().to_vec(), dq));
        self.acc(grads, k, Tensor::new(vk.shape().to_vec(), dk));
        self.acc(grads, v, Tensor::new(vv.shape().to_vec(), dv));
    }
}

fn moments<T: Float>(xs: &[T]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().map(|v| v.to_f64c()).sum::<f64>() / n;
    let var = xs.iter().map(|v| (v.to_f64c() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + 1e-5).sqrt())
}

fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(s) } else { 0 };
        // ix < w  <=>  ox*s < w + pad - kx
        let limit = (self.w + self.pad).saturating_sub(kx);
        let hi = limit.div_ceil(s).min(self.wo);
        (lo.min(hi), hi)
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * hw_out;
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    dx.fill(T::zero());
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * hw_out;
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-loop convolution used as an independent reference.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * cout * ho * wo];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        Tensor::new([b, cout, ho, wo], out)
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 5, 6), (3, 2, 1, 7, 6), (1, 1, 0, 4, 4), (3, 2, 0, 7, 7)] {
            let x = Tensor::<f64>::randn([2, 3, h, w], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn([4, 3, k, k], 1.0, &mut rng);
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let wv = g.constant(wt.clone());
            let y = g.conv2d(xv, wv, None, stride, pad);
            let want = conv_naive(&x, &wt, stride, pad);
            assert_eq!(g.shape(y), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    /// Central differences on every input of a small composite graph.
    fn check_inputs(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, inputs: Vec<Tensor<f64>>) {
        let store = ParamStore::new();
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]).expect("gradient present");
            for j in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!((a - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "input {i} elem {j}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn conv_and_group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([2, 4, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn([4, 4, 3, 3], 0.3, &mut rng);
        let b = Tensor::randn([4], 0.3, &mut rng);
        let gamma = Tensor::randn([4], 1.0, &mut rng);
        let beta = Tensor::randn([4], 1.0, &mut rng);
        let target = Tensor::randn([2, 4, 3, 3], 1.0, &mut rng);
        check_inputs(
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
                let y = g.group_norm(y, v[3], v[4], 2);
                let y = g.silu(y);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            vec![x, w, b, gamma, beta],
        );
    }

    #[test]
    fn attention_and_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::randn([5, 4], 1.0, &mut rng);
        let kv = Tensor::randn([6, 4], 1.0, &mut rng);
        let gamma = Tensor::randn([4], 1.0, &mut rng);
        let beta = Tensor::randn([4], 1.0, &mut rng);
        check_inputs(
            |g, v| {
                let qn = g.layer_norm(v[0], v[2], v[3]);
                let vv = g.tanh(v[1]);
                let o = g.attention(
                    qn,
                    v[1],
                    vv,
                    vec![Segment::new(0, 2), Segment::new(2, 3)],
                    vec![Segment::new(0, 4), Segment::new(3, 3)],
                    2,
                );
                let z = g.constant(Tensor::zeros([5, 4]));
                g.mse(o, z)
            },
            vec![q, kv, gamma, beta],
        );
    }

    #[test]
    fn layout_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn([2, 3, 2, 2], 1.0, &mut rng);
        let b = Tensor::randn([2, 1, 2, 2], 1.0, &mut rng);
        let ch = Tensor::randn([2, 4], 1.0, &mut rng);
        let w = Tensor::randn([4, 3], 1.0, &mut rng);
        let bias = Tensor::randn([3], 1.0, &mut rng);
        let src = Tensor::randn([5], 1.0, &mut rng);
        check_inputs(
            |g, v| {
                let c = g.concat_channels(v[0], v[1]);
                let c = g.add_channel(c, v[2]);
                let u = g.upsample2x(c);
                let rows = g.nchw_to_rows(u);
                let l = g.linear(rows, v[3], Some(v[4]));
                let back = g.rows_to_nchw(l, 2, 4, 4);
                let flat = g.reshape(back, [96]);
                let sel = g.select_rows(flat, vec![0, 5, 5, 95, 3]);
                let cat = g.concat_rows(&[sel, v[5]]);
                let mut map = vec![KEEP_BASE; 10];
                map[1] = 2;
                map[4] = 0;
                map[7] = 2;
                let small = g.scale(v[5], 0.5);
                let ov = g.overlay(cat, small, map);
                let m = g.mul(ov, ov);
                let s = g.sub(m, ov);
                g.mean(s)
            },
            vec![a, b, ch, w, bias, src],
        );
    }

    #[test]
    fn params_receive_gradients_and_constants_do_not() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new([1, 2], vec![1.0, -1.0]));
        let wv = g.param(w);
        assert_eq!(g.param(w), wv, "param vars are cached per graph");
        let y = g.linear(x, wv, None);
        let l = g.mean(y);
        let grads = g.backward(l);
        assert_eq!(grads.param(w).unwrap().data(), &[0.5, 0.5, -0.5, -0.5]);
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn softmax_is_shift_stable() {
        let mut r = vec![1000.0f64, 1001.0, 999.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r[1] > r[0] && r[0] > r[2]);
    }
}
