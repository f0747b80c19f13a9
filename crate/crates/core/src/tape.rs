//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends one node holding its output value plus the
//! recipe (`Op`) to push gradients back to its parents. Node indices only
//! grow, so reverse creation order is a valid reverse topological order
//! and the backward pass visits each node exactly once.
//!
//! A tape is owned by one logical thread for the duration of a
//! forward/backward pass; parallelism lives inside the kernels, which
//! write disjoint outputs, keeping replay bit-deterministic.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::matmul;
use crate::kernels::norm;
use crate::kernels::sample;
use crate::parallel::{for_each_chunk, for_each_elem};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<E: Element> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, E),
    AddScalar(TensorId),
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: TensorId,
        b: TensorId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        alpha: E,
    },
    Reshape(TensorId),
    Permute {
        a: TensorId,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Softmax {
        a: TensorId,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Relu(TensorId),
    Gelu(TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Clamp {
        a: TensorId,
        lo: E,
        hi: E,
    },
    LayerNorm {
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        rows: usize,
        n: usize,
        stats: Vec<E>,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        geom: ConvGeom,
    },
    BilinearSample {
        x: TensorId,
        coords: TensorId,
        groups: usize,
    },
    ResizeBilinear {
        x: TensorId,
        in_h: usize,
        in_w: usize,
    },
    GlobalAvgPool {
        x: TensorId,
        h: usize,
        w: usize,
    },
    MulChannel {
        x: TensorId,
        wts: TensorId,
    },
    AddRowBias {
        x: TensorId,
        bias: TensorId,
    },
    CrossEntropy {
        logits: TensorId,
        target: Box<[u8]>,
        probs: Vec<E>,
        batch: usize,
        classes: usize,
        pixels: usize,
    },
    SumAll(TensorId),
    LatticeSplit {
        x: TensorId,
        gamma: usize,
    },
    LatticeMerge {
        x: TensorId,
        gamma: usize,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// The recording tape. Also tracks total buffer bytes so benchmarks can
/// report transient memory.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    bytes: usize,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bytes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total bytes held by node values and saved buffers.
    pub fn bytes_allocated(&self) -> usize {
        self.bytes
    }

    pub fn value(&self, id: TensorId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient reshaped into a tensor; zero tensor if never touched.
    pub fn grad_tensor(&self, id: TensorId) -> Tensor<E> {
        let shape = self.nodes[id.0].value.shape().to_vec();
        match &self.nodes[id.0].grad {
            Some(g) => Tensor::new(&shape, g.clone()).expect("grad shape matches value"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> TensorId {
        let extra = match &op {
            Op::LayerNorm { stats, .. } => stats.len(),
            Op::CrossEntropy { probs, .. } => probs.len(),
            _ => 0,
        };
        self.bytes += (value.numel() + extra) * std::mem::size_of::<E>();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    // ── Construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> TensorId {
        self.leaf(value, false)
    }

    // ── Elementwise and scalar ──────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x - *y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let c = E::from_f64(c);
        let data: Vec<E> = self.value(a).data().iter().map(|x| *x * c).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.any_requires(&[a]);
        self.push(t, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let c = E::from_f64(c);
        let data: Vec<E> = self.value(a).data().iter().map(|x| *x + c).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.any_requires(&[a]);
        self.push(t, rg, Op::AddScalar(a))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
            E::ONE,
        );
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Matmul { a, b, m, k, n }))
    }

    /// Batched matmul with a fused scalar: out = alpha * a @ b,
    /// a: [batch, m, k], b: [batch, k, n].
    pub fn bmm_alpha(&mut self, a: TensorId, b: TensorId, alpha: f64) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let alpha = E::from_f64(alpha);
        let mut out = Tensor::zeros(&[batch, m, n]);
        matmul::bmm_acc(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            batch,
            m,
            k,
            n,
            alpha,
        );
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(
            out,
            rg,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                alpha,
            },
        ))
    }

    // ── Shape movement ──────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_requires(&[a]);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let src_shape = self.shape(a).to_vec();
        if perm.len() != src_shape.len() {
            return Err(Error::Contract(format!(
                "permute: perm {:?} does not match rank of {:?}",
                perm, src_shape
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Contract(format!("permute: invalid perm {:?}", perm)));
            }
            seen[p] = true;
        }
        let out = permute_copy(self.value(a), perm);
        let rg = self.any_requires(&[a]);
        Ok(self.push(
            out,
            rg,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat: no inputs".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat: axis {} out of range for {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![E::ZERO; out_shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * s_axis * inner;
                data[dst_base..dst_base + s_axis * inner]
                    .copy_from_slice(&src[src_base..src_base + s_axis * inner]);
            }
            offset += s_axis;
        }
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.any_requires(parts);
        Ok(self.push(
            t,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    // ── Activations ─────────────────────────────────────────────────

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.maximum(E::ZERO))
            .collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.any_requires(&[a]);
        self.push(t, rg, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.any_requires(&[a]);
        self.push(t, rg, Op::Gelu(a))
    }

    pub fn tanh_op(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self.value(a).data().iter().map(|&x| x.tanh()).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.any_requires(&[a]);
        self.push(t, rg, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| sigmoid_fwd(x))
            .collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.any_requires(&[a]);
        self.push(t, rg, Op::Sigmoid(a))
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let (lo, hi) = (E::from_f64(lo), E::from_f64(hi));
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.maximum(lo).minimum(hi))
            .collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.any_requires(&[a]);
        self.push(t, rg, Op::Clamp { a, lo, hi })
    }

    // ── Normalization ───────────────────────────────────────────────

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax: axis {} out of range for {:?}",
                axis, shape
            )));
        }
        if !self.value(a).is_all_finite() {
            return Err(Error::Numeric(
                "softmax input contains non-finite values".into(),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&shape);
        norm::softmax_fwd(self.value(a).data(), out.data_mut(), outer, n, inner);
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::Softmax { a, outer, n, inner }))
    }

    /// Layer norm over the last axis of a [rows, n] tensor.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (rows, n) = self.value(a).dims2()?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", self.shape(a), self.shape(gamma)));
        }
        let mut out = Tensor::zeros(&[rows, n]);
        let mut stats = vec![E::ZERO; rows * 2];
        norm::layer_norm_fwd(
            self.value(a).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            out.data_mut(),
            &mut stats,
            rows,
            n,
            E::from_f64(eps),
        );
        let rg = self.any_requires(&[a, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                rows,
                n,
                stats,
            },
        ))
    }

    // ── Convolutions ────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (batch, c_in, in_h, in_w) = self.value(x).dims4()?;
        let (c_out, wc_in, k_h, k_w) = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(bid) = b {
            if self.shape(bid) != [c_out] {
                return Err(Error::shape("conv2d bias", &[c_out], self.shape(bid)));
            }
        }
        if stride == 0 || in_h + 2 * pad < k_h || in_w + 2 * pad < k_w {
            return Err(Error::Geometry(format!(
                "conv2d: kernel {}x{} stride {} pad {} does not fit input {}x{}",
                k_h, k_w, stride, pad, in_h, in_w
            )));
        }
        let out_h = (in_h + 2 * pad - k_h) / stride + 1;
        let out_w = (in_w + 2 * pad - k_w) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            in_h,
            in_w,
            c_out,
            k_h,
            k_w,
            stride,
            pad,
            out_h,
            out_w,
        };
        let mut out = Tensor::zeros(&[batch, c_out, out_h, out_w]);
        conv::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bid| self.value(bid).data()),
            out.data_mut(),
            &geom,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.any_requires(&parents);
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, geom }))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (batch, c_in, in_h, in_w) = self.value(x).dims4()?;
        let (wc_in, c_out, k_h, k_w) = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(Error::shape(
                "conv_transpose2d",
                self.shape(x),
                self.shape(w),
            ));
        }
        if stride == 0 || (in_h - 1) * stride + k_h < 2 * pad + 1 {
            return Err(Error::Geometry(format!(
                "conv_transpose2d: kernel {}x{} stride {} pad {} invalid for input {}x{}",
                k_h, k_w, stride, pad, in_h, in_w
            )));
        }
        let out_h = (in_h - 1) * stride + k_h - 2 * pad;
        let out_w = (in_w - 1) * stride + k_w - 2 * pad;
        let geom = ConvGeom {
            batch,
            c_in,
            in_h,
            in_w,
            c_out,
            k_h,
            k_w,
            stride,
            pad,
            out_h,
            out_w,
        };
        let mut out = Tensor::zeros(&[batch, c_out, out_h, out_w]);
        conv::conv_transpose2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bid| self.value(bid).data()),
            out.data_mut(),
            &geom,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.any_requires(&parents);
        Ok(self.push(out, rg, Op::ConvTranspose2d { x, w, b, geom }))
    }

    // ── Sampling and pooling ────────────────────────────────────────

    /// Gather x at fractional (row, col) coordinates with border clamp.
    /// coords is [B*G, 2, Ho, Wo]; output [B*G, C, Ho, Wo]. Differentiable
    /// in both the map and the coordinates.
    pub fn bilinear_sample(&mut self, x: TensorId, coords: TensorId) -> Result<TensorId> {
        let (batch, channels, h, w) = self.value(x).dims4()?;
        let (bg, two, out_h, out_w) = self.value(coords).dims4()?;
        if two != 2 || bg % batch != 0 {
            return Err(Error::shape(
                "bilinear_sample",
                self.shape(x),
                self.shape(coords),
            ));
        }
        if !self.value(coords).is_all_finite() {
            return Err(Error::Numeric(
                "bilinear_sample: non-finite coordinates".into(),
            ));
        }
        let groups = bg / batch;
        let mut out = Tensor::zeros(&[bg, channels, out_h, out_w]);
        sample::bilinear_fwd(
            self.value(x).data(),
            self.value(coords).data(),
            out.data_mut(),
            batch,
            groups,
            channels,
            h,
            w,
            out_h,
            out_w,
        );
        let rg = self.any_requires(&[x, coords]);
        Ok(self.push(out, rg, Op::BilinearSample { x, coords, groups }))
    }

    pub fn resize_bilinear(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let (batch, channels, in_h, in_w) = self.value(x).dims4()?;
        let mut out = Tensor::zeros(&[batch, channels, out_h, out_w]);
        sample::resize_bilinear_fwd(
            self.value(x).data(),
            out.data_mut(),
            batch * channels,
            in_h,
            in_w,
            out_h,
            out_w,
        );
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, rg, Op::ResizeBilinear { x, in_h, in_w }))
    }

    /// [B, C, H, W] -> [B, C] mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let (batch, channels, h, w) = self.value(x).dims4()?;
        let inv = E::ONE / E::from_f64((h * w) as f64);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[batch, channels]);
        for_each_elem(out.data_mut(), |i, o| {
            let plane = &src[i * h * w..][..h * w];
            let mut acc = E::ZERO;
            for &v in plane {
                acc += v;
            }
            *o = acc * inv;
        });
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, rg, Op::GlobalAvgPool { x, h, w }))
    }

    /// Per-channel broadcast multiply: x [B,C,H,W] * wts [B,C].
    pub fn mul_channel(&mut self, x: TensorId, wts: TensorId) -> Result<TensorId> {
        let (batch, channels, h, w) = self.value(x).dims4()?;
        let (wb, wc) = self.value(wts).dims2()?;
        if wb != batch || wc != channels {
            return Err(Error::shape("mul_channel", self.shape(x), self.shape(wts)));
        }
        let src = self.value(x).data();
        let ws = self.value(wts).data();
        let mut out = Tensor::zeros(&[batch, channels, h, w]);
        for_each_chunk(out.data_mut(), h * w, |i, o| {
            let coeff = ws[i];
            let xs = &src[i * h * w..][..h * w];
            for (ov, &xv) in o.iter_mut().zip(xs) {
                *ov = coeff * xv;
            }
        });
        let rg = self.any_requires(&[x, wts]);
        Ok(self.push(out, rg, Op::MulChannel { x, wts }))
    }

    /// x [m, n] + bias [n] broadcast over rows.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_row_bias",
                self.shape(x),
                self.shape(bias),
            ));
        }
        let src = self.value(x).data();
        let bs = self.value(bias).data();
        let mut out = Tensor::zeros(&[m, n]);
        for_each_chunk(out.data_mut(), n, |i, o| {
            let xs = &src[i * n..][..n];
            for ((ov, &xv), &bv) in o.iter_mut().zip(xs).zip(bs) {
                *ov = xv + bv;
            }
        });
        let rg = self.any_requires(&[x, bias]);
        Ok(self.push(out, rg, Op::AddRowBias { x, bias }))
    }

    // ── Loss ────────────────────────────────────────────────────────

    /// Mean pixel-wise cross-entropy of [B, K, H, W] logits against
    /// integer labels (length B*H*W, values < K). Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: TensorId, target: &[u8]) -> Result<TensorId> {
        let (batch, classes, h, w) = self.value(logits).dims4()?;
        let pixels = h * w;
        if target.len() != batch * pixels {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[target.len()],
            ));
        }
        if let Some(bad) = target.iter().find(|&&t| t as usize >= classes) {
            return Err(Error::Label(format!(
                "target value {} outside 0..{}",
                bad, classes
            )));
        }
        let mut probs = vec![E::ZERO; batch * classes * pixels];
        let loss = norm::cross_entropy_fwd(
            self.value(logits).data(),
            target,
            &mut probs,
            batch,
            classes,
            pixels,
        );
        let rg = self.any_requires(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                target: target.into(),
                probs,
                batch,
                classes,
                pixels,
            },
        ))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let mut acc = E::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        let rg = self.any_requires(&[a]);
        self.push(Tensor::scalar(acc), rg, Op::SumAll(a))
    }

    // ── Lattice shuffle primitives ──────────────────────────────────

    /// Split [B, C, H, W] into the gamma^2 strided subsets, stacked as
    /// [B*gamma^2, C, H/gamma, W/gamma] with subset index s = k*gamma + l:
    /// out[(b, s), c, x, y] = in[b, c, gamma*x + k, gamma*y + l].
    pub fn lattice_split(&mut self, x: TensorId, gamma: usize) -> Result<TensorId> {
        let (batch, channels, h, w) = self.value(x).dims4()?;
        if gamma == 0 || h % gamma != 0 || w % gamma != 0 {
            return Err(Error::Geometry(format!(
                "lattice_split: {}x{} not divisible by gamma {}",
                h, w, gamma
            )));
        }
        let (sh, sw) = (h / gamma, w / gamma);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[batch * gamma * gamma, channels, sh, sw]);
        for_each_chunk(out.data_mut(), sh * sw, |plane_idx, o| {
            let c = plane_idx % channels;
            let n = plane_idx / channels;
            let b = n / (gamma * gamma);
            let s = n % (gamma * gamma);
            let (k, l) = (s / gamma, s % gamma);
            let xp = &src[(b * channels + c) * h * w..][..h * w];
            for xbar in 0..sh {
                let src_row = &xp[(gamma * xbar + k) * w..][..w];
                let o_row = &mut o[xbar * sw..][..sw];
                for (ybar, ov) in o_row.iter_mut().enumerate() {
                    *ov = src_row[gamma * ybar + l];
                }
            }
        });
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, rg, Op::LatticeSplit { x, gamma }))
    }

    /// Inverse of `lattice_split`: scatter each subset pixel back to its
    /// lattice slot. Input [B*gamma^2, C, h, w] -> [B, C, h*gamma, w*gamma].
    pub fn lattice_merge(&mut self, x: TensorId, gamma: usize) -> Result<TensorId> {
        let (bg, channels, sh, sw) = self.value(x).dims4()?;
        if gamma == 0 || bg % (gamma * gamma) != 0 {
            return Err(Error::Geometry(format!(
                "lattice_merge: batch {} not a multiple of gamma^2 {}",
                bg,
                gamma * gamma
            )));
        }
        let batch = bg / (gamma * gamma);
        let (h, w) = (sh * gamma, sw * gamma);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[batch, channels, h, w]);
        for_each_chunk(out.data_mut(), h * w, |plane_idx, o| {
            let c = plane_idx % channels;
            let b = plane_idx / channels;
            for s in 0..gamma * gamma {
                let (k, l) = (s / gamma, s % gamma);
                let sp = &src[((b * gamma * gamma + s) * channels + c) * sh * sw..][..sh * sw];
                for xbar in 0..sh {
                    let o_row = &mut o[(gamma * xbar + k) * w..][..w];
                    let s_row = &sp[xbar * sw..][..sw];
                    for (ybar, &sv) in s_row.iter().enumerate() {
                        o_row[gamma * ybar + l] = sv;
                    }
                }
            }
        });
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, rg, Op::LatticeMerge { x, gamma }))
    }

    // ── Backward ────────────────────────────────────────────────────

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<E> {
        let numel = self.nodes[id.0].value.numel();
        self.nodes[id.0]
            .grad
            .get_or_insert_with(|| vec![E::ZERO; numel])
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate into
    /// any existing buffers; call `zero_grads` between independent passes.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Seed to exactly 1 for this pass; pre-existing accumulation on the
        // loss node itself is not meaningful, but interior grads accumulate.
        let mut pass_grads: Vec<Option<Vec<E>>> = vec![None; loss.0 + 1];
        pass_grads[loss.0] = Some(vec![E::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = pass_grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            // Persist this node's gradient (accumulating across calls).
            {
                let buf = self.grad_buf(TensorId(idx));
                for (b, gv) in buf.iter_mut().zip(&g) {
                    *b += *gv;
                }
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g, &mut pass_grads)?;
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn add_into(&self, pass: &mut [Option<Vec<E>>], id: TensorId, contrib: Vec<E>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut pass[id.0] {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(&contrib) {
                    *b += *v;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn add_into_with<F>(&self, pass: &mut [Option<Vec<E>>], id: TensorId, fill: F)
    where
        F: FnOnce(&mut [E]),
    {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let buf = pass[id.0].get_or_insert_with(|| vec![E::ZERO; numel]);
        fill(buf);
    }

    fn propagate(
        &self,
        out_idx: usize,
        op: &Op<E>,
        g: &[E],
        pass: &mut [Option<Vec<E>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(pass, *a, g.to_vec());
                self.add_into(pass, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.add_into(pass, *a, g.to_vec());
                self.add_into(pass, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.add_into(pass, *a, g.iter().zip(bv).map(|(&gv, &x)| gv * x).collect());
                self.add_into(pass, *b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
            }
            Op::Scale(a, c) => {
                self.add_into(pass, *a, g.iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar(a) => {
                self.add_into(pass, *a, g.to_vec());
            }
            Op::Matmul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.add_into_with(pass, *a, |da| {
                    matmul::matmul_abt_acc(g, bv, da, *m, *k, *n, E::ONE);
                });
                self.add_into_with(pass, *b, |db| {
                    matmul::matmul_atb_acc(av, g, db, *m, *k, *n, E::ONE);
                });
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                alpha,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.add_into_with(pass, *a, |da| {
                    matmul::bmm_abt_acc(g, bv, da, *batch, *m, *k, *n, *alpha);
                });
                self.add_into_with(pass, *b, |db| {
                    matmul::bmm_atb_acc(av, g, db, *batch, *m, *k, *n, *alpha);
                });
            }
            Op::Reshape(a) => {
                self.add_into(pass, *a, g.to_vec());
            }
            Op::Permute { a, perm } => {
                // Gradient flows through the inverse permutation.
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let g_t = Tensor::new(&self.shape_of_permuted(*a, perm), g.to_vec())?;
                let back = permute_copy(&g_t, &inv);
                self.add_into(pass, *a, back.into_data());
            }
            Op::Concat { parts, axis } => {
                let first = self.shape(parts[0]).to_vec();
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let axis_total: usize = parts.iter().map(|&p| self.shape(p)[*axis]).sum();
                let mut offset = 0;
                for &p in parts {
                    let s_axis = self.shape(p)[*axis];
                    let mut contrib = vec![E::ZERO; self.nodes[p.0].value.numel()];
                    for o in 0..outer {
                        let src_base = (o * axis_total + offset) * inner;
                        let dst_base = o * s_axis * inner;
                        contrib[dst_base..dst_base + s_axis * inner]
                            .copy_from_slice(&g[src_base..src_base + s_axis * inner]);
                    }
                    self.add_into(pass, p, contrib);
                    offset += s_axis;
                }
            }
            Op::Softmax { a, outer, n, inner } => {
                // The node's own value is the saved softmax output.
                let y = self.nodes[out_idx].value.data();
                let mut dx = vec![E::ZERO; g.len()];
                norm::softmax_bwd(g, y, &mut dx, *outer, *n, *inner);
                self.add_into(pass, *a, dx);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.add_into(
                    pass,
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&gv, &x)| if x > E::ZERO { gv } else { E::ZERO })
                        .collect(),
                );
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.add_into(
                    pass,
                    *a,
                    g.iter().zip(av).map(|(&gv, &x)| gv * gelu_bwd(x)).collect(),
                );
            }
            Op::Tanh(a) => {
                let av = self.value(*a).data();
                self.add_into(
                    pass,
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&gv, &x)| {
                            let t = x.tanh();
                            gv * (E::ONE - t * t)
                        })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let av = self.value(*a).data();
                self.add_into(
                    pass,
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&gv, &x)| {
                            let s = sigmoid_fwd(x);
                            gv * s * (E::ONE - s)
                        })
                        .collect(),
                );
            }
            Op::Clamp { a, lo, hi } => {
                let av = self.value(*a).data();
                self.add_into(
                    pass,
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&gv, &x)| if x > *lo && x < *hi { gv } else { E::ZERO })
                        .collect(),
                );
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                rows,
                n,
                stats,
            } => {
                let xv = self.value(*a).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![E::ZERO; xv.len()];
                let mut dgamma = vec![E::ZERO; *n];
                let mut dbeta = vec![E::ZERO; *n];
                norm::layer_norm_bwd(
                    g,
                    xv,
                    gv,
                    stats,
                    &mut dx,
                    &mut dgamma,
                    &mut dbeta,
                    *rows,
                    *n,
                );
                self.add_into(pass, *a, dx);
                self.add_into(pass, *gamma, dgamma);
                self.add_into(pass, *beta, dbeta);
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.add_into_with(pass, *x, |dx| conv::conv2d_bwd_x(g, wv, dx, geom));
                self.add_into_with(pass, *w, |dw| conv::conv2d_bwd_w(g, xv, dw, geom));
                if let Some(bid) = b {
                    self.add_into_with(pass, *bid, |db| conv::conv2d_bwd_b(g, db, geom));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.add_into_with(pass, *x, |dx| conv::conv_transpose2d_bwd_x(g, wv, dx, geom));
                self.add_into_with(pass, *w, |dw| conv::conv_transpose2d_bwd_w(g, xv, dw, geom));
                if let Some(bid) = b {
                    // geom.c_out/out_h/out_w already describe gout's layout.
                    self.add_into_with(pass, *bid, |db| conv::conv2d_bwd_b(g, db, geom));
                }
            }
            Op::BilinearSample { x, coords, groups } => {
                let xv = self.value(*x);
                let cv = self.value(*coords);
                let (batch, channels, h, w) = xv.dims4()?;
                let (_, _, out_h, out_w) = cv.dims4()?;
                self.add_into_with(pass, *x, |dx| {
                    sample::bilinear_bwd_x(
                        g,
                        cv.data(),
                        dx,
                        batch,
                        *groups,
                        channels,
                        h,
                        w,
                        out_h,
                        out_w,
                    )
                });
                self.add_into_with(pass, *coords, |dc| {
                    sample::bilinear_bwd_coords(
                        g,
                        xv.data(),
                        cv.data(),
                        dc,
                        batch,
                        *groups,
                        channels,
                        h,
                        w,
                        out_h,
                        out_w,
                    )
                });
            }
            Op::ResizeBilinear { x, in_h, in_w } => {
                let (batch, channels, _, _) = self.value(*x).dims4()?;
                let out_shape = self.nodes[out_idx].value.shape();
                let (out_h, out_w) = (out_shape[2], out_shape[3]);
                self.add_into_with(pass, *x, |dx| {
                    sample::resize_bilinear_bwd(g, dx, batch * channels, *in_h, *in_w, out_h, out_w)
                });
            }
            Op::GlobalAvgPool { x, h, w } => {
                let inv = E::ONE / E::from_f64((*h * *w) as f64);
                self.add_into_with(pass, *x, |dx| {
                    for_each_chunk(dx, *h * *w, |i, plane| {
                        let gv = g[i] * inv;
                        for d in plane.iter_mut() {
                            *d += gv;
                        }
                    });
                });
            }
            Op::MulChannel { x, wts } => {
                let xv = self.value(*x).data();
                let wv = self.value(*wts).data();
                let hw = xv.len() / wv.len();
                self.add_into_with(pass, *x, |dx| {
                    for_each_chunk(dx, hw, |i, plane| {
                        let coeff = wv[i];
                        let gs = &g[i * hw..][..hw];
                        for (d, &gv) in plane.iter_mut().zip(gs) {
                            *d += coeff * gv;
                        }
                    });
                });
                self.add_into_with(pass, *wts, |dw| {
                    for_each_elem(dw, |i, d| {
                        let gs = &g[i * hw..][..hw];
                        let xs = &xv[i * hw..][..hw];
                        let mut acc = E::ZERO;
                        for (&gv, &xvv) in gs.iter().zip(xs) {
                            acc += gv * xvv;
                        }
                        *d += acc;
                    });
                });
            }
            Op::AddRowBias { x, bias } => {
                let n = self.value(*bias).numel();
                let m = g.len() / n;
                self.add_into(pass, *x, g.to_vec());
                self.add_into_with(pass, *bias, |db| {
                    for_each_elem(db, |j, d| {
                        let mut acc = E::ZERO;
                        for i in 0..m {
                            acc += g[i * n + j];
                        }
                        *d += acc;
                    });
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
                batch,
                classes,
                pixels,
            } => {
                self.add_into_with(pass, *logits, |dl| {
                    norm::cross_entropy_bwd(g[0], probs, target, dl, *batch, *classes, *pixels)
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                self.add_into_with(pass, *a, |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::LatticeSplit { x, gamma } => {
                // d in[b,c,h,w] += g[(b, s(h,w)), c, h/gamma, w/gamma]
                let (_, channels, h, w) = self.value(*x).dims4()?;
                let gamma = *gamma;
                let (sh, sw) = (h / gamma, w / gamma);
                self.add_into_with(pass, *x, |dx| {
                    for_each_chunk(dx, h * w, |plane_idx, plane| {
                        let c = plane_idx % channels;
                        let b = plane_idx / channels;
                        for hh in 0..h {
                            let (xbar, k) = (hh / gamma, hh % gamma);
                            let row = &mut plane[hh * w..][..w];
                            for (ww, d) in row.iter_mut().enumerate() {
                                let (ybar, l) = (ww / gamma, ww % gamma);
                                let s = k * gamma + l;
                                *d += g[(((b * gamma * gamma + s) * channels + c) * sh + xbar)
                                    * sw
                                    + ybar];
                            }
                        }
                    });
                });
            }
            Op::LatticeMerge { x, gamma } => {
                let (bg, channels, sh, sw) = self.value(*x).dims4()?;
                let gamma = *gamma;
                let (h, w) = (sh * gamma, sw * gamma);
                let _ = bg;
                self.add_into_with(pass, *x, |dx| {
                    for_each_chunk(dx, sh * sw, |plane_idx, plane| {
                        let c = plane_idx % channels;
                        let n = plane_idx / channels;
                        let b = n / (gamma * gamma);
                        let s = n % (gamma * gamma);
                        let (k, l) = (s / gamma, s % gamma);
                        for xbar in 0..sh {
                            let row = &mut plane[xbar * sw..][..sw];
                            let g_row = &g[((b * channels + c) * h + gamma * xbar + k) * w..][..w];
                            for (ybar, d) in row.iter_mut().enumerate() {
                                *d += g_row[gamma * ybar + l];
                            }
                        }
                    });
                });
            }
        }
        Ok(())
    }

    fn shape_of_permuted(&self, a: TensorId, perm: &[usize]) -> Vec<usize> {
        let s = self.shape(a);
        perm.iter().map(|&p| s[p]).collect()
    }
}

/// Materialized permutation copy.
fn permute_copy<E: Element>(t: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    let src_shape = t.shape();
    let rank = src_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    // Strides of the source, looked up through the permutation.
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let perm_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let numel = t.numel();
    let mut out = Tensor::zeros(&out_shape);
    if rank == 0 {
        return t.clone();
    }
    let src = t.data();
    let out_dims = out_shape.clone();
    for_each_elem(out.data_mut(), |flat, o| {
        let mut rem = flat;
        let mut src_idx = 0;
        for d in (0..rank).rev() {
            let coord = rem % out_dims[d];
            rem /= out_dims[d];
            src_idx += coord * perm_strides[d];
        }
        *o = src[src_idx];
    });
    let _ = numel;
    out
}

#[inline(always)]
fn gelu_fwd<E: Element>(x: E) -> E {
    // tanh approximation
    let half = E::from_f64(0.5);
    let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = E::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    half * x * (E::ONE + u.tanh())
}

#[inline(always)]
fn gelu_bwd<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(0.7978845608028654);
    let a = E::from_f64(0.044715);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * a * x * x)
}

#[inline(always)]
fn sigmoid_fwd<E: Element>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_small_case_matches_reference_formula() {
        // Independent high-precision evaluation of softmax([1, 2, 3]).
        let xs = [1.0f64, 2.0, 3.0];
        let mx = 3.0f64;
        let exps: Vec<f64> = xs.iter().map(|v| (v - mx).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let want: Vec<f64> = exps.iter().map(|e| e / denom).collect();

        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3], xs.to_vec()).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![1.0, f32::NAN]).unwrap());
        assert!(matches!(tape.softmax(x, 0), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape: Tape<f32> = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = tape.constant(Tensor::from_fn(&[4, 5], |_| r.gen::<f32>()));
        let c = tape.matmul(z, a).unwrap();
        assert_eq!(tape.shape(c), &[3, 5]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = match tape.matmul(a, b) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("mismatched matmul accepted"),
        };
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn global_avg_pool_of_constant_map() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.75f32));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        for &v in tape.value(y).data() {
            assert!((v - 0.75).abs() < 1e-7);
        }
    }

    #[test]
    fn cross_entropy_saturates_with_a_large_margin() {
        // Logits favoring the correct class by +20: loss below 1e-8.
        let mut tape: Tape<f64> = Tape::new();
        let mut logits = Tensor::zeros(&[1, 2, 2, 2]);
        let target = [1u8, 0, 1, 0];
        for (i, &t) in target.iter().enumerate() {
            logits.data_mut()[t as usize * 4 + i] = 20.0;
        }
        let l = tape.constant(logits);
        let loss = tape.cross_entropy(l, &target).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-8);
    }

    #[test]
    fn cross_entropy_random_case_matches_reference() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::from_fn(&[2, 2, 2, 2], |_| r.gen::<f64>() * 4.0 - 2.0);
        let target: Vec<u8> = (0..8).map(|_| u8::from(r.gen::<bool>())).collect();
        // Direct evaluation of mean -log softmax(logits)[target].
        let mut want = 0.0f64;
        let d = logits.data();
        for b in 0..2 {
            for i in 0..4 {
                let l0 = d[b * 8 + i];
                let l1 = d[b * 8 + 4 + i];
                let mx = l0.max(l1);
                let z = (l0 - mx).exp() + (l1 - mx).exp();
                let lt = if target[b * 4 + i] == 0 { l0 } else { l1 };
                want += -(lt - mx - z.ln());
            }
        }
        want /= 8.0;
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.constant(logits);
        let loss = tape.cross_entropy(l, &target).unwrap();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape: Tape<f32> = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 2, 1, 2]));
        assert!(matches!(
            tape.cross_entropy(l, &[0, 2]),
            Err(crate::Error::Label(_))
        ));
    }

    #[test]
    fn conv_geometry_that_cannot_fit_is_rejected() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x, w, None, 1, 0).is_err());
    }
}
