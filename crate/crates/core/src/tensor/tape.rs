//! Recorded computation graph with reverse-mode gradients.
//!
//! Each forward op appends a node holding its output value and the parent
//! indices it needs for the backward sweep. A tape is confined to one thread
//! and one forward pass (a whole training clip records onto a single tape so
//! gradients flow through propagated tokens).

use std::collections::HashMap;

use super::{mm_nn, mm_nt, mm_tn, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_CLAMP: f64 = 1e-12;
const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

enum Op {
    Leaf(ParamId),
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MinElem(usize, usize),
    MaxElem(usize, usize),
    Neg(usize),
    Exp(usize),
    LnClamped(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Sqrt(usize),
    PowConst(usize, f64),
    MulScalar(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    MatmulNT(usize, usize),
    Transpose2d(usize),
    Reshape(usize),
    Concat0(Vec<usize>),
    Slice0 {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Pick {
        x: usize,
        index: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    ScaleRows {
        x: usize,
        scale: usize,
    },
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        bias: usize,
        pad: usize,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    /// Op-specific saved statistics (means, inverse stds).
    saved: Vec<Tensor<T>>,
}

/// Recorded computation graph.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<usize, Var>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar read of a 1-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.push_saved(value, op, Vec::new())
    }

    fn push_saved(&mut self, value: Tensor<T>, op: Op, saved: Vec<Tensor<T>>) -> Var {
        self.nodes.push(Node { value, op, saved });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf for a stored parameter; repeated requests reuse the same node.
    /// A tape is bound to one store: leaves are cached by parameter index,
    /// so never mix stores on a single tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        debug_assert!(
            self.param_leaves
                .get(&id.0)
                .map(|&v| self.nodes[v.0].value.shape() == store.value(id).shape())
                .unwrap_or(true),
            "tape used with two different parameter stores"
        );
        if let Some(&v) = self.param_leaves.get(&id.0) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf(id));
        self.param_leaves.insert(id.0, v);
        v
    }

    /// Queue a value to be written into a buffer slot once the step is done.
    pub(crate) fn queue_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    /// Apply queued running-statistics updates to the store, in record order.
    pub fn apply_buffer_updates(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, value) in self.buffer_updates.drain(..) {
            store.set_value(id, value)?;
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise binary ──────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a.0, b.0)))
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("min", a, b)?;
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| if x <= y { x } else { y })?;
        Ok(self.push(value, Op::MinElem(a.0, b.0)))
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("max", a, b)?;
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| if x >= y { x } else { y })?;
        Ok(self.push(value, Op::MaxElem(a.0, b.0)))
    }

    // ── Elementwise unary ───────────────────────────────────────────

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        self.push(value, Op::Neg(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        self.push(value, Op::Exp(a.0))
    }

    /// Natural log with the argument clamped at 1e-12.
    pub fn ln_clamped(&mut self, a: Var) -> Var {
        let clamp = T::from_f64(LN_CLAMP);
        let value = self
            .value(a)
            .map(|x| if x > clamp { x.ln() } else { clamp.ln() });
        self.push(value, Op::LnClamped(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c0 = T::from_f64(GELU_C0);
        let c1 = T::from_f64(GELU_C1);
        let half = T::from_f64(0.5);
        let value = self.value(a).map(|x| {
            let u = c0 * (x + c1 * x * x * x);
            half * x * (T::one() + u.tanh())
        });
        self.push(value, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.sqrt());
        self.push(value, Op::Sqrt(a.0))
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let pt = T::from_f64(p);
        let value = self.value(a).map(|x| x.powf(pt));
        self.push(value, Op::PowConst(a.0, p))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let st = T::from_f64(s);
        let value = self.value(a).map(|x| x * st);
        self.push(value, Op::MulScalar(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let st = T::from_f64(s);
        let value = self.value(a).map(|x| x + st);
        self.push(value, Op::AddScalar(a.0))
    }

    // ── Matrix products ─────────────────────────────────────────────

    /// `a[M,K] x b[K,N] -> [M,N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        mm_nn(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        Ok(self.push(out, Op::Matmul(a.0, b.0)))
    }

    /// `a[M,K] x b[N,K]^T -> [M,N]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::DimensionMismatch {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Tensor::zeros(&[m, n]);
        mm_nt(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        Ok(self.push(out, Op::MatmulNT(a.0, b.0)))
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::DimensionMismatch {
                op: "transpose2d",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        Ok(self.push(out, Op::Transpose2d(a.0)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a.0)))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat0 of zero tensors"));
        }
        let tail: Vec<usize> = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::DimensionMismatch {
                    op: "concat0",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat0(parts.iter().map(|v| v.0).collect())))
    }

    /// Rows `[start, start+len)` along axis 0.
    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if start + len > s[0] {
            return Err(Error::contract(format!(
                "slice0 [{start}, {}) out of {} rows",
                start + len,
                s[0]
            )));
        }
        let stride: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&s[1..]);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice0 { x: a.0, start }))
    }

    /// Concatenate rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let rows = self.shape(parts[0])[0];
        let mut cols = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::DimensionMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            cols += s[1];
        }
        let mut data = vec![T::zero(); rows * cols];
        let mut offset = 0usize;
        for &p in parts {
            let pc = self.shape(p)[1];
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&src[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|v| v.0).collect())))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::DimensionMismatch {
                op: "slice_cols",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { x: a.0, start }))
    }

    /// Single element by flat index, as a `[1]` tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        if index >= self.value(a).numel() {
            return Err(Error::contract(format!(
                "pick index {index} out of {} elements",
                self.value(a).numel()
            )));
        }
        let value = Tensor::scalar(self.value(a).data()[index]);
        Ok(self.push(value, Op::Pick { x: a.0, index }))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        let value = Tensor::scalar(s / T::from_f64(n as f64));
        self.push(value, Op::MeanAll(a.0))
    }

    // ── Broadcast helpers ───────────────────────────────────────────

    /// `x[R,D] + bias[D]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::DimensionMismatch {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (r, d) = (sx[0], sx[1]);
        let bv = self.value(bias).data().to_vec();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * d);
        for i in 0..r {
            for j in 0..d {
                data.push(xv[i * d + j] + bv[j]);
            }
        }
        let out = Tensor::new(vec![r, d], data)?;
        Ok(self.push(
            out,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
            },
        ))
    }

    /// `y[r,:] = x[r,:] * scale[r]` with `scale` of shape `[R,1]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(scale));
        if sx.len() != 2 || ss != [sx[0], 1] {
            return Err(Error::DimensionMismatch {
                op: "scale_rows",
                lhs: sx.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let (r, d) = (sx[0], sx[1]);
        let sv = self.value(scale).data().to_vec();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * d);
        for i in 0..r {
            for j in 0..d {
                data.push(xv[i * d + j] * sv[i]);
            }
        }
        let out = Tensor::new(vec![r, d], data)?;
        Ok(self.push(
            out,
            Op::ScaleRows {
                x: x.0,
                scale: scale.0,
            },
        ))
    }

    // ── Composite neural ops ────────────────────────────────────────

    /// Row-wise softmax of a rank-2 tensor, max-subtracted for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::DimensionMismatch {
                op: "softmax_rows",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, d) = (s[0], s[1]);
        let xv = self.value(a).data();
        let mut data = vec![T::zero(); r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let m = row
                .iter()
                .cloned()
                .fold(T::neg_infinity(), |acc, v| if v > acc { v } else { acc });
            let mut z = T::zero();
            for j in 0..d {
                let e = (row[j] - m).exp();
                data[i * d + j] = e;
                z = z + e;
            }
            for j in 0..d {
                data[i * d + j] = data[i * d + j] / z;
            }
        }
        let out = Tensor::new(vec![r, d], data)?;
        Ok(self.push(out, Op::SoftmaxRows(a.0)))
    }

    /// Per-row layer normalization over the last axis of `x[R,D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 2 || sg != [sx[1]] || sb != [sx[1]] {
            return Err(Error::DimensionMismatch {
                op: "layer_norm",
                lhs: sx.to_vec(),
                rhs: sg.to_vec(),
            });
        }
        let (r, d) = (sx[0], sx[1]);
        let dn = T::from_f64(d as f64);
        let epst = T::from_f64(eps);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = vec![T::zero(); r * d];
        let mut means = vec![T::zero(); r];
        let mut inv_stds = vec![T::zero(); r];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / dn;
            let inv_std = T::one() / (var + epst).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                data[i * d + j] = gv[j] * xhat + bv[j];
            }
        }
        let out = Tensor::new(vec![r, d], data)?;
        let saved = vec![
            Tensor::new(vec![r], means)?,
            Tensor::new(vec![r], inv_stds)?,
        ];
        Ok(self.push_saved(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            saved,
        ))
    }

    /// 2-D cross-correlation, stride 1: `x[Cin,H,W] * kernel[Cout,Cin,s,s] + bias[Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, pad: usize) -> Result<Var> {
        let (sx, sk, sb) = (
            self.shape(x).to_vec(),
            self.shape(kernel).to_vec(),
            self.shape(bias).to_vec(),
        );
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] != sk[3] {
            return Err(Error::DimensionMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let s = sk[2];
        if s % 2 == 0 {
            return Err(Error::UnsupportedKernel(s));
        }
        if sb != [sk[0]] {
            return Err(Error::DimensionMismatch {
                op: "conv2d bias",
                lhs: sk,
                rhs: sb,
            });
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let cout = sk[0];
        let ho = (h + 2 * pad).checked_sub(s - 1).filter(|&v| v >= 1).ok_or(
            Error::DimensionMismatch {
                op: "conv2d output",
                lhs: sx.clone(),
                rhs: sk.clone(),
            },
        )?;
        let wo = (w + 2 * pad).checked_sub(s - 1).filter(|&v| v >= 1).ok_or(
            Error::DimensionMismatch {
                op: "conv2d output",
                lhs: sx.clone(),
                rhs: sk.clone(),
            },
        )?;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut out = vec![T::zero(); cout * ho * wo];
        conv2d_forward(xv, kv, bv, &mut out, cin, h, w, cout, s, pad, ho, wo);
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
                pad,
            },
        ))
    }

    /// Batch norm over `x[C,H,W]` using this map's per-channel statistics;
    /// queues momentum updates of the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        store: &ParamStore<T>,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.shape(gamma) != [sx[0]] || self.shape(beta) != [sx[0]] {
            return Err(Error::DimensionMismatch {
                op: "batch_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let n = h * w;
        let nt = T::from_f64(n as f64);
        let epst = T::from_f64(eps);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = vec![T::zero(); c * n];
        let mut means = vec![T::zero(); c];
        let mut inv_stds = vec![T::zero(); c];
        let mut batch_vars = vec![T::zero(); c];
        for ch in 0..c {
            let plane = &xv[ch * n..(ch + 1) * n];
            let mut mean = T::zero();
            for &v in plane {
                mean = mean + v;
            }
            mean = mean / nt;
            let mut var = T::zero();
            for &v in plane {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / nt;
            let inv_std = T::one() / (var + epst).sqrt();
            means[ch] = mean;
            inv_stds[ch] = inv_std;
            batch_vars[ch] = var;
            for i in 0..n {
                data[ch * n + i] = gv[ch] * (plane[i] - mean) * inv_std + bv[ch];
            }
        }
        // Momentum update of running statistics (unbiased variance).
        let m = T::from_f64(momentum);
        let one_m = T::one() - m;
        let unbias = if n > 1 {
            T::from_f64(n as f64 / (n as f64 - 1.0))
        } else {
            T::one()
        };
        let rm_old = store.value(running_mean).data().to_vec();
        let rv_old = store.value(running_var).data().to_vec();
        let rm_new: Vec<T> = (0..c).map(|i| one_m * rm_old[i] + m * means[i]).collect();
        let rv_new: Vec<T> = (0..c)
            .map(|i| one_m * rv_old[i] + m * batch_vars[i] * unbias)
            .collect();
        self.queue_buffer_update(running_mean, Tensor::new(vec![c], rm_new)?);
        self.queue_buffer_update(running_var, Tensor::new(vec![c], rv_new)?);

        let value = Tensor::new(vec![c, h, w], data)?;
        let saved = vec![
            Tensor::new(vec![c], means)?,
            Tensor::new(vec![c], inv_stds)?,
        ];
        Ok(self.push_saved(
            value,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            saved,
        ))
    }

    /// Batch norm over `x[C,H,W]` using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3
            || self.shape(gamma) != [sx[0]]
            || running_mean.shape() != [sx[0]]
            || running_var.shape() != [sx[0]]
        {
            return Err(Error::DimensionMismatch {
                op: "batch_norm_eval",
                lhs: sx,
                rhs: running_mean.shape().to_vec(),
            });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let n = h * w;
        let epst = T::from_f64(eps);
        for &v in running_var.data() {
            if v + epst <= T::zero() {
                return Err(Error::contract(
                    "batch norm variance plus eps must be positive",
                ));
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let means = running_mean.data().to_vec();
        let inv_stds: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + epst).sqrt())
            .collect();
        let mut data = vec![T::zero(); c * n];
        for ch in 0..c {
            for i in 0..n {
                data[ch * n + i] = gv[ch] * (xv[ch * n + i] - means[ch]) * inv_stds[ch] + bv[ch];
            }
        }
        let value = Tensor::new(vec![c, h, w], data)?;
        let saved = vec![
            Tensor::new(vec![c], means)?,
            Tensor::new(vec![c], inv_stds)?,
        ];
        Ok(self.push_saved(
            value,
            Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            saved,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; gradients of reachable parameter
    /// leaves are accumulated into the store.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..n).rev() {
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &gy, &mut grads, store)?;
            // Leaf accumulation happens inside backprop_node; keep the grad
            // around for introspection of leaves only.
            if matches!(self.nodes[i].op, Op::Leaf(_) | Op::Const) {
                grads[i] = Some(gy);
            }
        }
        Ok(())
    }

    /// Gradient w.r.t. an input var captured during the last backward call.
    /// Only leaf and constant nodes retain their gradients.
    pub fn backward_keeping(
        &mut self,
        loss: Var,
        store: &mut ParamStore<T>,
        keep: &[Var],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let keep_set: Vec<usize> = keep.iter().map(|v| v.0).collect();
        for i in (0..n).rev() {
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &gy, &mut grads, store)?;
            if keep_set.contains(&i) || matches!(self.nodes[i].op, Op::Leaf(_)) {
                grads[i] = Some(gy);
            }
        }
        Ok(keep.iter().map(|v| grads[v.0].clone()).collect())
    }

    fn backprop_node(
        &self,
        i: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor<T>>], parent: usize, g: Tensor<T>| match &mut grads
            [parent]
        {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let val = |idx: usize| &self.nodes[idx].value;
        match &node.op {
            Op::Const => {}
            Op::Leaf(id) => store.accumulate_grad(*id, gy),
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, gy.zip_map(val(*b), |g, v| g * v)?);
                acc(grads, *b, gy.zip_map(val(*a), |g, v| g * v)?);
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(grads, *a, gy.zip_map(bv, |g, v| g / v)?);
                let y = &node.value;
                let mut gb = gy.zip_map(y, |g, v| g * v)?;
                gb = gb.zip_map(bv, |g, v| -(g / v))?;
                acc(grads, *b, gb);
            }
            Op::MinElem(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(gy.shape());
                let mut gb = Tensor::zeros(gy.shape());
                for idx in 0..gy.numel() {
                    if av.data()[idx] <= bv.data()[idx] {
                        ga.data_mut()[idx] = gy.data()[idx];
                    } else {
                        gb.data_mut()[idx] = gy.data()[idx];
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::MaxElem(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(gy.shape());
                let mut gb = Tensor::zeros(gy.shape());
                for idx in 0..gy.numel() {
                    if av.data()[idx] >= bv.data()[idx] {
                        ga.data_mut()[idx] = gy.data()[idx];
                    } else {
                        gb.data_mut()[idx] = gy.data()[idx];
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Neg(a) => acc(grads, *a, gy.map(|v| -v)),
            Op::Exp(a) => acc(grads, *a, gy.zip_map(&node.value, |g, y| g * y)?),
            Op::LnClamped(a) => {
                let clamp = T::from_f64(LN_CLAMP);
                acc(
                    grads,
                    *a,
                    gy.zip_map(val(*a), |g, x| if x > clamp { g / x } else { T::zero() })?,
                );
            }
            Op::Relu(a) => acc(
                grads,
                *a,
                gy.zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() })?,
            ),
            Op::Gelu(a) => {
                let c0 = T::from_f64(GELU_C0);
                let c1 = T::from_f64(GELU_C1);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                acc(
                    grads,
                    *a,
                    gy.zip_map(val(*a), |g, x| {
                        let u = c0 * (x + c1 * x * x * x);
                        let t = u.tanh();
                        let du = c0 * (T::one() + three * c1 * x * x);
                        let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                        g * dy
                    })?,
                );
            }
            Op::Sigmoid(a) => acc(
                grads,
                *a,
                gy.zip_map(&node.value, |g, y| g * y * (T::one() - y))?,
            ),
            Op::Sqrt(a) => {
                let half = T::from_f64(0.5);
                acc(grads, *a, gy.zip_map(&node.value, |g, y| g * half / y)?);
            }
            Op::PowConst(a, p) => {
                let pt = T::from_f64(*p);
                let pm1 = T::from_f64(*p - 1.0);
                // guard 0 * inf at x == 0 (saturated sigmoid inputs)
                acc(
                    grads,
                    *a,
                    gy.zip_map(val(*a), |g, x| {
                        if pt == T::zero() || (x == T::zero() && pm1 < T::zero()) {
                            T::zero()
                        } else {
                            g * pt * x.powf(pm1)
                        }
                    })?,
                );
            }
            Op::MulScalar(a, s) => {
                let st = T::from_f64(*s);
                acc(grads, *a, gy.map(|g| g * st));
            }
            Op::AddScalar(a) => acc(grads, *a, gy.clone()),
            Op::Matmul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n2) = (sa[0], sa[1], sb[1]);
                let mut ga = Tensor::zeros(sa);
                mm_nt(gy.data(), val(*b).data(), ga.data_mut(), m, n2, k);
                let mut gb = Tensor::zeros(sb);
                mm_tn(val(*a).data(), gy.data(), gb.data_mut(), m, k, n2);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::MatmulNT(a, b) => {
                // y[M,N] = a[M,K] b[N,K]^T
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n2) = (sa[0], sa[1], sb[0]);
                let mut ga = Tensor::zeros(sa);
                mm_nn(gy.data(), val(*b).data(), ga.data_mut(), m, n2, k);
                let mut gb = Tensor::zeros(sb);
                mm_tn(gy.data(), val(*a).data(), gb.data_mut(), m, n2, k);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Transpose2d(a) => {
                let s = gy.shape();
                let (r, c) = (s[0], s[1]);
                let mut ga = Tensor::zeros(val(*a).shape());
                for i in 0..r {
                    for j in 0..c {
                        ga.data_mut()[j * r + i] = gy.data()[i * c + j];
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = gy.clone().reshape(val(*a).shape())?;
                acc(grads, *a, ga);
            }
            Op::Concat0(parts) => {
                let stride: usize = gy.shape()[1..].iter().product();
                let mut offset = 0usize;
                for &p in parts {
                    let rows = val(p).shape()[0];
                    let mut gp = Tensor::zeros(val(p).shape());
                    gp.data_mut()
                        .copy_from_slice(&gy.data()[offset * stride..(offset + rows) * stride]);
                    acc(grads, p, gp);
                    offset += rows;
                }
            }
            Op::Slice0 { x, start } => {
                let sx = val(*x).shape();
                let stride: usize = sx[1..].iter().product();
                let mut gx = Tensor::zeros(sx);
                let rows = gy.shape()[0];
                gx.data_mut()[start * stride..(start + rows) * stride].copy_from_slice(gy.data());
                acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let cols = gy.shape()[1];
                let rows = gy.shape()[0];
                let mut offset = 0usize;
                for &p in parts {
                    let pc = val(p).shape()[1];
                    let mut gp = Tensor::zeros(val(p).shape());
                    for r in 0..rows {
                        gp.data_mut()[r * pc..(r + 1) * pc]
                            .copy_from_slice(&gy.data()[r * cols + offset..r * cols + offset + pc]);
                    }
                    acc(grads, p, gp);
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let sx = val(*x).shape();
                let (rows, cols) = (sx[0], sx[1]);
                let len = gy.shape()[1];
                let mut gx = Tensor::zeros(sx);
                for r in 0..rows {
                    gx.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&gy.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *x, gx);
            }
            Op::Pick { x, index } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                gx.data_mut()[*index] = gy.data()[0];
                acc(grads, *x, gx);
            }
            Op::SumAll(a) => {
                let g = gy.data()[0];
                acc(grads, *a, Tensor::full(val(*a).shape(), g));
            }
            Op::MeanAll(a) => {
                let n = val(*a).numel();
                let g = gy.data()[0] / T::from_f64(n as f64);
                acc(grads, *a, Tensor::full(val(*a).shape(), g));
            }
            Op::AddBias { x, bias } => {
                acc(grads, *x, gy.clone());
                let d = val(*bias).shape()[0];
                let rows = gy.shape()[0];
                let mut gb = Tensor::zeros(&[d]);
                for r in 0..rows {
                    for j in 0..d {
                        gb.data_mut()[j] = gb.data_mut()[j] + gy.data()[r * d + j];
                    }
                }
                acc(grads, *bias, gb);
            }
            Op::ScaleRows { x, scale } => {
                let (rows, d) = (gy.shape()[0], gy.shape()[1]);
                let sv = val(*scale).data();
                let xv = val(*x).data();
                let mut gx = Tensor::zeros(val(*x).shape());
                let mut gs = Tensor::zeros(val(*scale).shape());
                for r in 0..rows {
                    let mut dot = T::zero();
                    for j in 0..d {
                        gx.data_mut()[r * d + j] = gy.data()[r * d + j] * sv[r];
                        dot = dot + gy.data()[r * d + j] * xv[r * d + j];
                    }
                    gs.data_mut()[r] = dot;
                }
                acc(grads, *x, gx);
                acc(grads, *scale, gs);
            }
            Op::SoftmaxRows(a) => {
                let (rows, d) = (gy.shape()[0], gy.shape()[1]);
                let y = node.value.data();
                let mut gx = Tensor::zeros(val(*a).shape());
                for r in 0..rows {
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot = dot + gy.data()[r * d + j] * y[r * d + j];
                    }
                    for j in 0..d {
                        gx.data_mut()[r * d + j] = y[r * d + j] * (gy.data()[r * d + j] - dot);
                    }
                }
                acc(grads, *a, gx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (rows, d) = (gy.shape()[0], gy.shape()[1]);
                let dn = T::from_f64(d as f64);
                let means = node.saved[0].data();
                let inv_stds = node.saved[1].data();
                let xv = val(*x).data();
                let gv = val(*gamma).data();
                let mut gx = Tensor::zeros(val(*x).shape());
                let mut gg = Tensor::zeros(val(*gamma).shape());
                let mut gb = Tensor::zeros(val(*beta).shape());
                for r in 0..rows {
                    let (mean, inv_std) = (means[r], inv_stds[r]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for j in 0..d {
                        let xhat = (xv[r * d + j] - mean) * inv_std;
                        let gyj = gy.data()[r * d + j];
                        gg.data_mut()[j] = gg.data_mut()[j] + gyj * xhat;
                        gb.data_mut()[j] = gb.data_mut()[j] + gyj;
                        let g = gyj * gv[j];
                        sum_g = sum_g + g;
                        sum_gx = sum_gx + g * xhat;
                    }
                    let mg = sum_g / dn;
                    let mgx = sum_gx / dn;
                    for j in 0..d {
                        let xhat = (xv[r * d + j] - mean) * inv_std;
                        let g = gy.data()[r * d + j] * gv[j];
                        gx.data_mut()[r * d + j] = inv_std * (g - mg - xhat * mgx);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                pad,
            } => {
                let sx = val(*x).shape();
                let sk = val(*kernel).shape();
                let (cin, h, w) = (sx[0], sx[1], sx[2]);
                let (cout, s) = (sk[0], sk[2]);
                let (ho, wo) = (gy.shape()[1], gy.shape()[2]);
                let mut gx = Tensor::zeros(sx);
                let mut gk = Tensor::zeros(sk);
                let mut gb = Tensor::zeros(&[cout]);
                conv2d_backward(
                    val(*x).data(),
                    val(*kernel).data(),
                    gy.data(),
                    gx.data_mut(),
                    gk.data_mut(),
                    gb.data_mut(),
                    cin,
                    h,
                    w,
                    cout,
                    s,
                    *pad,
                    ho,
                    wo,
                );
                acc(grads, *x, gx);
                acc(grads, *kernel, gk);
                acc(grads, *bias, gb);
            }
            Op::BatchNormTrain { x, gamma, beta } => {
                let sx = val(*x).shape();
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let n = h * w;
                let nt = T::from_f64(n as f64);
                let means = node.saved[0].data();
                let inv_stds = node.saved[1].data();
                let xv = val(*x).data();
                let gv = val(*gamma).data();
                let mut gx = Tensor::zeros(sx);
                let mut gg = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let (mean, inv_std) = (means[ch], inv_stds[ch]);
                    let mut sum_gy = T::zero();
                    let mut sum_gy_xhat = T::zero();
                    for i in 0..n {
                        let xhat = (xv[ch * n + i] - mean) * inv_std;
                        let g = gy.data()[ch * n + i];
                        sum_gy = sum_gy + g;
                        sum_gy_xhat = sum_gy_xhat + g * xhat;
                    }
                    gg.data_mut()[ch] = sum_gy_xhat;
                    gb.data_mut()[ch] = sum_gy;
                    let k1 = sum_gy / nt;
                    let k2 = sum_gy_xhat / nt;
                    for i in 0..n {
                        let xhat = (xv[ch * n + i] - mean) * inv_std;
                        gx.data_mut()[ch * n + i] =
                            gv[ch] * inv_std * (gy.data()[ch * n + i] - k1 - xhat * k2);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
            Op::BatchNormEval { x, gamma, beta } => {
                let sx = val(*x).shape();
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let n = h * w;
                let means = node.saved[0].data();
                let inv_stds = node.saved[1].data();
                let xv = val(*x).data();
                let gv = val(*gamma).data();
                let mut gx = Tensor::zeros(sx);
                let mut gg = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for ch in 0..c {
                    for i in 0..n {
                        let g = gy.data()[ch * n + i];
                        let xhat = (xv[ch * n + i] - means[ch]) * inv_stds[ch];
                        gx.data_mut()[ch * n + i] = g * gv[ch] * inv_stds[ch];
                        gg.data_mut()[ch] = gg.data_mut()[ch] + g * xhat;
                        gb.data_mut()[ch] = gb.data_mut()[ch] + g;
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Real>(
    x: &[T],
    k: &[T],
    b: &[T],
    out: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    s: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for co in 0..cout {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        for v in plane.iter_mut() {
            *v = b[co];
        }
        for ci in 0..cin {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            for u in 0..s {
                for v in 0..s {
                    let kw = k[((co * cin + ci) * s + u) * s + v];
                    if kw == T::zero() {
                        continue;
                    }
                    // y[i,j] += kw * x[i+u-pad, j+v-pad] for in-bounds source
                    let i_lo = pad.saturating_sub(u);
                    let i_hi = ho.min(h + pad - u);
                    let j_lo = pad.saturating_sub(v);
                    let j_hi = wo.min(w + pad - v);
                    for i in i_lo..i_hi {
                        let xi = i + u - pad;
                        let yrow = &mut plane[i * wo..(i + 1) * wo];
                        let xrow = &xplane[xi * w..(xi + 1) * w];
                        for j in j_lo..j_hi {
                            yrow[j] = yrow[j] + kw * xrow[j + v - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    gy: &[T],
    gx: &mut [T],
    gk: &mut [T],
    gb: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    s: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for co in 0..cout {
        let gplane = &gy[co * ho * wo..(co + 1) * ho * wo];
        let mut bsum = T::zero();
        for &g in gplane {
            bsum = bsum + g;
        }
        gb[co] = gb[co] + bsum;
        for ci in 0..cin {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            let gxplane = &mut gx[ci * h * w..(ci + 1) * h * w];
            for u in 0..s {
                for v in 0..s {
                    let kidx = ((co * cin + ci) * s + u) * s + v;
                    let kw = k[kidx];
                    let mut ksum = T::zero();
                    let i_lo = pad.saturating_sub(u);
                    let i_hi = ho.min(h + pad - u);
                    let j_lo = pad.saturating_sub(v);
                    let j_hi = wo.min(w + pad - v);
                    for i in i_lo..i_hi {
                        let xi = i + u - pad;
                        let grow = &gplane[i * wo..(i + 1) * wo];
                        let xrow = &xplane[xi * w..(xi + 1) * w];
                        let gxrow = &mut gxplane[xi * w..(xi + 1) * w];
                        for j in j_lo..j_hi {
                            let g = grow[j];
                            ksum = ksum + g * xrow[j + v - pad];
                            gxrow[j + v - pad] = gxrow[j + v - pad] + g * kw;
                        }
                    }
                    gk[kidx] = gk[kidx] + ksum;
                }
            }
        }
    }
}
