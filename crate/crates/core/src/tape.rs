//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only ever reference earlier nodes, so the
//! node vector is already in topological order and the backward sweep is a
//! single reverse pass that touches each node once.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{numel, Tensor};

/// Smallest divisor `l2_normalize` uses.
const NORM_FLOOR: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: u32,
    tape: u32,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LeakyRelu(Var, T),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Clamp(Var, T, T),
    SumAll(Var),
    SumAxis(Var, usize),
    LogSumExp(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize { x: Var, axis: usize, norms: Vec<T> },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d(Conv2dSaved<T>),
    AvgPool2d(Var, usize),
    GroupNorm(GroupNormSaved<T>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Embedding { table: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Conv2dSaved<T> {
    x: Var,
    k: Var,
    stride: usize,
    pad: usize,
    /// Per-image im2col buffers; only kept when the kernel needs a gradient.
    cols: Vec<T>,
}

#[derive(Debug)]
struct GroupNormSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of primitive applications for one forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
    params: Vec<Var>,
}

/// Accumulated gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx as usize).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx as usize).and_then(Option::take)
    }

    /// Gradient of a bound parameter, if it received one.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(|&v| self.get(v))
    }

    /// Gradients for every bound parameter, zero-filled where no gradient flowed.
    pub fn param_grads(&mut self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                let v = self.params.get(id.index()).copied();
                v.and_then(|v| self.take(v))
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

pub(crate) fn axis_dims(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

/// Numpy-style broadcast of two shapes.
struct Broadcast {
    shape: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let d = match (pa[i], pb[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(shape_err(op, a, b)),
            };
            shape.push(d);
        }
        let strides = |p: &[usize]| {
            let c = contiguous_strides(p);
            p.iter()
                .zip(c)
                .zip(&shape)
                .map(|((&d, s), &o)| if d == 1 && o != 1 { 0 } else { s })
                .collect::<Vec<_>>()
        };
        let sa = strides(&pa);
        let sb = strides(&pb);
        Ok(Self { shape, sa, sb })
    }

    /// Calls `f(out_index, a_offset, b_offset)` for every output element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total = numel(&self.shape);
        if total == 0 {
            return;
        }
        let rank = self.shape.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let last = self.shape[rank - 1];
        let (la, lb) = (self.sa[rank - 1], self.sb[rank - 1]);
        let mut idx = vec![0usize; rank - 1];
        let mut oa = 0usize;
        let mut ob = 0usize;
        let mut out = 0usize;
        loop {
            for j in 0..last {
                f(out + j, oa + j * la, ob + j * lb);
            }
            out += last;
            if out >= total {
                break;
            }
            let mut d = rank - 1;
            loop {
                d -= 1;
                idx[d] += 1;
                oa += self.sa[d];
                ob += self.sb[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                oa -= self.sa[d] * idx[d];
                ob -= self.sb[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::Detached);
        }
        self.nodes.get(v.idx as usize).ok_or(Error::Detached)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var { idx, tape: self.id }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter()
            .any(|&v| self.nodes[v.idx as usize].requires_grad)
    }

    /// Leaf whose gradient is accumulated by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Places every parameter of `store` on the tape. Parameters are looked up
    /// afterwards through [`Tape::param`].
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: bool) {
        self.params = store
            .tensors()
            .iter()
            .map(|t| self.push(t.clone(), trainable, Op::Leaf))
            .collect();
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("var from another tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.node(v)?.value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.into()))
        }
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let data = if va.shape() == vb.shape() {
            let d: Vec<T> = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(va.shape().to_vec(), d)?
        } else {
            let bc = Broadcast::new(op, va.shape(), vb.shape())?;
            let mut d = vec![T::zero(); numel(&bc.shape)];
            let (da, db) = (va.data(), vb.data());
            bc.for_each(|o, ia, ib| d[o] = f(da[ia], db[ib]));
            Tensor::new(bc.shape, d)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(data, rg, mk(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.node(x)?.value.map(f);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, op))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, T::zero())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.node(x)?.value.data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), rg, Op::SumAll(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.numel();
        if n == 0 {
            return Err(Error::EmptyAxis("mean"));
        }
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (outer, len, inner) = axis_dims(v.shape(), axis)?;
        let mut out = vec![T::zero(); outer * inner];
        let d = v.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = {
            let s = self.node(x)?.value.shape();
            *s.get(axis).ok_or(Error::Axis {
                axis,
                rank: s.len(),
            })?
        };
        if len == 0 {
            return Err(Error::EmptyAxis("mean_axis"));
        }
        let s = self.sum_axis(x, axis)?;
        self.scale(s, T::one() / T::c(len as f64))
    }

    /// Max-shifted log-sum-exp over `axis`, removing it from the shape.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (outer, len, inner) = axis_dims(v.shape(), axis)?;
        if len == 0 {
            return Err(Error::EmptyAxis("logsumexp"));
        }
        let d = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| d[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|l| (at(l) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::LogSumExp(x, axis)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let out = softmax_values(v, axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax(x, axis)))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (outer, len, inner) = axis_dims(v.shape(), axis)?;
        if len == 0 {
            return Err(Error::EmptyAxis("log_softmax"));
        }
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| d[at(l)]).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|l| (d[at(l)] - m).exp()).sum();
                let lse = m + s.ln();
                for l in 0..len {
                    out[at(l)] = d[at(l)] - lse;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::LogSoftmax(x, axis)))
    }

    /// `x / max(||x||, NORM_FLOOR)` along `axis`; exactly scale invariant above the floor.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (outer, len, inner) = axis_dims(v.shape(), axis)?;
        let d = v.data();
        let eps = T::c(NORM_FLOOR);
        let mut norms = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let ss: T = (0..len).map(|l| d[at(l)] * d[at(l)]).sum();
                let n = ss.sqrt().max(eps);
                norms[o * inner + i] = n;
                for l in 0..len {
                    out[at(l)] = d[at(l)] / n;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::L2Normalize { x, axis, norms }))
    }

    // ---- linear algebra & shape --------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            MatRef::rm(va.data(), k),
            MatRef::rm(vb.data(), n),
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x)?.value;
        if v.rank() != 2 {
            return Err(shape_err("transpose", v.shape(), &[0, 0]));
        }
        let t = transpose_values(v);
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.node(x)?.value.clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.node(*first)?.value.shape().to_vec();
        let (outer, _, inner) = axis_dims(&base, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.node(x)?.value.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = &self.nodes[x.idx as usize].value;
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Concat(xs.to_vec(), axis)))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (outer, len, inner) = axis_dims(v.shape(), axis)?;
        if start > end || end > len {
            return Err(Error::Index {
                index: end,
                size: len,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let b = (o * len + start) * inner;
            out.extend_from_slice(&v.data()[b..b + w * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = w;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Slice { x, axis, start }))
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `idx`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.node(table)?.value;
        if t.rank() != 2 {
            return Err(shape_err("embedding", t.shape(), &[0, 0]));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            if i >= vocab {
                return Err(Error::Index {
                    index: i,
                    size: vocab,
                });
            }
            out.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), dim], out)?,
            rg,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    // ---- convolutional ------------------------------------------------

    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vk) = (&self.node(x)?.value, &self.node(k)?.value);
        let geo = ConvGeom::new(vx.shape(), vk.shape(), stride, pad)?;
        let keep_cols = self.nodes[k.idx as usize].requires_grad;
        let ckk = geo.ckk();
        let p = geo.oh * geo.ow;
        let mut out = vec![T::zero(); geo.n * geo.o * p];
        let mut cols_all = if keep_cols {
            vec![T::zero(); geo.n * ckk * p]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols {
            Vec::new()
        } else {
            vec![T::zero(); ckk * p]
        };
        let img = geo.c * geo.h * geo.w;
        for n in 0..geo.n {
            let cols: &mut [T] = if keep_cols {
                &mut cols_all[n * ckk * p..(n + 1) * ckk * p]
            } else {
                &mut scratch
            };
            geo.im2col(&vx.data()[n * img..(n + 1) * img], cols);
            gemm(
                geo.o,
                ckk,
                p,
                MatRef::rm(vk.data(), ckk),
                MatRef::rm(cols, p),
                T::zero(),
                &mut out[n * geo.o * p..(n + 1) * geo.o * p],
            );
        }
        let t = Tensor::new(vec![geo.n, geo.o, geo.oh, geo.ow], out)?;
        let rg = self.rg(&[x, k]);
        Ok(self.push(
            t,
            rg,
            Op::Conv2d(Conv2dSaved {
                x,
                k,
                stride,
                pad,
                cols: cols_all,
            }),
        ))
    }

    /// Non-overlapping `k x k` average pooling (stride `k`).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        if v.rank() != 4 || k == 0 || v.shape()[2] % k != 0 || v.shape()[3] % k != 0 {
            return Err(shape_err("avg_pool2d", v.shape(), &[k, k]));
        }
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::c((k * k) as f64);
        let d = v.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
                for (xx, &val) in row.iter().enumerate() {
                    drow[xx / k] += val;
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            rg,
            Op::AvgPool2d(x, k),
        ))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let eps = T::c(1e-5);
        let v = &self.node(x)?.value;
        let (vg, vb) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        if v.rank() < 2 || groups == 0 || v.shape()[1] % groups != 0 {
            return Err(shape_err("group_norm", v.shape(), &[groups]));
        }
        let (n, c) = (v.shape()[0], v.shape()[1]);
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(shape_err("group_norm", v.shape(), vg.shape()));
        }
        let spatial = numel(&v.shape()[2..]);
        let cg = c / groups;
        let m = cg * spatial;
        let d = v.data();
        let mut xhat = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); d.len()];
        let mut inv_std = vec![T::zero(); n * groups];
        let inv_m = T::one() / T::c(m as f64);
        for b in 0..n {
            for g in 0..groups {
                let start = (b * c + g * cg) * spatial;
                let seg = &d[start..start + m];
                let mean = seg.iter().copied().sum::<T>() * inv_m;
                let var = seg.iter().map(|&q| (q - mean) * (q - mean)).sum::<T>() * inv_m;
                let is = T::one() / (var + eps).sqrt();
                inv_std[b * groups + g] = is;
                for (j, &q) in seg.iter().enumerate() {
                    let ch = g * cg + j / spatial;
                    let xh = (q - mean) * is;
                    xhat[start + j] = xh;
                    out[start + j] = xh * vg.data()[ch] + vb.data()[ch];
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            rg,
            Op::GroupNorm(GroupNormSaved {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            }),
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`, returning gradients of every node
    /// that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = self.node(loss)?;
        if ln.value.numel() != 1 {
            return Err(Error::NonScalarLoss(ln.value.shape().to_vec()));
        }
        if !ln.value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let end = loss.idx as usize;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(end + 1);
        grads.resize_with(end + 1, || None);
        if ln.requires_grad {
            grads[end] = Some(Tensor::ones(ln.value.shape()));
        }
        for i in (0..=end).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        let i = v.idx as usize;
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.idx as usize].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.idx as usize].requires_grad
    }

    /// Sums a broadcast gradient back down to `target` shape.
    fn reduce_to(&self, g: &Tensor<T>, target: &[usize], other: &[usize]) -> Result<Tensor<T>> {
        if g.shape() == target {
            return Ok(g.clone());
        }
        let bc = Broadcast::new("reduce", target, other)?;
        let mut out = vec![T::zero(); numel(target)];
        let gd = g.data();
        bc.for_each(|o, ia, _| out[ia] += gd[o]);
        Tensor::new(target.to_vec(), out)
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                if self.wants(*a) {
                    let ga = self.reduce_to(g, sa, sb)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = self.reduce_to(g, sb, sa)?;
                    if neg {
                        gb = gb.map(|v| -v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let div = matches!(node.op, Op::Div(..));
                let (va, vb) = (self.val(*a), self.val(*b));
                let mut ga = vec![T::zero(); va.numel()];
                let mut gb = vec![T::zero(); vb.numel()];
                let (da, db, gd) = (va.data(), vb.data(), g.data());
                let body = |o: usize, ia: usize, ib: usize, ga: &mut [T], gb: &mut [T]| {
                    if div {
                        ga[ia] += gd[o] / db[ib];
                        gb[ib] -= gd[o] * da[ia] / (db[ib] * db[ib]);
                    } else {
                        ga[ia] += gd[o] * db[ib];
                        gb[ib] += gd[o] * da[ia];
                    }
                };
                if va.shape() == vb.shape() {
                    for o in 0..gd.len() {
                        body(o, o, o, &mut ga, &mut gb);
                    }
                } else {
                    let bc = Broadcast::new("mul", va.shape(), vb.shape())?;
                    bc.for_each(|o, ia, ib| body(o, ia, ib, &mut ga, &mut gb));
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let t = g.clone().reshape(self.val(*x).shape())?;
                self.accumulate(grads, *x, t);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.val(*x).data();
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * *slope })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Exp(x) => {
                let d = zip_map(g, y, |gv, yv| gv * yv);
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = zip_map(g, self.val(*x), |gv, xv| gv / xv);
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = zip_map(g, y, |gv, yv| gv * (T::one() - yv * yv));
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(g, y, |gv, yv| gv * yv * (T::one() - yv));
                self.accumulate(grads, *x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let d = zip_map(g, self.val(*x), |gv, xv| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.val(*x).shape(), gv));
            }
            Op::SumAxis(x, axis) => {
                let xs = self.val(*x).shape();
                let (outer, len, inner) = axis_dims(xs, *axis)?;
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            d[(o * len + l) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs.to_vec(), d)?);
            }
            Op::LogSumExp(x, axis) => {
                let xv = self.val(*x);
                let (outer, len, inner) = axis_dims(xv.shape(), *axis)?;
                let mut d = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = y.data()[o * inner + i];
                        let gv = g.data()[o * inner + i];
                        for l in 0..len {
                            let at = (o * len + l) * inner + i;
                            d[at] = gv * (xv.data()[at] - lse).exp();
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_dims(y.shape(), *axis)?;
                let mut d = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g.data()[at(l)] * y.data()[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = y.data()[at(l)] * (g.data()[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = axis_dims(y.shape(), *axis)?;
                let mut d = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gs: T = (0..len).map(|l| g.data()[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = g.data()[at(l)] - y.data()[at(l)].exp() * gs;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, len, inner) = axis_dims(y.shape(), *axis)?;
                let mut d = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let n = norms[o * inner + i];
                        // A clamped norm is a constant divisor.
                        let dot: T = if n > T::c(NORM_FLOOR) {
                            (0..len).map(|l| g.data()[at(l)] * y.data()[at(l)]).sum()
                        } else {
                            T::zero()
                        };
                        for l in 0..len {
                            d[at(l)] = (g.data()[at(l)] - y.data()[at(l)] * dot) / n;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::rm(g.data(), n),
                        MatRef::rm_t(vb.data(), n),
                        T::zero(),
                        &mut ga,
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::rm_t(va.data(), k),
                        MatRef::rm(g.data(), n),
                        T::zero(),
                        &mut gb,
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, transpose_values(g));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_dims(y.shape(), *axis)?;
                let mut off = 0;
                for &x in xs {
                    let len = self.val(x).shape()[*axis];
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let b = (o * total + off) * inner;
                            d.extend_from_slice(&g.data()[b..b + len * inner]);
                        }
                        self.accumulate(grads, x, Tensor::new(self.val(x).shape().to_vec(), d)?);
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.val(*x).shape();
                let (outer, len, inner) = axis_dims(xs, *axis)?;
                let w = y.shape()[*axis];
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let b = (o * len + start) * inner;
                    d[b..b + w * inner]
                        .copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs.to_vec(), d)?);
            }
            Op::Embedding { table, idx } => {
                let ts = self.val(*table).shape();
                let dim = ts[1];
                let mut d = vec![T::zero(); numel(ts)];
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..dim {
                        d[i * dim + j] += g.data()[row * dim + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(ts.to_vec(), d)?);
            }
            Op::Conv2d(s) => self.conv2d_backward(s, g, grads)?,
            Op::AvgPool2d(x, k) => {
                let xs = self.val(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / T::c((k * k) as f64);
                let mut d = vec![T::zero(); numel(xs)];
                for plane in 0..xs[0] * xs[1] {
                    for yy in 0..h {
                        for xx in 0..w {
                            d[plane * h * w + yy * w + xx] =
                                g.data()[plane * oh * ow + (yy / k) * ow + xx / k] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs.to_vec(), d)?);
            }
            Op::GroupNorm(s) => self.group_norm_backward(s, g, grads)?,
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        s: &Conv2dSaved<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (vx, vk) = (self.val(s.x), self.val(s.k));
        let geo = ConvGeom::new(vx.shape(), vk.shape(), s.stride, s.pad)?;
        let ckk = geo.ckk();
        let p = geo.oh * geo.ow;
        if self.wants(s.k) {
            let mut gk = vec![T::zero(); geo.o * ckk];
            for n in 0..geo.n {
                gemm(
                    geo.o,
                    p,
                    ckk,
                    MatRef::rm(&g.data()[n * geo.o * p..(n + 1) * geo.o * p], p),
                    MatRef::rm_t(&s.cols[n * ckk * p..(n + 1) * ckk * p], p),
                    T::one(),
                    &mut gk,
                );
            }
            self.accumulate(grads, s.k, Tensor::new(vk.shape().to_vec(), gk)?);
        }
        if self.wants(s.x) {
            let img = geo.c * geo.h * geo.w;
            let mut gx = vec![T::zero(); geo.n * img];
            let mut dcols = vec![T::zero(); ckk * p];
            for n in 0..geo.n {
                gemm(
                    ckk,
                    geo.o,
                    p,
                    MatRef::rm_t(vk.data(), ckk),
                    MatRef::rm(&g.data()[n * geo.o * p..(n + 1) * geo.o * p], p),
                    T::zero(),
                    &mut dcols,
                );
                geo.col2im(&dcols, &mut gx[n * img..(n + 1) * img]);
            }
            self.accumulate(grads, s.x, Tensor::new(vx.shape().to_vec(), gx)?);
        }
        Ok(())
    }

    fn group_norm_backward(
        &self,
        s: &GroupNormSaved<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xs = self.val(s.x).shape();
        let (n, c) = (xs[0], xs[1]);
        let spatial = numel(&xs[2..]);
        let cg = c / s.groups;
        let m = cg * spatial;
        let gamma = self.val(s.gamma).data();
        let gd = g.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); gd.len()];
        let mm = T::c(m as f64);
        for b in 0..n {
            for grp in 0..s.groups {
                let start = (b * c + grp * cg) * spatial;
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for j in 0..m {
                    let ch = grp * cg + j / spatial;
                    let (gv, xh) = (gd[start + j], s.xhat[start + j]);
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                    let dxh = gv * gamma[ch];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                let is = s.inv_std[b * s.groups + grp];
                for j in 0..m {
                    let ch = grp * cg + j / spatial;
                    let dxh = gd[start + j] * gamma[ch];
                    dx[start + j] = is / mm * (mm * dxh - sum_dxh - s.xhat[start + j] * sum_dxh_xh);
                }
            }
        }
        if self.wants(s.x) {
            self.accumulate(grads, s.x, Tensor::new(xs.to_vec(), dx)?);
        }
        self.accumulate(grads, s.gamma, Tensor::new(vec![c], dgamma)?);
        self.accumulate(grads, s.beta, Tensor::new(vec![c], dbeta)?);
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let d = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), d).expect("same shape")
}

fn transpose_values<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (v.shape()[0], v.shape()[1]);
    let d = v.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

/// Softmax along `axis` on a plain tensor.
pub fn softmax_values<T: Scalar>(v: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_dims(v.shape(), axis)?;
    if len == 0 {
        return Err(Error::EmptyAxis("softmax"));
    }
    let d = v.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let m = (0..len).map(|l| d[at(l)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for l in 0..len {
                let e = (d[at(l)] - m).exp();
                out[at(l)] = e;
                s += e;
            }
            for l in 0..len {
                out[at(l)] /= s;
            }
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || stride == 0 {
            return Err(shape_err("conv2d", xs, ks));
        }
        let (h, w) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if ks[2] == 0 || ks[3] == 0 || h < ks[2] || w < ks[3] {
            return Err(shape_err("conv2d", xs, ks));
        }
        Ok(Self {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ks[0],
            kh: ks[2],
            kw: ks[3],
            oh: (h - ks[2]) / stride + 1,
            ow: (w - ks[3]) / stride + 1,
            stride,
            pad,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.oh * self.ow;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let row = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let p = self.oh * self.ow;
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let row = &cols[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
