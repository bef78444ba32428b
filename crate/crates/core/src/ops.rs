//! Differentiable elementwise, reduction and shape operations on [`Var`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{broadcast_index, broadcast_shape, numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Abs,
    Square,
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn add(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(rhs, BinaryOp::Add)
    }

    pub fn sub(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(rhs, BinaryOp::Sub)
    }

    /// Hadamard product.
    pub fn mul(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(rhs, BinaryOp::Mul)
    }

    pub fn binary(self, rhs: Var<'t, S>, op: BinaryOp) -> Result<Var<'t, S>> {
        let a = self.value();
        let b = rhs.value();
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::ShapeMismatch {
                op: "elementwise",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            }
        })?;
        let f = move |x: S, y: S| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let (ia, ib) = if a.shape() == b.shape() {
            (None, None)
        } else {
            let ia = (a.shape() != out_shape.as_slice()).then(|| broadcast_index(&out_shape, a.shape()));
            let ib = (b.shape() != out_shape.as_slice()).then(|| broadcast_index(&out_shape, b.shape()));
            (ia, ib)
        };
        let n = numel(&out_shape);
        let ad = a.data();
        let bd = b.data();
        let data: Vec<S> = match (&ia, &ib) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let xa = ia.as_ref().map_or(i, |v| v[i]);
                    let xb = ib.as_ref().map_or(i, |v| v[i]);
                    f(ad[xa], bd[xb])
                })
                .collect(),
        };
        let value = Tensor::new(out_shape, data)?;
        let (id_a, id_b) = (self.id(), rhs.id());
        let backward = Box::new(move |g: &[S], sink: &mut crate::tape::GradSink<'_, S>| {
            let other_factor = |i: usize, other: &Rc<Tensor<S>>, idx: &Option<Vec<usize>>| {
                other.data()[idx.as_ref().map_or(i, |v| v[i])]
            };
            if let Some(slot) = sink.slot(id_a) {
                for i in 0..g.len() {
                    let d = match op {
                        BinaryOp::Add | BinaryOp::Sub => g[i],
                        BinaryOp::Mul => g[i] * other_factor(i, &b, &ib),
                    };
                    slot[ia.as_ref().map_or(i, |v| v[i])] += d;
                }
            }
            if let Some(slot) = sink.slot(id_b) {
                for i in 0..g.len() {
                    let d = match op {
                        BinaryOp::Add => g[i],
                        BinaryOp::Sub => -g[i],
                        BinaryOp::Mul => g[i] * other_factor(i, &a, &ia),
                    };
                    slot[ib.as_ref().map_or(i, |v| v[i])] += d;
                }
            }
        });
        Ok(self.record("elementwise", value, &[id_a, id_b], backward))
    }

    pub fn unary(self, op: UnaryOp) -> Var<'t, S> {
        let x = self.value();
        let two = S::of(2.0);
        let value = x.map(|v| match op {
            UnaryOp::Sigmoid => sigmoid(v),
            UnaryOp::Tanh => v.tanh(),
            UnaryOp::Abs => v.abs(),
            UnaryOp::Square => v * v,
        });
        let id = self.id();
        let y = Rc::new(value.clone());
        let backward = Box::new(move |g: &[S], sink: &mut crate::tape::GradSink<'_, S>| {
            let Some(slot) = sink.slot(id) else { return };
            let (xd, yd) = (x.data(), y.data());
            for i in 0..g.len() {
                let d = match op {
                    UnaryOp::Sigmoid => yd[i] * (S::one() - yd[i]),
                    UnaryOp::Tanh => S::one() - yd[i] * yd[i],
                    UnaryOp::Abs => {
                        if xd[i] > S::zero() {
                            S::one()
                        } else if xd[i] < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        }
                    }
                    UnaryOp::Square => two * xd[i],
                };
                slot[i] += g[i] * d;
            }
        });
        self.record("unary", value, &[id], backward)
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t, S> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn abs(self) -> Var<'t, S> {
        self.unary(UnaryOp::Abs)
    }

    pub fn square(self) -> Var<'t, S> {
        self.unary(UnaryOp::Square)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(self, scale: S, shift: S) -> Var<'t, S> {
        let value = self.value().map(|v| scale * v + shift);
        let id = self.id();
        let backward = Box::new(move |g: &[S], sink: &mut crate::tape::GradSink<'_, S>| {
            if let Some(slot) = sink.slot(id) {
                for (s, &gi) in slot.iter_mut().zip(g) {
                    *s += scale * gi;
                }
            }
        });
        self.record("affine", value, &[id], backward)
    }

    pub fn scale(self, s: S) -> Var<'t, S> {
        self.affine(s, S::zero())
    }

    pub fn add_scalar(self, s: S) -> Var<'t, S> {
        self.affine(S::one(), s)
    }

    /// `1 − x`.
    pub fn one_minus(self) -> Var<'t, S> {
        self.affine(-S::one(), S::one())
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, S> {
        let x = self.value();
        let n = x.numel();
        let value = Tensor::scalar(x.sum());
        let id = self.id();
        let backward = Box::new(move |g: &[S], sink: &mut crate::tape::GradSink<'_, S>| {
            if let Some(slot) = sink.slot(id) {
                for s in slot.iter_mut().take(n) {
                    *s += g[0];
                }
            }
        });
        self.record("sum", value, &[id], backward)
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = self.numel();
        self.sum().scale(S::one() / S::of(n as f64))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, S>> {
        let value = (*self.value()).clone().reshape(shape)?;
        let id = self.id();
        let backward = Box::new(move |g: &[S], sink: &mut crate::tape::GradSink<'_, S>| {
            sink.add(id, g);
        });
        Ok(self.record("reshape", value, &[id], backward))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, S>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let value = permute_tensor(&x, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape = value.shape().to_vec();
        let id = self.id();
        let backward = Box::new(move |g: &[S], sink: &mut crate::tape::GradSink<'_, S>| {
            if !sink.wants(id) {
                return;
            }
            let gt = Tensor::new(out_shape.clone(), g.to_vec()).expect("grad shape");
            sink.add(id, permute_tensor(&gt, &inverse).data());
        });
        Ok(self.record("permute", value, &[id], backward))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let value = x.slice_axis(axis, start, len)?;
        let in_shape = x.shape().to_vec();
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let dim = in_shape[axis];
        let id = self.id();
        let backward = Box::new(move |g: &[S], sink: &mut crate::tape::GradSink<'_, S>| {
            let Some(slot) = sink.slot(id) else { return };
            let block = len * inner;
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                for (s, &v) in slot[dst..dst + block].iter_mut().zip(&g[o * block..(o + 1) * block]) {
                    *s += v;
                }
            }
        });
        Ok(self.record("slice", value, &[id], backward))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t, S>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(axis, start, len)?);
            start += len;
        }
        Ok(out)
    }
}

/// Stacks tensors along `axis`; all other dimensions must agree.
pub fn concat<'t, S: Scalar>(parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let values: Vec<Rc<Tensor<S>>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
    }
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: s.to_vec(),
            });
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let blocks: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
    let total: usize = blocks.iter().sum();
    let mut data = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (v, &b) in values.iter().zip(&blocks) {
            data.extend_from_slice(&v.data()[o * b..(o + 1) * b]);
        }
    }
    let mut shape = base;
    shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let value = Tensor::new(shape, data)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
    let ids_bw = ids.clone();
    let backward = Box::new(move |g: &[S], sink: &mut crate::tape::GradSink<'_, S>| {
        let mut offset = 0;
        for (&id, &b) in ids_bw.iter().zip(&blocks) {
            if let Some(slot) = sink.slot(id) {
                for o in 0..outer {
                    let src = o * total + offset;
                    for (s, &v) in slot[o * b..(o + 1) * b].iter_mut().zip(&g[src..src + b]) {
                        *s += v;
                    }
                }
            }
            offset += b;
        }
    });
    Ok(first.record("concat", value, &ids, backward))
}

/// Concatenates image tensors (`C×H×W` or `N×C×H×W`) along the channel axis.
pub fn concat_channels<'t, S: Scalar>(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let rank = parts.first().map(|p| p.shape().len()).unwrap_or(0);
    if rank < 3 {
        return Err(Error::shape("concat_channels", format!("rank {rank} input")));
    }
    concat(parts, rank - 3)
}

pub(crate) fn permute_tensor<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = axes.len();
    let n = x.numel();
    let xd = x.data();
    let mut data = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(xd[off]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute shape")
}
