//! Primitive op construction: forward kernels plus tape records.
//!
//! Binary elementwise ops broadcast with trailing-dimension alignment by
//! inserting an explicit broadcast node, so every backward rule sees equal
//! shapes. Forward values are exact per op definition; `clip_grad` passes
//! values through unchanged and clips only the backward signal.

use super::{Record, Tape, Tensor};

pub(super) const LEAKY_SLOPE: f64 = 0.01;

pub(super) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// C (m x n) += A (m x k) * B (k x n), overwriting C.
pub(super) fn dgemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C (m x k') = A (m x n') * B^T where B is (k' x n'). Used for dA = dC * B^T.
pub(super) fn dgemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            0.0,
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// C (k x n) = A^T * B where A is (m x k), B is (m x n). Used for dB = A^T * dC.
pub(super) fn dgemm_tn(k: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Broadcast shape of `from` against `to` under trailing alignment, or None.
fn broadcast_target(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

fn expand(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let rank = to.len();
    let offset = rank - from.len();
    // Source strides aligned to the target rank; 0 where broadcast.
    let mut strides = vec![0isize; rank];
    let mut s = 1isize;
    for i in (0..from.len()).rev() {
        strides[offset + i] = if from[i] == 1 { 0 } else { s };
        s *= from[i] as isize;
    }
    let total: usize = to.iter().product();
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0isize;
        for d in 0..rank {
            src += idx[d] as isize * strides[d];
        }
        *slot = data[src as usize];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Sum `grad` (shaped `to`) back down to shape `from` (trailing alignment).
pub(super) fn reduce_broadcast(from: &[usize], to: &[usize], grad: &[f64]) -> Vec<f64> {
    let rank = to.len();
    let offset = rank - from.len();
    let mut strides = vec![0isize; rank];
    let mut s = 1isize;
    for i in (0..from.len()).rev() {
        strides[offset + i] = if from[i] == 1 { 0 } else { s };
        s *= from[i] as isize;
    }
    let n_from: usize = from.iter().product();
    let mut out = vec![0.0; n_from];
    let mut idx = vec![0usize; rank];
    for g in grad {
        let mut src = 0isize;
        for d in 0..rank {
            src += idx[d] as isize * strides[d];
        }
        out[src as usize] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

/// Expand a keepdim-reduced gradient back along `axis`, scaled.
pub(super) fn spread_axis(shape: &[usize], axis: usize, grad: &[f64], scale: f64) -> Vec<f64> {
    let (outer, extent, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        for e in 0..extent {
            for i in 0..inner {
                out[(o * extent + e) * inner + i] = grad[o * inner + i] * scale;
            }
        }
    }
    out
}

pub(super) fn scatter_slice(
    full_shape: &[usize],
    axis: usize,
    start: usize,
    slice_shape: &[usize],
    grad: &[f64],
) -> Vec<f64> {
    let (outer, extent, inner) = axis_split(full_shape, axis);
    let len = slice_shape[axis];
    let mut out = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        for e in 0..len {
            let dst = (o * extent + start + e) * inner;
            let src = (o * len + e) * inner;
            out[dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
        }
    }
    out
}

pub(super) fn split_concat(shapes: &[Vec<usize>], axis: usize, grad: &[f64]) -> Vec<Vec<f64>> {
    let (outer, _, inner) = axis_split(&shapes[0], axis);
    let extents: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
    let total_extent: usize = extents.iter().sum();
    let mut parts: Vec<Vec<f64>> =
        extents.iter().map(|e| vec![0.0; outer * e * inner]).collect();
    for o in 0..outer {
        let mut off = 0;
        for (p, e) in extents.iter().enumerate() {
            for k in 0..*e {
                let src = (o * total_extent + off + k) * inner;
                let dst = (o * e + k) * inner;
                parts[p][dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
            }
            off += e;
        }
    }
    parts
}

impl Tape {
    fn binop(
        &self,
        name: &str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        record: impl Fn(usize, usize) -> Record,
    ) -> Tensor {
        assert!(self.same_tape(a.tape()) && self.same_tape(b.tape()), "{name}: mixed tapes");
        let sa = a.shape();
        let sb = b.shape();
        let target = broadcast_target(&sa, &sb).unwrap_or_else(|| {
            panic!("{name}: incompatible shapes {sa:?} and {sb:?}")
        });
        let a = if sa == target { a.clone() } else { self.broadcast_to(a, &target) };
        let b = if sb == target { b.clone() } else { self.broadcast_to(b, &target) };
        let (data, rg) = {
            let inner = self.inner.borrow();
            let (na, nb) = (&inner.nodes[a.id], &inner.nodes[b.id]);
            if cfg!(debug_assertions) {
                assert!(
                    na.data.iter().chain(&nb.data).all(|v| v.is_finite()),
                    "{name}: non-finite input detected"
                );
            }
            let data: Vec<f64> = na.data.iter().zip(&nb.data).map(|(x, y)| f(*x, *y)).collect();
            (data, na.requires_grad || nb.requires_grad)
        };
        self.push(target, data, rg, record(a.id, b.id))
    }

    fn unop(
        &self,
        x: &Tensor,
        f: impl Fn(f64) -> f64,
        record: impl Fn(usize) -> Record,
    ) -> Tensor {
        let (data, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.id];
            (node.data.iter().map(|v| f(*v)).collect::<Vec<f64>>(), node.requires_grad)
        };
        self.push(x.shape(), data, rg, record(x.id))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binop("add", a, b, |x, y| x + y, |a, b| Record::Add { a, b })
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binop("sub", a, b, |x, y| x - y, |a, b| Record::Sub { a, b })
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binop("mul", a, b, |x, y| x * y, |a, b| Record::Mul { a, b })
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binop("div", a, b, |x, y| x / y, |a, b| Record::Div { a, b })
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let sa = a.shape();
        let sb = b.shape();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} and {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        let rg = {
            let inner = self.inner.borrow();
            dgemm_nn(m, k, n, &inner.nodes[a.id].data, &inner.nodes[b.id].data, &mut data);
            inner.nodes[a.id].requires_grad || inner.nodes[b.id].requires_grad
        };
        self.push(vec![m, n], data, rg, Record::Matmul { a: a.id, b: b.id, m, k, n })
    }

    pub fn broadcast_to(&self, x: &Tensor, target: &[usize]) -> Tensor {
        let from = x.shape();
        assert!(
            broadcast_target(&from, target) == Some(target.to_vec()),
            "broadcast: cannot expand {from:?} to {target:?}"
        );
        let data = expand(&self.data_of(x.id), &from, target);
        self.push(
            target.to_vec(),
            data,
            self.requires_grad_of(x.id),
            Record::Broadcast { x: x.id, from },
        )
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, x.numel(), "reshape: {:?} has {} elements, want {:?}", x.shape(), x.numel(), shape);
        self.push(shape.to_vec(), self.data_of(x.id), self.requires_grad_of(x.id), Record::Reshape { x: x.id })
    }

    pub fn slice_axis(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = x.shape();
        assert!(
            axis < shape.len() && start + len <= shape[axis],
            "slice: range {start}..{} out of bounds for axis {axis} of {shape:?}",
            start + len
        );
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.data_of(x.id);
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for e in 0..len {
                let s = (o * extent + start + e) * inner;
                let d = (o * len + e) * inner;
                data[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.push(out_shape, data, self.requires_grad_of(x.id), Record::Slice { x: x.id, axis, start })
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat: no inputs");
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes[1..] {
            assert!(
                s.len() == shapes[0].len()
                    && s.iter().zip(&shapes[0]).enumerate().all(|(i, (a, b))| i == axis || a == b),
                "concat: incompatible shapes {:?} and {s:?} on axis {axis}",
                shapes[0]
            );
        }
        let (outer, _, inner) = axis_split(&shapes[0], axis);
        let extents: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = vec![0.0; outer * total * inner];
        let srcs: Vec<Vec<f64>> = parts.iter().map(|p| self.data_of(p.id)).collect();
        for o in 0..outer {
            let mut off = 0;
            for (p, e) in extents.iter().enumerate() {
                for k in 0..*e {
                    let dst = (o * total + off + k) * inner;
                    let src = (o * e + k) * inner;
                    data[dst..dst + inner].copy_from_slice(&srcs[p][src..src + inner]);
                }
                off += e;
            }
        }
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = total;
        let rg = parts.iter().any(|p| self.requires_grad_of(p.id));
        self.push(
            out_shape,
            data,
            rg,
            Record::Concat { inputs: parts.iter().map(|p| p.id).collect(), axis },
        )
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.tape().matmul(self, other)
    }

    pub fn exp(&self) -> Tensor {
        self.tape().unop(self, f64::exp, |x| Record::Exp { x })
    }

    pub fn log(&self) -> Tensor {
        self.tape().unop(self, f64::ln, |x| Record::Log { x })
    }

    pub fn tanh(&self) -> Tensor {
        self.tape().unop(self, f64::tanh, |x| Record::Tanh { x })
    }

    pub fn softplus(&self) -> Tensor {
        self.tape().unop(self, softplus_stable, |x| Record::Softplus { x })
    }

    pub fn leaky_relu(&self) -> Tensor {
        self.tape()
            .unop(self, |v| if v > 0.0 { v } else { LEAKY_SLOPE * v }, |x| Record::LeakyRelu { x })
    }

    pub fn square(&self) -> Tensor {
        self.tape().unop(self, |v| v * v, |x| Record::Square { x })
    }

    pub fn negate(&self) -> Tensor {
        self.tape().unop(self, |v| -v, |x| Record::Negate { x })
    }

    /// Identity forward; backward clamps the incoming gradient to [-bound, bound].
    pub fn clip_grad(&self, bound: f64) -> Tensor {
        assert!(bound > 0.0, "clip_grad: bound must be positive");
        self.tape().unop(self, |v| v, |x| Record::ClipGrad { x, bound })
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.value().iter().sum();
        self.tape().push(vec![], vec![total], self.requires_grad(), Record::Sum { x: self.id })
    }

    pub fn mean(&self) -> Tensor {
        let v = self.value();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.tape().push(vec![], vec![m], self.requires_grad(), Record::Mean { x: self.id })
    }

    /// Sum along one axis, keeping it as extent 1.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        self.reduce_axis(axis, false)
    }

    /// Mean along one axis, keeping it as extent 1.
    pub fn mean_axis(&self, axis: usize) -> Tensor {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Tensor {
        let shape = self.shape();
        assert!(axis < shape.len(), "reduce: axis {axis} out of bounds for {shape:?}");
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * extent + e) * inner + i];
                }
            }
        }
        if mean {
            for v in data.iter_mut() {
                *v /= extent as f64;
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let record =
            if mean { Record::MeanAxis { x: self.id, axis } } else { Record::SumAxis { x: self.id, axis } };
        self.tape().push(out_shape, data, self.requires_grad(), record)
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Tensor {
        self.tape().broadcast_to(self, target)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        self.tape().reshape(self, shape)
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Tensor {
        self.tape().slice_axis(self, axis, start, len)
    }

    /// Multiply by a plain constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let k = self.tape().scalar(c);
        self.tape().mul(self, &k)
    }

    /// Add a plain constant.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let k = self.tape().scalar(c);
        self.tape().add(self, &k)
    }

    /// Elementwise minimum composed from the primitive set: an argmin mask,
    /// taken from the forward values as a constant, routes the gradient to the
    /// smaller branch. Forward value is the exact minimum.
    pub fn minimum(&self, other: &Tensor) -> Tensor {
        let sa = self.shape();
        assert_eq!(sa, other.shape(), "minimum: shapes {:?} vs {:?}", sa, other.shape());
        let mask: Vec<f64> = self
            .value()
            .iter()
            .zip(other.value())
            .map(|(a, b)| if *a <= b { 1.0 } else { 0.0 })
            .collect();
        let tape = self.tape();
        let m = tape.leaf(mask, &sa);
        let one = tape.scalar(1.0);
        let inv = tape.sub(&one, &m);
        let lhs = tape.mul(&m, self);
        let rhs = tape.mul(&inv, other);
        tape.add(&lhs, &rhs)
    }
}

macro_rules! tensor_binops {
    ($trait:ident, $method:ident) => {
        impl std::ops::$trait<&Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                self.tape().$method(self, rhs)
            }
        }
        impl std::ops::$trait<Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                self.tape().$method(&self, &rhs)
            }
        }
        impl std::ops::$trait<&Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                self.tape().$method(&self, rhs)
            }
        }
        impl std::ops::$trait<Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                self.tape().$method(self, &rhs)
            }
        }
    };
}

tensor_binops!(Add, add);
tensor_binops!(Sub, sub);
tensor_binops!(Mul, mul);
tensor_binops!(Div, div);

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        self.negate()
    }
}

impl std::ops::Neg for Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        self.negate()
    }
}
