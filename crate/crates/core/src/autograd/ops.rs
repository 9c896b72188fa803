//! Differentiable operations on [`Var`].
//!
//! Shapes follow numpy broadcasting for the binary arithmetic ops. Image-like
//! tensors are channels-last: `(batch, height, width, channels)`.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::graph::{BackwardCtx, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{numel, strides, Tensor};

// ---------------------------------------------------------------------------
// Kernels shared by forward and backward rules.

/// `c = a · b + beta · c` with optional transposes of row-major operands.
///
/// `a` is `(m, k)` (or `(k, m)` when `ta`), `b` is `(k, n)` (or `(n, k)`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, beta: T, c: &mut [T]) {
    let av = if ta {
        ArrayView2::from_shape((m, k).strides((1, m)), a)
    } else {
        ArrayView2::from_shape((m, k), a)
    }
    .expect("gemm lhs shape");
    let bv = if tb {
        ArrayView2::from_shape((k, n).strides((1, k)), b)
    } else {
        ArrayView2::from_shape((k, n), b)
    }
    .expect("gemm rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm out shape");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

/// `(outer, axis, inner)` sizes around `axis`.
fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Source offset for every element of `out_shape` when broadcasting from `src`.
fn broadcast_offsets(out_shape: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        let o = rank - src.len() + i;
        eff[o] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let n = numel(out_shape);
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    offs
}

/// Index map from output elements into an operand; `None` means identity.
type Offsets = Option<Rc<Vec<usize>>>;

fn offsets_for(out_shape: &[usize], src: &[usize]) -> Offsets {
    if out_shape == src {
        None
    } else {
        Some(Rc::new(broadcast_offsets(out_shape, src)))
    }
}

/// Sum a full-size gradient back onto the broadcast operand's shape.
fn reduce_to<T: Scalar>(grad: Vec<T>, offs: &Offsets, shape: &[usize]) -> Tensor<T> {
    match offs {
        None => Tensor::new(shape.to_vec(), grad).expect("gradient shape"),
        Some(offs) => {
            let mut out = vec![T::zero(); numel(shape)];
            for (g, &o) in grad.into_iter().zip(offs.iter()) {
                out[o] = out[o] + g;
            }
            Tensor::new(shape.to_vec(), out).expect("gradient shape")
        }
    }
}

#[inline]
fn at<T: Copy>(data: &[T], offs: &Offsets, i: usize) -> T {
    match offs {
        None => data[i],
        Some(o) => data[o[i]],
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn im2col<T: Scalar>(x: &[T], b: usize, h: usize, w: usize, cin: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let k = kh * kw * cin;
    let mut cols = vec![T::zero(); b * h * w * k];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * k;
                for ky in 0..kh {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = xx as isize + kx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * cin;
                        let dst = row + (ky * kw + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], b: usize, h: usize, w: usize, cin: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let k = kh * kw * cin;
    let mut x = vec![T::zero(); b * h * w * cin];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * k;
                for ky in 0..kh {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = xx as isize + kx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * cin;
                        let src = row + (ky * kw + kx) * cin;
                        for c in 0..cin {
                            x[dst + c] = x[dst + c] + cols[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------

impl<'g, T: Scalar> Var<'g, T> {
    fn binary(self, other: Var<'g, T>, op: BinOp, name: &'static str) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
        let oa = offsets_for(&out_shape, a.shape());
        let ob = offsets_for(&out_shape, b.shape());
        let n = numel(&out_shape);
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (at(ad, &oa, i), at(bd, &ob, i));
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(out_shape, data)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.graph.op(
            value,
            &[self, other],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad.data();
                let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs[0].then(|| {
                    let full: Vec<T> = match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        BinOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * at(bd, &ob, i)).collect(),
                        BinOp::Div => g.iter().enumerate().map(|(i, &gi)| gi / at(bd, &ob, i)).collect(),
                    };
                    reduce_to(full, &oa, &sa)
                });
                let gb = ctx.needs[1].then(|| {
                    let full: Vec<T> = match op {
                        BinOp::Add => g.to_vec(),
                        BinOp::Sub => g.iter().map(|&gi| -gi).collect(),
                        BinOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * at(ad, &oa, i)).collect(),
                        BinOp::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, &gi)| {
                                let y = at(bd, &ob, i);
                                -gi * at(ad, &oa, i) / (y * y)
                            })
                            .collect(),
                    };
                    reduce_to(full, &ob, &sb)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinOp::Add, "add")
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinOp::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinOp::Mul, "mul")
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinOp::Div, "div")
    }

    /// Elementwise map with a derivative rule `d(x, y)` given input and output.
    pub fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let value = self.value().map(f);
        self.graph.op(
            value,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let data = ctx.grad.data().iter().enumerate().map(|(i, &g)| g * df(x[i], y[i])).collect();
                vec![Some(Tensor::new(ctx.output.shape().to_vec(), data).expect("unary grad"))]
            }),
        )
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x < lo || x > hi { T::zero() } else { T::one() },
        )
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(|x| x.sqrt(), |_, y| lit::<T>(0.5) / y)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g, T> {
        let c: T = lit((2.0 / std::f64::consts::PI).sqrt());
        let a: T = lit(0.044715);
        let half: T = lit(0.5);
        let three: T = lit(3.0);
        self.unary(
            move |x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
            },
        )
    }

    /// `elu(x) + 1`, the positive feature map of kernelized linear attention.
    pub fn elu_plus_one(self) -> Var<'g, T> {
        self.unary(
            |x| if x > T::zero() { x + T::one() } else { x.exp() },
            |x, y| if x > T::zero() { T::one() } else { y },
        )
    }

    /// `ln(1 + e^x)` in overflow-free form.
    pub fn softplus(self) -> Var<'g, T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        if numel(shape) != v.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", v.shape(), shape)));
        }
        let value = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let src = v.shape().to_vec();
        Ok(self.graph.op(
            value,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                vec![Some(Tensor::new(src.clone(), ctx.grad.data().to_vec()).expect("reshape grad"))]
            }),
        ))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let value = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.graph.op(
            value,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(ctx.grad.permute(&inverse).expect("permute grad"))]),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last(self) -> Result<Var<'g, T>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::shape("transpose_last", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    /// Matrix product. `rhs` is either a shared `(k, n)` matrix applied to the
    /// trailing axis of `self`, or a batch of matrices with the same leading
    /// axes as `self`.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
            let n = sb[1];
            let m = a.len() / k;
            let mut out = vec![T::zero(); m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), &mut out);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let value = Tensor::new(shape, out)?;
            return Ok(self.graph.op(
                value,
                &[self, rhs],
                Box::new(move |ctx: &BackwardCtx<'_, T>| {
                    let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                    let ga = ctx.needs[0].then(|| {
                        let mut d = vec![T::zero(); m * k];
                        gemm(m, n, k, g, false, b, true, T::zero(), &mut d);
                        Tensor::new(sa.clone(), d).unwrap()
                    });
                    let gb = ctx.needs[1].then(|| {
                        let mut d = vec![T::zero(); k * n];
                        gemm(k, m, n, a, true, g, false, T::zero(), &mut d);
                        Tensor::new(sb.clone(), d).unwrap()
                    });
                    vec![ga, gb]
                }),
            ));
        }
        let r = sa.len();
        if sb.len() != r || sa[..r - 2] != sb[..r - 2] || sb[r - 2] != k {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, n) = (sa[r - 2], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[bi * m * k..(bi + 1) * m * k],
                false,
                &b.data()[bi * k * n..(bi + 1) * k * n],
                false,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = sa.clone();
        shape[r - 1] = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.graph.op(
            value,
            &[self, rhs],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let ga = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &b[bi * k * n..(bi + 1) * k * n],
                            true,
                            T::zero(),
                            &mut d[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    Tensor::new(sa.clone(), d).unwrap()
                });
                let gb = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &a[bi * m * k..(bi + 1) * m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            T::zero(),
                            &mut d[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    Tensor::new(sb.clone(), d).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let v = self.value();
        check_axis("sum_axis", v.shape(), axis)?;
        let (outer, n, inner) = split3(v.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = v.data();
        for o in 0..outer {
            for i in 0..n {
                let src = &d[(o * n + i) * inner..(o * n + i + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
            }
        }
        let mut shape = v.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let src_shape = v.shape().to_vec();
        Ok(self.graph.op(
            Tensor::new(shape, out)?,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        d[(o * n + i) * inner..(o * n + i + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(src_shape.clone(), d).unwrap())]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let n = *self
            .value()
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis, keepdim)?.scale(T::one() / lit::<T>(n as f64)))
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.graph.op(
            Tensor::scalar(v.sum()),
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(Tensor::full(&shape, ctx.grad.data()[0]))]),
        )
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().len().max(1);
        self.sum_all().scale(T::one() / lit::<T>(n as f64))
    }

    pub fn softmax_last(self) -> Result<Var<'g, T>> {
        let v = self.value();
        let c = *v.shape().last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s = s + *x;
            }
            for x in row.iter_mut() {
                *x = *x / s;
            }
        }
        Ok(self.graph.op(
            Tensor::new(v.shape().to_vec(), out)?,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(ctx.output.shape().to_vec(), d).unwrap())]
            }),
        ))
    }

    /// Unit-normalize along the last axis. Zero vectors map to zero (with zero
    /// gradient) instead of NaN.
    pub fn l2_normalize_last(self) -> Result<Var<'g, T>> {
        let v = self.value();
        let c = *v.shape().last().ok_or_else(|| Error::shape("l2_normalize", "rank 0"))?;
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / c.max(1));
        for row in out.chunks_mut(c) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(norm);
            if norm > T::zero() {
                row.iter_mut().for_each(|x| *x = *x / norm);
            } else {
                row.iter_mut().for_each(|x| *x = T::zero());
            }
        }
        Ok(self.graph.op(
            Tensor::new(v.shape().to_vec(), out)?,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); y.len()];
                for (r, ((yr, gr), dr)) in y.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)).enumerate() {
                    let norm = norms[r];
                    if norm > T::zero() {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.output.shape().to_vec(), d).unwrap())]
            }),
        ))
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", base, s)));
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split3(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &n) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.graph.op(
            Tensor::new(shape, out)?,
            parts,
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad.data();
                let mut grads: Vec<Vec<T>> = sizes.iter().map(|&n| Vec::with_capacity(outer * n * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &n) in grads.iter_mut().zip(&sizes) {
                        gi.extend_from_slice(&g[off..off + n * inner]);
                        off += n * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .zip(ctx.needs)
                    .map(|((d, s), &need)| need.then(|| Tensor::new(s.clone(), d).unwrap()))
                    .collect()
            }),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        check_axis("narrow", v.shape(), axis)?;
        let (outer, n, inner) = split3(v.shape(), axis);
        if start + len > n {
            return Err(Error::shape("narrow", format!("{start}+{len} exceeds {n}")));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let src_shape = v.shape().to_vec();
        Ok(self.graph.op(
            Tensor::new(shape, out)?,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    d[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(src_shape.clone(), d).unwrap())]
            }),
        ))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        let out = broadcast_shape(v.shape(), shape)
            .filter(|s| s == shape)
            .ok_or_else(|| Error::shape("broadcast_to", format!("{:?} -> {:?}", v.shape(), shape)))?;
        let offs = offsets_for(&out, v.shape());
        let data = (0..numel(&out)).map(|i| at(v.data(), &offs, i)).collect();
        let src = v.shape().to_vec();
        Ok(self.graph.op(
            Tensor::new(out, data)?,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(reduce_to(ctx.grad.data().to_vec(), &offs, &src))]),
        ))
    }

    /// Rows of axis 0 picked by `indices` (repeats allowed).
    pub fn index_select(self, indices: Rc<Vec<usize>>) -> Result<Var<'g, T>> {
        let v = self.value();
        let rows = *v.shape().first().ok_or_else(|| Error::shape("index_select", "rank 0"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_select", format!("index {bad} >= {rows}")));
        }
        let inner = v.len() / rows.max(1);
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices.iter() {
            out.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let src = v.shape().to_vec();
        Ok(self.graph.op(
            Tensor::new(shape, out)?,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); numel(&src)];
                for (j, &i) in indices.iter().enumerate() {
                    for c in 0..inner {
                        d[i * inner + c] = d[i * inner + c] + g[j * inner + c];
                    }
                }
                vec![Some(Tensor::new(src.clone(), d).unwrap())]
            }),
        ))
    }

    /// Cyclic shift: element `i` moves to `(i + shift) mod n` along `axis`.
    pub fn roll(self, axis: usize, shift: isize) -> Result<Var<'g, T>> {
        let v = self.value();
        check_axis("roll", v.shape(), axis)?;
        let value = roll_tensor(&v, axis, shift);
        Ok(self.graph.op(
            value,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(roll_tensor(ctx.grad, axis, -shift))]),
        ))
    }

    /// Reverse the order of entries along `axis`.
    pub fn flip(self, axis: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        check_axis("flip", v.shape(), axis)?;
        let value = flip_tensor(&v, axis);
        Ok(self.graph.op(
            value,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(flip_tensor(ctx.grad, axis))]),
        ))
    }

    /// Apply a constant linear map along one axis:
    /// `y[.., o, ..] = Σ_i m[o, i] · x[.., i, ..]`.
    pub fn axis_matmul(self, m: Rc<Tensor<T>>, axis: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        check_axis("axis_matmul", v.shape(), axis)?;
        let (outer, n_in, inner) = split3(v.shape(), axis);
        if m.rank() != 2 || m.shape()[1] != n_in {
            return Err(Error::shape("axis_matmul", format!("matrix {:?} for axis of size {n_in}", m.shape())));
        }
        let n_out = m.shape()[0];
        let mut out = vec![T::zero(); outer * n_out * inner];
        for o in 0..outer {
            gemm(
                n_out,
                n_in,
                inner,
                m.data(),
                false,
                &v.data()[o * n_in * inner..(o + 1) * n_in * inner],
                false,
                T::zero(),
                &mut out[o * n_out * inner..(o + 1) * n_out * inner],
            );
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = n_out;
        let src = v.shape().to_vec();
        Ok(self.graph.op(
            Tensor::new(shape, out)?,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); outer * n_in * inner];
                for o in 0..outer {
                    gemm(
                        n_in,
                        n_out,
                        inner,
                        m.data(),
                        true,
                        &g[o * n_out * inner..(o + 1) * n_out * inner],
                        false,
                        T::zero(),
                        &mut d[o * n_in * inner..(o + 1) * n_in * inner],
                    );
                }
                vec![Some(Tensor::new(src.clone(), d).unwrap())]
            }),
        ))
    }

    /// 2-D convolution, stride 1, zero padding that preserves the spatial
    /// size. `self` is `(batch, h, w, c_in)`; `kernel` is `(kh, kw, c_in,
    /// c_out)` with odd `kh`, `kw`. No bias.
    pub fn conv2d(self, kernel: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let w = kernel.value();
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != xs[3] || ws[0] % 2 == 0 || ws[1] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        let (b, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        let kdim = kh * kw * cin;
        let rows = b * h * wd;
        let cols = im2col(x.data(), b, h, wd, cin, kh, kw);
        let mut out = vec![T::zero(); rows * cout];
        gemm(rows, kdim, cout, &cols, false, w.data(), false, T::zero(), &mut out);
        Ok(self.graph.op(
            Tensor::new(vec![b, h, wd, cout], out)?,
            &[self, kernel],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let (x, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let gx = ctx.needs[0].then(|| {
                    let mut dcols = vec![T::zero(); rows * kdim];
                    gemm(rows, cout, kdim, g, false, w, true, T::zero(), &mut dcols);
                    Tensor::new(xs.clone(), col2im(&dcols, b, h, wd, cin, kh, kw)).unwrap()
                });
                let gw = ctx.needs[1].then(|| {
                    let cols = im2col(x, b, h, wd, cin, kh, kw);
                    let mut d = vec![T::zero(); kdim * cout];
                    gemm(kdim, rows, cout, &cols, true, g, false, T::zero(), &mut d);
                    Tensor::new(ws.clone(), d).unwrap()
                });
                vec![gx, gw]
            }),
        ))
    }
}

pub(crate) fn roll_tensor<T: Scalar>(t: &Tensor<T>, axis: usize, shift: isize) -> Tensor<T> {
    let (outer, n, inner) = split3(t.shape(), axis);
    let mut out = vec![T::zero(); t.len()];
    let s = shift.rem_euclid(n.max(1) as isize) as usize;
    for o in 0..outer {
        for i in 0..n {
            let j = (i + s) % n;
            out[(o * n + j) * inner..(o * n + j + 1) * inner]
                .copy_from_slice(&t.data()[(o * n + i) * inner..(o * n + i + 1) * inner]);
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

pub(crate) fn flip_tensor<T: Scalar>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split3(t.shape(), axis);
    let mut out = vec![T::zero(); t.len()];
    for o in 0..outer {
        for i in 0..n {
            let j = n - 1 - i;
            out[(o * n + j) * inner..(o * n + j + 1) * inner]
                .copy_from_slice(&t.data()[(o * n + i) * inner..(o * n + i + 1) * inner]);
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}
