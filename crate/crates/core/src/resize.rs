//! Spatial resampling of channels-last grids as constant linear maps.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// `(n_out, n_in)` matrix of half-pixel bilinear interpolation weights with
/// edge clamping (the `align_corners = false` convention).
pub fn bilinear_matrix<T: Scalar>(n_in: usize, n_out: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[n_out, n_in]);
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        let w0 = m.get(&[o, i0]) + lit::<T>(1.0 - frac);
        m.set(&[o, i0], w0);
        let w1 = m.get(&[o, i1]) + lit::<T>(frac);
        m.set(&[o, i1], w1);
    }
    m
}

/// `(n * factor, n)` nearest-neighbour replication matrix.
pub fn nearest_matrix<T: Scalar>(n_in: usize, factor: usize) -> Tensor<T> {
    Tensor::from_fn(&[n_in * factor, n_in], |i| if i[0] / factor == i[1] { T::one() } else { T::zero() })
}

/// Bilinearly resize the spatial axes `(axis, axis + 1)` of `x`.
pub fn bilinear<'g, T: Scalar>(x: Var<'g, T>, axis: usize, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
    let shape = x.shape();
    if axis + 1 >= shape.len() {
        return Err(Error::shape("bilinear", format!("no spatial axes at {axis} in {shape:?}")));
    }
    let (h, w) = (shape[axis], shape[axis + 1]);
    let mut y = x;
    if h != out_h {
        y = y.axis_matmul(Rc::new(bilinear_matrix(h, out_h)), axis)?;
    }
    if w != out_w {
        y = y.axis_matmul(Rc::new(bilinear_matrix(w, out_w)), axis + 1)?;
    }
    Ok(y)
}

/// Nearest-neighbour upsampling of the spatial axes `(axis, axis + 1)`.
pub fn nearest<'g, T: Scalar>(x: Var<'g, T>, axis: usize, factor: usize) -> Result<Var<'g, T>> {
    let shape = x.shape();
    if axis + 1 >= shape.len() {
        return Err(Error::shape("nearest", format!("no spatial axes at {axis} in {shape:?}")));
    }
    let (h, w) = (shape[axis], shape[axis + 1]);
    x.axis_matmul(Rc::new(nearest_matrix(h, factor)), axis)?
        .axis_matmul(Rc::new(nearest_matrix(w, factor)), axis + 1)
}

/// Plain-tensor bilinear resize of a `(h, w, c)` grid.
pub fn bilinear_tensor<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let g = crate::Graph::new();
    let y = bilinear(g.constant(x.clone()), 0, out_h, out_w)?;
    Ok((*y.value()).clone())
}
