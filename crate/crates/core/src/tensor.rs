//! Dense tensor helpers shared by the layer and factorisation code.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, ArrayViewMut2, Axis, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Mode-`n` unfolding: rows index axis `n`, columns run over the remaining
/// axes in their original order.
pub fn unfold(t: &ArrayViewD<'_, f64>, n: usize) -> Array2<f64> {
    let shape = t.shape();
    let dn = shape[n];
    let rest: usize = shape.iter().product::<usize>() / dn.max(1);
    let order = mode_first_order(t.ndim(), n);
    t.view()
        .permuted_axes(IxDyn(&order))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((dn, rest))
        .expect("contiguous after as_standard_layout")
}

/// Inverse of [`unfold`] for a tensor whose axis `n` has `mat.nrows()` entries
/// and whose other axes are given by `shape`.
pub fn fold(mat: Array2<f64>, n: usize, shape: &[usize]) -> Tensor {
    let order = mode_first_order(shape.len(), n);
    let mut permuted_shape: Vec<usize> = order.iter().map(|&k| shape[k]).collect();
    permuted_shape[0] = mat.nrows();
    let t = mat
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&permuted_shape))
        .expect("fold shape");
    let mut inverse = vec![0; order.len()];
    for (pos, &axis) in order.iter().enumerate() {
        inverse[axis] = pos;
    }
    t.permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned()
}

fn mode_first_order(ndim: usize, n: usize) -> Vec<usize> {
    std::iter::once(n).chain((0..ndim).filter(|&k| k != n)).collect()
}

/// Mode-`n` product `t ×ₙ mat`, where `mat` is `(new_dim × t.shape[n])`.
pub fn mode_product(t: &ArrayViewD<'_, f64>, mat: &ArrayView2<'_, f64>, n: usize) -> Tensor {
    let shape = t.shape().to_vec();
    let unfolded = unfold(t, n);
    fold(mat.dot(&unfolded), n, &shape)
}

/// Mixes the channel axis (axis 1) of a `(B, C, ...)` tensor with `w`
/// (`C_out × C_in`), pointwise in every other axis.
pub fn mix_channels(w: &ArrayView2<'_, f64>, x: &ArrayViewD<'_, f64>) -> Tensor {
    let mut shape = x.shape().to_vec();
    let (b, c_in) = (shape[0], shape[1]);
    assert_eq!(w.ncols(), c_in, "channel mixing weight");
    let rest: usize = shape[2..].iter().product();
    shape[1] = w.nrows();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    let os = out.as_slice_mut().expect("fresh array");
    let (in_block, out_block) = (c_in * rest, w.nrows() * rest);
    for bi in 0..b {
        let xb = ArrayView2::from_shape((c_in, rest), &xs[bi * in_block..(bi + 1) * in_block]).expect("block");
        let ob = ArrayViewMut2::from_shape((w.nrows(), rest), &mut os[bi * out_block..(bi + 1) * out_block])
            .expect("block");
        general_mat_mul(1.0, w, &xb, 0.0, &mut { ob });
    }
    out
}

/// Gradient of [`mix_channels`] with respect to `w`, i.e.
/// `Σ grad[b, o, ...] · x[b, i, ...]`.
pub fn mix_channels_weight_grad(grad: &ArrayViewD<'_, f64>, x: &ArrayViewD<'_, f64>) -> Array2<f64> {
    let (b, c_out, c_in) = (grad.shape()[0], grad.shape()[1], x.shape()[1]);
    let rest: usize = x.shape()[2..].iter().product();
    let g = grad.as_standard_layout();
    let x = x.as_standard_layout();
    let (gs, xs) = (g.as_slice().expect("standard"), x.as_slice().expect("standard"));
    let mut dw = Array2::zeros((c_out, c_in));
    for bi in 0..b {
        let gb = ArrayView2::from_shape((c_out, rest), &gs[bi * c_out * rest..(bi + 1) * c_out * rest]).expect("block");
        let xb = ArrayView2::from_shape((c_in, rest), &xs[bi * c_in * rest..(bi + 1) * c_in * rest]).expect("block");
        general_mat_mul(1.0, &gb, &xb.t(), 1.0, &mut dw);
    }
    dw
}

pub fn frobenius(t: &ArrayViewD<'_, f64>) -> f64 {
    t.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &ArrayViewD<'_, f64>, b: &ArrayViewD<'_, f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Sums `t` over every axis except `keep`.
pub fn sum_except(t: &ArrayViewD<'_, f64>, keep: usize) -> ndarray::Array1<f64> {
    let mut out = ndarray::Array1::zeros(t.shape()[keep]);
    for (k, lane) in t.axis_iter(Axis(keep)).enumerate() {
        out[k] = lane.sum();
    }
    out
}
