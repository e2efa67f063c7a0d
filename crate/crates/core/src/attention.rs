//! Channel attention driven by network decentralization.
//!
//! Every hidden channel of a heterogeneous adjacency is its own weighted
//! directed graph. The pooled statistic of a channel is one minus its Freeman
//! degree centralization, so a channel whose edges are spread across many
//! nodes scores close to 1 and a star-shaped channel scores close to 0. The
//! pooled vector is mapped through a bias-free bottleneck and a softmax.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3};

use crate::param_tree;
use crate::tensor::Tensor;

/// Bottleneck weights for one diffusion step: `w1` is `(F/r, F)`, `w2` is `(F, F/r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub w1: T,
    pub w2: T,
}
param_tree!(AttentionParams { leaves: [w1, w2] });

impl AttentionParams {
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = channels / reduction;
        Self {
            w1: Array2::zeros((hidden, channels)).into_dyn(),
            w2: Array2::zeros((channels, hidden)).into_dyn(),
        }
    }

    pub fn w1(&self) -> ArrayView2<'_, f64> {
        self.w1.view().into_dimensionality().expect("w1 is a matrix")
    }

    pub fn w2(&self) -> ArrayView2<'_, f64> {
        self.w2.view().into_dimensionality().expect("w2 is a matrix")
    }
}

/// Pooled per-channel decentralization, length F.
pub type PooledVector = Array1<f64>;

struct ChannelStats {
    n: usize,
    total: f64,
    max_row: usize,
    max_row_sum: f64,
    max_entry: (usize, usize),
    max_value: f64,
}

fn channel_stats(adj: &ArrayView2<'_, f64>) -> ChannelStats {
    let n = adj.nrows();
    let mut total = 0.0;
    let (mut max_row, mut max_row_sum) = (0, f64::NEG_INFINITY);
    let (mut max_entry, mut max_value) = ((0, 0), f64::NEG_INFINITY);
    for (i, row) in adj.outer_iter().enumerate() {
        let mut row_sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            row_sum += v;
            if v > max_value {
                max_value = v;
                max_entry = (i, j);
            }
        }
        total += row_sum;
        if row_sum > max_row_sum {
            max_row_sum = row_sum;
            max_row = i;
        }
    }
    ChannelStats {
        n,
        total,
        max_row,
        max_row_sum,
        max_entry,
        max_value,
    }
}

fn degenerate(st: &ChannelStats) -> bool {
    st.n <= 2 || st.max_value <= 0.0
}

/// `1 − [N·maxᵢ Σⱼ Aᵢⱼ − Σᵢⱼ Aᵢⱼ] / [(N−1)(N−2)·maxᵢⱼ Aᵢⱼ]`, or 1 for
/// channels with no positive edge or fewer than three nodes.
pub fn decentralization(adj: &ArrayView2<'_, f64>) -> f64 {
    let st = channel_stats(adj);
    if degenerate(&st) {
        return 1.0;
    }
    let n = st.n as f64;
    let numerator = n * st.max_row_sum - st.total;
    let denominator = (n - 1.0) * (n - 2.0) * st.max_value;
    1.0 - numerator / denominator
}

/// Gradient of [`decentralization`] with respect to the channel matrix,
/// scaled by `upstream`. The maxima route their gradient to the first
/// maximizing row/entry.
pub fn decentralization_grad(adj: &ArrayView2<'_, f64>, upstream: f64) -> Array2<f64> {
    let st = channel_stats(adj);
    let mut grad = Array2::zeros(adj.raw_dim());
    if degenerate(&st) || upstream == 0.0 {
        return grad;
    }
    let n = st.n as f64;
    let d = (n - 1.0) * (n - 2.0);
    let numerator = n * st.max_row_sum - st.total;
    let denominator = d * st.max_value;
    // y = 1 - num/den
    let dnum = -upstream / denominator;
    let dden = upstream * numerator / (denominator * denominator);
    grad.fill(-dnum);
    grad.row_mut(st.max_row).mapv_inplace(|g| g + n * dnum);
    grad[[st.max_entry.0, st.max_entry.1]] += d * dden;
    grad
}

pub fn decentralization_pool(adj: &ArrayView3<'_, f64>) -> PooledVector {
    adj.outer_iter().map(|c| decentralization(&c)).collect()
}

/// Global average pooling over all `N²` entries of each channel.
pub fn average_pool(adj: &ArrayView3<'_, f64>) -> PooledVector {
    adj.outer_iter().map(|c| c.mean().unwrap_or(0.0)).collect()
}

/// `softmax(W2 · relu(W1 · y))`.
pub fn attention(y: &ArrayView1<'_, f64>, params: &AttentionParams) -> Array1<f64> {
    let hidden = params.w1().dot(y).mapv_into(|v| v.max(0.0));
    softmax(&params.w2().dot(&hidden).view())
}

pub fn softmax(z: &ArrayView1<'_, f64>) -> Array1<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Gradients of [`attention`]: `(d y, d w1, d w2)`.
pub fn attention_grad(
    y: &ArrayView1<'_, f64>,
    params: &AttentionParams,
    d_alpha: &ArrayView1<'_, f64>,
) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
    let w1 = params.w1();
    let w2 = params.w2();
    let pre = w1.dot(y);
    let hidden = pre.mapv(|v| v.max(0.0));
    let alpha = softmax(&w2.dot(&hidden).view());
    let inner = alpha.dot(d_alpha);
    let dz = &alpha * &(d_alpha - inner);
    let dw2 = outer(&dz.view(), &hidden.view());
    let mut dh = w2.t().dot(&dz);
    dh.zip_mut_with(&pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    let dw1 = outer(&dh.view(), y);
    let dy = w1.t().dot(&dh);
    (dy, dw1, dw2)
}

fn outer(a: &ArrayView1<'_, f64>, b: &ArrayView1<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}
