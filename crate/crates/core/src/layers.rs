//! Learnable spatiotemporal layer primitives.
//!
//! Hidden states use the layout `(batch, channel, node, time)`. Both layers
//! expose a pure forward function and the matching reverse-mode gradient so
//! the model tape can wrap them as single fused operations.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use crate::attention::{attention, attention_grad, AttentionParams};
use crate::error::{HagcnError, Result};
use crate::params::{join, ParamTree};
use crate::param_tree;
use crate::tensor::{mix_channels, mix_channels_weight_grad, Tensor};

/// `(B, F, N, L)`
pub type HiddenState = Array4<f64>;

/// Gated dilated causal convolution kernels, each `(F_out, F_in, kernel_size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnParams<T = Tensor> {
    pub z1: T,
    pub z2: T,
    pub dilation: usize,
}
param_tree!(TcnParams { leaves: [z1, z2], meta: [dilation] });

impl TcnParams {
    pub fn kernel_size(&self) -> usize {
        self.z1.shape()[2]
    }

    fn kernels(&self) -> (ArrayView3<'_, f64>, ArrayView3<'_, f64>) {
        (
            self.z1.view().into_dimensionality().expect("z1 is (F_out, F_in, k)"),
            self.z2.view().into_dimensionality().expect("z2 is (F_out, F_in, k)"),
        )
    }
}

/// Diffusion graph convolution with one channel-mixing matrix and one
/// attention bottleneck per diffusion step `k = 0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams<T = Tensor> {
    /// `K + 1` matrices of shape `(F_out, F_in)`.
    pub theta: Vec<T>,
    /// `K + 1` bottlenecks.
    pub attention: Vec<AttentionParams<T>>,
}

impl<T> ParamTree<T> for GcnParams<T> {
    type Mapped<U> = GcnParams<U>;

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> GcnParams<U> {
        GcnParams {
            theta: self
                .theta
                .iter()
                .enumerate()
                .map(|(k, t)| f(&join(prefix, &format!("theta.{k}")), t))
                .collect(),
            attention: self.attention.map(&join(prefix, "attention"), f),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (k, t) in self.theta.iter_mut().enumerate() {
            f(&join(prefix, &format!("theta.{k}")), t);
        }
        self.attention.for_each_mut(&join(prefix, "attention"), f);
    }
}

impl<T> GcnParams<T> {
    pub fn max_step(&self) -> usize {
        self.theta.len().saturating_sub(1)
    }
}

fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality().expect("matrix")
}

/// Temporal receptive field of a stack of dilated convolutions.
pub fn receptive_field(kernel_size: usize, dilations: &[usize]) -> usize {
    1 + dilations.iter().map(|d| (kernel_size - 1) * d).sum::<usize>()
}

/// Causal dilated convolution along time, no padding:
/// `out[b, o, n, τ] = Σ_{i, j} w[o, i, j] · x[b, i, n, τ + j·dilation]`.
/// The last tap reads the newest sample of the window ending at `τ`.
pub fn causal_conv(x: &ArrayView4<'_, f64>, w: &ArrayView3<'_, f64>, dilation: usize) -> Result<Array4<f64>> {
    let (b, c_in, n, l) = x.dim();
    let (c_out, w_in, k) = w.dim();
    if w_in != c_in {
        return Err(HagcnError::Shape(format!(
            "kernel expects {w_in} input channels, state has {c_in}"
        )));
    }
    let span = k.saturating_sub(1) * dilation;
    if k == 0 || l < span + 1 {
        return Err(HagcnError::Shape(format!(
            "temporal length {l} shorter than receptive window {}",
            span + 1
        )));
    }
    let geom = ConvGeometry { c_in, n, l, k, dilation, out_len: l - span };
    let w = w.as_standard_layout();
    let wm = w.view().into_shape_with_order((c_out, c_in * k)).expect("standard layout");
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::zeros((b, c_out, n, geom.out_len));
    let cols = n * geom.out_len;
    let mut col = Array2::zeros((c_in * k, cols));
    for (bi, mut ob) in out.outer_iter_mut().enumerate() {
        geom.im2col(&xs[bi * c_in * n * l..(bi + 1) * c_in * n * l], &mut col);
        let mut ob = ob.view_mut().into_shape_with_order((c_out, cols)).expect("fresh array");
        general_mat_mul(1.0, &wm, &col, 0.0, &mut ob);
    }
    Ok(out)
}

/// Layout of one sample's convolution as a single matrix product.
struct ConvGeometry {
    c_in: usize,
    n: usize,
    l: usize,
    k: usize,
    dilation: usize,
    out_len: usize,
}

impl ConvGeometry {
    /// Row `i·k + j` of `col` holds channel `i` shifted by tap `j`.
    fn im2col(&self, xb: &[f64], col: &mut Array2<f64>) {
        let dst = col.as_slice_mut().expect("contiguous");
        let row_len = self.n * self.out_len;
        for i in 0..self.c_in {
            for j in 0..self.k {
                let row = &mut dst[(i * self.k + j) * row_len..(i * self.k + j + 1) * row_len];
                let shift = j * self.dilation;
                for node in 0..self.n {
                    let src = &xb[(i * self.n + node) * self.l + shift..][..self.out_len];
                    row[node * self.out_len..(node + 1) * self.out_len].copy_from_slice(src);
                }
            }
        }
    }

    /// Scatter-adds the rows of `col` back onto the sample's input layout.
    fn col2im_add(&self, col: &Array2<f64>, dxb: &mut [f64]) {
        let src = col.as_slice().expect("contiguous");
        let row_len = self.n * self.out_len;
        for i in 0..self.c_in {
            for j in 0..self.k {
                let row = &src[(i * self.k + j) * row_len..(i * self.k + j + 1) * row_len];
                let shift = j * self.dilation;
                for node in 0..self.n {
                    let dst = &mut dxb[(i * self.n + node) * self.l + shift..][..self.out_len];
                    for (d, v) in dst.iter_mut().zip(&row[node * self.out_len..(node + 1) * self.out_len]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `(d x, d w)` for [`causal_conv`].
pub fn causal_conv_grad(
    x: &ArrayView4<'_, f64>,
    w: &ArrayView3<'_, f64>,
    dilation: usize,
    grad: &ArrayView4<'_, f64>,
) -> (Array4<f64>, Array3<f64>) {
    let (b, c_in, n, l) = x.dim();
    let (c_out, _, k) = w.dim();
    let geom = ConvGeometry { c_in, n, l, k, dilation, out_len: grad.dim().3 };
    let w = w.as_standard_layout();
    let wm = w.view().into_shape_with_order((c_out, c_in * k)).expect("standard layout");
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let g = grad.as_standard_layout();
    let gs = g.as_slice().expect("standard layout");
    let cols = n * geom.out_len;
    let mut dx = Array4::zeros(x.raw_dim());
    let mut dw = Array2::zeros((c_out, c_in * k));
    let mut col = Array2::zeros((c_in * k, cols));
    let mut dcol = Array2::zeros((c_in * k, cols));
    let block = c_in * n * l;
    let dxs = dx.as_slice_mut().expect("fresh array");
    for bi in 0..b {
        geom.im2col(&xs[bi * block..(bi + 1) * block], &mut col);
        let gb = ArrayView2::from_shape((c_out, cols), &gs[bi * c_out * cols..(bi + 1) * c_out * cols]).expect("block");
        general_mat_mul(1.0, &gb, &col.t(), 1.0, &mut dw);
        general_mat_mul(1.0, &wm.t(), &gb, 0.0, &mut dcol);
        geom.col2im_add(&dcol, &mut dxs[bi * block..(bi + 1) * block]);
    }
    (dx, dw.into_shape_with_order((c_out, c_in, k)).expect("contiguous"))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `tanh(Z1 ∗ x) ⊙ σ(Z2 ∗ x)`.
pub fn gated_tcn(x: &ArrayView4<'_, f64>, params: &TcnParams) -> Result<HiddenState> {
    let (z1, z2) = params.kernels();
    let filter = causal_conv(x, &z1, params.dilation)?;
    let gate = causal_conv(x, &z2, params.dilation)?;
    Ok(ndarray::Zip::from(&filter)
        .and(&gate)
        .map_collect(|&a, &b| a.tanh() * sigmoid(b)))
}

/// `(d x, d z1, d z2)` for [`gated_tcn`].
pub fn gated_tcn_grad(
    x: &ArrayView4<'_, f64>,
    params: &TcnParams,
    grad: &ArrayView4<'_, f64>,
) -> Result<(Array4<f64>, Array3<f64>, Array3<f64>)> {
    let (z1, z2) = params.kernels();
    let filter = causal_conv(x, &z1, params.dilation)?;
    let gate = causal_conv(x, &z2, params.dilation)?;
    let mut d_filter = Array4::zeros(filter.raw_dim());
    let mut d_gate = Array4::zeros(gate.raw_dim());
    ndarray::Zip::from(&mut d_filter)
        .and(&mut d_gate)
        .and(&filter)
        .and(&gate)
        .and(grad)
        .for_each(|df, dg, &a, &b, &g| {
            let t = a.tanh();
            let sg = sigmoid(b);
            *df = g * sg * (1.0 - t * t);
            *dg = g * t * sg * (1.0 - sg);
        });
    let (dx1, dz1) = causal_conv_grad(x, &z1, params.dilation, &d_filter.view());
    let (dx2, dz2) = causal_conv_grad(x, &z2, params.dilation, &d_gate.view());
    Ok((dx1 + dx2, dz1, dz2))
}

/// One diffusion step, channelwise: `out[b, f, i, t] = Σⱼ adj[g(b), f, i, j] · x[b, f, j, t]`.
///
/// `adj` is `(G, F, N, N)` and `sample_map[b]` picks the adjacency instance
/// used by sample `b`.
pub fn propagate(adj: &ArrayView4<'_, f64>, sample_map: &[usize], x: &ArrayView4<'_, f64>) -> Array4<f64> {
    let (b, f, n, l) = x.dim();
    let mut out = Array4::zeros((b, f, n, l));
    let x = x.as_standard_layout();
    let adj = adj.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let adjs = adj.as_slice().expect("standard layout");
    let outs = out.as_slice_mut().expect("fresh array");
    let (nl, nn) = (n * l, n * n);
    for bi in 0..b {
        let g = sample_map[bi];
        for fi in 0..f {
            let a = &adjs[(g * f + fi) * nn..(g * f + fi + 1) * nn];
            let xin = &xs[(bi * f + fi) * nl..(bi * f + fi + 1) * nl];
            let dst = &mut outs[(bi * f + fi) * nl..(bi * f + fi + 1) * nl];
            for (row, weights) in dst.chunks_exact_mut(l).zip(a.chunks_exact(n)) {
                for (&w, src) in weights.iter().zip(xin.chunks_exact(l)) {
                    if w != 0.0 {
                        row.iter_mut().zip(src).for_each(|(r, &v)| *r += w * v);
                    }
                }
            }
        }
    }
    out
}

/// Transposed propagation `Aᵀ g` and the adjacency gradient `Σ_t g xᵀ`
/// accumulated per adjacency instance.
fn propagate_grad(
    adj: &ArrayView4<'_, f64>,
    sample_map: &[usize],
    x: &ArrayView4<'_, f64>,
    grad: &ArrayView4<'_, f64>,
    d_adj: &mut Array4<f64>,
) -> Array4<f64> {
    let (b, f, n, l) = x.dim();
    let mut dx = Array4::zeros((b, f, n, l));
    let x = x.as_standard_layout();
    let grad = grad.as_standard_layout();
    let adj = adj.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let gs = grad.as_slice().unwrap();
    let adjs = adj.as_slice().unwrap();
    let das = d_adj.as_slice_mut().expect("fresh array");
    let dxs = dx.as_slice_mut().unwrap();
    let (nl, nn) = (n * l, n * n);
    for bi in 0..b {
        let g = sample_map[bi];
        for fi in 0..f {
            let a_off = (g * f + fi) * nn;
            let x_off = (bi * f + fi) * nl;
            let xin = &xs[x_off..x_off + nl];
            let gin = &gs[x_off..x_off + nl];
            let dxin = &mut dxs[x_off..x_off + nl];
            for (i, gi) in gin.chunks_exact(l).enumerate() {
                let da = &mut das[a_off + i * n..a_off + (i + 1) * n];
                let w_row = &adjs[a_off + i * n..a_off + (i + 1) * n];
                for (((d, &w), xj), dst) in da.iter_mut().zip(w_row).zip(xin.chunks_exact(l)).zip(dxin.chunks_exact_mut(l)) {
                    *d += gi.iter().zip(xj).map(|(a, b)| a * b).sum::<f64>();
                    if w != 0.0 {
                        dst.iter_mut().zip(gi).for_each(|(r, &v)| *r += w * v);
                    }
                }
            }
        }
    }
    dx
}

fn scale_channels(x: &ArrayView4<'_, f64>, alpha: &ArrayView2<'_, f64>, sample_map: &[usize]) -> Array4<f64> {
    let mut out = x.to_owned();
    for (bi, mut sample) in out.outer_iter_mut().enumerate() {
        let row = alpha.row(sample_map[bi]);
        for (fi, mut ch) in sample.outer_iter_mut().enumerate() {
            ch *= row[fi];
        }
    }
    out
}

/// Forward pass of the graph convolution given precomputed channel weights.
///
/// `alphas[k]` is `(G, F)`; `None` disables channel attention (all weights 1).
pub fn graph_conv_with_weights(
    h: &ArrayView4<'_, f64>,
    adj: &ArrayView4<'_, f64>,
    sample_map: &[usize],
    theta: &[ArrayView2<'_, f64>],
    alphas: Option<&[ArrayView2<'_, f64>]>,
) -> Result<HiddenState> {
    check_graph_shapes(h, adj, sample_map, theta, alphas)?;
    let mut p: Option<Array4<f64>> = None;
    let mut out: Option<Array4<f64>> = None;
    for (k, th) in theta.iter().enumerate() {
        if k > 0 {
            p = Some(propagate(adj, sample_map, &p.as_ref().map_or(h.view(), |a| a.view())));
        }
        let current = p.as_ref().map_or(h.view(), |a| a.view());
        let mixed = match alphas {
            Some(a) => mix_channels(th, &scale_channels(&current, &a[k], sample_map).view().into_dyn()),
            None => mix_channels(th, &current.into_dyn()),
        }
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4-d");
        out = Some(match out {
            None => mixed,
            Some(acc) => acc + mixed,
        });
    }
    Ok(out.expect("theta is non-empty"))
}

fn check_graph_shapes(
    h: &ArrayView4<'_, f64>,
    adj: &ArrayView4<'_, f64>,
    sample_map: &[usize],
    theta: &[ArrayView2<'_, f64>],
    alphas: Option<&[ArrayView2<'_, f64>]>,
) -> Result<()> {
    let (b, f, n, _) = h.dim();
    let (g, fa, na, nb) = adj.dim();
    if theta.is_empty() {
        return Err(HagcnError::Argument("graph convolution needs K >= 0 (at least one theta)".into()));
    }
    if fa != f || na != n || nb != n {
        return Err(HagcnError::Shape(format!(
            "adjacency {:?} incompatible with hidden state {:?}",
            adj.shape(),
            h.shape()
        )));
    }
    if sample_map.len() != b || sample_map.iter().any(|&k| k >= g) {
        return Err(HagcnError::Shape(format!(
            "sample map of length {} must index {g} adjacency instances for {b} samples",
            sample_map.len()
        )));
    }
    for th in theta {
        if th.ncols() != f {
            return Err(HagcnError::Shape(format!(
                "theta {:?} does not accept {f} channels",
                th.shape()
            )));
        }
    }
    if let Some(a) = alphas {
        if a.len() != theta.len() || a.iter().any(|x| x.dim() != (g, f)) {
            return Err(HagcnError::Shape("channel weights must be (G, F) per step".into()));
        }
    }
    Ok(())
}

/// Gradients of [`graph_conv_with_weights`].
#[derive(Debug, Clone)]
pub struct GraphConvGrads {
    pub h: Array4<f64>,
    pub adj: Array4<f64>,
    pub theta: Vec<Array2<f64>>,
    pub alphas: Option<Vec<Array2<f64>>>,
}

pub fn graph_conv_with_weights_grad(
    h: &ArrayView4<'_, f64>,
    adj: &ArrayView4<'_, f64>,
    sample_map: &[usize],
    theta: &[ArrayView2<'_, f64>],
    alphas: Option<&[ArrayView2<'_, f64>]>,
    grad: &ArrayView4<'_, f64>,
) -> GraphConvGrads {
    let k_max = theta.len() - 1;
    let g_count = adj.dim().0;
    let f = h.dim().1;
    // Powers P_k = A^k h.
    let mut powers = Vec::with_capacity(theta.len());
    powers.push(h.to_owned());
    for k in 1..=k_max {
        let next = propagate(adj, sample_map, &powers[k - 1].view());
        powers.push(next);
    }
    let g_dyn = grad.into_dyn();
    let mut d_theta = Vec::with_capacity(theta.len());
    let mut d_alphas = alphas.map(|_| Vec::with_capacity(theta.len()));
    let mut d_powers: Vec<Array4<f64>> = Vec::with_capacity(theta.len());
    for (k, th) in theta.iter().enumerate() {
        d_theta.push(match alphas {
            Some(a) => mix_channels_weight_grad(&g_dyn, &scale_channels(&powers[k].view(), &a[k], sample_map).view().into_dyn()),
            None => mix_channels_weight_grad(&g_dyn, &powers[k].view().into_dyn()),
        });
        let d_scaled = mix_channels(&th.t(), &g_dyn)
            .into_dimensionality::<ndarray::Ix4>()
            .expect("4-d");
        match alphas {
            Some(a) => {
                let mut d_alpha = Array2::zeros((g_count, f));
                for (bi, (ds, p)) in d_scaled.outer_iter().zip(powers[k].outer_iter()).enumerate() {
                    for fi in 0..f {
                        let dot: f64 = ds
                            .index_axis(Axis(0), fi)
                            .iter()
                            .zip(p.index_axis(Axis(0), fi).iter())
                            .map(|(x, y)| x * y)
                            .sum();
                        d_alpha[[sample_map[bi], fi]] += dot;
                    }
                }
                d_alphas.as_mut().unwrap().push(d_alpha);
                d_powers.push(scale_channels(&d_scaled.view(), &a[k], sample_map));
            }
            None => d_powers.push(d_scaled),
        }
    }
    let mut d_adj = Array4::zeros(adj.raw_dim());
    let mut carry = d_powers.pop().expect("non-empty");
    for k in (1..=k_max).rev() {
        let back = propagate_grad(adj, sample_map, &powers[k - 1].view(), &carry.view(), &mut d_adj);
        carry = d_powers.pop().expect("aligned") + back;
    }
    GraphConvGrads {
        h: carry,
        adj: d_adj,
        theta: d_theta,
        alphas: d_alphas,
    }
}

/// Channel weights `αₖ = attention(pooled[g], params.attention[k])` for
/// every adjacency instance, one `(G, F)` matrix per diffusion step.
pub fn channel_weights(pooled: &ArrayView2<'_, f64>, params: &GcnParams) -> Vec<Array2<f64>> {
    params
        .attention
        .iter()
        .map(|att| {
            let mut a = Array2::zeros(pooled.raw_dim());
            for (g, y) in pooled.outer_iter().enumerate() {
                a.row_mut(g).assign(&attention(&y, att));
            }
            a
        })
        .collect()
}

/// `(d pooled, d w1, d w2)` per step for [`channel_weights`].
pub fn channel_weights_grad(
    pooled: &ArrayView2<'_, f64>,
    params: &GcnParams,
    d_alphas: &[Array2<f64>],
) -> (Array2<f64>, Vec<(Array2<f64>, Array2<f64>)>) {
    let mut d_pooled = Array2::zeros(pooled.raw_dim());
    let mut d_params = Vec::with_capacity(params.attention.len());
    for (att, d_alpha) in params.attention.iter().zip(d_alphas) {
        let mut dw1 = Array2::zeros(att.w1().raw_dim());
        let mut dw2 = Array2::zeros(att.w2().raw_dim());
        for (g, y) in pooled.outer_iter().enumerate() {
            let (dy, d1, d2) = attention_grad(&y, att, &d_alpha.row(g));
            d_pooled.row_mut(g).scaled_add(1.0, &dy);
            dw1 += &d1;
            dw2 += &d2;
        }
        d_params.push((dw1, dw2));
    }
    (d_pooled, d_params)
}

/// `Σₖ θₖ · (αₖ ⊙ (A')ᵏ h)` with `αₖ` derived from the pooled adjacency statistics.
///
/// `adj` is `(G, F, N, N)`, `pooled` is `(G, F)` and `sample_map[b]` selects
/// the adjacency instance of sample `b`. A single static adjacency is the
/// case `G = 1` with an all-zero map.
pub fn hetero_graph_conv(
    h: &ArrayView4<'_, f64>,
    adj: &ArrayView4<'_, f64>,
    sample_map: &[usize],
    params: &GcnParams,
    pooled: &ArrayView2<'_, f64>,
) -> Result<HiddenState> {
    if params.attention.len() != params.theta.len() {
        return Err(HagcnError::Shape("one attention bottleneck per diffusion step".into()));
    }
    if pooled.dim() != (adj.dim().0, adj.dim().1) {
        return Err(HagcnError::Shape(format!(
            "pooled {:?} does not correspond to adjacency {:?}",
            pooled.shape(),
            adj.shape()
        )));
    }
    let alphas = channel_weights(pooled, params);
    let alpha_views: Vec<_> = alphas.iter().map(|a| a.view()).collect();
    let theta: Vec<_> = params.theta.iter().map(view2).collect();
    graph_conv_with_weights(h, adj, sample_map, &theta, Some(&alpha_views))
}

/// Row normalization `A'ᵢⱼ = Aᵢⱼ / Σⱼ Aᵢⱼ`; rows summing to zero stay zero.
pub fn row_normalize(adj: &ArrayView4<'_, f64>) -> Array4<f64> {
    let mut out = adj.to_owned();
    for mut row in out.lanes_mut(Axis(3)) {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    out
}

pub fn row_normalize_grad(adj: &ArrayView4<'_, f64>, grad: &ArrayView4<'_, f64>) -> Array4<f64> {
    let mut out = Array4::zeros(adj.raw_dim());
    for ((mut d, a), g) in out
        .lanes_mut(Axis(3))
        .into_iter()
        .zip(adj.lanes(Axis(3)))
        .zip(grad.lanes(Axis(3)))
    {
        let s = a.sum();
        if s <= 0.0 {
            continue;
        }
        let inner: f64 = a.iter().zip(g.iter()).map(|(x, y)| x * y).sum::<f64>() / s;
        for ((dv, &gv), _) in d.iter_mut().zip(g.iter()).zip(a.iter()) {
            *dv = (gv - inner) / s;
        }
    }
    out
}

/// Explicit matrix power of every channel, used by tests and diagnostics.
pub fn channel_matrix_power(adj: &ArrayView3<'_, f64>, k: usize) -> Array3<f64> {
    let (f, n, _) = adj.dim();
    let mut out = Array3::zeros((f, n, n));
    for c in 0..f {
        let a = adj.index_axis(Axis(0), c);
        let mut p = Array2::eye(n);
        for _ in 0..k {
            p = a.dot(&p);
        }
        out.index_axis_mut(Axis(0), c).assign(&p);
    }
    out
}
