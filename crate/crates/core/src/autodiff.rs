//! A small reverse-mode tape over dense tensors.
//!
//! Operations are coarse: each records its output value, its parents and a
//! closure mapping the output gradient to parent gradients. The heavy layers
//! (gated TCN, graph convolution, Tucker materialization, pooling) are single
//! fused nodes whose gradients come from the hand-derived routines next to
//! their forward code.

use ndarray::{concatenate, s, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

use crate::attention::{decentralization, decentralization_grad, AttentionParams};
use crate::data::Normalizer;
use crate::graph::{dynamic_preactivation, tucker_product, tucker_product_grad, DynamicFactors, StaticFactors};
use crate::layers::{
    channel_weights, channel_weights_grad, gated_tcn, gated_tcn_grad, graph_conv_with_weights,
    graph_conv_with_weights_grad, row_normalize, row_normalize_grad, GcnParams, TcnParams,
};
use crate::tensor::{mix_channels, mix_channels_weight_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(like.raw_dim()))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn d4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

fn d2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("matrix")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents: parents.into_iter().map(|v| v.0).collect(),
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let seed = self.nodes[loss.0].value.mapv(|_| 1.0);
        grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(back) = &node.backward {
                let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = back(&parents, &node.value, &grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, g) in node.parents.iter().zip(parent_grads) {
                    if let Some(g) = g {
                        match &mut grads[p] {
                            Some(acc) => *acc += &g,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|_, _, g| vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(
            value,
            vec![a],
            Some(Box::new(|p, _, g| {
                let mut d = g.clone();
                d.zip_mut_with(p[0], |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![Some(d)]
            })),
        )
    }

    /// Channel mixing along axis 1 of a `(B, C, ...)` tensor plus an optional
    /// per-output-channel bias.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let mut value = mix_channels(&d2(self.value(w)), &self.value(x).view());
        if let Some(b) = bias {
            let bv = self.value(b);
            for (c, mut lane) in value.axis_iter_mut(Axis(1)).enumerate() {
                lane += bv[[c]];
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            value,
            parents,
            Some(Box::new(|p, _, g| {
                let w = d2(p[1]);
                let dx = mix_channels(&w.t(), &g.view());
                let dw = mix_channels_weight_grad(&g.view(), &p[0].view()).into_dyn();
                let mut out = vec![Some(dx), Some(dw)];
                if p.len() == 3 {
                    out.push(Some(crate::tensor::sum_except(&g.view(), 1).into_dyn()));
                }
                out
            })),
        )
    }

    /// Keeps the trailing `len` steps of the last axis.
    pub fn crop_time(&mut self, x: Var, len: usize) -> Var {
        let v = self.value(x);
        let total = *v.shape().last().expect("non-scalar");
        let start = total - len;
        let value = v
            .slice_axis(Axis(v.ndim() - 1), ndarray::Slice::from(start..))
            .to_owned();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |p, _, g| {
                let mut d = ArrayD::zeros(p[0].raw_dim());
                let ax = Axis(d.ndim() - 1);
                d.slice_axis_mut(ax, ndarray::Slice::from(start..)).assign(g);
                vec![Some(d)]
            })),
        )
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[1]).collect();
        let value = concatenate(Axis(1), &views).expect("matching shapes");
        self.push(
            value,
            xs.to_vec(),
            Some(Box::new(move |_, _, g| {
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&c| {
                        let part = g
                            .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                            .to_owned();
                        offset += c;
                        Some(part)
                    })
                    .collect()
            })),
        )
    }

    /// ReLU of the static Tucker product, shaped `(1, F, N, N)`.
    pub fn tucker_static(&mut self, f: &StaticFactors<Var>) -> Var {
        let parents = vec![f.core, f.channel, f.target, f.source];
        let pre = {
            let factors = [d2(self.value(f.channel)), d2(self.value(f.target)), d2(self.value(f.source))];
            tucker_product(&self.value(f.core).view(), &factors)
        };
        let shape = pre.shape().to_vec();
        let value = pre
            .mapv(|v| v.max(0.0))
            .into_shape_with_order(IxDyn(&[1, shape[0], shape[1], shape[2]]))
            .expect("reshape");
        self.push(
            value,
            parents,
            Some(Box::new(move |p, out, g| {
                let mut masked = g.clone();
                masked.zip_mut_with(out, |d, &o| {
                    if o <= 0.0 {
                        *d = 0.0
                    }
                });
                let masked = masked.into_shape_with_order(IxDyn(&shape)).expect("reshape");
                let factors = [d2(p[1]), d2(p[2]), d2(p[3])];
                let (dc, du) = tucker_product_grad(&p[0].view(), &factors, &masked.view());
                let mut out = vec![Some(dc)];
                out.extend(du.into_iter().map(|u| Some(u.into_dyn())));
                out
            })),
        )
    }

    /// ReLU of the dynamic Tucker product at each slot, shaped `(G, F, N, N)`.
    pub fn tucker_dynamic(&mut self, f: &DynamicFactors<Var>, slots: &[usize]) -> Var {
        let concrete = DynamicFactors {
            core: self.value(f.core).clone(),
            channel: self.value(f.channel).clone(),
            time: self.value(f.time).clone(),
            target: self.value(f.target).clone(),
            source: self.value(f.source).clone(),
        };
        let value = dynamic_preactivation(&concrete, slots)
            .expect("slots validated by caller")
            .mapv_into(|v| v.max(0.0))
            .into_dyn();
        let slots = slots.to_vec();
        self.push(
            value,
            vec![f.core, f.channel, f.time, f.target, f.source],
            Some(Box::new(move |p, out, g| {
                let mut masked = g.clone();
                masked.zip_mut_with(out, |d, &o| {
                    if o <= 0.0 {
                        *d = 0.0
                    }
                });
                // (G, F, N, N) -> (F, G, N, N) to match the mode order.
                let masked = masked.permuted_axes(IxDyn(&[1, 0, 2, 3])).as_standard_layout().into_owned();
                let time = d2(p[2]);
                let rows = time.select(Axis(0), &slots);
                let factors = [d2(p[1]), rows.view(), d2(p[3]), d2(p[4])];
                let (dc, du) = tucker_product_grad(&p[0].view(), &factors, &masked.view());
                let mut d_time = Array2::zeros(time.raw_dim());
                for (k, &slot) in slots.iter().enumerate() {
                    let mut row = d_time.row_mut(slot);
                    row += &du[1].row(k);
                }
                let mut du = du.into_iter();
                let d_channel = du.next().unwrap();
                let _ = du.next();
                vec![
                    Some(dc),
                    Some(d_channel.into_dyn()),
                    Some(d_time.into_dyn()),
                    Some(du.next().unwrap().into_dyn()),
                    Some(du.next().unwrap().into_dyn()),
                ]
            })),
        )
    }

    /// Repeats a single-channel adjacency `(G, 1, N, N)` across `channels`.
    pub fn broadcast_channels(&mut self, adj: Var, channels: usize) -> Var {
        let v = self.value(adj);
        let views: Vec<_> = (0..channels).map(|_| v.view()).collect();
        let value = concatenate(Axis(1), &views).expect("broadcast");
        self.push(
            value,
            vec![adj],
            Some(Box::new(|_, _, g| vec![Some(g.sum_axis(Axis(1)).insert_axis(Axis(1)))])),
        )
    }

    pub fn row_normalize(&mut self, adj: Var) -> Var {
        let value = row_normalize(&d4(self.value(adj))).into_dyn();
        self.push(
            value,
            vec![adj],
            Some(Box::new(|p, _, g| vec![Some(row_normalize_grad(&d4(p[0]), &d4(g)).into_dyn())])),
        )
    }

    /// `(G, F, N, N) -> (G, F)` decentralization per channel.
    pub fn decentralization_pool(&mut self, adj: Var) -> Var {
        let a = d4(self.value(adj));
        let (g, f, _, _) = a.dim();
        let value = Array2::from_shape_fn((g, f), |(gi, fi)| {
            decentralization(&a.slice(s![gi, fi, .., ..]))
        })
        .into_dyn();
        self.push(
            value,
            vec![adj],
            Some(Box::new(|p, _, g| {
                let a = d4(p[0]);
                let g = d2(g);
                let mut d = Array4::zeros(a.raw_dim());
                for ((gi, fi), &up) in g.indexed_iter() {
                    d.slice_mut(s![gi, fi, .., ..])
                        .assign(&decentralization_grad(&a.slice(s![gi, fi, .., ..]), up));
                }
                vec![Some(d.into_dyn())]
            })),
        )
    }

    /// `(G, F, N, N) -> (G, F)` mean over the `N²` entries of each channel.
    pub fn average_pool(&mut self, adj: Var) -> Var {
        let a = d4(self.value(adj));
        let nn = (a.dim().2 * a.dim().3) as f64;
        let value = a.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v / nn).into_dyn();
        self.push(
            value,
            vec![adj],
            Some(Box::new(move |p, _, g| {
                let g = d2(g);
                let mut d = Array4::zeros(d4(p[0]).raw_dim());
                for ((gi, fi), &up) in g.indexed_iter() {
                    d.slice_mut(s![gi, fi, .., ..]).fill(up / nn);
                }
                vec![Some(d.into_dyn())]
            })),
        )
    }

    /// `(G, F)` pooled statistics -> `(G, F)` softmax channel weights.
    pub fn channel_attention(&mut self, pooled: Var, params: &AttentionParams<Var>) -> Var {
        let concrete = GcnParams {
            theta: vec![],
            attention: vec![AttentionParams {
                w1: self.value(params.w1).clone(),
                w2: self.value(params.w2).clone(),
            }],
        };
        let value = channel_weights(&d2(self.value(pooled)), &concrete)
            .pop()
            .expect("one step")
            .into_dyn();
        self.push(
            value,
            vec![pooled, params.w1, params.w2],
            Some(Box::new(|p, _, g| {
                let concrete = GcnParams {
                    theta: vec![],
                    attention: vec![AttentionParams { w1: p[1].clone(), w2: p[2].clone() }],
                };
                let d_alpha = g.clone().into_dimensionality::<Ix2>().expect("matrix");
                let (dy, mut dw) = channel_weights_grad(&d2(p[0]), &concrete, &[d_alpha]);
                let (dw1, dw2) = dw.pop().expect("one step");
                vec![Some(dy.into_dyn()), Some(dw1.into_dyn()), Some(dw2.into_dyn())]
            })),
        )
    }

    /// Fused graph convolution. Parents: `h, adj, θ₀..θ_K[, α₀..α_K]`.
    pub fn graph_conv(
        &mut self,
        h: Var,
        adj: Var,
        sample_map: &[usize],
        theta: &[Var],
        alphas: Option<&[Var]>,
    ) -> Var {
        let k1 = theta.len();
        let value = {
            let th: Vec<_> = theta.iter().map(|&t| d2(self.value(t))).collect();
            let al: Option<Vec<_>> = alphas.map(|a| a.iter().map(|&v| d2(self.value(v))).collect());
            graph_conv_with_weights(
                &d4(self.value(h)),
                &d4(self.value(adj)),
                sample_map,
                &th,
                al.as_deref(),
            )
            .expect("shapes validated at model build")
            .into_dyn()
        };
        let mut parents = vec![h, adj];
        parents.extend_from_slice(theta);
        if let Some(a) = alphas {
            parents.extend_from_slice(a);
        }
        let map = sample_map.to_vec();
        let with_alpha = alphas.is_some();
        self.push(
            value,
            parents,
            Some(Box::new(move |p, _, g| {
                let th: Vec<_> = p[2..2 + k1].iter().map(|t| d2(t)).collect();
                let al: Option<Vec<_>> = with_alpha.then(|| p[2 + k1..].iter().map(|t| d2(t)).collect());
                let grads = graph_conv_with_weights_grad(&d4(p[0]), &d4(p[1]), &map, &th, al.as_deref(), &d4(g));
                let mut out = vec![Some(grads.h.into_dyn()), Some(grads.adj.into_dyn())];
                out.extend(grads.theta.into_iter().map(|t| Some(t.into_dyn())));
                if let Some(a) = grads.alphas {
                    out.extend(a.into_iter().map(|t| Some(t.into_dyn())));
                }
                out
            })),
        )
    }

    pub fn gated_tcn(&mut self, x: Var, params: &TcnParams<Var>) -> Var {
        let dilation = params.dilation;
        let concrete = TcnParams {
            z1: self.value(params.z1).clone(),
            z2: self.value(params.z2).clone(),
            dilation,
        };
        let value = gated_tcn(&d4(self.value(x)), &concrete)
            .expect("temporal length validated at model build")
            .into_dyn();
        self.push(
            value,
            vec![x, params.z1, params.z2],
            Some(Box::new(move |p, _, g| {
                let concrete = TcnParams {
                    z1: p[1].clone(),
                    z2: p[2].clone(),
                    dilation,
                };
                let (dx, dz1, dz2) = gated_tcn_grad(&d4(p[0]), &concrete, &d4(g)).expect("forward succeeded");
                vec![Some(dx.into_dyn()), Some(dz1.into_dyn()), Some(dz2.into_dyn())]
            })),
        )
    }

    /// `(B, Q·d, N, 1) -> (B, Q, N, d)` where output channel `q·d + e` is
    /// horizon `q`, feature `e`.
    pub fn head_to_prediction(&mut self, x: Var, q: usize, d: usize) -> Var {
        let v = d4(self.value(x));
        let (b, _, n, _) = v.dim();
        let value = Array4::from_shape_fn((b, q, n, d), |(bi, qi, ni, e)| v[[bi, qi * d + e, ni, 0]]).into_dyn();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |p, _, g| {
                let g = d4(g);
                let mut dx = Array4::zeros(d4(p[0]).raw_dim());
                for ((bi, qi, ni, e), &v) in g.indexed_iter() {
                    dx[[bi, qi * d + e, ni, 0]] = v;
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Mean absolute error after mapping normalized predictions back to raw
    /// units: `mean |pred · std + mean − target|`.
    pub fn l1_raw(&mut self, pred: Var, target_raw: &Tensor, normalizer: &Normalizer) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target_raw.shape(), "prediction/target shape");
        let d = normalizer.num_features();
        let std = normalizer.std.clone();
        let mean = normalizer.mean.clone();
        let count = p.len() as f64;
        let mut total = 0.0;
        for (k, (&x, &y)) in p.iter().zip(target_raw.iter()).enumerate() {
            let f = k % d;
            total += (x * std[f] + mean[f] - y).abs();
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / count);
        let target = target_raw.clone();
        self.push(
            value,
            vec![pred],
            Some(Box::new(move |p, _, g| {
                let up = g.first().copied().unwrap_or(0.0);
                let mut d = ArrayD::zeros(p[0].raw_dim());
                for (k, ((dv, &x), &y)) in d.iter_mut().zip(p[0].iter()).zip(target.iter()).enumerate() {
                    let f = k % std.len();
                    let e = x * std[f] + mean[f] - y;
                    *dv = up * e.signum() * std[f] / count;
                    if e == 0.0 {
                        *dv = 0.0;
                    }
                }
                vec![Some(d)]
            })),
        )
    }

    /// Sum of every entry (tests and diagnostics).
    pub fn sum(&mut self, x: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        self.push(
            value,
            vec![x],
            Some(Box::new(|p, _, g| {
                let up = g.first().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(p[0].raw_dim(), up))]
            })),
        )
    }
}

/// Zero-pads `(B, P, N, d)` inputs on the left of the time axis to `length`
/// and transposes them to `(B, d, N, length)`.
pub fn pad_and_transpose_inputs(x: &ndarray::ArrayView4<'_, f64>, length: usize) -> Array4<f64> {
    let (b, p, n, d) = x.dim();
    let offset = length.saturating_sub(p);
    let keep = p.min(length);
    let mut out = Array4::zeros((b, d, n, length));
    for bi in 0..b {
        for t in 0..keep {
            let src_t = p - keep + t;
            for ni in 0..n {
                for e in 0..d {
                    out[[bi, e, ni, offset + t]] = x[[bi, src_t, ni, e]];
                }
            }
        }
    }
    out
}
