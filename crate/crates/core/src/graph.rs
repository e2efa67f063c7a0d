//! Heterogeneous adjacency generation.
//!
//! The static adjacency `(F, N, N)` and the per-period-slot dynamic adjacency
//! `(F, N_t, N, N)` are never stored as free parameters. Both are Tucker
//! products of a small core tensor with one embedding matrix per mode,
//! followed by a ReLU. Entry `[f, i, j]` is the weight of the edge from
//! source `j` to target `i` on hidden channel `f`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayViewD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HagcnError, Result};
use crate::param_tree;
use crate::tensor::{frobenius, mode_product, unfold, Tensor};

/// One row of a distance file: the road distance from `from` to `to` in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceEdge {
    pub from: String,
    pub to: String,
    pub distance: f64,
}

pub fn load_distances(path: impl AsRef<Path>) -> Result<Vec<DistanceEdge>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| HagcnError::io(path, e))?;
    read_distances(file)
}

pub fn read_distances<R: std::io::Read>(reader: R) -> Result<Vec<DistanceEdge>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["from", "to", "distance"] {
        return Err(HagcnError::Format(format!(
            "distance header must be `from,to,distance`, found `{}`",
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        if rec.len() != 3 {
            return Err(HagcnError::Parse {
                row,
                message: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let distance: f64 = rec[2].parse().map_err(|_| HagcnError::Parse {
            row,
            message: format!("distance `{}` is not numeric", &rec[2]),
        })?;
        if !(distance >= 0.0) || !distance.is_finite() {
            return Err(HagcnError::Parse {
                row,
                message: format!("distance {distance} must be finite and non-negative"),
            });
        }
        out.push(DistanceEdge {
            from: rec[0].to_string(),
            to: rec[1].to_string(),
            distance,
        });
    }
    Ok(out)
}

pub fn write_distances(edges: &[DistanceEdge], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["from", "to", "distance"])?;
    for e in edges {
        w.write_record([e.from.as_str(), e.to.as_str(), &e.distance.to_string()])?;
    }
    w.flush().map_err(|e| HagcnError::io(path, e))?;
    Ok(())
}

/// Kernel bandwidth of the distance seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Squared population standard deviation of the listed distances.
    Auto,
    Fixed(f64),
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Auto => f.write_str("auto"),
            Bandwidth::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl std::str::FromStr for Bandwidth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Bandwidth::Auto);
        }
        s.parse::<f64>()
            .map(Bandwidth::Fixed)
            .map_err(|_| format!("`{s}` is neither `auto` nor a number"))
    }
}

/// Initial edge weights from a Gaussian distance kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedAdjacency {
    pub weights: Array2<f64>,
    pub neighbor_mask: Array2<bool>,
    pub delta: f64,
}

impl SeedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.weights.nrows()
    }
}

/// `weight[i, j] = exp(-d²/δ)` for every listed edge `j → i`, zero elsewhere.
pub fn build_seed_adjacency(
    distances: &[DistanceEdge],
    node_ids: &[String],
    delta: Bandwidth,
) -> Result<SeedAdjacency> {
    let index: HashMap<&str, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k))
        .collect();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| HagcnError::Data(format!("distance file references unknown node `{id}`")))
    };
    let delta = match delta {
        Bandwidth::Fixed(d) => d,
        Bandwidth::Auto => {
            let n = distances.len() as f64;
            let mean = distances.iter().map(|e| e.distance).sum::<f64>() / n;
            distances.iter().map(|e| (e.distance - mean).powi(2)).sum::<f64>() / n
        }
    };
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(HagcnError::Argument(format!(
            "kernel bandwidth must be positive (got {delta})"
        )));
    }
    let n = node_ids.len();
    let mut weights = Array2::zeros((n, n));
    let mut neighbor_mask = Array2::from_elem((n, n), false);
    for e in distances {
        if !(e.distance >= 0.0) {
            return Err(HagcnError::Data(format!(
                "negative distance {} from `{}` to `{}`",
                e.distance, e.from, e.to
            )));
        }
        let (source, target) = (lookup(&e.from)?, lookup(&e.to)?);
        weights[[target, source]] = (-(e.distance * e.distance) / delta).exp();
        neighbor_mask[[target, source]] = true;
    }
    Ok(SeedAdjacency {
        weights,
        neighbor_mask,
        delta,
    })
}

/// Embeddings of the static adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFactors<T = Tensor> {
    /// `(m, m, m)`
    pub core: T,
    /// `(F, m)`
    pub channel: T,
    /// `(N, m)`
    pub target: T,
    /// `(N, m)`
    pub source: T,
}
param_tree!(StaticFactors { leaves: [core, channel, target, source] });

/// Embeddings of the dynamic adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicFactors<T = Tensor> {
    /// `(m, m, m, m)`
    pub core: T,
    /// `(F, m)`
    pub channel: T,
    /// `(N_t, m)`
    pub time: T,
    /// `(N, m)`
    pub target: T,
    /// `(N, m)`
    pub source: T,
}
param_tree!(DynamicFactors { leaves: [core, channel, time, target, source] });

impl StaticFactors {
    pub fn num_channels(&self) -> usize {
        self.channel.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.core.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.core.len() + self.channel.len() + self.target.len() + self.source.len()
    }
}

impl DynamicFactors {
    pub fn num_channels(&self) -> usize {
        self.channel.shape()[0]
    }

    pub fn num_slots(&self) -> usize {
        self.time.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.core.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.core.len() + self.channel.len() + self.time.len() + self.target.len() + self.source.len()
    }
}

/// `m³ + (F + 2N)m`
pub fn static_param_count(f: usize, n: usize, m: usize) -> usize {
    m.pow(3) + (f + 2 * n) * m
}

/// `m⁴ + (F + N_t + 2N)m`
pub fn dynamic_param_count(f: usize, n: usize, n_t: usize, m: usize) -> usize {
    m.pow(4) + (f + n_t + 2 * n) * m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Static,
    Dynamic { slot: usize },
}

/// Materialized non-negative adjacency, `(F, N, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyTensor {
    pub weights: Array3<f64>,
    pub provenance: Provenance,
}

impl AdjacencyTensor {
    pub fn num_channels(&self) -> usize {
        self.weights.dim().0
    }

    pub fn num_nodes(&self) -> usize {
        self.weights.dim().1
    }
}

/// Full Tucker product `core ×₁ U₁ ×₂ U₂ … ×ₖ Uₖ`.
pub fn tucker_product(core: &ArrayViewD<'_, f64>, factors: &[ArrayView2<'_, f64>]) -> Tensor {
    assert_eq!(core.ndim(), factors.len(), "one factor per core mode");
    let mut out = core.to_owned();
    for (n, u) in factors.iter().enumerate() {
        out = mode_product(&out.view(), u, n);
    }
    out
}

/// Reverse-mode gradient of [`tucker_product`]: `(d core, d factors)`.
pub fn tucker_product_grad(
    core: &ArrayViewD<'_, f64>,
    factors: &[ArrayView2<'_, f64>],
    grad: &ArrayViewD<'_, f64>,
) -> (Tensor, Vec<Array2<f64>>) {
    let k = factors.len();
    let d_core = {
        let mut g = grad.to_owned();
        for (n, u) in factors.iter().enumerate() {
            g = mode_product(&g.view(), &u.t(), n);
        }
        g
    };
    let d_factors = (0..k)
        .map(|n| {
            let mut partial = core.to_owned();
            for (kk, u) in factors.iter().enumerate() {
                if kk != n {
                    partial = mode_product(&partial.view(), u, kk);
                }
            }
            unfold(grad, n).dot(&unfold(&partial.view(), n).t())
        })
        .collect();
    (d_core, d_factors)
}

fn as2<'a>(t: &'a Tensor, what: &str) -> ArrayView2<'a, f64> {
    t.view()
        .into_dimensionality()
        .unwrap_or_else(|_| panic!("{what} must be a matrix, got shape {:?}", t.shape()))
}

/// Pre-activation static tensor `(F, N, N)`.
pub fn static_preactivation(factors: &StaticFactors) -> Array3<f64> {
    tucker_product(
        &factors.core.view(),
        &[
            as2(&factors.channel, "channel"),
            as2(&factors.target, "target"),
            as2(&factors.source, "source"),
        ],
    )
    .into_dimensionality()
    .expect("three-way core")
}

pub fn materialize_static(factors: &StaticFactors) -> AdjacencyTensor {
    AdjacencyTensor {
        weights: static_preactivation(factors).mapv_into(|v| v.max(0.0)),
        provenance: Provenance::Static,
    }
}

/// Pre-activation dynamic tensors for each listed slot, `(G, F, N, N)`.
pub fn dynamic_preactivation(factors: &DynamicFactors, slots: &[usize]) -> Result<Array4<f64>> {
    let n_t = factors.num_slots();
    if let Some(&bad) = slots.iter().find(|&&s| s >= n_t) {
        return Err(HagcnError::Argument(format!(
            "period slot {bad} out of range 0..{n_t}"
        )));
    }
    let time = as2(&factors.time, "time");
    let rows = time.select(Axis(0), slots);
    let pre = tucker_product(
        &factors.core.view(),
        &[
            as2(&factors.channel, "channel"),
            rows.view(),
            as2(&factors.target, "target"),
            as2(&factors.source, "source"),
        ],
    );
    // (F, G, N, N) -> (G, F, N, N)
    let pre: Array4<f64> = pre.into_dimensionality().expect("four-way core");
    Ok(pre.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned())
}

pub fn materialize_dynamic_slot(factors: &DynamicFactors, slot: usize) -> Result<AdjacencyTensor> {
    let pre = dynamic_preactivation(factors, &[slot])?;
    Ok(AdjacencyTensor {
        weights: pre.index_axis_move(Axis(0), 0).mapv_into(|v| v.max(0.0)),
        provenance: Provenance::Dynamic { slot },
    })
}

/// Time-of-day slot `h(t) = t mod N_t`.
pub fn period_slot(t: i64, n_t: usize) -> usize {
    t.rem_euclid(n_t as i64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factors {
    Static(StaticFactors),
    Dynamic(DynamicFactors),
}

/// Result of a Tucker fit: core plus one factor matrix per mode.
#[derive(Debug, Clone)]
pub struct TuckerFit {
    pub core: Tensor,
    pub factors: Vec<Array2<f64>>,
    pub sweeps: usize,
}

impl TuckerFit {
    pub fn reconstruct(&self) -> Tensor {
        let views: Vec<_> = self.factors.iter().map(|u| u.view()).collect();
        tucker_product(&self.core.view(), &views)
    }
}

/// Leading `r` eigenvectors of `M Mᵀ` for a matrix `M` (`rows × cols`),
/// ordered by descending eigenvalue, with a deterministic sign convention.
fn leading_left_singular_vectors(m: &Array2<f64>, r: usize) -> Array2<f64> {
    let rows = m.nrows();
    let gram = m.dot(&m.t());
    let dm = DMatrix::from_fn(rows, rows, |i, j| gram[[i, j]]);
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = Array2::zeros((rows, r));
    for (col, &k) in order.iter().take(r).enumerate() {
        let v = eig.eigenvectors.column(k);
        // Sign: make the largest-magnitude entry positive.
        let pivot = (0..rows)
            .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            out[[i, col]] = sign * v[i];
        }
    }
    out
}

fn project_core(t: &ArrayViewD<'_, f64>, factors: &[Array2<f64>]) -> Tensor {
    let mut core = t.to_owned();
    for (n, u) in factors.iter().enumerate() {
        core = mode_product(&core.view(), &u.t(), n);
    }
    core
}

/// Truncated higher-order SVD followed by higher-order orthogonal iteration.
///
/// `ranks[n]` must not exceed `t.shape()[n]`. Iteration stops when the core
/// norm changes by less than `tol` relative, or after `max_sweeps`.
pub fn tucker_hooi(t: &ArrayViewD<'_, f64>, ranks: &[usize], max_sweeps: usize, tol: f64) -> TuckerFit {
    assert_eq!(ranks.len(), t.ndim());
    for (n, &r) in ranks.iter().enumerate() {
        assert!(r >= 1 && r <= t.shape()[n], "rank {r} invalid for mode {n}");
    }
    let mut factors: Vec<Array2<f64>> = (0..t.ndim())
        .map(|n| leading_left_singular_vectors(&unfold(t, n), ranks[n]))
        .collect();
    let mut core = project_core(t, &factors);
    let mut prev = frobenius(&core.view());
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        for n in 0..t.ndim() {
            let mut y = t.to_owned();
            for (k, u) in factors.iter().enumerate() {
                if k != n {
                    y = mode_product(&y.view(), &u.t(), k);
                }
            }
            factors[n] = leading_left_singular_vectors(&unfold(&y.view(), n), ranks[n]);
        }
        core = project_core(t, &factors);
        let norm = frobenius(&core.view());
        let change = (norm - prev).abs() / prev.max(f64::MIN_POSITIVE);
        prev = norm;
        if change < tol {
            break;
        }
    }
    TuckerFit {
        core,
        factors,
        sweeps,
    }
}

/// Extends `u` (`dim × r`, orthonormal columns) to `m` columns. Extra columns
/// are orthonormal completions while the space allows, then small random
/// vectors. The core entries attached to the extra columns start at zero.
fn extend_columns(u: &Array2<f64>, m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (dim, r) = u.dim();
    let mut out = Array2::zeros((dim, m));
    out.slice_mut(s![.., ..r]).assign(u);
    for col in r..m {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if col < dim {
            for prev in 0..col {
                let dot: f64 = (0..dim).map(|i| v[i] * out[[i, prev]]).sum();
                for (i, vi) in v.iter_mut().enumerate() {
                    *vi -= dot * out[[i, prev]];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (i, vi) in v.iter().enumerate() {
                out[[i, col]] = vi / norm;
            }
        } else {
            for (i, vi) in v.iter().enumerate() {
                out[[i, col]] = 1e-2 * vi / (dim as f64).sqrt();
            }
        }
    }
    out
}

fn pad_core(core: &Tensor, m: usize) -> Tensor {
    let mut out = ArrayD::zeros(IxDyn(&vec![m; core.ndim()]));
    let slices: Vec<ndarray::SliceInfoElem> = core
        .shape()
        .iter()
        .map(|&d| ndarray::SliceInfoElem::from(0..d))
        .collect();
    out.slice_mut(slices.as_slice()).assign(core);
    out
}

/// Maximum refinement sweeps used when fitting factors to a seed.
pub const MAX_ALS_SWEEPS: usize = 200;

/// Fits Tucker embeddings whose (pre-ReLU) product reproduces the seed
/// broadcast over every channel (and every period slot for the dynamic kind).
///
/// The broadcast tensor is rank one along the channel and time modes, so the
/// fit runs on the equivalent reduced tensor `sqrt(F·N_t)·W` of shape
/// `(1, [1,] N, N)` and the channel/time factors are lifted back to the
/// constant direction. Each factor matrix is then rescaled so its entries are
/// of order one, with the core absorbing the inverse scale.
pub fn init_factors_from_seed(
    seed: &SeedAdjacency,
    channels: usize,
    m: usize,
    n_t: usize,
    kind: FactorKind,
    rng_seed: u64,
) -> Result<Factors> {
    let n = seed.num_nodes();
    if m == 0 || m > n {
        return Err(HagcnError::Argument(format!(
            "embedding size m={m} must be in 1..={n}"
        )));
    }
    if channels == 0 || n_t == 0 {
        return Err(HagcnError::Argument("F and N_t must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let leading = match kind {
        FactorKind::Static => vec![channels],
        FactorKind::Dynamic => vec![channels, n_t],
    };
    let scale = (leading.iter().product::<usize>() as f64).sqrt();
    let mut shape: Vec<usize> = vec![1; leading.len()];
    shape.extend([n, n]);
    let reduced = seed
        .weights
        .mapv(|w| w * scale)
        .into_shape_with_order(IxDyn(&shape))
        .expect("reshape seed");
    let mut ranks = vec![1; leading.len()];
    ranks.extend([m, m]);

    let (core, factors) = if seed.weights.iter().all(|&w| w == 0.0) {
        (
            ArrayD::zeros(IxDyn(&ranks)),
            ranks
                .iter()
                .zip(shape.iter())
                .map(|(&r, &d)| {
                    let mut u = Array2::zeros((d, r));
                    u[[0, 0]] = 1.0;
                    for k in 1..r.min(d) {
                        u[[k, k]] = 1.0;
                    }
                    u
                })
                .collect::<Vec<_>>(),
        )
    } else {
        let fit = tucker_hooi(&reduced.view(), &ranks, MAX_ALS_SWEEPS, 1e-12);
        (fit.core, fit.factors)
    };

    // Lift the constant modes back to their full dimension.
    let mut full: Vec<Array2<f64>> = Vec::with_capacity(factors.len());
    for (mode, u) in factors.into_iter().enumerate() {
        if mode < leading.len() {
            let dim = leading[mode];
            let constant = Array2::from_elem((dim, 1), u[[0, 0]] / (dim as f64).sqrt());
            full.push(extend_columns(&constant, m, &mut rng));
        } else {
            full.push(extend_columns(&u, m, &mut rng));
        }
    }
    let mut core = pad_core(&core, m);

    // Balance magnitudes: entries of each factor ~ O(1).
    for u in full.iter_mut() {
        let c = (u.nrows() as f64).sqrt();
        u.mapv_inplace(|v| v * c);
        core.mapv_inplace(|v| v / c);
    }

    let dyn2 = |u: Array2<f64>| u.into_dyn();
    let mut it = full.into_iter();
    Ok(match kind {
        FactorKind::Static => Factors::Static(StaticFactors {
            core,
            channel: dyn2(it.next().unwrap()),
            target: dyn2(it.next().unwrap()),
            source: dyn2(it.next().unwrap()),
        }),
        FactorKind::Dynamic => Factors::Dynamic(DynamicFactors {
            core,
            channel: dyn2(it.next().unwrap()),
            time: dyn2(it.next().unwrap()),
            target: dyn2(it.next().unwrap()),
            source: dyn2(it.next().unwrap()),
        }),
    })
}

/// Relative Frobenius error of each pre-activation channel slice against the
/// seed, pooled over channels (and slots).
pub fn seed_reconstruction_error(factors: &Factors, seed: &SeedAdjacency) -> f64 {
    let w = seed.weights.view();
    let (mut err, mut norm) = (0.0, 0.0);
    let mut accumulate = |slice: ArrayView2<'_, f64>| {
        for (a, b) in slice.iter().zip(w.iter()) {
            err += (a - b).powi(2);
            norm += b * b;
        }
    };
    match factors {
        Factors::Static(f) => {
            let pre = static_preactivation(f);
            for slice in pre.outer_iter() {
                accumulate(slice);
            }
        }
        Factors::Dynamic(f) => {
            let slots: Vec<usize> = (0..f.num_slots()).collect();
            let pre = dynamic_preactivation(f, &slots).expect("slots in range");
            for g in pre.outer_iter() {
                for slice in g.outer_iter() {
                    accumulate(slice);
                }
            }
        }
    }
    if norm == 0.0 {
        err.sqrt()
    } else {
        (err / norm).sqrt()
    }
}

/// Writes one CSV matrix per channel: rows are targets, columns sources.
pub fn write_adjacency_csvs(
    adj: &AdjacencyTensor,
    node_ids: &[String],
    dir: impl AsRef<Path>,
    file_stem: &str,
) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    for (f, slice) in adj.weights.outer_iter().enumerate() {
        let path = dir.join(format!("{file_stem}_f{f}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["target".to_string()];
        header.extend(node_ids.iter().cloned());
        w.write_record(&header)?;
        for (i, row) in slice.outer_iter().enumerate() {
            let mut rec = vec![node_ids[i].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| HagcnError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
