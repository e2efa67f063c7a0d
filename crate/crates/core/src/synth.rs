//! Synthetic traffic with planted heterogeneous spatial structure.
//!
//! Several latent processes share the road network but propagate along
//! different graphs; sensors observe their sum plus a daily sinusoid.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{write_series, TrafficSeries};
use crate::error::{HagcnError, Result};
use crate::graph::{write_distances, DistanceEdge};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub nodes: usize,
    pub latent: usize,
    pub total_steps: usize,
    pub num_slots: usize,
    /// Persistence of the latent states, strictly inside `(0, 1)`.
    pub decay: f64,
    pub noise_std: f64,
    pub base_level: f64,
    pub amplitude: f64,
    /// Planted weights above this yield an edge in the distance file.
    pub edge_threshold: f64,
    pub interval_seconds: u32,
    /// Row-stochastic `(N, N)` matrices, one per latent process. Drawn from
    /// `seed` when absent.
    pub planted: Option<Vec<Array2<f64>>>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            nodes: 8,
            latent: 2,
            total_steps: 4032,
            num_slots: 288,
            decay: 0.95,
            noise_std: 1.0,
            base_level: 60.0,
            amplitude: 10.0,
            edge_threshold: 0.05,
            interval_seconds: 300,
            planted: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let arg = |m: String| Err(HagcnError::Argument(m));
        if self.nodes < 3 {
            return arg(format!("need at least 3 nodes (got {})", self.nodes));
        }
        let shifts: Vec<usize> = (0..self.latent).map(|c| dominant_shift(c, self.nodes)).collect();
        let distinct = shifts.iter().enumerate().all(|(k, s)| *s != 0 && !shifts[..k].contains(s));
        if self.latent == 0 || !distinct {
            return arg(format!(
                "{} latent processes need distinct dominant edges on {} nodes",
                self.latent, self.nodes
            ));
        }
        if self.total_steps == 0 || self.num_slots == 0 {
            return arg("total_steps and num_slots must be positive".into());
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return arg(format!("decay must lie strictly inside (0, 1) (got {})", self.decay));
        }
        if !(self.noise_std >= 0.0) || !(self.base_level > 0.0) || !(self.amplitude >= 0.0) {
            return arg("need noise_std >= 0, base_level > 0 and amplitude >= 0".into());
        }
        if let Some(planted) = &self.planted {
            if planted.len() != self.latent {
                return arg(format!("{} planted graphs for {} processes", planted.len(), self.latent));
            }
            for (c, a) in planted.iter().enumerate() {
                if a.dim() != (self.nodes, self.nodes) {
                    return arg(format!("planted graph {c} has shape {:?}", a.shape()));
                }
                if a.iter().any(|&w| !(w >= 0.0)) {
                    return arg(format!("planted graph {c} has negative weights"));
                }
                for (i, row) in a.rows().into_iter().enumerate() {
                    if (row.sum() - 1.0).abs() > 1e-9 {
                        return arg(format!("row {i} of planted graph {c} sums to {}", row.sum()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Generated series plus ground truth.
#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub series: TrafficSeries,
    pub planted: Vec<Array2<f64>>,
    pub edges: Vec<DistanceEdge>,
    /// Latent states `(C, T, N)`.
    pub latent: Array3<f64>,
}

/// Cycle offset of the dominant in-neighbour for process `c`: `+1, -1, +2,
/// -2, ...`, so consecutive processes travel the shared cycle in opposite
/// directions.
pub fn dominant_shift(c: usize, nodes: usize) -> usize {
    let step = c / 2 + 1;
    if c % 2 == 0 {
        step % nodes
    } else {
        (nodes - step % nodes) % nodes
    }
}

/// Random sparse row-stochastic graphs. Every node gets one dominant
/// in-neighbour along a shared random cycle, offset by [`dominant_shift`],
/// so dominant edges never coincide across processes.
pub fn planted_graphs(nodes: usize, latent: usize, rng: &mut impl Rng) -> Vec<Array2<f64>> {
    let mut order: Vec<usize> = (0..nodes).collect();
    order.shuffle(rng);
    (0..latent)
        .map(|c| {
            let mut a = Array2::zeros((nodes, nodes));
            for k in 0..nodes {
                let i = order[k];
                let dominant = order[(k + dominant_shift(c, nodes)) % nodes];
                let minor = loop {
                    let j = rng.random_range(0..nodes);
                    if j != i && j != dominant {
                        break j;
                    }
                };
                let w_dom = rng.random_range(0.7..0.85);
                let w_minor = rng.random_range(0.0..0.1);
                a[[i, dominant]] += w_dom;
                a[[i, minor]] += w_minor;
                a[[i, i]] += 1.0 - w_dom - w_minor;
            }
            a
        })
        .collect()
}

/// Distance file for the planted graphs: an edge `j -> i` wherever some
/// process has `A[i, j] > threshold`, with distance `-ln(max_c A_c[i, j])`.
pub fn planted_distances(planted: &[Array2<f64>], node_ids: &[String], threshold: f64) -> Vec<DistanceEdge> {
    let n = node_ids.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = planted.iter().map(|a| a[[i, j]]).fold(0.0, f64::max);
            if w > threshold {
                edges.push(DistanceEdge {
                    from: node_ids[j].clone(),
                    to: node_ids[i].clone(),
                    distance: -w.ln(),
                });
            }
        }
    }
    edges
}

pub fn generate(spec: &SynthSpec) -> Result<SynthBundle> {
    spec.validate()?;
    let stationary = Array1::from_elem(spec.nodes, spec.base_level / spec.latent as f64);
    simulate(spec, &vec![stationary; spec.latent])
}

/// Runs the latent recursion from explicit initial states.
pub fn simulate(spec: &SynthSpec, initial: &[Array1<f64>]) -> Result<SynthBundle> {
    spec.validate()?;
    let (n, c_total, t_total) = (spec.nodes, spec.latent, spec.total_steps);
    if initial.len() != c_total || initial.iter().any(|s| s.len() != n) {
        return Err(HagcnError::Argument(format!("need {c_total} initial states of length {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planted = match &spec.planted {
        Some(p) => p.clone(),
        None => planted_graphs(n, c_total, &mut rng),
    };
    let normal = Normal::new(0.0, spec.noise_std).expect("noise_std validated");
    let drift = (1.0 - spec.decay) * spec.base_level / c_total as f64;
    let mut latent = Array3::zeros((c_total, t_total, n));
    for c in 0..c_total {
        let mut state = initial[c].clone();
        for t in 0..t_total {
            latent.slice_mut(ndarray::s![c, t, ..]).assign(&state);
            let mut next = planted[c].dot(&state) * spec.decay + drift;
            if spec.noise_std > 0.0 {
                next.mapv_inplace(|v| v + normal.sample(&mut rng));
            }
            state = next;
        }
    }
    let mut values = Array3::zeros((t_total, n, 1));
    for t in 0..t_total {
        let phase = 2.0 * std::f64::consts::PI * (t % spec.num_slots) as f64 / spec.num_slots as f64;
        let wave = spec.amplitude * phase.sin();
        for i in 0..n {
            values[[t, i, 0]] = (0..c_total).map(|c| latent[[c, t, i]]).sum::<f64>() + wave;
        }
    }
    let node_ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let edges = planted_distances(&planted, &node_ids, spec.edge_threshold);
    let series = TrafficSeries::new(values, (0..t_total as i64).collect(), spec.interval_seconds, node_ids)?;
    Ok(SynthBundle {
        series,
        planted,
        edges,
        latent,
    })
}

fn write_matrix(a: &Array2<f64>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in a.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| HagcnError::io(path, e))
}

/// Writes `series.csv`, `distances.csv` and `planted_adj_c{c}.csv` into `dir`.
pub fn write_bundle(bundle: &SynthBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| HagcnError::io(dir, e))?;
    write_series(&bundle.series, 0, dir.join("series.csv"))?;
    write_distances(&bundle.edges, dir.join("distances.csv"))?;
    for (c, a) in bundle.planted.iter().enumerate() {
        write_matrix(a, &dir.join(format!("planted_adj_c{c}.csv")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> SynthSpec {
        SynthSpec {
            total_steps: 600,
            num_slots: 48,
            noise_std: 0.0,
            amplitude: 0.0,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn planted_graphs_are_row_stochastic_with_disjoint_dominant_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = planted_graphs(8, 2, &mut rng);
        for a in &g {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        for i in 0..8 {
            let argmax = |a: &Array2<f64>| {
                (0..8).filter(|&j| j != i).max_by(|&x, &y| a[[i, x]].total_cmp(&a[[i, y]])).unwrap()
            };
            assert_ne!(argmax(&g[0]), argmax(&g[1]));
        }
    }

    #[test]
    fn fixed_point_without_noise_or_wave() {
        let b = generate(&quiet(1)).unwrap();
        assert!(b.series.values.iter().all(|&v| (v - 60.0).abs() < 1e-9));
    }

    #[test]
    fn observed_minus_level_is_the_sinusoid() {
        let spec = SynthSpec { amplitude: 5.0, ..quiet(2) };
        let b = generate(&spec).unwrap();
        for t in 0..spec.total_steps {
            let want = 5.0 * (2.0 * std::f64::consts::PI * (t % 48) as f64 / 48.0).sin();
            for i in 0..spec.nodes {
                assert!((b.series.values[[t, i, 0]] - 60.0 - want).abs() < 1e-9);
            }
        }
        assert!((b.series.values[[0, 0, 0]] - b.series.values[[48, 0, 0]]).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_series() {
        let spec = SynthSpec { total_steps: 300, ..SynthSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.series, b.series);
        let c = generate(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.series.values, c.series.values);
    }

    #[test]
    fn noiseless_states_stay_in_the_hull() {
        let spec = quiet(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init: Vec<Array1<f64>> = (0..2)
            .map(|_| Array1::from_shape_fn(8, |_| rng.random_range(-50.0..150.0)))
            .collect();
        let lo = init.iter().flat_map(|s| s.iter()).fold(30.0f64, |a, &b| a.min(b));
        let hi = init.iter().flat_map(|s| s.iter()).fold(30.0f64, |a, &b| a.max(b));
        let b = simulate(&spec, &init).unwrap();
        assert!(b.latent.iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
    }

    #[test]
    fn autocorrelation_peaks_at_the_period() {
        let spec = SynthSpec { total_steps: 960, num_slots: 48, noise_std: 1.0, amplitude: 8.0, seed: 5, ..SynthSpec::default() };
        let b = generate(&spec).unwrap();
        let x: Vec<f64> = (0..spec.total_steps).map(|t| b.series.values[[t, 0, 0]]).collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let acf = |lag: usize| -> f64 {
            (0..x.len() - lag).map(|t| (x[t] - mean) * (x[t + lag] - mean)).sum::<f64>() / (x.len() - lag) as f64
        };
        let best = (24..=72).max_by(|&a, &b| acf(a).total_cmp(&acf(b))).unwrap();
        assert!((best as i64 - 48).abs() <= 2, "peak at lag {best}");
    }

    #[test]
    fn distance_file_covers_dominant_edges() {
        let b = generate(&SynthSpec { total_steps: 10, ..SynthSpec::default() }).unwrap();
        for (c, a) in b.planted.iter().enumerate() {
            for i in 0..8 {
                for j in 0..8 {
                    if i != j && a[[i, j]] > 0.5 {
                        let hit = b.edges.iter().any(|e| e.from == format!("s{j}") && e.to == format!("s{i}"));
                        assert!(hit, "missing dominant edge of process {c}");
                    }
                }
            }
        }
        assert!(b.edges.iter().all(|e| e.distance > 0.0));
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SynthSpec { decay: 1.0, ..SynthSpec::default() },
            SynthSpec { decay: 0.0, ..SynthSpec::default() },
            SynthSpec { noise_std: -1.0, ..SynthSpec::default() },
            SynthSpec { latent: 8, ..SynthSpec::default() },
            SynthSpec { planted: Some(vec![Array2::zeros((8, 8)); 2]), ..SynthSpec::default() },
        ] {
            assert!(matches!(generate(&spec), Err(HagcnError::Argument(_))), "{spec:?}");
        }
    }
}
