//! Load → interpolate → window → split, driven by a [`RunConfig`].

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{
    chronological_split, fit_normalizer_on_train, interpolate_missing, load_series_multi, make_windows, Normalizer,
    Split, TrafficSeries,
};
use crate::error::{HagcnError, Result};
use crate::graph::{build_seed_adjacency, load_distances};
use crate::train::Experiment;

/// Output of the preprocessing chain.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Series after interpolation.
    pub series: TrafficSeries,
    pub missing_filled: usize,
    pub experiment: Experiment,
    /// Statistics of the clean training inputs.
    pub normalizer: Normalizer,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let data = &config.data;
    if data.series.is_empty() {
        return Err(HagcnError::config("series", "no series file configured"));
    }
    let distances = data.distances.as_ref().ok_or_else(|| {
        HagcnError::config("distances", "no distance file configured; set `distances = PATH` (from,to,distance CSV)")
    })?;
    let raw = load_series_multi(&data.series, data.interval_seconds)?;
    if raw.num_features() != config.model.features {
        return Err(HagcnError::config(
            "features",
            format!("series provide {} features, config says {}", raw.num_features(), config.model.features),
        ));
    }
    let edges = load_distances(distances)?;
    let seed_adjacency = build_seed_adjacency(&edges, &raw.node_ids, data.bandwidth)?;
    let missing_filled = raw.missing_count();
    let series = interpolate_missing(&raw)?;
    let windows = make_windows(&series, config.model.input_len, config.model.horizon, config.model.num_slots)?;
    let dataset = chronological_split(windows, data.split)?;
    let normalizer = fit_normalizer_on_train(&dataset)?;
    Ok(Prepared {
        series,
        missing_filled,
        experiment: Experiment {
            dataset,
            seed_adjacency,
            mape_floor: data.mape_floor,
            noise_targets: data.noise_targets,
        },
        normalizer,
    })
}

impl Prepared {
    /// `key = value` summary of counts and normalizer statistics.
    pub fn manifest(&self) -> String {
        let ds = &self.experiment.dataset;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("steps", self.series.len().to_string());
        kv("nodes", self.series.num_nodes().to_string());
        kv("features", self.series.num_features().to_string());
        kv("missing_filled", self.missing_filled.to_string());
        kv("samples", ds.len().to_string());
        for split in [Split::Train, Split::Val, Split::Test] {
            kv(&format!("{split}_samples"), ds.indices(split).len().to_string());
        }
        let join = |v: &[f64]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        kv("normalizer_mean", join(&self.normalizer.mean));
        kv("normalizer_std", join(&self.normalizer.std));
        kv("kernel_bandwidth", self.experiment.seed_adjacency.delta.to_string());
        kv(
            "seed_edges",
            self.experiment.seed_adjacency.neighbor_mask.iter().filter(|&&m| m).count().to_string(),
        );
        out
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.manifest()).map_err(|e| HagcnError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_distance_file_is_actionable() {
        let mut cfg = RunConfig::default();
        cfg.data.series = vec!["series.csv".into()];
        match prepare(&cfg) {
            Err(HagcnError::Config { field, message }) => {
                assert_eq!(field, "distances");
                assert!(message.contains("distances = PATH"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn prepares_synthetic_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::synth::SynthSpec { total_steps: 300, num_slots: 24, ..Default::default() };
        let bundle = crate::synth::generate(&spec).unwrap();
        crate::synth::write_bundle(&bundle, dir.path()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.series = vec![dir.path().join("series.csv")];
        cfg.data.distances = Some(dir.path().join("distances.csv"));
        cfg.model.num_slots = 24;
        let p = prepare(&cfg).unwrap();
        assert_eq!(p.experiment.dataset.len(), 300 - 23);
        assert!(p.manifest().contains("samples = 277"));
        let again = prepare(&cfg).unwrap();
        assert_eq!(again.manifest(), p.manifest());
    }
}
