//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, unknown keys are rejected. The
//! echo produced by [`RunConfig::to_text`] lists every key and parses back to
//! an identical configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HagcnError, Result};
use crate::graph::Bandwidth;
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::train::{TrainSettings, DEFAULT_MAPE_FLOOR};

/// Input files and preprocessing options.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    /// One wide CSV per feature.
    pub series: Vec<PathBuf>,
    pub distances: Option<PathBuf>,
    pub interval_seconds: u32,
    pub split: (f64, f64, f64),
    pub bandwidth: Bandwidth,
    pub noise_variance: f64,
    pub noise_targets: bool,
    pub mape_floor: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            series: Vec::new(),
            distances: None,
            interval_seconds: 300,
            split: (0.6, 0.2, 0.2),
            bandwidth: Bandwidth::Auto,
            noise_variance: 0.0,
            noise_targets: false,
            mape_floor: DEFAULT_MAPE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataSettings,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub synth: SynthSpec,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HagcnError::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(HagcnError::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| HagcnError::Parse {
                row: k + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HagcnError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| HagcnError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let (a, b, c) = self.data.split;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(HagcnError::config("train_ratio", "split ratios must be fractions summing to 1"));
        }
        if !(self.data.noise_variance >= 0.0) {
            return Err(HagcnError::config("noise_variance", "must be non-negative"));
        }
        if !(self.data.mape_floor >= 0.0) {
            return Err(HagcnError::config("mape_floor", "must be non-negative"));
        }
        if self.data.interval_seconds == 0 {
            return Err(HagcnError::config("interval_seconds", "must be positive"));
        }
        Ok(())
    }

    /// Assigns one key. Used by the parser and for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "series" => d.series = parse_list::<String>(key, value)?.into_iter().map(PathBuf::from).collect(),
            "distances" => d.distances = (!value.is_empty()).then(|| PathBuf::from(value)),
            "interval_seconds" => d.interval_seconds = parse_value(key, value)?,
            "train_ratio" => d.split.0 = parse_value(key, value)?,
            "val_ratio" => d.split.1 = parse_value(key, value)?,
            "test_ratio" => d.split.2 = parse_value(key, value)?,
            "bandwidth" => d.bandwidth = parse_value(key, value)?,
            "noise_variance" => d.noise_variance = parse_value(key, value)?,
            "noise_targets" => d.noise_targets = parse_bool(key, value)?,
            "mape_floor" => d.mape_floor = parse_value(key, value)?,

            "input_len" => m.input_len = parse_value(key, value)?,
            "horizon" => m.horizon = parse_value(key, value)?,
            "features" => m.features = parse_value(key, value)?,
            "layers" => m.layers = parse_value(key, value)?,
            "blocks_per_layer" => m.blocks_per_layer = parse_value(key, value)?,
            "dilation_pattern" => m.dilation_pattern = parse_list(key, value)?,
            "kernel_size" => m.kernel_size = parse_value(key, value)?,
            "hidden_channels" => m.hidden_channels = parse_value(key, value)?,
            "skip_channels" => m.skip_channels = parse_value(key, value)?,
            "end_channels" => m.end_channels = parse_value(key, value)?,
            "tucker_rank" => m.tucker_rank = parse_value(key, value)?,
            "diffusion_steps" => m.diffusion_steps = parse_value(key, value)?,
            "attention_reduction" => m.attention_reduction = parse_value(key, value)?,
            "num_slots" => m.num_slots = parse_value(key, value)?,
            "split_tcn" => m.split_tcn = parse_bool(key, value)?,
            "normalize_adjacency" => m.normalize_adjacency = parse_bool(key, value)?,
            "disable_static" => m.ablation.disable_static = parse_bool(key, value)?,
            "disable_dynamic" => m.ablation.disable_dynamic = parse_bool(key, value)?,
            "homogeneous_graph" => m.ablation.homogeneous_graph = parse_bool(key, value)?,
            "disable_channel_attention" => m.ablation.disable_channel_attention = parse_bool(key, value)?,
            "gap_pooling" => m.ablation.gap_pooling = parse_bool(key, value)?,

            "lr" => t.lr = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "max_epochs" => t.max_epochs = parse_value(key, value)?,
            "patience" => t.patience = parse_value(key, value)?,
            "grad_clip_norm" => t.grad_clip_norm = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,

            "synth_nodes" => s.nodes = parse_value(key, value)?,
            "synth_latent" => s.latent = parse_value(key, value)?,
            "synth_steps" => s.total_steps = parse_value(key, value)?,
            "synth_slots" => s.num_slots = parse_value(key, value)?,
            "synth_decay" => s.decay = parse_value(key, value)?,
            "synth_noise_std" => s.noise_std = parse_value(key, value)?,
            "synth_base_level" => s.base_level = parse_value(key, value)?,
            "synth_amplitude" => s.amplitude = parse_value(key, value)?,
            "synth_edge_threshold" => s.edge_threshold = parse_value(key, value)?,
            _ => return Err(HagcnError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in echo order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("series", d.series.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")),
            ("distances", path(&d.distances)),
            ("interval_seconds", d.interval_seconds.to_string()),
            ("train_ratio", d.split.0.to_string()),
            ("val_ratio", d.split.1.to_string()),
            ("test_ratio", d.split.2.to_string()),
            ("bandwidth", d.bandwidth.to_string()),
            ("noise_variance", d.noise_variance.to_string()),
            ("noise_targets", d.noise_targets.to_string()),
            ("mape_floor", d.mape_floor.to_string()),
            ("input_len", m.input_len.to_string()),
            ("horizon", m.horizon.to_string()),
            ("features", m.features.to_string()),
            ("layers", m.layers.to_string()),
            ("blocks_per_layer", m.blocks_per_layer.to_string()),
            ("dilation_pattern", join_list(&m.dilation_pattern)),
            ("kernel_size", m.kernel_size.to_string()),
            ("hidden_channels", m.hidden_channels.to_string()),
            ("skip_channels", m.skip_channels.to_string()),
            ("end_channels", m.end_channels.to_string()),
            ("tucker_rank", m.tucker_rank.to_string()),
            ("diffusion_steps", m.diffusion_steps.to_string()),
            ("attention_reduction", m.attention_reduction.to_string()),
            ("num_slots", m.num_slots.to_string()),
            ("split_tcn", m.split_tcn.to_string()),
            ("normalize_adjacency", m.normalize_adjacency.to_string()),
            ("disable_static", m.ablation.disable_static.to_string()),
            ("disable_dynamic", m.ablation.disable_dynamic.to_string()),
            ("homogeneous_graph", m.ablation.homogeneous_graph.to_string()),
            ("disable_channel_attention", m.ablation.disable_channel_attention.to_string()),
            ("gap_pooling", m.ablation.gap_pooling.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("grad_clip_norm", t.grad_clip_norm.to_string()),
            ("seed", t.seed.to_string()),
            ("synth_nodes", s.nodes.to_string()),
            ("synth_latent", s.latent.to_string()),
            ("synth_steps", s.total_steps.to_string()),
            ("synth_slots", s.num_slots.to_string()),
            ("synth_decay", s.decay.to_string()),
            ("synth_noise_std", s.noise_std.to_string()),
            ("synth_base_level", s.base_level.to_string()),
            ("synth_amplitude", s.amplitude.to_string()),
            ("synth_edge_threshold", s.edge_threshold.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("writing to a string");
        }
        out
    }

    /// Synthetic generator settings with the run seed applied.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.train.seed,
            ..self.synth.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("series", "a.csv,b.csv").unwrap();
        cfg.set("distances", "d.csv").unwrap();
        cfg.set("lr", "0.0003").unwrap();
        cfg.set("split_tcn", "true").unwrap();
        cfg.set("bandwidth", "12.5").unwrap();
        cfg.set("dilation_pattern", "1,2,4").unwrap();
        cfg.set("synth_noise_std", "0.1").unwrap();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\nhidden_channels = 16 # trailing\nattention_reduction=4\n").unwrap();
        assert_eq!(cfg.model.hidden_channels, 16);
    }

    #[test]
    fn unknown_key_is_an_error() {
        match RunConfig::parse("hiden_channels = 16") {
            Err(HagcnError::Config { field, .. }) => assert_eq!(field, "hiden_channels"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_report_the_row() {
        match RunConfig::parse("lr = 0.1\nnot a pair\n") {
            Err(HagcnError::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(RunConfig::parse("lr = fast"), Err(HagcnError::Config { .. })));
        assert!(matches!(RunConfig::parse("split_tcn = yes"), Err(HagcnError::Config { .. })));
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        assert!(RunConfig::parse("disable_static = true\ndisable_dynamic = true").is_err());
        assert!(RunConfig::parse("train_ratio = 0.9").is_err());
        assert!(RunConfig::parse("batch_size = 0").is_err());
    }

    #[test]
    fn every_entry_is_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(cfg, other);
    }
}
