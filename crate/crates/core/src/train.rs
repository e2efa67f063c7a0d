//! Optimization loop, metrics and the ablation and robustness harnesses.

use std::fmt;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use ndarray::{s, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{add_gaussian_noise, fit_normalizer_on_train, Normalizer, Split, WindowedDataset};
use crate::error::{HagcnError, Result};
use crate::graph::SeedAdjacency;
use crate::model::{build_model, forward, forward_on_tape, register, Ablation, ModelConfig, ModelParams};
use crate::params::ParamTree;
use crate::tensor::Tensor;

/// Horizons (1-based prediction steps) reported in metric tables.
pub const REPORTED_HORIZONS: [usize; 4] = [3, 6, 9, 12];

/// Default MAPE mask: targets with `|y|` at or below this are skipped.
pub const DEFAULT_MAPE_FLOOR: f64 = 1e-3;

/// Noise variances of the robustness study.
pub const ROBUSTNESS_VARIANCES: [f64; 3] = [0.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 64,
            max_epochs: 100,
            patience: 15,
            grad_clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(HagcnError::config("lr", "must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(HagcnError::config("batch_size", "must be at least 1"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(HagcnError::config("grad_clip_norm", "must be positive"));
        }
        Ok(())
    }
}

/// Independent RNG streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    BatchOrder = 2,
    Noise = 3,
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let mut m = Vec::new();
        params.for_each("", &mut |_, t| m.push(ArrayD::zeros(t.raw_dim())));
        let v = m.clone();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update; `grads` follow the parameter traversal order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.for_each_mut("", &mut |_, p| {
            let g = &grads[i];
            ndarray::Zip::from(p)
                .and(&mut m[i])
                .and(&mut v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            i += 1;
        });
    }
}

/// Scales `grads` so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// A mini-batch: normalized inputs, raw targets and period slots.
pub struct Batch {
    pub inputs: Array4<f64>,
    pub targets: Array4<f64>,
    pub slots: Vec<usize>,
}

pub fn gather_batch(dataset: &WindowedDataset, indices: &[usize], normalizer: &Normalizer) -> Result<Batch> {
    let (p, q) = (dataset.input_len(), dataset.horizon());
    let (n, d) = (dataset.num_nodes(), dataset.num_features());
    let mut inputs = Array4::zeros((indices.len(), p, n, d));
    let mut targets = Array4::zeros((indices.len(), q, n, d));
    for (b, &s) in indices.iter().enumerate() {
        inputs.slice_mut(s![b, .., .., ..]).assign(&dataset.inputs(s));
        targets.slice_mut(s![b, .., .., ..]).assign(&dataset.targets(s));
    }
    normalizer.apply_in_place(inputs.view_mut().into_dyn())?;
    let slots = indices.iter().map(|&s| dataset.slot_index()[s]).collect();
    Ok(Batch { inputs, targets, slots })
}

/// Loss and gradients (in traversal order) for one batch.
pub fn loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &Batch,
    normalizer: &Normalizer,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params);
    let pred = forward_on_tape(&mut tape, &vars, config, &batch.inputs.view(), &batch.slots)?;
    let target = batch.targets.clone().into_dyn();
    let loss = tape.l1_raw(pred, &target, normalizer);
    let value = tape.value(loss)[[]];
    let grads = tape.backward(loss);
    let mut out = Vec::new();
    vars.for_each("", &mut |_, v| out.push(grads.get_or_zeros(*v, tape.value(*v))));
    Ok((value, out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Trains with Adam on the raw-unit L1 loss and early stopping on validation
/// MAE. The parameters of the best validation epoch are returned.
pub fn train(
    mut params: ModelParams,
    config: &ModelConfig,
    dataset: &WindowedDataset,
    normalizer: &Normalizer,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    settings.validate()?;
    check_dataset(config, dataset)?;
    let train_idx: Vec<usize> = dataset.indices(Split::Train).collect();
    if train_idx.is_empty() || dataset.indices(Split::Val).is_empty() {
        return Err(HagcnError::Data("training needs non-empty train and validation splits".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(stream_seed(settings.seed, Stream::BatchOrder));
    let mut adam = Adam::new(&params, settings.lr);
    let mut history = Vec::with_capacity(settings.max_epochs);
    let mut best = (params.clone(), f64::INFINITY, 0usize);
    let mut since_best = 0;

    for epoch in 1..=settings.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(settings.batch_size).enumerate() {
            let batch = gather_batch(dataset, chunk, normalizer)?;
            let (loss, mut grads) = loss_and_grads(&params, config, &batch, normalizer)?;
            let grad_finite = grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !loss.is_finite() || !grad_finite {
                let (param, param_norm) = params.largest_norm();
                return Err(HagcnError::NonFinite {
                    epoch,
                    batch: bi,
                    param,
                    param_norm,
                });
            }
            clip_grad_norm(&mut grads, settings.grad_clip_norm);
            adam.step(&mut params, &grads);
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train_idx.len() as f64;
        let val_mae = evaluate(&params, config, dataset, Split::Val, normalizer, DEFAULT_MAPE_FLOOR)?
            .aggregate
            .mae;
        history.push(EpochRecord { epoch, train_loss, val_mae });
        debug!("epoch {epoch}: train_loss={train_loss:.6} val_mae={val_mae:.6}");
        if val_mae < best.1 {
            best = (params.clone(), val_mae, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= settings.patience {
                info!("early stop at epoch {epoch}; best epoch {}", best.2);
                break;
            }
        }
    }
    let (params, best_val_mae, best_epoch) = best;
    if best_epoch == 0 {
        return Err(HagcnError::Data("no epoch produced a finite validation MAE".into()));
    }
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        best_val_mae,
    })
}

fn check_dataset(config: &ModelConfig, dataset: &WindowedDataset) -> Result<()> {
    if dataset.input_len() != config.input_len || dataset.horizon() != config.horizon {
        return Err(HagcnError::Shape(format!(
            "dataset windows P={} Q={} do not match model P={} Q={}",
            dataset.input_len(),
            dataset.horizon(),
            config.input_len,
            config.horizon
        )));
    }
    if dataset.num_slots() != config.num_slots {
        return Err(HagcnError::Shape(format!(
            "dataset has {} period slots, model expects {}",
            dataset.num_slots(),
            config.num_slots
        )));
    }
    if dataset.num_features() != config.features {
        return Err(HagcnError::Shape(format!(
            "dataset has {} features, model expects {}",
            dataset.num_features(),
            config.features
        )));
    }
    Ok(())
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_mae"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_mae.to_string()])?;
    }
    w.flush().map_err(|e| HagcnError::io(path, e))
}

/// MAE, MAPE and RMSE over one set of residuals. `mape` is `None` when every
/// target falls under the mask floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub mape: Option<f64>,
    pub rmse: f64,
}

impl Metrics {
    pub fn mape_cell(&self) -> String {
        self.mape.map_or_else(|| "NA".to_string(), |v| v.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    abs: f64,
    sq: f64,
    count: usize,
    ape: f64,
    ape_count: usize,
}

impl Accum {
    fn push(&mut self, pred: f64, target: f64, floor: f64) {
        let e = pred - target;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if target.abs() > floor {
            self.ape += e.abs() / target.abs();
            self.ape_count += 1;
        }
    }

    fn merge(&mut self, other: &Accum) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.count += other.count;
        self.ape += other.ape;
        self.ape_count += other.ape_count;
    }

    fn finish(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mae: self.abs / n,
            mape: (self.ape_count > 0).then(|| self.ape / self.ape_count as f64),
            rmse: (self.sq / n).sqrt(),
        }
    }
}

/// Metrics per reported horizon plus the aggregate over every step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub horizons: Vec<(usize, Metrics)>,
    pub aggregate: Metrics,
}

impl MetricsReport {
    pub fn horizon(&self, h: usize) -> Option<&Metrics> {
        self.horizons.iter().find(|(k, _)| *k == h).map(|(_, m)| m)
    }

    pub fn column_names() -> Vec<String> {
        REPORTED_HORIZONS
            .iter()
            .flat_map(|h| ["mae", "mape", "rmse"].map(|m| format!("{m}_h{h}")))
            .collect()
    }

    /// Twelve cells ordered like [`Self::column_names`]; horizons beyond the
    /// model's output length are `NA`.
    pub fn cells(&self) -> Vec<String> {
        REPORTED_HORIZONS
            .iter()
            .flat_map(|&h| match self.horizon(h) {
                Some(m) => vec![m.mae.to_string(), m.mape_cell(), m.rmse.to_string()],
                None => vec!["NA".to_string(); 3],
            })
            .collect()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = |f: &mut fmt::Formatter<'_>, label: &str, m: &Metrics| {
            let mape = m.mape.map_or("NA".to_string(), |v| format!("{:.4}", v));
            writeln!(f, "{label:>10}  MAE {:.4}  MAPE {mape}  RMSE {:.4}", m.mae, m.rmse)
        };
        for (h, m) in &self.horizons {
            line(f, &format!("horizon {h}"), m)?;
        }
        line(f, "all", &self.aggregate)
    }
}

/// Computes metrics of raw predictions `(S, Q, N, d)` against raw targets.
pub fn metrics_from_predictions(pred: &Array4<f64>, target: &Array4<f64>, mape_floor: f64) -> Result<MetricsReport> {
    if pred.dim() != target.dim() {
        return Err(HagcnError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(HagcnError::Data("cannot evaluate an empty split".into()));
    }
    let q = pred.dim().1;
    let mut per_step = vec![Accum::default(); q];
    for ((ix, &p), &y) in pred.indexed_iter().zip(target.iter()) {
        per_step[ix.1].push(p, y, mape_floor);
    }
    let mut all = Accum::default();
    for a in &per_step {
        all.merge(a);
    }
    Ok(MetricsReport {
        horizons: REPORTED_HORIZONS
            .iter()
            .filter(|&&h| h <= q)
            .map(|&h| (h, per_step[h - 1].finish()))
            .collect(),
        aggregate: all.finish(),
    })
}

const EVAL_BATCH: usize = 64;

/// Raw-unit predictions and targets for every sample of `split`.
pub fn predict_split(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &WindowedDataset,
    split: Split,
    normalizer: &Normalizer,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let idx: Vec<usize> = dataset.indices(split).collect();
    let (q, n, d) = (dataset.horizon(), dataset.num_nodes(), dataset.num_features());
    let mut preds = Array4::zeros((idx.len(), q, n, d));
    let mut targets = Array4::zeros((idx.len(), q, n, d));
    for (c, chunk) in idx.chunks(EVAL_BATCH).enumerate() {
        let batch = gather_batch(dataset, chunk, normalizer)?;
        let mut out = forward(params, config, &batch.inputs.view(), &batch.slots)?;
        normalizer.invert_in_place(out.view_mut().into_dyn())?;
        let start = c * EVAL_BATCH;
        preds.slice_mut(s![start..start + chunk.len(), .., .., ..]).assign(&out);
        targets
            .slice_mut(s![start..start + chunk.len(), .., .., ..])
            .assign(&batch.targets);
    }
    Ok((preds, targets))
}

/// Metrics of the model on one split, in raw units.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &WindowedDataset,
    split: Split,
    normalizer: &Normalizer,
    mape_floor: f64,
) -> Result<MetricsReport> {
    if dataset.indices(split).is_empty() {
        return Err(HagcnError::Data(format!("{split} split is empty")));
    }
    let (pred, target) = predict_split(params, config, dataset, split, normalizer)?;
    metrics_from_predictions(&pred, &target, mape_floor)
}

/// A split dataset together with the graph prior used to initialize models.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub dataset: WindowedDataset,
    pub seed_adjacency: SeedAdjacency,
    pub mape_floor: f64,
    /// Also perturb training targets when injecting noise.
    pub noise_targets: bool,
}

/// Everything produced by one seeded training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub params: ModelParams,
    pub normalizer: Normalizer,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

/// Builds, trains and evaluates one model. With `noise_variance > 0` the raw
/// training data is perturbed first and the normalizer is fitted on the
/// perturbed training inputs; evaluation always reads clean data.
pub fn fit_and_evaluate(
    config: &ModelConfig,
    settings: &TrainSettings,
    experiment: &Experiment,
    noise_variance: f64,
) -> Result<RunResult> {
    let dataset = add_gaussian_noise(
        &experiment.dataset,
        noise_variance,
        stream_seed(settings.seed, Stream::Noise),
        experiment.noise_targets,
    )?;
    let normalizer = fit_normalizer_on_train(&dataset)?;
    let params = build_model(config, &experiment.seed_adjacency, stream_seed(settings.seed, Stream::Init))?;
    let outcome = train(params, config, &dataset, &normalizer, settings)?;
    let val = evaluate(&outcome.params, config, &dataset, Split::Val, &normalizer, experiment.mape_floor)?;
    let test = evaluate(&outcome.params, config, &dataset, Split::Test, &normalizer, experiment.mape_floor)?;
    Ok(RunResult {
        params: outcome.params,
        normalizer,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        val,
        test,
    })
}

/// The full model and its five ablations, in table order.
pub fn ablation_variants() -> Vec<(&'static str, Ablation)> {
    let none = Ablation::default();
    vec![
        ("full", none),
        ("w/o static", Ablation { disable_static: true, ..none }),
        ("w/o dynamic", Ablation { disable_dynamic: true, ..none }),
        ("homogeneous graph", Ablation { homogeneous_graph: true, ..none }),
        ("w/o channel attention", Ablation { disable_channel_attention: true, ..none }),
        ("w/o decentralization pooling", Ablation { gap_pooling: true, ..none }),
    ]
}

/// Test reports of one table row across repeats.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    pub runs: Vec<MetricsReport>,
}

impl TableRow {
    pub fn mean_test_mae(&self) -> f64 {
        self.runs.iter().map(|r| r.aggregate.mae).sum::<f64>() / self.runs.len() as f64
    }
}

/// Seed of repeat `r`.
pub fn repeat_seed(base: u64, r: usize) -> u64 {
    base.wrapping_add(r as u64)
}

/// Trains the six ablation configurations `repeats` times each with shared
/// seeds.
pub fn run_ablation_suite(
    base: &ModelConfig,
    settings: &TrainSettings,
    experiment: &Experiment,
    repeats: usize,
) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for (label, ablation) in ablation_variants() {
        let config = ModelConfig {
            ablation,
            ..base.clone()
        };
        let mut runs = Vec::with_capacity(repeats);
        for r in 0..repeats.max(1) {
            let s = TrainSettings {
                seed: repeat_seed(settings.seed, r),
                ..settings.clone()
            };
            info!("ablation `{label}` repeat {r}");
            runs.push(fit_and_evaluate(&config, &s, experiment, 0.0)?.test);
        }
        rows.push(TableRow {
            label: label.to_string(),
            runs,
        });
    }
    Ok(rows)
}

/// One model per noise variance, each evaluated on the clean test split.
pub fn run_robustness(
    config: &ModelConfig,
    settings: &TrainSettings,
    experiment: &Experiment,
    variances: &[f64],
    repeats: usize,
) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for &variance in variances {
        let mut runs = Vec::with_capacity(repeats);
        for r in 0..repeats.max(1) {
            let s = TrainSettings {
                seed: repeat_seed(settings.seed, r),
                ..settings.clone()
            };
            info!("robustness variance {variance} repeat {r}");
            runs.push(fit_and_evaluate(config, &s, experiment, variance)?.test);
        }
        rows.push(TableRow {
            label: format!("N(0,{variance})"),
            runs,
        });
    }
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-cell mean and population standard deviation across the runs of a row.
/// Cells undefined in any run are `NA`.
pub fn row_cells(row: &TableRow) -> (Vec<String>, Vec<String>) {
    let per_run: Vec<Vec<String>> = row.runs.iter().map(|r| r.cells()).collect();
    let columns = MetricsReport::column_names().len();
    let mut means = Vec::with_capacity(columns);
    let mut stds = Vec::with_capacity(columns);
    for c in 0..columns {
        let vals: Option<Vec<f64>> = per_run.iter().map(|cells| cells[c].parse::<f64>().ok()).collect();
        match vals {
            Some(v) if !v.is_empty() => {
                let (m, s) = mean_std(&v);
                means.push(m.to_string());
                stds.push(s.to_string());
            }
            _ => {
                means.push("NA".into());
                stds.push("NA".into());
            }
        }
    }
    (means, stds)
}

/// Writes a table of row means (`label` + twelve metric columns). When any row
/// has more than one run, a sibling `*_std.csv` with standard deviations is
/// written too.
pub fn write_table(rows: &[TableRow], label_column: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut header = vec![label_column.to_string()];
    header.extend(MetricsReport::column_names());
    let write = |target: &Path, pick_std: bool| -> Result<()> {
        let mut w = csv::Writer::from_path(target)?;
        w.write_record(&header)?;
        for row in rows {
            let (means, stds) = row_cells(row);
            let mut rec = vec![row.label.clone()];
            rec.extend(if pick_std { stds } else { means });
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| HagcnError::io(target, e))
    };
    write(path, false)?;
    if rows.iter().any(|r| r.runs.len() > 1) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
        write(&path.with_file_name(format!("{stem}_std.csv")), true)?;
    }
    Ok(())
}

/// Writes a single report as `horizon,mae,mape,rmse` rows, the last row
/// labelled `all`.
pub fn write_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| HagcnError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| HagcnError::io(path, e);
    writeln!(out, "horizon,mae,mape,rmse").map_err(io)?;
    let rows = report
        .horizons
        .iter()
        .map(|(h, m)| (h.to_string(), m))
        .chain(std::iter::once(("all".to_string(), &report.aggregate)));
    for (label, m) in rows {
        writeln!(out, "{label},{},{},{}", m.mae, m.mape_cell(), m.rmse).map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn report(pred: &[f64], target: &[f64]) -> MetricsReport {
        let p = Array::from_shape_vec((pred.len(), 1, 1, 1), pred.to_vec()).unwrap();
        let t = Array::from_shape_vec((target.len(), 1, 1, 1), target.to_vec()).unwrap();
        metrics_from_predictions(&p, &t, DEFAULT_MAPE_FLOOR).unwrap()
    }

    #[test]
    fn exact_predictions_have_zero_error() {
        let r = report(&[1.0, 2.0], &[1.0, 2.0]);
        assert_eq!(r.aggregate, Metrics { mae: 0.0, mape: Some(0.0), rmse: 0.0 });
    }

    #[test]
    fn hand_metrics() {
        let r = report(&[1.0, 5.0], &[2.0, 4.0]);
        assert_eq!(r.aggregate.mae, 1.0);
        assert_eq!(r.aggregate.rmse, 1.0);
        assert!((r.aggregate.mape.unwrap() - 0.375).abs() < 1e-15);
    }

    #[test]
    fn mape_masks_zero_targets() {
        let r = report(&[0.0, 5.0], &[0.0, 4.0]);
        assert!((r.aggregate.mape.unwrap() - 0.25).abs() < 1e-15);
        let r = report(&[1.0, 5.0], &[0.0, 0.0005]);
        assert_eq!(r.aggregate.mape, None);
        assert_eq!(r.aggregate.mape_cell(), "NA");
    }

    #[test]
    fn horizons_use_one_based_steps() {
        let q = 12;
        let pred = Array4::from_shape_fn((2, q, 3, 1), |(_, h, _, _)| h as f64);
        let target = Array4::zeros((2, q, 3, 1));
        let r = metrics_from_predictions(&pred, &target, DEFAULT_MAPE_FLOOR).unwrap();
        assert_eq!(r.horizons.len(), 4);
        for (h, m) in &r.horizons {
            assert_eq!(m.mae, (*h - 1) as f64);
        }
        assert!(r.aggregate.rmse >= r.aggregate.mae);
        assert_eq!(r.cells().len(), 12);
        let short = metrics_from_predictions(&pred.slice(s![.., ..4, .., ..]).to_owned(), &target.slice(s![.., ..4, .., ..]).to_owned(), 1e-3).unwrap();
        assert_eq!(short.horizons.len(), 1);
        assert_eq!(short.cells()[3], "NA");
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![ArrayD::from_elem(ndarray::IxDyn(&[2]), 3.0), ArrayD::from_elem(ndarray::IxDyn(&[1]), 4.0)];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 34f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        let a = stream_seed(7, Stream::Init);
        assert_eq!(a, stream_seed(7, Stream::Init));
        assert_ne!(a, stream_seed(7, Stream::BatchOrder));
        assert_ne!(a, stream_seed(8, Stream::Init));
    }

    #[test]
    fn settings_validation() {
        assert!(TrainSettings::default().validate().is_ok());
        let bad = TrainSettings { batch_size: 0, ..TrainSettings::default() };
        assert!(matches!(bad.validate(), Err(HagcnError::Config { .. })));
        let bad = TrainSettings { lr: -1.0, ..TrainSettings::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn row_cells_mean_and_std() {
        let a = report(&[1.0], &[2.0]);
        let b = report(&[1.0], &[4.0]);
        // Q = 1 so only the aggregate exists; horizon cells are NA.
        let row = TableRow { label: "x".into(), runs: vec![a, b] };
        let (m, s) = row_cells(&row);
        assert!(m.iter().all(|c| c == "NA"));
        assert!(s.iter().all(|c| c == "NA"));
        assert_eq!(row.mean_test_mae(), 2.0);
    }
}
