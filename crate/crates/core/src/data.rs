//! Ingestion and preprocessing of traffic sensor series.
//!
//! The canonical interchange format is a wide CSV: the first column `t` holds
//! the integer interval index and every further column holds one node. Empty
//! cells mark missing readings. Multi-feature series are stored as one file
//! per feature sharing the same time and node axes.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use log::warn;
use ndarray::{s, Array3, ArrayView3, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HagcnError, Result};

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Raw or normalized signal over `(time, node, feature)`.
///
/// Missing readings are stored as `NaN` until [`interpolate_missing`] runs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    pub values: Array3<f64>,
    pub timestamps: Vec<i64>,
    pub interval_seconds: u32,
    pub node_ids: Vec<String>,
}

impl TrafficSeries {
    pub fn new(
        values: Array3<f64>,
        timestamps: Vec<i64>,
        interval_seconds: u32,
        node_ids: Vec<String>,
    ) -> Result<Self> {
        let (t, n, d) = values.dim();
        if t == 0 || n < 2 || d == 0 {
            return Err(HagcnError::Data(format!(
                "series needs T >= 1, N >= 2, d >= 1 (got T={t}, N={n}, d={d})"
            )));
        }
        if timestamps.len() != t {
            return Err(HagcnError::Shape(format!(
                "{} timestamps for {t} time steps",
                timestamps.len()
            )));
        }
        if node_ids.len() != n {
            return Err(HagcnError::Shape(format!(
                "{} node ids for {n} nodes",
                node_ids.len()
            )));
        }
        if interval_seconds == 0 {
            return Err(HagcnError::Argument("interval_seconds must be positive".into()));
        }
        check_stride(&timestamps)?;
        Ok(Self {
            values,
            timestamps,
            interval_seconds,
            node_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.values.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.values.dim().1
    }

    pub fn num_features(&self) -> usize {
        self.values.dim().2
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    pub fn is_missing(&self, t: usize, node: usize, feature: usize) -> bool {
        self.values[[t, node, feature]].is_nan()
    }
}

fn check_stride(timestamps: &[i64]) -> Result<()> {
    if timestamps.len() < 2 {
        return Ok(());
    }
    let stride = timestamps[1] - timestamps[0];
    if stride <= 0 {
        return Err(HagcnError::Format(format!(
            "timestamps must be strictly increasing ({} then {})",
            timestamps[0], timestamps[1]
        )));
    }
    for (k, w) in timestamps.windows(2).enumerate() {
        if w[1] - w[0] != stride {
            return Err(HagcnError::Format(format!(
                "non-constant stride between rows {} and {} ({} -> {}, expected stride {stride})",
                k + 2, // data rows start after the header line
                k + 3,
                w[0],
                w[1]
            )));
        }
    }
    Ok(())
}

/// Loads a single-feature wide CSV series.
pub fn load_series(path: impl AsRef<Path>, interval_seconds: u32) -> Result<TrafficSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| HagcnError::io(path, e))?;
    read_series(file, interval_seconds)
}

/// Loads one wide CSV per feature and stacks them along the feature axis.
pub fn load_series_multi<P: AsRef<Path>>(paths: &[P], interval_seconds: u32) -> Result<TrafficSeries> {
    let first = paths
        .first()
        .ok_or_else(|| HagcnError::Argument("no series files given".into()))?;
    let mut base = load_series(first, interval_seconds)?;
    for p in &paths[1..] {
        let next = load_series(p, interval_seconds)?;
        if next.timestamps != base.timestamps || next.node_ids != base.node_ids {
            return Err(HagcnError::Format(format!(
                "{} does not share the time/node axes of {}",
                p.as_ref().display(),
                first.as_ref().display()
            )));
        }
        base.values = ndarray::concatenate(Axis(2), &[base.values.view(), next.values.view()])
            .expect("axes checked above");
    }
    Ok(base)
}

/// Parses a wide CSV series from any reader.
pub fn read_series<R: std::io::Read>(reader: R, interval_seconds: u32) -> Result<TrafficSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(HagcnError::Format(
            "header must name the time column and at least one node".into(),
        ));
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = node_ids.len();

    let mut timestamps = Vec::new();
    let mut flat = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        let record = record?;
        if record.len() != n + 1 {
            return Err(HagcnError::Parse {
                row: line,
                message: format!("expected {} fields, found {}", n + 1, record.len()),
            });
        }
        let t: i64 = record[0].parse().map_err(|_| HagcnError::Parse {
            row: line,
            message: format!("interval index `{}` is not an integer", &record[0]),
        })?;
        timestamps.push(t);
        for (col, cell) in record.iter().skip(1).enumerate() {
            if cell.is_empty() {
                flat.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| HagcnError::Parse {
                row: line,
                message: format!("cell `{cell}` in column `{}` is not numeric", node_ids[col]),
            })?;
            if !v.is_finite() {
                return Err(HagcnError::Parse {
                    row: line,
                    message: format!("cell `{cell}` in column `{}` is not finite", node_ids[col]),
                });
            }
            flat.push(v);
        }
    }
    let t_total = timestamps.len();
    let values = Array3::from_shape_vec((t_total, n, 1), flat).expect("row arity checked");
    TrafficSeries::new(values, timestamps, interval_seconds, node_ids)
}

/// Writes a single feature of a series in the wide CSV format.
pub fn write_series(series: &TrafficSeries, feature: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(series.node_ids.iter().cloned());
    w.write_record(&header)?;
    for (t, ts) in series.timestamps.iter().enumerate() {
        let mut row = vec![ts.to_string()];
        for n in 0..series.num_nodes() {
            let v = series.values[[t, n, feature]];
            row.push(if v.is_nan() { String::new() } else { v.to_string() });
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HagcnError::io(path, e))?;
    Ok(())
}

/// Fills missing readings by linear interpolation between the nearest
/// observed neighbours. Leading and trailing gaps take the nearest observed
/// value.
pub fn interpolate_missing(series: &TrafficSeries) -> Result<TrafficSeries> {
    let mut out = series.clone();
    let (_, n, d) = out.values.dim();
    for node in 0..n {
        for f in 0..d {
            let mut column = out.values.slice_mut(s![.., node, f]);
            let mut buf: Vec<f64> = column.to_vec();
            fill_column(&mut buf).ok_or_else(|| {
                HagcnError::Data(format!(
                    "node `{}` feature {f} has no observed values",
                    series.node_ids[node]
                ))
            })?;
            for (dst, src) in column.iter_mut().zip(buf) {
                *dst = src;
            }
        }
    }
    Ok(out)
}

/// Returns `None` when every entry is missing.
fn fill_column(col: &mut [f64]) -> Option<()> {
    let observed: Vec<usize> = (0..col.len()).filter(|&i| !col[i].is_nan()).collect();
    let (&first, &last) = (observed.first()?, observed.last()?);
    let lead = col[first];
    col[..first].fill(lead);
    let trail = col[last];
    col[last + 1..].fill(trail);
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a < 2 {
            continue;
        }
        let (ya, yb) = (col[a], col[b]);
        let span = (b - a) as f64;
        for i in a + 1..b {
            let w = (i - a) as f64 / span;
            col[i] = ya + w * (yb - ya);
        }
    }
    Some(())
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn num_features(&self) -> usize {
        self.mean.len()
    }

    /// Applies `(x - mean) / std` along the trailing feature axis in place.
    pub fn apply_in_place(&self, mut values: ArrayViewMutD<'_, f64>) -> Result<()> {
        self.check_features(values.shape())?;
        let last = Axis(values.ndim() - 1);
        for mut lane in values.lanes_mut(last) {
            for (f, v) in lane.iter_mut().enumerate() {
                *v = (*v - self.mean[f]) / self.std[f];
            }
        }
        Ok(())
    }

    /// Applies `x * std + mean` along the trailing feature axis in place.
    pub fn invert_in_place(&self, mut values: ArrayViewMutD<'_, f64>) -> Result<()> {
        self.check_features(values.shape())?;
        let last = Axis(values.ndim() - 1);
        for mut lane in values.lanes_mut(last) {
            for (f, v) in lane.iter_mut().enumerate() {
                *v = *v * self.std[f] + self.mean[f];
            }
        }
        Ok(())
    }

    fn check_features(&self, shape: &[usize]) -> Result<()> {
        match shape.last() {
            Some(&d) if d == self.num_features() => Ok(()),
            _ => Err(HagcnError::Shape(format!(
                "trailing axis of {shape:?} does not match {} normalizer features",
                self.num_features()
            ))),
        }
    }
}

fn finish_fit(d: usize, values: &[ArrayView3<'_, f64>], mean: Vec<f64>) -> Normalizer {
    let mut var = vec![0.0; d];
    let mut count = 0usize;
    for block in values {
        for lane in block.lanes(Axis(2)) {
            for (f, &v) in lane.iter().enumerate() {
                var[f] += (v - mean[f]).powi(2);
            }
            count += 1;
        }
    }
    let std = var
        .iter()
        .enumerate()
        .map(|(f, v)| {
            let s = (v / count as f64).sqrt();
            if s < STD_FLOOR {
                warn!("feature {f} has constant training data; std floored at {STD_FLOOR:e}");
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    Normalizer { mean, std }
}

fn fit_views(d: usize, views: Vec<ArrayView3<'_, f64>>) -> Result<Normalizer> {
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for block in &views {
        for lane in block.lanes(Axis(2)) {
            for (f, &v) in lane.iter().enumerate() {
                sum[f] += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(HagcnError::Data("no training values to fit normalizer".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    Ok(finish_fit(d, &views, mean))
}

/// Fits z-score statistics on the chronological training prefix of a series,
/// pooled over nodes and time, using the population standard deviation.
pub fn fit_normalizer(series: &TrafficSeries, train_fraction: f64) -> Result<Normalizer> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(HagcnError::Argument(format!(
            "train_fraction {train_fraction} outside [0, 1]"
        )));
    }
    let prefix = (train_fraction * series.len() as f64).floor() as usize;
    if prefix < 2 {
        return Err(HagcnError::Data(format!(
            "training prefix has {prefix} time steps; at least 2 are required"
        )));
    }
    fit_views(
        series.num_features(),
        vec![series.values.slice(s![..prefix, .., ..])],
    )
}

pub fn apply_normalizer(series: &TrafficSeries, normalizer: &Normalizer) -> Result<TrafficSeries> {
    let mut out = series.clone();
    normalizer.apply_in_place(out.values.view_mut().into_dyn())?;
    Ok(out)
}

pub fn invert_normalizer(
    values: &ndarray::ArrayD<f64>,
    normalizer: &Normalizer,
) -> Result<ndarray::ArrayD<f64>> {
    let mut out = values.clone();
    normalizer.invert_in_place(out.view_mut())?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Supervised samples cut from a series.
///
/// Windows are views into the owned series values: sample `s` reads inputs
/// `values[s..s+P]` and targets `values[s+P..s+P+Q]`. Training samples read
/// from a perturbed copy once noise has been injected.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    values: Array3<f64>,
    timestamps: Vec<i64>,
    p: usize,
    q: usize,
    n_t: usize,
    slot_index: Vec<usize>,
    splits: Option<[Range<usize>; 3]>,
    noisy: Option<Array3<f64>>,
    noisy_targets: bool,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.slot_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot_index.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.p
    }

    pub fn horizon(&self) -> usize {
        self.q
    }

    pub fn num_slots(&self) -> usize {
        self.n_t
    }

    pub fn num_nodes(&self) -> usize {
        self.values.dim().1
    }

    pub fn num_features(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> ArrayView3<'_, f64> {
        self.values.view()
    }

    pub fn slot_index(&self) -> &[usize] {
        &self.slot_index
    }

    /// Timestamp of the last observed step of sample `s`.
    pub fn sample_timestamp(&self, s: usize) -> i64 {
        self.timestamps[s + self.p - 1]
    }

    pub fn split_of(&self, s: usize) -> Option<Split> {
        let splits = self.splits.as_ref()?;
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .zip(splits.iter())
            .find(|(_, r)| r.contains(&s))
            .map(|(tag, _)| tag)
    }

    /// Sample indices belonging to `split`; the whole dataset before splitting.
    pub fn indices(&self, split: Split) -> Range<usize> {
        match &self.splits {
            None => 0..self.len(),
            Some(r) => match split {
                Split::Train => r[0].clone(),
                Split::Val => r[1].clone(),
                Split::Test => r[2].clone(),
            },
        }
    }

    pub fn is_split(&self) -> bool {
        self.splits.is_some()
    }

    fn is_train(&self, s: usize) -> bool {
        self.splits.as_ref().is_some_and(|r| r[0].contains(&s))
    }

    pub fn inputs(&self, s: usize) -> ArrayView3<'_, f64> {
        let src = match &self.noisy {
            Some(noisy) if self.is_train(s) => noisy,
            _ => &self.values,
        };
        src.slice(s![s..s + self.p, .., ..])
    }

    pub fn targets(&self, s: usize) -> ArrayView3<'_, f64> {
        let src = match &self.noisy {
            Some(noisy) if self.noisy_targets && self.is_train(s) => noisy,
            _ => &self.values,
        };
        src.slice(s![s + self.p..s + self.p + self.q, .., ..])
    }

    /// Inputs of every training sample, as read by the training loop.
    pub fn train_input_views(&self) -> Vec<ArrayView3<'_, f64>> {
        self.indices(Split::Train).map(|s| self.inputs(s)).collect()
    }
}

/// Fits the normalizer on the training-sample inputs of a split dataset.
pub fn fit_normalizer_on_train(dataset: &WindowedDataset) -> Result<Normalizer> {
    fit_views(dataset.num_features(), dataset.train_input_views())
}

/// Cuts `T - P - Q + 1` overlapping windows.
pub fn make_windows(series: &TrafficSeries, p: usize, q: usize, n_t: usize) -> Result<WindowedDataset> {
    if p == 0 || q == 0 {
        return Err(HagcnError::Argument("P and Q must be positive".into()));
    }
    if n_t == 0 {
        return Err(HagcnError::Argument("N_t must be positive".into()));
    }
    let t_total = series.len();
    if t_total < p + q {
        return Err(HagcnError::Data(format!(
            "series has {t_total} steps; windows need at least P + Q = {}",
            p + q
        )));
    }
    if series.missing_count() > 0 {
        return Err(HagcnError::Data(
            "series still contains missing values; interpolate first".into(),
        ));
    }
    let count = t_total - p - q + 1;
    let slot_index = (0..count)
        .map(|s| period_slot_signed(series.timestamps[s + p - 1], n_t))
        .collect();
    Ok(WindowedDataset {
        values: series.values.clone(),
        timestamps: series.timestamps.clone(),
        p,
        q,
        n_t,
        slot_index,
        splits: None,
        noisy: None,
        noisy_targets: true,
    })
}

fn period_slot_signed(t: i64, n_t: usize) -> usize {
    t.rem_euclid(n_t as i64) as usize
}

/// Tags samples chronologically: `floor(r0 S)` train, `floor(r1 S)` val, the
/// rest test.
pub fn chronological_split(mut dataset: WindowedDataset, ratios: (f64, f64, f64)) -> Result<WindowedDataset> {
    let (r0, r1, r2) = ratios;
    if [r0, r1, r2].iter().any(|r| !(0.0..=1.0).contains(r)) || (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(HagcnError::Argument(format!(
            "split ratios {ratios:?} must be fractions summing to 1"
        )));
    }
    let s = dataset.len();
    if s < 5 {
        return Err(HagcnError::Data(format!(
            "{s} samples are too few for a three-way split (need at least 5)"
        )));
    }
    let n_train = (r0 * s as f64).floor() as usize;
    let n_val = (r1 * s as f64).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= s {
        return Err(HagcnError::Data(format!(
            "split of {s} samples leaves an empty partition"
        )));
    }
    dataset.splits = Some([0..n_train, n_train..n_train + n_val, n_train + n_val..s]);
    Ok(dataset)
}

/// Adds zero-mean Gaussian noise of the given variance to the raw values seen
/// by training samples. Validation and test samples keep reading clean data.
pub fn add_gaussian_noise(
    dataset: &WindowedDataset,
    variance: f64,
    seed: u64,
    perturb_targets: bool,
) -> Result<WindowedDataset> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(HagcnError::Argument(format!(
            "noise variance must be a finite non-negative number (got {variance})"
        )));
    }
    if !dataset.is_split() {
        return Err(HagcnError::Data("noise injection requires a split dataset".into()));
    }
    let mut out = dataset.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    let train = dataset.indices(Split::Train);
    let reach = if train.is_empty() {
        0
    } else {
        train.end - 1 + dataset.p + if perturb_targets { dataset.q } else { 0 }
    };
    let normal = Normal::new(0.0, variance.sqrt()).expect("variance checked");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = dataset.noisy.clone().unwrap_or_else(|| dataset.values.clone());
    for v in noisy.slice_mut(s![..reach, .., ..]).iter_mut() {
        *v += normal.sample(&mut rng);
    }
    out.noisy = Some(noisy);
    out.noisy_targets = perturb_targets;
    Ok(out)
}

/// Difference between the perturbed training copy and the clean values.
pub fn injected_noise(dataset: &WindowedDataset) -> Option<Array3<f64>> {
    dataset.noisy.as_ref().map(|n| n - &dataset.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn series_1d(col0: &[f64], col1: &[f64]) -> TrafficSeries {
        let t = col0.len();
        let mut values = Array3::zeros((t, 2, 1));
        for i in 0..t {
            values[[i, 0, 0]] = col0[i];
            values[[i, 1, 0]] = col1[i];
        }
        TrafficSeries::new(values, (0..t as i64).collect(), 300, vec!["a".into(), "b".into()])
            .unwrap()
    }

    #[test]
    fn load_three_rows() {
        let csv = "t,a,b\n0,1.0,2.0\n1,3,4\n2,5,6\n";
        let s = read_series(csv.as_bytes(), 300).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.num_nodes(), 2);
        assert_eq!(s.num_features(), 1);
        assert_eq!(s.node_ids, vec!["a", "b"]);
        assert_eq!(s.values[[2, 1, 0]], 6.0);
    }

    #[test]
    fn load_flags_single_missing_cell() {
        let csv = "t,a,b\n0,1,2\n1,,4\n2,5,6\n";
        let s = read_series(csv.as_bytes(), 300).unwrap();
        assert_eq!(s.missing_count(), 1);
        assert!(s.is_missing(1, 0, 0));
    }

    #[test]
    fn load_rejects_broken_stride() {
        let csv = "t,a,b\n0,1,2\n1,3,4\n3,5,6\n";
        let err = read_series(csv.as_bytes(), 300).unwrap_err();
        assert!(matches!(err, HagcnError::Format(_)), "{err}");
    }

    #[test]
    fn load_reports_row_numbers() {
        let csv = "t,a,b\n0,1,2\n1,x,4\n";
        match read_series(csv.as_bytes(), 300).unwrap_err() {
            HagcnError::Parse { row, .. } => assert_eq!(row, 3),
            e => panic!("unexpected {e}"),
        }
        let csv = "t,a,b\n0,1,2\n1,3\n";
        match read_series(csv.as_bytes(), 300).unwrap_err() {
            HagcnError::Parse { row, .. } => assert_eq!(row, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn interpolates_interior_gap() {
        let nan = f64::NAN;
        let s = series_1d(&[1.0, nan, nan, 4.0], &[0.0; 4]);
        let out = interpolate_missing(&s).unwrap();
        let col: Vec<f64> = out.values.slice(s![.., 0, 0]).to_vec();
        assert_eq!(col, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn extends_edges_with_nearest_value() {
        let nan = f64::NAN;
        let s = series_1d(&[nan, 5.0, nan], &[1.0, 2.0, 3.0]);
        let out = interpolate_missing(&s).unwrap();
        assert_eq!(out.values.slice(s![.., 0, 0]).to_vec(), vec![5.0, 5.0, 5.0]);
        assert_eq!(out.values.slice(s![.., 1, 0]).to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn complete_series_is_unchanged() {
        let s = series_1d(&[1.0, 2.0, 7.0], &[3.0, 3.0, 1.0]);
        assert_eq!(interpolate_missing(&s).unwrap(), s);
    }

    #[test]
    fn fully_missing_column_names_the_node() {
        let nan = f64::NAN;
        let s = series_1d(&[1.0, 2.0], &[nan, nan]);
        let err = interpolate_missing(&s).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }

    #[test]
    fn normalizer_population_std() {
        // Training prefix of 60% of 5 rows = 3 rows, values 1 and 3 only.
        let s = series_1d(&[1.0, 3.0, 1.0, 100.0, 100.0], &[3.0, 1.0, 3.0, -50.0, 0.0]);
        let nz = fit_normalizer(&s, 0.6).unwrap();
        assert!((nz.mean[0] - 2.0).abs() < 1e-12);
        assert!((nz.std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalizer_floors_constant_data() {
        let s = series_1d(&[7.0; 4], &[7.0; 4]);
        let nz = fit_normalizer(&s, 1.0).unwrap();
        assert_eq!(nz.mean[0], 7.0);
        assert_eq!(nz.std[0], STD_FLOOR);
    }

    #[test]
    fn normalizer_needs_two_training_steps() {
        let s = series_1d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert!(fit_normalizer(&s, 0.5).is_err());
    }

    #[test]
    fn apply_and_invert_formula() {
        let nz = Normalizer { mean: vec![2.0], std: vec![1.0] };
        let s = series_1d(&[4.0, 4.0], &[4.0, 4.0]);
        let out = apply_normalizer(&s, &nz).unwrap();
        assert_eq!(out.values[[0, 0, 0]], 2.0);
        let id = Normalizer::identity(1);
        assert_eq!(apply_normalizer(&s, &id).unwrap(), s);
        let back = invert_normalizer(&out.values.into_dyn(), &nz).unwrap();
        assert_eq!(back[[0, 0, 0]], 4.0);
    }

    #[test]
    fn normalizer_rejects_feature_mismatch() {
        let nz = Normalizer::identity(2);
        let mut x = Array1::<f64>::zeros(3).into_dyn();
        assert!(nz.apply_in_place(x.view_mut()).is_err());
    }

    fn ramp(t: usize) -> TrafficSeries {
        let col0: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let col1: Vec<f64> = (0..t).map(|i| -(i as f64)).collect();
        series_1d(&col0, &col1)
    }

    #[test]
    fn window_counts_and_boundaries() {
        assert_eq!(make_windows(&ramp(36), 12, 12, 288).unwrap().len(), 13);
        let one = make_windows(&ramp(24), 12, 12, 288).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.inputs(0)[[0, 0, 0]], 0.0);
        assert_eq!(one.inputs(0)[[11, 0, 0]], 11.0);
        assert_eq!(one.targets(0)[[0, 0, 0]], 12.0);
        assert_eq!(one.targets(0)[[11, 0, 0]], 23.0);
        assert!(make_windows(&ramp(23), 12, 12, 288).is_err());
    }

    #[test]
    fn slot_of_last_observed_step() {
        let mut s = ramp(40);
        s.timestamps = (289..329).collect();
        // Sample 0 ends at timestamp 289 + 11 = 300.
        let ds = make_windows(&s, 12, 12, 288).unwrap();
        assert_eq!(ds.sample_timestamp(0), 300);
        assert_eq!(ds.slot_index()[0], 12);
    }

    #[test]
    fn split_sizes() {
        let sizes = |s: usize| {
            let ds = chronological_split(make_windows(&ramp(s + 1), 1, 1, 4).unwrap(), (0.6, 0.2, 0.2))
                .unwrap();
            (
                ds.indices(Split::Train).len(),
                ds.indices(Split::Val).len(),
                ds.indices(Split::Test).len(),
            )
        };
        assert_eq!(sizes(10), (6, 2, 2));
        assert_eq!(sizes(11), (6, 2, 3));
        let small = make_windows(&ramp(5), 1, 1, 4).unwrap();
        assert_eq!(small.len(), 4);
        assert!(chronological_split(small, (0.6, 0.2, 0.2)).is_err());
    }

    #[test]
    fn split_boundaries_are_chronological() {
        let ds = chronological_split(make_windows(&ramp(60), 4, 3, 7).unwrap(), (0.6, 0.2, 0.2)).unwrap();
        let max_ts = |sp| ds.indices(sp).map(|s| ds.sample_timestamp(s)).max().unwrap();
        let min_ts = |sp| ds.indices(sp).map(|s| ds.sample_timestamp(s)).min().unwrap();
        assert!(max_ts(Split::Train) < min_ts(Split::Val));
        assert!(max_ts(Split::Val) < min_ts(Split::Test));
        for s in 0..ds.len() {
            assert!(ds.split_of(s).is_some());
        }
    }

    #[test]
    fn zero_variance_noise_is_identity() {
        let ds = chronological_split(make_windows(&ramp(60), 4, 3, 7).unwrap(), (0.6, 0.2, 0.2)).unwrap();
        let noisy = add_gaussian_noise(&ds, 0.0, 1, true).unwrap();
        for s in 0..ds.len() {
            assert_eq!(ds.inputs(s), noisy.inputs(s));
            assert_eq!(ds.targets(s), noisy.targets(s));
        }
        assert!(add_gaussian_noise(&ds, -1.0, 1, true).is_err());
    }

    #[test]
    fn noise_leaves_evaluation_splits_untouched() {
        let ds = chronological_split(make_windows(&ramp(80), 4, 3, 7).unwrap(), (0.6, 0.2, 0.2)).unwrap();
        let noisy = add_gaussian_noise(&ds, 2.0, 9, true).unwrap();
        for split in [Split::Val, Split::Test] {
            for s in ds.indices(split) {
                assert_eq!(ds.inputs(s), noisy.inputs(s));
                assert_eq!(ds.targets(s), noisy.targets(s));
            }
        }
        let s0 = ds.indices(Split::Train).start;
        assert_ne!(ds.inputs(s0), noisy.inputs(s0));

        let inputs_only = add_gaussian_noise(&ds, 2.0, 9, false).unwrap();
        assert_ne!(ds.inputs(s0), inputs_only.inputs(s0));
        assert_eq!(ds.targets(s0), inputs_only.targets(s0));
    }

    #[test]
    fn noise_has_requested_variance() {
        // 2 nodes x ~60k steps of training reach gives > 1e5 noise draws.
        let ds = chronological_split(make_windows(&ramp(100_000), 12, 12, 288).unwrap(), (0.6, 0.2, 0.2))
            .unwrap();
        let noisy = add_gaussian_noise(&ds, 2.0, 1234, true).unwrap();
        let diff = injected_noise(&noisy).unwrap();
        let reach = ds.indices(Split::Train).end - 1 + 24;
        let draws: Vec<f64> = diff.slice(s![..reach, .., ..]).iter().copied().collect();
        assert!(draws.len() >= 100_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((1.9..=2.1).contains(&var), "empirical variance {var}");
        assert!(diff.slice(s![reach.., .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_is_seeded() {
        let ds = chronological_split(make_windows(&ramp(60), 4, 3, 7).unwrap(), (0.6, 0.2, 0.2)).unwrap();
        let a = add_gaussian_noise(&ds, 4.0, 5, true).unwrap();
        let b = add_gaussian_noise(&ds, 4.0, 5, true).unwrap();
        assert_eq!(injected_noise(&a), injected_noise(&b));
    }
}
