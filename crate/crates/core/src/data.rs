//! CSV ingestion, chronological splitting, standardization, sliding-window
//! sampling, and a synthetic heteroscedastic generator with known noise
//! ground truth.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numgrad::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("empty csv file")]
    EmptyFile,
    #[error("csv header needs a timestamp column plus at least one variable")]
    HeaderTooNarrow,
    #[error("row {row} has {got} columns, expected {want}")]
    RaggedRow { row: usize, want: usize, got: usize },
    #[error("unparseable cell at row {row}, column {col} ({name:?}): {value:?}")]
    BadCell {
        row: usize,
        col: usize,
        name: String,
        value: String,
    },
    #[error("split fractions must be positive and sum to at most 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("split row counts {0:?} exceed series length {1}")]
    RowsTooLong([usize; 3], usize),
    #[error("partition {name} has {len} rows, needs at least {min}")]
    PartitionTooShort {
        name: &'static str,
        len: usize,
        min: usize,
    },
    #[error("variable {0:?} is constant on the train partition")]
    ConstantVariable(String),
    #[error("range of length {len} is too short for lookback {lookback} + horizon {horizon}")]
    RangeTooShort {
        len: usize,
        lookback: usize,
        horizon: usize,
    },
    #[error("synthetic spec needs n >= 1 and v >= 1, got n={n}, v={v}")]
    BadSynthSize { n: usize, v: usize },
    #[error("invalid value for {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
}

/// A parsed multivariate series: `values` is N x V, rows in time order.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub timestamps: Vec<String>,
    pub values: Tensor,
    pub variable_names: Vec<String>,
}

impl RawSeries {
    pub fn num_rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_variables(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Reads a CSV whose first column is an opaque timestamp and whose remaining
/// columns are decimal values. Row order is preserved.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<RawSeries, DataError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or(DataError::EmptyFile)?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 2 {
        return Err(DataError::HeaderTooNarrow);
    }
    let variable_names: Vec<String> = columns[1..].iter().map(|s| s.to_string()).collect();
    let num_vars = variable_names.len();

    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    // Rows are numbered from 1 at the first data row.
    for (row_idx, line) in lines.enumerate() {
        let row = row_idx + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != num_vars + 1 {
            return Err(DataError::RaggedRow {
                row,
                want: num_vars + 1,
                got: cells.len(),
            });
        }
        timestamps.push(cells[0].to_string());
        for (j, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::BadCell {
                row,
                col: j + 2,
                name: variable_names[j].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::BadCell {
                    row,
                    col: j + 2,
                    name: variable_names[j].clone(),
                    value: cell.to_string(),
                });
            }
            data.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(DataError::EmptyFile);
    }
    let values = Tensor::new(vec![timestamps.len(), num_vars], data)
        .expect("dimensions counted during parse");
    Ok(RawSeries {
        timestamps,
        values,
        variable_names,
    })
}

/// Writes a series in the same format `load_csv` reads. Values use the
/// shortest representation that round-trips bit-exactly.
pub fn write_csv(path: impl AsRef<Path>, series: &RawSeries) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, series_to_csv(series)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn series_to_csv(series: &RawSeries) -> String {
    let mut out = String::from("timestamp");
    for name in &series.variable_names {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    let v = series.num_variables();
    for (i, ts) in series.timestamps.iter().enumerate() {
        let _ = write!(out, "{ts}");
        for j in 0..v {
            let _ = write!(out, ",{}", series.values.data()[i * v + j]);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Fractions of the series length, applied cumulatively with floor.
    Ratio { train: f64, val: f64, test: f64 },
    /// Exact row counts, the convention used by public forecasting benchmarks.
    Rows { train: usize, val: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratio {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous, time-ordered train/val/test index ranges. `min_len` is the
/// minimum admissible partition length (lookback + horizon for the train
/// partition; callers with overhang may pass the horizon only).
pub fn chronological_split(
    num_rows: usize,
    spec: &SplitSpec,
    min_train_len: usize,
    min_eval_len: usize,
) -> Result<SplitRanges, DataError> {
    let (n_train, n_val, n_test) = match *spec {
        SplitSpec::Ratio { train, val, test } => {
            let fr = [train, val, test];
            if fr.iter().any(|f| *f <= 0.0) || fr.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(DataError::BadFractions(fr));
            }
            let n = num_rows as f64;
            let t = (n * train).floor() as usize;
            let v = (n * (train + val)).floor() as usize - t;
            let e = (n * (train + val + test)).floor() as usize - t - v;
            (t, v, e)
        }
        SplitSpec::Rows { train, val, test } => {
            if train + val + test > num_rows {
                return Err(DataError::RowsTooLong([train, val, test], num_rows));
            }
            (train, val, test)
        }
    };
    for (name, len, min) in [
        ("train", n_train, min_train_len),
        ("val", n_val, min_eval_len),
        ("test", n_test, min_eval_len),
    ] {
        if len < min {
            return Err(DataError::PartitionTooShort { name, len, min });
        }
    }
    Ok(SplitRanges {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..n_train + n_val + n_test,
    })
}

/// Per-variable mean and standard deviation, computed on the train partition
/// only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over `rows` of the series; constant columns are
    /// rejected by name.
    pub fn from_rows(series: &RawSeries, rows: Range<usize>) -> Result<Self, DataError> {
        let v = series.num_variables();
        let n = rows.len();
        if n == 0 {
            return Err(DataError::PartitionTooShort {
                name: "train",
                len: 0,
                min: 1,
            });
        }
        let data = series.values.data();
        let mut mean = vec![0.0; v];
        for i in rows.clone() {
            for j in 0..v {
                mean[j] += data[i * v + j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut std = vec![0.0; v];
        for i in rows {
            for j in 0..v {
                let d = data[i * v + j] - mean[j];
                std[j] += d * d;
            }
        }
        for (j, s) in std.iter_mut().enumerate() {
            *s = (*s / n as f64).sqrt();
            if *s <= 0.0 {
                return Err(DataError::ConstantVariable(series.variable_names[j].clone()));
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn standardize(&self, values: &Tensor) -> Tensor {
        self.transform(values, |x, m, s| (x - m) / s)
    }

    /// Inverse transform, for reporting in raw units.
    pub fn destandardize(&self, values: &Tensor) -> Tensor {
        self.transform(values, |z, m, s| z * s + m)
    }

    fn transform(&self, values: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let v = self.mean.len();
        debug_assert_eq!(values.shape().last(), Some(&v));
        let data = values
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let j = idx % v;
                f(x, self.mean[j], self.std[j])
            })
            .collect();
        Tensor::new(values.shape().to_vec(), data).expect("shape unchanged")
    }
}

/// One (lookback-input, horizon-target) pair cut from a standardized series.
/// `origin` is the absolute index of the first input row, so the target
/// covers rows `origin + lookback .. origin + lookback + horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: Tensor,
    pub target: Tensor,
    pub origin: usize,
}

/// Windows fully contained in `range`: one sample per valid origin,
/// `range.len() - lookback - horizon + 1` in total at stride 1.
pub fn make_windows(
    values: &Tensor,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>, DataError> {
    let len = range.len();
    if len < lookback + horizon {
        return Err(DataError::RangeTooShort {
            len,
            lookback,
            horizon,
        });
    }
    let stride = stride.max(1);
    let windows = (range.start..=range.end - lookback - horizon)
        .step_by(stride)
        .map(|origin| cut_window(values, origin, lookback, horizon))
        .collect();
    Ok(windows)
}

/// Windows whose targets are fully contained in `range` but whose inputs may
/// reach back before `range.start` (the conventional lookback overhang at
/// validation/test partition starts).
pub fn make_windows_overhang(
    values: &Tensor,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>, DataError> {
    if range.len() < horizon {
        return Err(DataError::RangeTooShort {
            len: range.len(),
            lookback,
            horizon,
        });
    }
    let stride = stride.max(1);
    let first_target = range.start.max(lookback);
    if first_target + horizon > range.end {
        return Err(DataError::RangeTooShort {
            len: range.len(),
            lookback,
            horizon,
        });
    }
    let windows = (first_target..=range.end - horizon)
        .step_by(stride)
        .map(|target_start| cut_window(values, target_start - lookback, lookback, horizon))
        .collect();
    Ok(windows)
}

fn cut_window(values: &Tensor, origin: usize, lookback: usize, horizon: usize) -> WindowSample {
    let v = values.shape()[1];
    let input = Tensor::new(
        vec![lookback, v],
        values.data()[origin * v..(origin + lookback) * v].to_vec(),
    )
    .expect("contiguous rows");
    let start = origin + lookback;
    let target = Tensor::new(
        vec![horizon, v],
        values.data()[start * v..(start + horizon) * v].to_vec(),
    )
    .expect("contiguous rows");
    WindowSample {
        input,
        target,
        origin,
    }
}

/// Everything the training loop needs, derived from one series and one split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stats: NormStats,
    pub ranges: SplitRanges,
    /// The full series in standardized units.
    pub standardized: Tensor,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Split, standardize with train-only statistics, and window each partition.
/// Validation and test windows use the lookback overhang convention.
pub fn prepare(
    series: &RawSeries,
    split: &SplitSpec,
    lookback: usize,
    horizon: usize,
) -> Result<PreparedData, DataError> {
    let ranges = chronological_split(series.num_rows(), split, lookback + horizon, horizon)?;
    let stats = NormStats::from_rows(series, ranges.train.clone())?;
    let standardized = stats.standardize(&series.values);
    let train = make_windows(&standardized, ranges.train.clone(), lookback, horizon, 1)?;
    let val = make_windows_overhang(&standardized, ranges.val.clone(), lookback, horizon, 1)?;
    let test = make_windows_overhang(&standardized, ranges.test.clone(), lookback, horizon, 1)?;
    Ok(PreparedData {
        stats,
        ranges,
        standardized,
        train,
        val,
        test,
    })
}

/// Configuration for the synthetic heteroscedastic generator.
///
/// Each variable is a sum of two sinusoids plus Gaussian noise whose standard
/// deviation is itself sinusoidally modulated between `sigma_min` and
/// `sigma_max`, in phase with the variable's dominant sinusoid. The noise
/// level at any time is therefore decodable from the lookback window, which
/// is what makes the generator a usable oracle for aleatoric recovery.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub v: usize,
    pub seed: u64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Period of variable 0's dominant sinusoid; variable v adds `16 * v`.
    pub base_period: f64,
}

impl SynthSpec {
    pub fn new(n: usize, v: usize, seed: u64) -> Self {
        SynthSpec {
            n,
            v,
            seed,
            sigma_min: 0.05,
            sigma_max: 0.5,
            base_period: 48.0,
        }
    }
}

/// Generates the series plus the true noise sigma per cell (N x V), fully
/// reproducible from the seed.
pub fn synth_heteroscedastic(spec: &SynthSpec) -> Result<(RawSeries, Tensor), DataError> {
    if spec.n == 0 || spec.v == 0 {
        return Err(DataError::BadSynthSize { n: spec.n, v: spec.v });
    }
    if spec.sigma_min < 0.0 || spec.sigma_max < spec.sigma_min {
        return Err(DataError::Invalid {
            what: "noise profile",
            msg: format!(
                "need 0 <= sigma_min <= sigma_max, got [{}, {}]",
                spec.sigma_min, spec.sigma_max
            ),
        });
    }
    if !(spec.base_period > 1.0) {
        return Err(DataError::Invalid {
            what: "base_period",
            msg: format!("must exceed 1, got {}", spec.base_period),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tau = std::f64::consts::TAU;
    // Per-variable phases drawn up front so the noise stream below stays
    // aligned for any fixed (n, v).
    let phases: Vec<(f64, f64)> = (0..spec.v)
        .map(|_| {
            let a: f64 = rand::Rng::random_range(&mut rng, 0.0..tau);
            let b: f64 = rand::Rng::random_range(&mut rng, 0.0..tau);
            (a, b)
        })
        .collect();

    let mut values = vec![0.0; spec.n * spec.v];
    let mut sigma = vec![0.0; spec.n * spec.v];
    for t in 0..spec.n {
        for j in 0..spec.v {
            let p1 = spec.base_period + 16.0 * j as f64;
            let p2 = p1 / 4.0;
            let (phi1, phi2) = phases[j];
            let carrier = (tau * t as f64 / p1 + phi1).sin();
            let signal = carrier + 0.5 * (tau * t as f64 / p2 + phi2).sin();
            let s = spec.sigma_min
                + (spec.sigma_max - spec.sigma_min) * (0.5 + 0.5 * carrier);
            let z: f64 = StandardNormal.sample(&mut rng);
            values[t * spec.v + j] = signal + s * z;
            sigma[t * spec.v + j] = s;
        }
    }
    let series = RawSeries {
        timestamps: (0..spec.n).map(|t| t.to_string()).collect(),
        values: Tensor::new(vec![spec.n, spec.v], values).expect("sized above"),
        variable_names: (0..spec.v).map(|j| format!("var{j}")).collect(),
    };
    let sigma = Tensor::new(vec![spec.n, spec.v], sigma).expect("sized above");
    Ok((series, sigma))
}
