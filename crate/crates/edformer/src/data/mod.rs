//! CSV ingestion, z-score standardization fit on the training split,
//! chronological splitting, and sliding-window dataset construction.

pub mod synthetic;

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::series::SeriesBatch;

/// A loaded dataset: `[rows, cols]` values plus column names and optional
/// timestamps.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub variate_names: Vec<String>,
    /// Row-major `[rows, cols]`.
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub timestamps: Option<Vec<String>>,
}

impl RawDataset {
    pub fn value(&self, t: usize, n: usize) -> f64 {
        self.values[t * self.cols + n]
    }
}

/// Load a CSV with a header row. The first column is treated as a timestamp
/// when its first data cell does not parse as a number; otherwise every
/// column is a variate.
pub fn load_csv(path: &Path) -> Result<RawDataset> {
    if !path.exists() {
        return Err(Error::MissingDataset {
            path: path.to_path_buf(),
        });
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::CsvRagged {
                row: i + 2,
                got: *len as usize,
                expected: *expected_len as usize,
            },
            _ => Error::Csv(e),
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptySeries);
    }

    let first_cell_numeric = records[0]
        .get(0)
        .is_some_and(|c| c.trim().parse::<f64>().is_ok());
    let value_start = usize::from(!first_cell_numeric);
    let cols = headers.len() - value_start;
    if cols == 0 {
        return Err(Error::Config("CSV has no value columns".into()));
    }

    let mut values = Vec::with_capacity(records.len() * cols);
    let mut timestamps = (!first_cell_numeric).then(|| Vec::with_capacity(records.len()));
    for (i, rec) in records.iter().enumerate() {
        if let Some(ts) = timestamps.as_mut() {
            ts.push(rec.get(0).unwrap_or("").to_string());
        }
        for (j, cell) in rec.iter().enumerate().skip(value_start) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                row: i + 2,
                col: j + 1,
                cell: cell.to_string(),
            })?;
            values.push(v);
        }
    }

    Ok(RawDataset {
        variate_names: headers[value_start..].to_vec(),
        rows: records.len(),
        cols,
        values,
        timestamps,
    })
}

/// Contiguous, ordered, non-overlapping row ranges for train/val/test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Split `total` rows chronologically by ratio. Every split must be at least
/// `lookback + horizon` rows long.
pub fn split_chronological(
    total: usize,
    ratios: (f64, f64, f64),
    lookback: usize,
    horizon: usize,
) -> Result<SplitRanges> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 {
        return Err(Error::Config(format!(
            "split ratios must all be positive, got ({rt}, {rv}, {rs})"
        )));
    }
    if rt + rv + rs > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split ratios must sum to at most 1, got {}",
            rt + rv + rs
        )));
    }
    let train_len = (total as f64 * rt).floor() as usize;
    let val_len = (total as f64 * rv).floor() as usize;
    let test_len = if (rt + rv + rs - 1.0).abs() <= 1e-12 {
        total - train_len - val_len
    } else {
        (total as f64 * rs).floor() as usize
    };
    split_with_lengths(total, (train_len, val_len, test_len), lookback, horizon)
}

/// Split with explicit per-split lengths (dataset-specific overrides).
pub fn split_with_lengths(
    total: usize,
    lengths: (usize, usize, usize),
    lookback: usize,
    horizon: usize,
) -> Result<SplitRanges> {
    let (train_len, val_len, test_len) = lengths;
    if train_len + val_len + test_len > total {
        return Err(Error::Config(format!(
            "split lengths {}+{}+{} exceed dataset rows {total}",
            train_len, val_len, test_len
        )));
    }
    let min = lookback + horizon;
    for (name, len) in [("train", train_len), ("val", val_len), ("test", test_len)] {
        if len < min {
            return Err(Error::SplitTooShort { name, len, min });
        }
    }
    Ok(SplitRanges {
        train: 0..train_len,
        val: train_len..train_len + val_len,
        test: train_len + val_len..train_len + val_len + test_len,
    })
}

/// Per-variate mean/std fit on the training rows (population std, floored at
/// 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct DataStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl DataStats {
    pub fn fit(values: &[f64], cols: usize, train: Range<usize>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySeries);
        }
        let count = train.len() as f64;
        let mut means = vec![0.0; cols];
        for t in train.clone() {
            for (n, m) in means.iter_mut().enumerate() {
                *m += values[t * cols + n];
            }
        }
        for m in means.iter_mut() {
            *m /= count;
        }
        let mut stds = vec![0.0; cols];
        for t in train {
            for (n, s) in stds.iter_mut().enumerate() {
                let d = values[t * cols + n] - means[n];
                *s += d * d;
            }
        }
        for s in stds.iter_mut() {
            *s = (*s / count).sqrt().max(STD_FLOOR);
        }
        Ok(DataStats { means, stds })
    }

    /// Standardize a whole `[rows, cols]` matrix.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let cols = self.means.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.means[i % cols]) / self.stds[i % cols])
            .collect()
    }

    /// Inverse transform: standardized -> original units.
    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        let cols = self.means.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.stds[i % cols] + self.means[i % cols])
            .collect()
    }
}

/// One training example: a lookback window and its forecast target, both in
/// standardized units. `t0` is the forecast origin (first target row).
#[derive(Debug, Clone)]
pub struct WindowPair {
    pub t0: usize,
    pub input: SeriesBatch,
    pub target: SeriesBatch,
}

/// Build sliding windows whose forecast origins lie inside `range`. Window
/// inputs may reach back before `range.start` (border lookback), but never
/// before row 0. Windows are ordered by ascending `t0`.
pub fn make_windows(
    values: &[f64],
    cols: usize,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    if range.len() < horizon {
        return Err(Error::SplitTooShort {
            name: "window range",
            len: range.len(),
            min: horizon,
        });
    }
    let stride = stride.max(1);
    let first = range.start.max(lookback);
    let last = range.end - horizon; // inclusive
    let mut out = Vec::new();
    let mut t0 = first;
    while t0 <= last {
        let input: Vec<f64> = values[(t0 - lookback) * cols..t0 * cols].to_vec();
        let target: Vec<f64> = values[t0 * cols..(t0 + horizon) * cols].to_vec();
        out.push(WindowPair {
            t0,
            input: SeriesBatch::new(1, lookback, cols, input)?,
            target: SeriesBatch::new(1, horizon, cols, target)?,
        });
        t0 += stride;
    }
    Ok(out)
}

/// Stack a set of windows into `(inputs, targets)` batches.
pub fn batch_windows(windows: &[&WindowPair]) -> Result<(SeriesBatch, SeriesBatch)> {
    let inputs: Vec<&SeriesBatch> = windows.iter().map(|w| &w.input).collect();
    let targets: Vec<&SeriesBatch> = windows.iter().map(|w| &w.target).collect();
    Ok((SeriesBatch::stack(&inputs)?, SeriesBatch::stack(&targets)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_with_date_column() {
        let f = write_csv("date,a,b\n2020-01-01,1.0,2.0\n2020-01-02,3.0,4.0\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.cols, 2);
        assert_eq!(ds.variate_names, vec!["a", "b"]);
        assert_eq!(ds.rows, 2);
        assert_eq!(ds.value(1, 0), 3.0);
        assert_eq!(ds.timestamps.as_ref().unwrap()[0], "2020-01-01");
    }

    #[test]
    fn csv_all_numeric_columns() {
        let f = write_csv("x,y,z\n1,2,3\n4,5,6\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.cols, 3);
        assert!(ds.timestamps.is_none());
    }

    #[test]
    fn csv_bad_cell_reports_row_and_column() {
        let f = write_csv("date,a,b\n2020-01-01,1.0,2.0\n2020-01-02,abc,4.0\n");
        let err = load_csv(f.path()).unwrap_err();
        match err {
            Error::CsvCell { row, col, cell } => {
                assert_eq!((row, col), (3, 2));
                assert_eq!(cell, "abc");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_ragged_row_is_an_error() {
        let f = write_csv("a,b\n1,2\n3\n");
        assert!(matches!(load_csv(f.path()).unwrap_err(), Error::CsvRagged { row: 3, .. }));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_csv(Path::new("/nonexistent/data.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/data.csv"));
        assert!(err.is_usage());
    }

    #[test]
    fn split_ratio_lengths() {
        let s = split_chronological(100, (0.7, 0.1, 0.2), 4, 2).unwrap();
        assert_eq!(s.train, 0..70);
        assert_eq!(s.val, 70..80);
        assert_eq!(s.test, 80..100);
    }

    #[test]
    fn degenerate_ratio_is_an_error() {
        assert!(split_chronological(100, (1.0, 0.0, 0.0), 4, 2).is_err());
    }

    #[test]
    fn short_split_is_an_error() {
        // val gets 1 row < L + H
        let err = split_chronological(20, (0.7, 0.05, 0.25), 4, 2).unwrap_err();
        assert!(matches!(err, Error::SplitTooShort { name: "val", .. }));
    }

    #[test]
    fn standardize_hand_case() {
        // train slice {0, 2}: mean 1, population std 1
        let values = vec![0.0, 2.0, 5.0]; // one variate, three rows
        let stats = DataStats::fit(&values, 1, 0..2).unwrap();
        assert_eq!(stats.means, vec![1.0]);
        assert_eq!(stats.stds, vec![1.0]);
        let std = stats.apply(&values);
        assert_eq!(&std[..2], &[-1.0, 1.0]);
    }

    #[test]
    fn constant_variate_floors_std() {
        let values = vec![3.0; 10];
        let stats = DataStats::fit(&values, 1, 0..10).unwrap();
        assert_eq!(stats.stds, vec![STD_FLOOR]);
        let std = stats.apply(&values);
        assert!(std.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_split_standardizes_to_zero_mean() {
        let mut values = Vec::new();
        for t in 0..50 {
            values.push((t as f64 * 0.37).sin() + 2.0);
            values.push(t as f64 * 0.01 - 1.0);
        }
        let stats = DataStats::fit(&values, 2, 0..40).unwrap();
        let std = stats.apply(&values);
        for n in 0..2 {
            let mean: f64 = (0..40).map(|t| std[t * 2 + n]).sum::<f64>() / 40.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn standardize_round_trip(
            vals in proptest::collection::vec(-100.0f64..100.0, 20..200),
        ) {
            let stats = DataStats::fit(&vals, 1, 0..vals.len()).unwrap();
            let fwd = stats.apply(&vals);
            let back = stats.invert(&fwd);
            for (orig, rec) in vals.iter().zip(&back) {
                prop_assert!((orig - rec).abs() < 1e-9);
            }
        }

        #[test]
        fn windows_never_leak_future_data(
            total in 30usize..120,
            lookback in 1usize..10,
            horizon in 1usize..8,
            stride in 1usize..4,
        ) {
            let values: Vec<f64> = (0..total).map(|t| t as f64).collect();
            let range = (total / 3)..total;
            let windows = make_windows(&values, 1, range.clone(), lookback, horizon, stride).unwrap();
            prop_assert!(!windows.is_empty());
            for w in &windows {
                // max index referenced by the input < min index of the target
                let max_in = w.input.data().iter().fold(f64::MIN, |a, &b| a.max(b)) as usize;
                let min_tgt = w.target.data().iter().fold(f64::MAX, |a, &b| a.min(b)) as usize;
                prop_assert!(max_in < min_tgt);
                prop_assert!(range.contains(&w.t0));
            }
        }
    }

    #[test]
    fn window_count_matches_enumeration() {
        let values: Vec<f64> = (0..40).map(|t| t as f64).collect();
        // range of length H -> exactly one window
        let one = make_windows(&values, 1, 30..33, 8, 3, 1).unwrap();
        assert_eq!(one.len(), 1);
        // range length H + 2 with stride 1 -> 3 windows
        let three = make_windows(&values, 1, 30..35, 8, 3, 1).unwrap();
        assert_eq!(three.len(), 3);
        // stride 2 halves the count, rounded up
        let strided = make_windows(&values, 1, 30..35, 8, 3, 2).unwrap();
        assert_eq!(strided.len(), 2);
        // border lookback: split of length len yields len - H + 1 windows
        let split = 20..40;
        let w = make_windows(&values, 1, split.clone(), 8, 3, 1).unwrap();
        assert_eq!(w.len(), split.len() - 3 + 1);
        // first window's input reaches back into earlier rows
        assert_eq!(w[0].input.data()[0], (split.start - 8) as f64);
    }

    #[test]
    fn splits_are_disjoint_and_ordered() {
        let s = split_chronological(200, (0.6, 0.2, 0.2), 8, 4).unwrap();
        assert!(s.train.end <= s.val.start && s.val.end <= s.test.start);
        let train_w = make_windows(&vec![0.0; 200], 1, s.train.clone(), 8, 4, 1).unwrap();
        let test_w = make_windows(&vec![0.0; 200], 1, s.test.clone(), 8, 4, 1).unwrap();
        let max_train_target = train_w.iter().map(|w| w.t0 + 4).max().unwrap();
        let min_test_target = test_w.iter().map(|w| w.t0).min().unwrap();
        assert!(max_train_target <= min_test_target);
    }
}
