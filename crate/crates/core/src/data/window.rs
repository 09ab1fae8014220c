use std::ops::Range;
use std::sync::Arc;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::series::SpeedSeries;
use crate::error::{input_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scalar Z-score statistics shared by all stations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: f64,
    /// Population standard deviation, clamped to 1 for constant data.
    pub std: f64,
}

impl ZScoreStats {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(input_err!("cannot fit normalization statistics on no data"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            std = 1.0;
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Normalizes `series`, fitting statistics on it when `stats` is absent.
pub fn zscore(series: &SpeedSeries, stats: Option<ZScoreStats>) -> Result<(SpeedSeries, ZScoreStats)> {
    let stats = match stats {
        Some(s) => s,
        None => ZScoreStats::fit(series.values())?,
    };
    let values = series.values().iter().map(|&v| stats.normalize(v)).collect();
    Ok((series.with_values(values), stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    /// Whole calendar days go to one split.
    Days,
    /// Individual time steps.
    Steps,
}

/// Chronological train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub unit: SplitUnit,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            unit: SplitUnit::Days,
        }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p >= 0.0)) || self.train <= 0.0 {
            return Err(input_err!("split ratios must be nonnegative with a positive train share"));
        }
        if ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(input_err!("split ratios must sum to 1, got {parts:?}"));
        }
        Ok(())
    }

    /// Sizes of the three splits over `units` items: train and validation are
    /// rounded, test takes the remainder.
    pub fn counts(&self, units: usize) -> [usize; 3] {
        let train = ((self.train * units as f64).round() as usize).min(units);
        let val = ((self.val * units as f64).round() as usize).min(units - train);
        [train, val, units - train - val]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Cleaned series with its normalized copy and the statistics used.
#[derive(Debug)]
pub struct PreparedSeries {
    pub raw: SpeedSeries,
    pub normalized: Vec<f64>,
    pub stats: ZScoreStats,
}

/// Sliding `(history, targets)` windows within one split.
///
/// Windows reference the shared prepared series; each starts inside one
/// contiguous segment and never crosses its end.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub split: Split,
    pub history: usize,
    pub horizon: usize,
    source: Arc<PreparedSeries>,
    segments: Vec<Range<usize>>,
    starts: Vec<usize>,
}

/// The three chronological splits of one series.
#[derive(Debug, Clone)]
pub struct SplitDatasets {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub stats: ZScoreStats,
}

impl SplitDatasets {
    pub fn source(&self) -> &Arc<PreparedSeries> {
        &self.train.source
    }
}

fn intersect(a: &Range<usize>, b: &Range<usize>) -> Option<Range<usize>> {
    let r = a.start.max(b.start)..a.end.min(b.end);
    (r.start < r.end).then_some(r)
}

/// Splits `series` chronologically, fits Z-score statistics on the training
/// rows only, and cuts stride-1 windows of `history + horizon` steps inside
/// every contiguous segment of every split.
pub fn make_windows(series: &SpeedSeries, history: usize, horizon: usize, split: &SplitSpec) -> Result<SplitDatasets> {
    if history == 0 || horizon == 0 {
        return Err(input_err!("history and horizon must be >= 1"));
    }
    if series.has_missing() {
        return Err(input_err!("series still has missing values; interpolate first"));
    }
    split.validate()?;
    let units: Vec<Range<usize>> = match split.unit {
        SplitUnit::Days => series.day_ranges(),
        SplitUnit::Steps => (0..series.len()).map(|t| t..t + 1).collect(),
    };
    let [n_train, n_val, _] = split.counts(units.len());
    let span = |from: usize, to: usize| -> Range<usize> {
        if from >= to {
            let at = units.get(from).map_or(series.len(), |u| u.start);
            at..at
        } else {
            units[from].start..units[to - 1].end
        }
    };
    let ranges = [
        span(0, n_train),
        span(n_train, n_train + n_val),
        span(n_train + n_val, units.len()),
    ];

    let n = series.n();
    let train_values = &series.values()[ranges[0].start * n..ranges[0].end * n];
    let stats = ZScoreStats::fit(train_values)?;
    let normalized = series.values().iter().map(|&v| stats.normalize(v)).collect();
    let source = Arc::new(PreparedSeries {
        raw: series.clone(),
        normalized,
        stats,
    });

    let need = history + horizon;
    let build = |which: Split, range: &Range<usize>| -> Result<WindowedDataset> {
        let segments: Vec<Range<usize>> = series
            .segments()
            .iter()
            .filter_map(|s| intersect(s, range))
            .collect();
        let mut starts = Vec::new();
        for seg in &segments {
            if seg.len() < need {
                return Err(input_err!(
                    "{which:?} segment of rows {}..{} has {} steps, fewer than M + H = {need}",
                    seg.start,
                    seg.end,
                    seg.len()
                ));
            }
            starts.extend(seg.start..=seg.end - need);
        }
        Ok(WindowedDataset {
            split: which,
            history,
            horizon,
            source: Arc::clone(&source),
            segments,
            starts,
        })
    };
    let train = build(Split::Train, &ranges[0])?;
    if train.is_empty() {
        return Err(input_err!("training split has no windows"));
    }
    Ok(SplitDatasets {
        train,
        val: build(Split::Val, &ranges[1])?,
        test: build(Split::Test, &ranges[2])?,
        stats,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn n(&self) -> usize {
        self.source.raw.n()
    }

    pub fn stats(&self) -> ZScoreStats {
        self.source.stats
    }

    pub fn source(&self) -> &Arc<PreparedSeries> {
        &self.source
    }

    /// Contiguous row ranges covered by this split.
    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    /// Row index of the first history step of window `i`.
    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    /// Row index of target step `step` (1-based) of window `i`.
    pub fn target_row(&self, i: usize, step: usize) -> usize {
        self.starts[i] + self.history + step - 1
    }

    pub fn target_timestamp(&self, i: usize, step: usize) -> Option<NaiveDateTime> {
        let row = self.target_row(i, step);
        self.source.raw.timestamps.as_ref().map(|ts| ts[row])
    }

    fn rows(&self, data: &[f64], from: usize, count: usize) -> std::ops::Range<usize> {
        let n = self.n();
        debug_assert!((from + count) * n <= data.len());
        from * n..(from + count) * n
    }

    /// Normalized history of window `i`, `M × n`.
    pub fn history_normalized(&self, i: usize) -> &[f64] {
        let r = self.rows(&self.source.normalized, self.starts[i], self.history);
        &self.source.normalized[r]
    }

    /// Normalized targets of window `i`, `H × n`.
    pub fn targets_normalized(&self, i: usize) -> &[f64] {
        let r = self.rows(&self.source.normalized, self.starts[i] + self.history, self.horizon);
        &self.source.normalized[r]
    }

    /// Cleaned (unnormalized) history, an exact slice of the input series.
    pub fn history_raw(&self, i: usize) -> &[f64] {
        let r = self.rows(self.source.raw.values(), self.starts[i], self.history);
        &self.source.raw.values()[r]
    }

    /// Cleaned (unnormalized) targets, an exact slice of the input series.
    pub fn targets_raw(&self, i: usize) -> &[f64] {
        let r = self.rows(self.source.raw.values(), self.starts[i] + self.history, self.horizon);
        &self.source.raw.values()[r]
    }

    /// Stacks windows `idx` into model input `[B, M, n, 1]` and the
    /// normalized target at `step` (1-based) as `[B, n, 1]`.
    pub fn batch<T: Scalar>(&self, idx: &[usize], step: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        if step == 0 || step > self.horizon {
            return Err(input_err!("target step {step} outside 1..={}", self.horizon));
        }
        let n = self.n();
        let mut x = Vec::with_capacity(idx.len() * self.history * n);
        let mut y = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            x.extend(self.history_normalized(i).iter().map(|&v| T::of(v)));
            let t = self.targets_normalized(i);
            y.extend(t[(step - 1) * n..step * n].iter().map(|&v| T::of(v)));
        }
        Ok((
            Tensor::new(&[idx.len(), self.history, n, 1], x)?,
            Tensor::new(&[idx.len(), n, 1], y)?,
        ))
    }

    /// Keeps only the first `count` windows (for quick experiments).
    pub fn truncated(&self, count: usize) -> Self {
        let mut out = self.clone();
        out.starts.truncate(count);
        out
    }

    /// The windows at positions `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let starts = idx
            .iter()
            .map(|&i| {
                self.starts
                    .get(i)
                    .copied()
                    .ok_or_else(|| input_err!("window {i} out of range ({} windows)", self.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { starts, ..self.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn steps(len: usize, n: usize) -> SpeedSeries {
        let values = (0..len * n).map(|i| i as f64 * 0.5).collect();
        SpeedSeries::new((0..n).map(|i| format!("s{i}")).collect(), None, 5, values).unwrap()
    }

    fn by_steps(train: f64, val: f64, test: f64) -> SplitSpec {
        SplitSpec { train, val, test, unit: SplitUnit::Steps }
    }

    #[test]
    fn zscore_examples() {
        let s = SpeedSeries::new(vec!["a".into()], None, 5, vec![1.0, 2.0, 3.0]).unwrap();
        let (z, stats) = zscore(&s, None).unwrap();
        assert_abs_diff_eq!(stats.mean, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.std, 0.816496580927726, epsilon = 1e-12);
        assert_abs_diff_eq!(z.values()[0], -1.224744871391589, epsilon = 1e-12);
        assert_abs_diff_eq!(z.values()[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(z.values()[2], 1.224744871391589, epsilon = 1e-12);

        let c = SpeedSeries::new(vec!["a".into()], None, 5, vec![0.1; 7]).unwrap();
        let (zc, cs) = zscore(&c, None).unwrap();
        assert_eq!(cs.std, 1.0);
        assert!(zc.values().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn zscore_round_trip() {
        let s = steps(10, 3);
        let (z, stats) = zscore(&s, None).unwrap();
        for (a, b) in z.values().iter().zip(s.values()) {
            assert_abs_diff_eq!(stats.denormalize(*a), *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn window_counts() {
        let d = make_windows(&steps(20, 2), 12, 3, &by_steps(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(d.train.len(), 6);
        let d = make_windows(&steps(15, 2), 12, 3, &by_steps(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(d.train.len(), 1);
        assert!(make_windows(&steps(14, 2), 12, 3, &by_steps(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn split_counts_match_enumeration() {
        let d = make_windows(&steps(100, 1), 12, 3, &by_steps(0.6, 0.2, 0.2)).unwrap();
        // Enumerate every start and keep those whose whole window sits in one split.
        let bounds = [0..60, 60..80, 80..100];
        let count = |r: &Range<usize>| (0..100).filter(|&s| s >= r.start && s + 15 <= r.end).count();
        assert_eq!(d.train.len(), count(&bounds[0]));
        assert_eq!(d.val.len(), count(&bounds[1]));
        assert_eq!(d.test.len(), count(&bounds[2]));
        assert_eq!((d.val.len(), d.test.len()), (6, 6));
    }

    #[test]
    fn statistics_come_from_training_rows() {
        let s = steps(100, 1);
        let d = make_windows(&s, 12, 3, &by_steps(0.6, 0.2, 0.2)).unwrap();
        let expected = ZScoreStats::fit(&s.values()[..60]).unwrap();
        assert_eq!(d.stats, expected);
        assert_eq!(d.val.stats(), expected);
        assert_eq!(d.test.stats(), expected);
    }

    #[test]
    fn raw_windows_are_exact_slices() {
        let s = steps(40, 3);
        let d = make_windows(&s, 4, 2, &by_steps(0.5, 0.25, 0.25)).unwrap();
        for ds in [&d.train, &d.val, &d.test] {
            for i in 0..ds.len() {
                let st = ds.start(i);
                assert_eq!(ds.history_raw(i), &s.values()[st * 3..(st + 4) * 3]);
                assert_eq!(ds.targets_raw(i), &s.values()[(st + 4) * 3..(st + 6) * 3]);
                for (z, r) in ds.history_normalized(i).iter().zip(ds.history_raw(i)) {
                    assert_abs_diff_eq!(ds.stats().denormalize(*z), *r, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_shapes_and_target_step() {
        let s = steps(30, 2);
        let d = make_windows(&s, 5, 3, &by_steps(1.0, 0.0, 0.0)).unwrap();
        let (x, y) = d.train.batch::<f64>(&[0, 4], 2).unwrap();
        assert_eq!(x.shape(), &[2, 5, 2, 1]);
        assert_eq!(y.shape(), &[2, 2, 1]);
        let t = d.train.targets_normalized(4);
        assert_eq!(&y.to_vec()[2..], &t[2..4]);
        assert!(d.train.batch::<f64>(&[0], 4).is_err());
    }
}
