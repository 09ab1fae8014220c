//! Forecast error metrics and the historical-average baseline.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{SpeedSeries, WindowedDataset};
use crate::error::{input_err, Result};

/// `|truth|` below this is left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-6;

/// Errors at one forecast horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub horizon_steps: usize,
    pub horizon_minutes: u32,
    pub mae: f64,
    pub mape_percent: f64,
    pub rmse: f64,
    pub n_samples: usize,
    /// Entries dropped from MAPE because the truth was (near) zero.
    pub mape_excluded: usize,
}

/// MAE, RMSE and MAPE of `pred` against denormalized `truth`.
pub fn metrics(pred: &[f64], truth: &[f64], horizon_steps: usize, interval_minutes: u32) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(input_err!("{} predictions for {} truths", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(input_err!("metrics over an empty set"));
    }
    let n = pred.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_n = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        let e = p - t;
        abs_sum += e.abs();
        sq_sum += e * e;
        if t.abs() >= MAPE_FLOOR {
            pct_sum += e.abs() / t.abs();
            pct_n += 1;
        }
    }
    Ok(MetricReport {
        horizon_steps,
        horizon_minutes: horizon_steps as u32 * interval_minutes,
        mae: abs_sum / n,
        mape_percent: if pct_n > 0 { 100.0 * pct_sum / pct_n as f64 } else { 0.0 },
        rmse: (sq_sum / n).sqrt(),
        n_samples: pred.len(),
        mape_excluded: pred.len() - pct_n,
    })
}

/// Per-station time-of-day mean over the training days.
#[derive(Debug, Clone)]
pub struct HistoricalAverage {
    n: usize,
    /// `slots × n`; `None` where a slot was never observed.
    profile: Vec<Option<f64>>,
    station_mean: Vec<f64>,
}

impl HistoricalAverage {
    /// Fits the profile on every row covered by `train`'s segments.
    pub fn fit(train: &WindowedDataset) -> Result<Self> {
        let series = &train.source().raw;
        let rows: Vec<usize> = train.segments().iter().flat_map(|r| r.clone()).collect();
        Self::fit_rows(series, &rows)
    }

    pub fn fit_rows(series: &SpeedSeries, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(input_err!("historical average needs training rows"));
        }
        let n = series.n();
        let slots = (24 * 60 / series.interval_minutes as usize).max(1);
        let mut sums = vec![0.0; slots * n];
        let mut counts = vec![0usize; slots];
        let mut station_sum = vec![0.0; n];
        for &t in rows {
            let slot = series.slot_of(t);
            counts[slot] += 1;
            for (s, &v) in series.row(t).iter().enumerate() {
                sums[slot * n + s] += v;
                station_sum[s] += v;
            }
        }
        let profile = sums
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let c = counts[i / n];
                (c > 0).then(|| s / c as f64)
            })
            .collect();
        let station_mean = station_sum.iter().map(|s| s / rows.len() as f64).collect();
        Ok(Self { n, profile, station_mean })
    }

    /// Prediction for every station at time-of-day `slot`; unseen slots fall
    /// back to the station mean.
    pub fn predict_slot(&self, slot: usize) -> Vec<f64> {
        (0..self.n)
            .map(|s| {
                self.profile
                    .get(slot * self.n + s)
                    .copied()
                    .flatten()
                    .unwrap_or(self.station_mean[s])
            })
            .collect()
    }

    /// Predictions for target `step` of every window, flattened `windows × n`.
    pub fn predict(&self, dataset: &WindowedDataset, step: usize) -> Vec<f64> {
        let series = &dataset.source().raw;
        (0..dataset.len())
            .flat_map(|i| self.predict_slot(series.slot_of(dataset.target_row(i, step))))
            .collect()
    }
}

/// Predictions for every window of `dataset` at each listed horizon, using the
/// time-of-day profile of `train`.
pub fn historical_average(train: &WindowedDataset, dataset: &WindowedDataset, horizons: &[usize]) -> Result<Vec<Vec<f64>>> {
    let ha = HistoricalAverage::fit(train)?;
    Ok(horizons.iter().map(|&h| ha.predict(dataset, h)).collect())
}

/// Denormalized truths for target `step` of every window.
pub fn truths(dataset: &WindowedDataset, step: usize) -> Vec<f64> {
    let n = dataset.n();
    (0..dataset.len())
        .flat_map(|i| dataset.targets_raw(i)[(step - 1) * n..step * n].iter().copied())
        .collect()
}

/// One line of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub report: MetricReport,
}

pub const REPORT_HEADER: &str = "horizon_minutes,model,mae,mape,rmse,n";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.horizon_minutes, r.model, m.mae, m.mape_percent, m.rmse, m.n_samples
        );
    }
    out
}

pub fn report_table(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:>8}  {:<14} {:>9} {:>9} {:>9} {:>8}\n",
        "horizon", "model", "MAE", "MAPE(%)", "RMSE", "n"
    );
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{:>5}min  {:<14} {:>9.4} {:>9.3} {:>9.4} {:>8}",
            m.horizon_minutes, r.model, m.mae, m.mape_percent, m.rmse, m.n_samples
        );
    }
    out
}
