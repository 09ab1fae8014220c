use std::io::Read;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Weekday};

use crate::error::{input_err, Result, StgcnError};

/// Station speed readings on a regular time grid.
///
/// `values` is row-major `T × n`; `NaN` marks a missing reading.
/// Consecutive rows whose timestamps differ by more than one interval start a
/// new segment, and no window may span two segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSeries {
    pub station_ids: Vec<String>,
    pub timestamps: Option<Vec<NaiveDateTime>>,
    pub interval_minutes: u32,
    values: Vec<f64>,
    segments: Vec<Range<usize>>,
}

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn contiguous_segments(timestamps: Option<&[NaiveDateTime]>, len: usize, interval_minutes: u32) -> Vec<Range<usize>> {
    if len == 0 {
        return Vec::new();
    }
    let Some(ts) = timestamps else {
        return vec![0..len];
    };
    let step = chrono::Duration::minutes(i64::from(interval_minutes));
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..len {
        if ts[i] - ts[i - 1] != step {
            out.push(start..i);
            start = i;
        }
    }
    out.push(start..len);
    out
}

impl SpeedSeries {
    pub fn new(
        station_ids: Vec<String>,
        timestamps: Option<Vec<NaiveDateTime>>,
        interval_minutes: u32,
        values: Vec<f64>,
    ) -> Result<Self> {
        let n = station_ids.len();
        if n == 0 {
            return Err(input_err!("speed series needs at least one station"));
        }
        if interval_minutes == 0 {
            return Err(input_err!("sampling interval must be positive"));
        }
        if !values.len().is_multiple_of(n) {
            return Err(input_err!("{} values do not fill rows of {n} stations", values.len()));
        }
        let len = values.len() / n;
        if let Some(ts) = &timestamps {
            if ts.len() != len {
                return Err(input_err!("{} timestamps for {len} rows", ts.len()));
            }
            if ts.windows(2).any(|w| w[1] <= w[0]) {
                return Err(input_err!("timestamps must be strictly increasing"));
            }
        }
        let segments = contiguous_segments(timestamps.as_deref(), len, interval_minutes);
        Ok(Self {
            station_ids,
            timestamps,
            interval_minutes,
            values,
            segments,
        })
    }

    pub fn n(&self) -> usize {
        self.station_ids.len()
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.values.len() / self.n()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.n();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    /// Fills gaps per station by linear interpolation between the nearest
    /// observed neighbours; leading and trailing gaps copy the nearest
    /// observation.
    pub fn interpolate_missing(&self) -> Result<SpeedSeries> {
        let n = self.n();
        let len = self.len();
        let mut out = self.values.clone();
        for s in 0..n {
            let observed: Vec<usize> = (0..len).filter(|&t| !self.values[t * n + s].is_nan()).collect();
            let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
                if len == 0 {
                    continue;
                }
                return Err(input_err!("station {:?} has no observed values", self.station_ids[s]));
            };
            for t in 0..first {
                out[t * n + s] = self.values[first * n + s];
            }
            for t in last + 1..len {
                out[t * n + s] = self.values[last * n + s];
            }
            for pair in observed.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let (va, vb) = (self.values[a * n + s], self.values[b * n + s]);
                let span = (b - a) as f64;
                for t in a + 1..b {
                    let frac = (t - a) as f64 / span;
                    out[t * n + s] = va + (vb - va) * frac;
                }
            }
        }
        Ok(self.with_values(out))
    }

    /// Drops Saturday and Sunday rows; the remaining days form new segments.
    pub fn filter_workdays(&self) -> Result<SpeedSeries> {
        let ts = self
            .timestamps
            .as_ref()
            .ok_or_else(|| input_err!("workday filtering needs timestamps"))?;
        let n = self.n();
        let keep: Vec<usize> = (0..self.len())
            .filter(|&t| !matches!(ts[t].weekday(), Weekday::Sat | Weekday::Sun))
            .collect();
        let values = keep.iter().flat_map(|&t| self.row(t).iter().copied()).collect::<Vec<_>>();
        let timestamps: Vec<NaiveDateTime> = keep.iter().map(|&t| ts[t]).collect();
        let segments = contiguous_segments(Some(&timestamps), keep.len(), self.interval_minutes);
        debug_assert_eq!(values.len(), keep.len() * n);
        Ok(Self {
            station_ids: self.station_ids.clone(),
            timestamps: Some(timestamps),
            interval_minutes: self.interval_minutes,
            values,
            segments,
        })
    }

    /// Distinct calendar days in order, as row ranges. Without timestamps the
    /// rows are cut into blocks of one day's worth of intervals.
    pub fn day_ranges(&self) -> Vec<Range<usize>> {
        let len = self.len();
        match &self.timestamps {
            Some(ts) => {
                let mut out = Vec::new();
                let mut start = 0;
                for t in 1..len {
                    if ts[t].date() != ts[t - 1].date() {
                        out.push(start..t);
                        start = t;
                    }
                }
                if len > 0 {
                    out.push(start..len);
                }
                out
            }
            None => {
                let per_day = (24 * 60 / self.interval_minutes as usize).max(1);
                (0..len).step_by(per_day).map(|s| s..(s + per_day).min(len)).collect()
            }
        }
    }

    /// Time-of-day slot of row `t`.
    pub fn slot_of(&self, t: usize) -> usize {
        let per_day = (24 * 60 / self.interval_minutes as usize).max(1);
        match &self.timestamps {
            Some(ts) => {
                let minutes = ts[t].time().signed_duration_since(chrono::NaiveTime::MIN).num_minutes() as usize;
                (minutes / self.interval_minutes as usize) % per_day
            }
            None => t % per_day,
        }
    }
}

/// Reads a speed CSV: a `timestamp` column followed by one column per station.
/// Empty cells are missing readings.
pub fn read_speed_csv<R: Read>(reader: R, source: &str, interval_minutes: u32) -> Result<SpeedSeries> {
    let parse_err = |line: u64, message: String| StgcnError::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?
        .clone();
    if header.get(0) != Some("timestamp") || header.len() < 2 {
        return Err(parse_err(1, "expected header timestamp,<station ids...>".into()));
    }
    let station_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let ts = parse_timestamp(&row[0])
            .ok_or_else(|| parse_err(line, format!("bad timestamp {:?}", &row[0])))?;
        timestamps.push(ts);
        for cell in row.iter().skip(1) {
            if cell.is_empty() {
                values.push(f64::NAN);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(line, format!("speed {cell:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("speed {cell:?} is not finite")));
                }
                values.push(v);
            }
        }
    }
    SpeedSeries::new(station_ids, Some(timestamps), interval_minutes, values)
}

pub fn load_speed_csv(path: &Path, interval_minutes: u32) -> Result<SpeedSeries> {
    let file = std::fs::File::open(path).map_err(|e| StgcnError::io(path, e))?;
    read_speed_csv(file, &path.display().to_string(), interval_minutes)
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// Writes the series in the format accepted by [`read_speed_csv`].
pub fn write_speed_csv<W: std::io::Write>(series: &SpeedSeries, mut out: W) -> std::io::Result<()> {
    writeln!(out, "timestamp,{}", series.station_ids.join(","))?;
    for t in 0..series.len() {
        let ts = series
            .timestamps
            .as_ref()
            .map(|ts| format_timestamp(&ts[t]))
            .unwrap_or_else(|| t.to_string());
        let cells: Vec<String> = series
            .row(t)
            .iter()
            .map(|v| if v.is_nan() { String::new() } else { v.to_string() })
            .collect();
        writeln!(out, "{ts},{}", cells.join(","))?;
    }
    Ok(())
}
