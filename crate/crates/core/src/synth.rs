//! Synthetic traffic generator with spatially informative dynamics.
//!
//! Stations are scattered uniformly in a square. Each station's speed is a
//! base level plus a shared daily sinusoid (with a per-station phase) plus a
//! disturbance field that diffuses across the distance graph:
//!
//! ```text
//! d[t+1] = persistence · ((1 − α) d[t] + α P d[t]) + N(0, noise_std²)
//! ```
//!
//! where `P` is the renormalized propagation matrix of the thresholded
//! Gaussian-kernel graph built from the emitted distances.

use std::io::Write;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SpeedSeries;
use crate::error::{input_err, Result};
use crate::graph::io::DistanceTable;
use crate::graph::{build_adjacency_with_ids, normalized_laplacian, AdjacencyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub nodes: usize,
    pub workdays: usize,
    pub seed: u64,
    pub interval_minutes: u32,
    /// First calendar day; weekends after it are skipped.
    pub start_date: NaiveDate,
    /// Fraction of the disturbance exchanged with neighbours each step.
    pub diffusion: f64,
    pub persistence: f64,
    /// Daily sinusoid amplitude.
    pub amplitude: f64,
    /// Innovation standard deviation as a fraction of `amplitude`.
    pub noise_fraction: f64,
    pub base_min: f64,
    pub base_max: f64,
    /// Station area is a square of side `sqrt(area_per_node · nodes)`.
    pub area_per_node: f64,
    /// Only pairs closer than this are written to the distance file.
    pub max_listed_distance: f64,
    pub adjacency: AdjacencyConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 20,
            workdays: 40,
            seed: 42,
            interval_minutes: 5,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            diffusion: 0.3,
            persistence: 0.98,
            amplitude: 10.0,
            noise_fraction: 0.05,
            base_min: 55.0,
            base_max: 65.0,
            area_per_node: 5.5,
            max_listed_distance: 8.0,
            adjacency: AdjacencyConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.workdays == 0 {
            return Err(input_err!("synthetic data needs at least one node and one workday"));
        }
        if self.interval_minutes == 0 || 1440 % self.interval_minutes != 0 {
            return Err(input_err!("interval {} does not divide a day", self.interval_minutes));
        }
        if !(0.0..=1.0).contains(&self.diffusion) || !(0.0..1.0).contains(&self.persistence) {
            return Err(input_err!("diffusion must be in [0, 1] and persistence in [0, 1)"));
        }
        if !(self.noise_fraction >= 0.0 && self.amplitude >= 0.0 && self.base_max >= self.base_min) {
            return Err(input_err!("noise, amplitude and base range must be nonnegative"));
        }
        self.adjacency.validate()
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub series: SpeedSeries,
    pub distances: DistanceTable,
    pub positions: Vec<(f64, f64)>,
}

fn workdays(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    start
        .iter_days()
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .take(count)
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let n = cfg.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = (cfg.area_per_node * n as f64).sqrt();
    let positions: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random::<f64>() * side, rng.random::<f64>() * side))
        .collect();
    let ids: Vec<String> = (0..n).map(|i| format!("S{i:03}")).collect();

    let mut records = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (positions[i].0 - positions[j].0, positions[i].1 - positions[j].1);
            let d = (dx * dx + dy * dy).sqrt();
            if d < cfg.max_listed_distance {
                records.push((i, j, d));
            }
        }
    }
    let graph = build_adjacency_with_ids::<f64>(ids.clone(), &records, &cfg.adjacency)?;
    let propagation = normalized_laplacian(&graph)?.propagation;

    let base: Vec<f64> = (0..n).map(|_| rng.random_range(cfg.base_min..=cfg.base_max)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
    let noise = Normal::new(0.0, cfg.noise_fraction * cfg.amplitude).map_err(|e| input_err!("{e}"))?;

    let per_day = cfg.steps_per_day();
    let days = workdays(cfg.start_date, cfg.workdays);
    let mut timestamps = Vec::with_capacity(days.len() * per_day);
    let mut values = Vec::with_capacity(days.len() * per_day * n);
    let mut d = vec![0.0; n];
    for day in &days {
        let midnight = NaiveDateTime::new(*day, chrono::NaiveTime::MIN);
        for slot in 0..per_day {
            timestamps.push(midnight + Duration::minutes(i64::from(cfg.interval_minutes) * slot as i64));
            let angle = std::f64::consts::TAU * slot as f64 / per_day as f64;
            for s in 0..n {
                values.push(base[s] + cfg.amplitude * (angle + phase[s]).sin() + d[s]);
            }
            let mixed = propagation.matvec(&d)?;
            for s in 0..n {
                let diffused = (1.0 - cfg.diffusion) * d[s] + cfg.diffusion * mixed[s];
                d[s] = cfg.persistence * diffused + noise.sample(&mut rng);
            }
        }
    }
    let series = SpeedSeries::new(ids.clone(), Some(timestamps), cfg.interval_minutes, values)?;
    Ok(SynthData {
        series,
        distances: DistanceTable { node_ids: ids, records },
        positions,
    })
}

/// Writes `from,to,distance` rows with station ids.
pub fn write_distances<W: Write>(table: &DistanceTable, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["from", "to", "distance"])?;
    for &(i, j, d) in &table.records {
        w.write_record([table.node_ids[i].as_str(), table.node_ids[j].as_str(), &d.to_string()])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::io::read_distances;

    fn small() -> SynthConfig {
        SynthConfig { nodes: 6, workdays: 3, ..Default::default() }
    }

    #[test]
    fn shape_and_calendar() {
        let data = generate(&small()).unwrap();
        let s = &data.series;
        assert_eq!((s.n(), s.len()), (6, 3 * 288));
        let ts = s.timestamps.as_ref().unwrap();
        assert!(ts.iter().all(|t| !matches!(t.weekday(), Weekday::Sat | Weekday::Sun)));
        assert!(s.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn weekend_gap_splits_segments() {
        let cfg = SynthConfig { nodes: 2, workdays: 6, ..Default::default() };
        let s = generate(&cfg).unwrap().series;
        // Mon..Fri then the following Monday.
        assert_eq!(s.segments(), &[0..5 * 288, 5 * 288..6 * 288]);
    }

    #[test]
    fn seeded() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.distances, b.distances);
        let c = generate(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.series, c.series);
    }

    #[test]
    fn distances_round_trip() {
        let data = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_distances(&data.distances, &mut buf).unwrap();
        let back = read_distances(buf.as_slice(), "mem", Some(&data.distances.node_ids)).unwrap();
        assert_eq!(back, data.distances);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig { nodes: 0, ..small() }).is_err());
        assert!(generate(&SynthConfig { interval_minutes: 7, ..small() }).is_err());
        assert!(generate(&SynthConfig { persistence: 1.0, ..small() }).is_err());
    }
}
