//! Speed series ingestion, cleaning, normalization and windowing.

mod series;
mod window;

pub use series::{format_timestamp, load_speed_csv, parse_timestamp, read_speed_csv, write_speed_csv, SpeedSeries};
pub use window::{
    make_windows, zscore, PreparedSeries, Split, SplitDatasets, SplitSpec, SplitUnit, WindowedDataset, ZScoreStats,
};
