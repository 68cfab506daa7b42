//! Series ingestion, chronological splits, windowing and normalization.

mod norm;
mod split;
mod synth;
mod window;

pub use norm::{
    denormalize, instance_normalize, standardize, ChannelStats, NormStats, INSTANCE_EPS, STD_GUARD,
};
pub use split::{split, SplitSpec};
pub use synth::{synth_generate, SynthSpec};
pub use window::{window_count, windows, Batch, WindowPair, WindowSet};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column {column}: cannot parse `{cell}` as a number")]
    Parse {
        row: usize,
        column: usize,
        cell: String,
    },
    #[error("row {row} has {got} cells, header has {expected}")]
    Ragged {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("row {row}, column {column}: missing value (enable forward fill to accept it)")]
    Missing { row: usize, column: usize },
    #[error("file has no channel columns")]
    NoChannels,
    #[error("channels have unequal lengths")]
    UnequalChannels,
    #[error("invalid split ratios {0:?}: need three non-negative values summing to 1")]
    BadRatios([f64; 3]),
    #[error("{region} region has {len} steps, needs at least {needed} (lookback + horizon)")]
    RegionTooShort {
        region: &'static str,
        len: usize,
        needed: usize,
    },
    #[error("window needs at least one step of context and horizon")]
    EmptyWindow,
    #[error("synthetic spec: {0}")]
    Synth(String),
}

/// Multivariate series stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    names: Vec<String>,
    channels: Vec<Vec<f64>>,
    pub frequency: String,
    /// index of the first step within the source series
    pub offset: usize,
}

impl SeriesFrame {
    pub fn new(
        names: Vec<String>,
        channels: Vec<Vec<f64>>,
        frequency: impl Into<String>,
    ) -> Result<Self, DataError> {
        if channels.is_empty() || names.len() != channels.len() {
            return Err(DataError::NoChannels);
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(DataError::UnequalChannels);
        }
        Ok(Self {
            names,
            channels,
            frequency: frequency.into(),
            offset: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    /// Contiguous sub-range `[start, end)` keeping provenance in `offset`.
    pub fn slice(&self, start: usize, end: usize) -> SeriesFrame {
        SeriesFrame {
            names: self.names.clone(),
            channels: self
                .channels
                .iter()
                .map(|c| c[start..end].to_vec())
                .collect(),
            frequency: self.frequency.clone(),
            offset: self.offset + start,
        }
    }

    pub fn map_channels(&self, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> SeriesFrame {
        SeriesFrame {
            names: self.names.clone(),
            channels: self
                .channels
                .iter()
                .enumerate()
                .map(|(i, c)| f(i, c))
                .collect(),
            frequency: self.frequency.clone(),
            offset: self.offset,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    /// Replace empty or NaN cells by the previous value in the column.
    pub forward_fill: bool,
    pub frequency: String,
}

/// Reads a timestamp-first CSV with a header row; every other column is a channel.
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<SeriesFrame, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, opts)
}

/// [`load_csv`] over any reader.
pub fn read_csv(reader: impl std::io::Read, opts: &CsvOptions) -> Result<SeriesFrame, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(DataError::NoChannels);
    }
    let names: Vec<String> = header
        .iter()
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    let mut channels = vec![Vec::new(); names.len()];
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // 1-based row numbers counting the header
        let row = i + 2;
        if record.len() != header.len() {
            return Err(DataError::Ragged {
                row,
                got: record.len(),
                expected: header.len(),
            });
        }
        for (c, cell) in record.iter().skip(1).enumerate() {
            let cell = cell.trim();
            let column = c + 2;
            let parsed = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|_| DataError::Parse {
                    row,
                    column,
                    cell: cell.to_string(),
                })?)
            };
            let value = match parsed {
                Some(v) if v.is_finite() => v,
                Some(_) | None => match (opts.forward_fill, channels[c].last()) {
                    (true, Some(&prev)) => prev,
                    _ => return Err(DataError::Missing { row, column }),
                },
            };
            channels[c].push(value);
        }
    }
    SeriesFrame::new(names, channels, opts.frequency.clone())
}

/// Writes `frame` as CSV with a `step` index column, readable by [`read_csv`].
pub fn write_csv(frame: &SeriesFrame, writer: impl std::io::Write) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(std::iter::once("step").chain(frame.names().iter().map(String::as_str)))?;
    for t in 0..frame.len() {
        let mut row = vec![(frame.offset + t).to_string()];
        row.extend(frame.channels().iter().map(|c| c[t].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<csv output>".into(),
        source,
    })
}
