//! Time series, corpora, date features, chronological splits and training
//! window sampling.

mod features;
mod ingest;
mod split;
mod synth;
mod windows;

pub use features::{derive_date_features, DateFeatures, MASKED};
pub use ingest::{ingest_csv, parse_timestamp, IngestOptions, IngestReport, SkippedSeries};
pub use split::{chronological_split, SplitSpec};
pub use synth::{synth_corpus, Family, ParamBand, Partition, SynthGroup, SynthSpec};
pub use windows::{sample_training_windows, validation_windows, Mixture, TrainingWindow, WindowShape};

use std::fmt;
use std::str::FromStr;

use chrono::{Duration, Months, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("calendar arithmetic failed: {0}")]
    Calendar(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("series {id}: {message}")]
    Stride { id: String, message: String },
    #[error("invalid series {id}: {message}")]
    InvalidSeries { id: String, message: String },
    #[error("series of length {0} is too short to split (need at least 10)")]
    TooShortToSplit(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Fixed time stride between consecutive points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "15min")]
    Min15,
    #[serde(rename = "hourly")]
    Hourly,
    #[serde(rename = "daily")]
    Daily,
    #[serde(rename = "weekly")]
    Weekly,
    #[serde(rename = "monthly")]
    Monthly,
}

impl Granularity {
    pub const ALL: [Granularity; 5] = [
        Granularity::Min15,
        Granularity::Hourly,
        Granularity::Daily,
        Granularity::Weekly,
        Granularity::Monthly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Min15 => "15min",
            Granularity::Hourly => "hourly",
            Granularity::Daily => "daily",
            Granularity::Weekly => "weekly",
            Granularity::Monthly => "monthly",
        }
    }

    /// Longest training context: 512 up to daily, 256 weekly, 64 monthly.
    pub fn max_context(self) -> usize {
        match self {
            Granularity::Min15 | Granularity::Hourly | Granularity::Daily => 512,
            Granularity::Weekly => 256,
            Granularity::Monthly => 64,
        }
    }

    fn fixed_stride(self) -> Option<Duration> {
        match self {
            Granularity::Min15 => Some(Duration::minutes(15)),
            Granularity::Hourly => Some(Duration::hours(1)),
            Granularity::Daily => Some(Duration::days(1)),
            Granularity::Weekly => Some(Duration::weeks(1)),
            Granularity::Monthly => None,
        }
    }

    /// `t` moved forward by `steps` strides.
    pub fn advance(self, t: NaiveDateTime, steps: usize) -> Result<NaiveDateTime> {
        let overflow = || DataError::Calendar(format!("{t} + {steps} {} steps", self.name()));
        match self.fixed_stride() {
            Some(stride) => {
                let total = stride.checked_mul(i32::try_from(steps).map_err(|_| overflow())?).ok_or_else(overflow)?;
                t.checked_add_signed(total).ok_or_else(overflow)
            }
            None => t
                .checked_add_months(Months::new(u32::try_from(steps).map_err(|_| overflow())?))
                .ok_or_else(overflow),
        }
    }

    /// Number of whole strides from `a` to `b`, if `b` lies exactly on the
    /// stride grid after `a`.
    pub fn steps_between(self, a: NaiveDateTime, b: NaiveDateTime) -> Option<usize> {
        if b <= a {
            return None;
        }
        match self.fixed_stride() {
            Some(stride) => {
                let diff = (b - a).num_seconds();
                let s = stride.num_seconds();
                (diff % s == 0).then(|| (diff / s) as usize)
            }
            None => {
                use chrono::Datelike;
                let months = (b.year() - a.year()) * 12 + b.month() as i32 - a.month() as i32;
                if months <= 0 {
                    return None;
                }
                let m = months as usize;
                (self.advance(a, m).ok() == Some(b)).then_some(m)
            }
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| DataError::Config(format!("unknown granularity {s:?}")))
    }
}

/// One univariate series on a regular time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    pub granularity: Granularity,
    pub start: NaiveDateTime,
    pub values: Vec<f64>,
    /// Set when `values` hold `ln(1 + raw)`.
    #[serde(default)]
    pub log_transform: bool,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, granularity: Granularity, start: NaiveDateTime, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if values.len() < 2 {
            return Err(DataError::InvalidSeries {
                id,
                message: format!("needs at least 2 values, got {}", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::InvalidSeries {
                id,
                message: format!("non-finite value at index {i}"),
            });
        }
        Ok(Self {
            id,
            granularity,
            start,
            values,
            log_transform: false,
        })
    }

    /// Replaces every value by `ln(1 + v)`.
    pub fn with_log_transform(mut self) -> Result<Self> {
        if let Some(i) = self.values.iter().position(|&v| v <= -1.0) {
            return Err(DataError::InvalidSeries {
                id: self.id,
                message: format!("value at index {i} is not above -1; cannot take ln(1 + v)"),
            });
        }
        self.values.iter_mut().for_each(|v| *v = v.ln_1p());
        self.log_transform = true;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> Result<NaiveDateTime> {
        self.granularity.advance(self.start, index)
    }

    /// Date features for the series span plus `extra` future points.
    pub fn date_features(&self, extra: usize) -> Result<DateFeatures> {
        derive_date_features(self.start, self.granularity, self.len() + extra)
    }

    pub fn split(&self) -> Result<SplitSpec> {
        chronological_split(self.len())
    }
}

/// An immutable collection of series with their date features and splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    series: Vec<TimeSeries>,
    features: Vec<DateFeatures>,
    splits: Vec<SplitSpec>,
}

impl Corpus {
    /// Builds a corpus; every series must be long enough for a 7:1:2 split.
    pub fn new(series: Vec<TimeSeries>) -> Result<Self> {
        let features = series.iter().map(|s| s.date_features(0)).collect::<Result<_>>()?;
        let splits = series.iter().map(TimeSeries::split).collect::<Result<_>>()?;
        Ok(Self {
            series,
            features,
            splits,
        })
    }

    pub fn series(&self) -> &[TimeSeries] {
        &self.series
    }

    pub fn features(&self, index: usize) -> &DateFeatures {
        &self.features[index]
    }

    pub fn split(&self, index: usize) -> SplitSpec {
        self.splits[index]
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Granularities present, in ascending order.
    pub fn granularities(&self) -> Vec<Granularity> {
        let mut g: Vec<_> = self.series.iter().map(|s| s.granularity).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Population variance of all values in the train splits.
    pub fn train_variance(&self) -> f64 {
        let values = self
            .series
            .iter()
            .zip(&self.splits)
            .flat_map(|(s, sp)| s.values[sp.train()].iter().copied());
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for v in values {
            n += 1.0;
            let delta = v - mean;
            mean += delta / n;
            m2 += delta * (v - mean);
        }
        if n > 0.0 {
            m2 / n
        } else {
            0.0
        }
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            series: self
                .series
                .iter()
                .zip(&self.splits)
                .map(|(s, sp)| ManifestEntry {
                    id: s.id.clone(),
                    granularity: s.granularity,
                    start: s.start,
                    length: s.len(),
                    train_end: sp.train_end,
                    val_end: sp.val_end,
                    log_transform: s.log_transform,
                })
                .collect(),
        }
    }
}

/// JSON description of a corpus: ids, granularities, lengths and split
/// boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub series: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub granularity: Granularity,
    pub start: NaiveDateTime,
    pub length: usize,
    pub train_end: usize,
    pub val_end: usize,
    pub log_transform: bool,
}
