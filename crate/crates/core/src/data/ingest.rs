use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{DataError, Granularity, Result, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub granularity: Granularity,
    /// Store `ln(1 + value)` instead of the raw value.
    #[serde(default)]
    pub log_transform: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSeries {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub series: Vec<TimeSeries>,
    pub skipped: Vec<SkippedSeries>,
}

/// Parses an ISO-8601 date or date-time. Offsets are converted to UTC.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0))
}

struct Pending {
    id: String,
    points: Vec<(NaiveDateTime, Option<f64>)>,
}

/// Reads an `id,timestamp,value` CSV file with a header row.
pub fn ingest_csv(path: impl AsRef<Path>, options: IngestOptions) -> Result<IngestReport> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, options)
}

pub(crate) fn ingest_reader<R: Read>(reader: R, options: IngestOptions) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| DataError::Parse {
                line: 1,
                message: format!("missing column {name:?}"),
            })
    };
    let (id_col, ts_col, value_col) = (column("id")?, column("timestamp")?, column("value")?);

    let mut order: Vec<Pending> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| {
            record.get(c).ok_or_else(|| DataError::Parse {
                line,
                message: format!("missing field {c}"),
            })
        };
        let id = field(id_col)?.to_string();
        let ts_text = field(ts_col)?;
        let ts = parse_timestamp(ts_text).ok_or_else(|| DataError::Parse {
            line,
            message: format!("unparseable timestamp {ts_text:?}"),
        })?;
        let raw = field(value_col)?;
        let value = if raw.is_empty() || raw.eq_ignore_ascii_case("nan") || raw.eq_ignore_ascii_case("na") {
            None
        } else {
            let v: f64 = raw.parse().map_err(|_| DataError::Parse {
                line,
                message: format!("unparseable value {raw:?}"),
            })?;
            v.is_finite().then_some(v)
        };
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(Pending { id, points: Vec::new() });
            order.len() - 1
        });
        order[slot].points.push((ts, value));
    }

    let mut report = IngestReport {
        series: Vec::new(),
        skipped: Vec::new(),
    };
    for pending in order {
        match assemble(pending, options)? {
            Ok(series) => report.series.push(series),
            Err(skip) => {
                log::warn!("skipping series {}: {}", skip.id, skip.reason);
                report.skipped.push(skip);
            }
        }
    }
    Ok(report)
}

/// Outer error aborts ingest; inner error skips the series.
fn assemble(pending: Pending, options: IngestOptions) -> Result<std::result::Result<TimeSeries, SkippedSeries>> {
    let Pending { id, points } = pending;
    let g = options.granularity;
    let skip = |reason: String| Ok(Err(SkippedSeries { id: id.clone(), reason }));

    let mut steps = Vec::with_capacity(points.len().saturating_sub(1));
    for w in points.windows(2) {
        let (a, b) = (w[0].0, w[1].0);
        if b <= a {
            return Err(DataError::Stride {
                id,
                message: format!("timestamps not strictly increasing ({a} then {b})"),
            });
        }
        match g.steps_between(a, b) {
            Some(s) => steps.push(s),
            None => {
                return Err(DataError::Stride {
                    id,
                    message: format!("interval {a} -> {b} is not a whole number of {g} steps"),
                })
            }
        }
    }
    // Every interval spanning several strides means the data is coarser than
    // declared, not gappy.
    if !steps.is_empty() && steps.iter().all(|&s| s > 1) {
        return Err(DataError::Stride {
            id,
            message: format!("no consecutive points are one {g} step apart; stride does not match the declared granularity"),
        });
    }
    if let Some(i) = steps.iter().position(|&s| s > 1) {
        return skip(format!("missing {} timestamp(s) after {}", steps[i] - 1, points[i].0));
    }
    if let Some(i) = points.iter().position(|p| p.1.is_none()) {
        return skip(format!("missing value at {}", points[i].0));
    }
    if points.len() < 2 {
        return skip(format!("only {} point(s)", points.len()));
    }
    let start = points[0].0;
    let values = points.into_iter().map(|p| p.1.unwrap_or(f64::NAN)).collect();
    let series = TimeSeries::new(id.clone(), g, start, values)?;
    if options.log_transform {
        match series.with_log_transform() {
            Ok(s) => Ok(Ok(s)),
            Err(e) => skip(e.to_string()),
        }
    } else {
        Ok(Ok(series))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hourly_rows(id: &str, n: usize, skip_at: Option<usize>) -> String {
        (0..n)
            .filter(|&i| Some(i) != skip_at)
            .map(|i| format!("{id},2020-01-01T{:02}:00:00,{}\n", i, i as f64 * 0.5))
            .collect()
    }

    fn ingest(text: &str, g: Granularity) -> Result<IngestReport> {
        ingest_reader(
            text.as_bytes(),
            IngestOptions {
                granularity: g,
                log_transform: false,
            },
        )
    }

    #[test]
    fn two_series_ten_rows() {
        let text = format!("id,timestamp,value\n{}{}", hourly_rows("a", 10, None), hourly_rows("b", 10, None));
        let r = ingest(&text, Granularity::Hourly).unwrap();
        assert_eq!(r.series.len(), 2);
        assert!(r.series.iter().all(|s| s.len() == 10));
        assert!(r.skipped.is_empty());
        assert_eq!(r.series[1].values[3], 1.5);
    }

    #[test]
    fn missing_timestamp_is_skipped_and_reported() {
        let text = format!("id,timestamp,value\n{}{}", hourly_rows("a", 10, Some(4)), hourly_rows("b", 10, None));
        let r = ingest(&text, Granularity::Hourly).unwrap();
        assert_eq!(r.series.len(), 1);
        assert_eq!(r.series[0].id, "b");
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].id, "a");
    }

    #[test]
    fn nan_value_is_skipped() {
        let text = "id,timestamp,value\na,2020-01-01,1\na,2020-01-02,NaN\na,2020-01-03,2\n";
        let r = ingest(text, Granularity::Daily).unwrap();
        assert!(r.series.is_empty());
        assert_eq!(r.skipped[0].id, "a");
    }

    #[test]
    fn hourly_file_declared_daily_is_stride_error() {
        let text = format!("id,timestamp,value\n{}", hourly_rows("s1", 10, None));
        match ingest(&text, Granularity::Daily) {
            Err(DataError::Stride { id, .. }) => assert_eq!(id, "s1"),
            other => panic!("expected stride error, got {other:?}"),
        }
    }

    #[test]
    fn daily_file_declared_hourly_is_stride_error() {
        let text = "id,timestamp,value\nd,2020-01-01,1\nd,2020-01-02,2\nd,2020-01-03,3\n";
        assert!(matches!(ingest(text, Granularity::Hourly), Err(DataError::Stride { .. })));
    }

    #[test]
    fn unparseable_value_reports_line() {
        let text = "id,timestamp,value\na,2020-01-01,1\na,2020-01-02,abc\n";
        match ingest(text, Granularity::Daily) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn log_flag_applies_ln1p() {
        let text = "id,timestamp,value\nw,2020-01-01,0\nw,2020-01-02,9\n";
        let r = ingest_reader(
            text.as_bytes(),
            IngestOptions {
                granularity: Granularity::Daily,
                log_transform: true,
            },
        )
        .unwrap();
        assert!((r.series[0].values[1] - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn timestamp_formats() {
        let base = NaiveDate::from_ymd_opt(2020, 5, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        assert_eq!(parse_timestamp("2020-05-01"), Some(base));
        assert_eq!(parse_timestamp("2020-05-01T00:00:00"), Some(base));
        assert_eq!(parse_timestamp("2020-05-01 00:00"), Some(base));
        assert_eq!(parse_timestamp("2020-05-01T02:00:00+02:00"), Some(base));
        assert_eq!(parse_timestamp("May 1"), None);
    }
}
