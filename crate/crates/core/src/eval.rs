//! Forecast metrics, rolling test-period evaluation, naive baselines and
//! ablation tables.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, TimeSeries};
use crate::inference::{autoregressive_rounds, FeatureRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {actual} actuals vs {predicted} predictions")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("empty input")]
    Empty,
    #[error("mean absolute actual is zero")]
    ZeroDenominator,
    #[error("evaluation task: {0}")]
    Task(String),
    #[error("forecast failed: {0}")]
    Forecast(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch {
            actual: y.len(),
            predicted: yhat.len(),
        });
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn mean_abs(y: &[f64]) -> Result<f64> {
    let d = y.iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64;
    if d > 0.0 {
        Ok(d)
    } else {
        Err(EvalError::ZeroDenominator)
    }
}

/// `(1/H) Σ (y − ŷ)²`
pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Root-mean-square error over mean absolute actual.
pub fn nrmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let m = mse(y, yhat)?;
    Ok(m.sqrt() / mean_abs(y)?)
}

/// Mean absolute error over mean absolute actual.
pub fn wape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    let mae = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
    Ok(mae / mean_abs(y)?)
}

/// Anything that maps a context to point forecasts.
pub trait PointForecaster {
    fn name(&self) -> String;

    /// `features`, when supplied, has rows for the context and the horizon.
    fn predict(&self, context: &[f64], features: Option<&[FeatureRow]>, horizon: usize) -> Result<Vec<f64>>;

    fn wants_features(&self) -> bool {
        false
    }
}

/// Repeats the last observed value.
#[derive(Debug, Clone, Copy, Default)]
pub struct RepeatLast;

impl PointForecaster for RepeatLast {
    fn name(&self) -> String {
        "repeat-last".into()
    }

    fn predict(&self, context: &[f64], _: Option<&[FeatureRow]>, horizon: usize) -> Result<Vec<f64>> {
        let last = *context.last().ok_or(EvalError::Empty)?;
        Ok(vec![last; horizon])
    }
}

/// Repeats the last full season. Falls back to repeating the last value
/// when the context is shorter than one season.
#[derive(Debug, Clone, Copy)]
pub struct SeasonalNaive {
    pub season: usize,
}

impl PointForecaster for SeasonalNaive {
    fn name(&self) -> String {
        format!("seasonal-naive({})", self.season)
    }

    fn predict(&self, context: &[f64], f: Option<&[FeatureRow]>, horizon: usize) -> Result<Vec<f64>> {
        let l = context.len();
        if self.season == 0 || self.season > l {
            log::warn!(
                "season {} does not fit a context of {l} points; using repeat-last",
                self.season
            );
            return RepeatLast.predict(context, f, horizon);
        }
        let tail = &context[l - self.season..];
        Ok((0..horizon).map(|i| tail[i % self.season]).collect())
    }
}

/// One rolling-window evaluation setting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTask {
    pub dataset: String,
    pub context: usize,
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

pub const AGGREGATION: &str = "uniform-per-window";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub nrmse: f64,
    pub wape: f64,
    pub windows: usize,
    pub aggregation: String,
}

impl MetricPair {
    /// Uniform average over window records.
    pub fn pool<'a>(records: impl IntoIterator<Item = &'a WindowRecord>) -> Self {
        let (mut n, mut sn, mut sw) = (0usize, 0.0, 0.0);
        for r in records {
            n += 1;
            sn += r.nrmse;
            sw += r.wape;
        }
        let d = if n == 0 { f64::NAN } else { n as f64 };
        Self {
            nrmse: sn / d,
            wape: sw / d,
            windows: n,
            aggregation: AGGREGATION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub series: String,
    /// Index of the first forecast point within the series.
    pub start: usize,
    pub nrmse: f64,
    pub wape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub series: String,
    pub metrics: MetricPair,
    /// Windows dropped because their actuals were all zero.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub task: EvalTask,
    pub pooled: MetricPair,
    pub excluded: usize,
    pub per_series: Vec<SeriesReport>,
    /// Sorted by (series id, start).
    pub records: Vec<WindowRecord>,
}

/// Horizon start indices for a series of `len` points: every `t` with
/// `val_end ≤ t ≤ len − H`, stepping by `stride`.
pub fn window_starts(len: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    let split = crate::data::chronological_split(len)?;
    if split.test().len() < horizon {
        return Err(EvalError::Task(format!(
            "test period of {} points is shorter than the horizon {horizon}",
            split.test().len()
        )));
    }
    Ok((split.val_end..=len - horizon).step_by(stride.max(1)).collect())
}

/// Evaluates every rolling (context, horizon) pair whose horizon lies in the
/// test period. Contexts may reach back before the test boundary.
pub fn rolling_eval(forecaster: &dyn PointForecaster, series: &[TimeSeries], task: &EvalTask) -> Result<EvalReport> {
    if task.horizon == 0 || task.context == 0 {
        return Err(EvalError::Task("context and horizon must be positive".into()));
    }
    if series.is_empty() {
        return Err(EvalError::Task("no series".into()));
    }
    let mut order: Vec<&TimeSeries> = series.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut records = Vec::new();
    let mut per_series = Vec::new();
    let mut excluded_total = 0;
    for s in order {
        let starts = window_starts(s.len(), task.horizon, task.stride)?;
        let features = if forecaster.wants_features() {
            Some(s.date_features(0)?)
        } else {
            None
        };
        let mut mine = Vec::with_capacity(starts.len());
        let mut excluded = 0;
        for t in starts {
            let c0 = t.saturating_sub(task.context);
            let actual = &s.values[t..t + task.horizon];
            let f = features.as_ref().map(|f| f.slice(c0..t + task.horizon));
            let pred = forecaster.predict(&s.values[c0..t], f, task.horizon)?;
            match (nrmse(actual, &pred), wape(actual, &pred)) {
                (Ok(n), Ok(w)) => mine.push(WindowRecord {
                    series: s.id.clone(),
                    start: t,
                    nrmse: n,
                    wape: w,
                }),
                (Err(EvalError::ZeroDenominator), _) | (_, Err(EvalError::ZeroDenominator)) => excluded += 1,
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        if excluded > 0 {
            log::warn!("{}: {excluded} window(s) with all-zero actuals excluded", s.id);
        }
        per_series.push(SeriesReport {
            series: s.id.clone(),
            metrics: MetricPair::pool(&mine),
            excluded,
        });
        excluded_total += excluded;
        records.extend(mine);
    }
    Ok(EvalReport {
        model: forecaster.name(),
        task: task.clone(),
        pooled: MetricPair::pool(&records),
        excluded: excluded_total,
        per_series,
        records,
    })
}

impl EvalReport {
    /// Summary CSV: one row per series plus a pooled row.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "model,dataset,context,horizon,series,windows,excluded,nrmse,wape")?;
        let t = &self.task;
        for s in &self.per_series {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.model, t.dataset, t.context, t.horizon, s.series, s.metrics.windows, s.excluded, s.metrics.nrmse, s.metrics.wape
            )?;
        }
        writeln!(
            out,
            "{},{},{},{},pooled,{},{},{},{}",
            self.model, t.dataset, t.context, t.horizon, self.pooled.windows, self.excluded, self.pooled.nrmse, self.pooled.wape
        )?;
        Ok(())
    }

    pub fn write_records(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "series,start,nrmse,wape")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.series, r.start, r.nrmse, r.wape)?;
        }
        Ok(())
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.windows.csv` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        serde_json::to_writer_pretty(std::fs::File::create(dir.join(format!("{stem}.json")))?, self)?;
        self.write_records(std::fs::File::create(dir.join(format!("{stem}.windows.csv")))?)?;
        Ok(())
    }
}

/// Plain-text table with aligned columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |row: &[String]| {
            let cells: Vec<String> = row
                .iter()
                .zip(&width)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            cells.join(" | ").trim_end().to_string()
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let _ = writeln!(out, "{}", line(&self.header));
        let _ = writeln!(out, "{}", width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
        for r in &self.rows {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn metric(v: f64) -> String {
    format!("{v:.4}")
}

/// A named set of series evaluated as one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub series: Vec<TimeSeries>,
}

pub const SWEEP_CONTEXTS: [usize; 4] = [96, 192, 384, 512];

/// Context-length sweep at a fixed horizon: one row per dataset, one column
/// per context. Also returns long-format plot data
/// (`dataset,context,nrmse,wape`).
pub fn context_table(
    forecaster: &dyn PointForecaster,
    datasets: &[Dataset],
    contexts: &[usize],
    horizon: usize,
    stride: usize,
) -> Result<(Table, String)> {
    let mut header = vec!["Dataset".to_string()];
    header.extend(contexts.iter().map(|c| c.to_string()));
    let mut rows = Vec::new();
    let mut plot = String::from("dataset,context,nrmse,wape\n");
    for d in datasets {
        let sweep = crate::inference::variable_context_sweep(forecaster, &d.series, contexts, horizon, stride)?;
        let mut row = vec![d.name.clone()];
        for (c, r) in sweep.contexts.iter().zip(&sweep.reports) {
            row.push(metric(r.pooled.nrmse));
            let _ = writeln!(plot, "{},{},{},{}", d.name, c, r.pooled.nrmse, r.pooled.wape);
        }
        rows.push(row);
    }
    Ok((
        Table {
            title: format!("NRMSE by context length (horizon {horizon})"),
            header,
            rows,
        },
        plot,
    ))
}

/// Models trained with different input patch lengths, one column each.
pub fn input_patch_table(
    models: &[(usize, &dyn PointForecaster)],
    datasets: &[Dataset],
    context: usize,
    horizon: usize,
    stride: usize,
) -> Result<Table> {
    let mut header = vec!["Dataset".to_string()];
    header.extend(models.iter().map(|(p, _)| format!("p={p}")));
    let mut rows = Vec::new();
    for d in datasets {
        let mut row = vec![d.name.clone()];
        for (_, m) in models {
            let task = EvalTask {
                dataset: d.name.clone(),
                context,
                horizon,
                stride,
            };
            row.push(metric(rolling_eval(*m, &d.series, &task)?.pooled.nrmse));
        }
        rows.push(row);
    }
    Ok(Table {
        title: format!("NRMSE by input patch length (context {context}, horizon {horizon})"),
        header,
        rows,
    })
}

/// Models with different output patch lengths at a long horizon, with the
/// number of decoding rounds each needs. Reference rows give the round
/// counts of the full-size output patches (32 and 128) at horizon 512.
pub fn output_patch_table(
    models: &[(usize, &dyn PointForecaster)],
    datasets: &[Dataset],
    context: usize,
    horizon: usize,
    stride: usize,
) -> Result<Table> {
    let header = ["Dataset", "h", "horizon", "rounds", "NRMSE"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for d in datasets {
        for (h, m) in models {
            let task = EvalTask {
                dataset: d.name.clone(),
                context,
                horizon,
                stride,
            };
            let r = rolling_eval(*m, &d.series, &task)?;
            rows.push(vec![
                d.name.clone(),
                h.to_string(),
                horizon.to_string(),
                autoregressive_rounds(horizon, *h).to_string(),
                metric(r.pooled.nrmse),
            ]);
        }
    }
    for h in [32, 128] {
        rows.push(vec![
            "full-size reference".into(),
            h.to_string(),
            "512".into(),
            autoregressive_rounds(512, h).to_string(),
            "-".into(),
        ]);
    }
    Ok(Table {
        title: format!("NRMSE by output patch length (context {context}, horizon {horizon})"),
        header,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use crate::data::Granularity;

    fn series(id: &str, values: Vec<f64>) -> TimeSeries {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        TimeSeries::new(id, Granularity::Daily, start, values).unwrap()
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0, 0.0], &[1.0, 2.0, 2.0]).unwrap(), 3.0);
        assert_eq!(nrmse(&[2.0, 2.0], &[1.0, 3.0]).unwrap(), 0.5);
        assert_eq!(wape(&[2.0, 2.0], &[1.0, 3.0]).unwrap(), 0.5);
        assert_eq!(wape(&[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(nrmse(&[4.0, 1.0], &[4.0, 1.0]).unwrap(), 0.0);
        let y = [1.5, -2.0, 3.25];
        let yh = [1.0, -1.0, 2.0];
        let c: Vec<f64> = y.iter().map(|v| 7.0 * v).collect();
        let ch: Vec<f64> = yh.iter().map(|v| 7.0 * v).collect();
        assert!((nrmse(&c, &ch).unwrap() - nrmse(&y, &yh).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(nrmse(&[0.0, 0.0], &[1.0, 1.0]), Err(EvalError::ZeroDenominator)));
        assert!(matches!(wape(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(mse(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn baselines() {
        assert_eq!(RepeatLast.predict(&[1.0, 5.0], None, 3).unwrap(), vec![5.0; 3]);
        let s = SeasonalNaive { season: 2 };
        assert_eq!(s.predict(&[9.0, 1.0, 2.0], None, 4).unwrap(), vec![1.0, 2.0, 1.0, 2.0]);
        let long = SeasonalNaive { season: 10 };
        assert_eq!(long.predict(&[3.0, 4.0], None, 2).unwrap(), vec![4.0, 4.0]);
    }

    #[test]
    fn window_counts() {
        // 500 points: test period [400, 500) has 100 points.
        assert_eq!(window_starts(500, 24, 1).unwrap().len(), 77);
        let w = window_starts(500, 24, 24).unwrap();
        assert!(w.windows(2).all(|p| p[1] - p[0] == 24));
        assert!(matches!(window_starts(50, 24, 1), Err(EvalError::Task(_))));
    }

    #[test]
    fn repeat_last_on_constant_series_is_perfect() {
        let s = vec![series("c", vec![4.0; 300])];
        let task = EvalTask {
            dataset: "const".into(),
            context: 32,
            horizon: 8,
            stride: 1,
        };
        let r = rolling_eval(&RepeatLast, &s, &task).unwrap();
        assert_eq!((r.pooled.nrmse, r.pooled.wape), (0.0, 0.0));
        assert_eq!(r.pooled.windows, 60 - 8 + 1);
    }

    #[test]
    fn zero_windows_are_excluded_and_counted() {
        let mut v: Vec<f64> = (0..200).map(|i| 1.0 + i as f64).collect();
        for x in &mut v[170..180] {
            *x = 0.0;
        }
        let task = EvalTask {
            dataset: "z".into(),
            context: 10,
            horizon: 5,
            stride: 1,
        };
        let r = rolling_eval(&RepeatLast, &[series("z", v)], &task).unwrap();
        assert_eq!(r.excluded, 6);
        assert_eq!(r.pooled.windows, 36 - 6);
    }

    #[test]
    fn pooled_is_mean_of_records_and_ordered() {
        let s = vec![
            series("b", (0..120).map(|i| 5.0 + (i as f64 * 0.7).sin()).collect()),
            series("a", (0..150).map(|i| 3.0 + (i as f64 * 0.3).cos()).collect()),
        ];
        let task = EvalTask {
            dataset: "x".into(),
            context: 16,
            horizon: 4,
            stride: 2,
        };
        let r = rolling_eval(&SeasonalNaive { season: 9 }, &s, &task).unwrap();
        let mean = r.records.iter().map(|w| w.nrmse).sum::<f64>() / r.records.len() as f64;
        assert!((r.pooled.nrmse - mean).abs() < 1e-12);
        assert!(r.records.windows(2).all(|p| (p[0].series.as_str(), p[0].start) < (p[1].series.as_str(), p[1].start)));
        assert_eq!(r.per_series[0].series, "a");
    }

    #[test]
    fn table_rendering() {
        let t = Table {
            title: "T".into(),
            header: vec!["Dataset".into(), "96".into()],
            rows: vec![vec!["long-name".into(), "0.1234".into()]],
        };
        assert_eq!(t.render(), "T\nDataset   |     96\n----------+-------\nlong-name | 0.1234\n");
        assert_eq!(t.to_csv(), "Dataset,96\nlong-name,0.1234\n");
    }
}
