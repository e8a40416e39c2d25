use chrono::{Datelike, NaiveDateTime, Timelike};

use super::{Granularity, Result};
use crate::model::DATE_FEATURES;

/// Value of a feature column that carries no information at the series'
/// granularity.
pub const MASKED: f64 = -1.0;

/// Per-time-point date features: month-of-year, day-of-week, hour-of-day,
/// minute-of-hour, second-of-minute, each scaled to `[-0.5, 0.5]` or masked
/// with -1.
#[derive(Debug, Clone, PartialEq)]
pub struct DateFeatures {
    rows: Vec<[f64; DATE_FEATURES]>,
}

impl DateFeatures {
    pub fn rows(&self) -> &[[f64; DATE_FEATURES]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> &[[f64; DATE_FEATURES]] {
        &self.rows[range]
    }
}

/// Which of the five columns are meaningful at a granularity.
fn active_columns(g: Granularity) -> [bool; DATE_FEATURES] {
    match g {
        Granularity::Min15 => [true, true, true, true, false],
        Granularity::Hourly => [true, true, true, false, false],
        // Weekly points carry the day-of-week of the period start.
        Granularity::Daily | Granularity::Weekly => [true, true, false, false, false],
        Granularity::Monthly => [true, false, false, false, false],
    }
}

fn raw_features(t: NaiveDateTime) -> [f64; DATE_FEATURES] {
    [
        (t.month0() as f64) / 12.0 - 0.5,
        t.weekday().num_days_from_monday() as f64 / 7.0 - 0.5,
        t.hour() as f64 / 24.0 - 0.5,
        t.minute() as f64 / 60.0 - 0.5,
        t.second() as f64 / 60.0 - 0.5,
    ]
}

/// Date features for `len` points starting at `start`.
pub fn derive_date_features(start: NaiveDateTime, granularity: Granularity, len: usize) -> Result<DateFeatures> {
    let active = active_columns(granularity);
    let rows = (0..len)
        .map(|i| {
            let t = granularity.advance(start, i)?;
            let raw = raw_features(t);
            Ok(std::array::from_fn(|c| if active[c] { raw[c] } else { MASKED }))
        })
        .collect::<Result<_>>()?;
    Ok(DateFeatures { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn at(h: u32, m: u32, s: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2021, 3, 3).unwrap().and_hms_opt(h, m, s).unwrap()
    }

    #[test]
    fn minute_thirty_maps_to_zero() {
        let f = derive_date_features(at(10, 30, 0), Granularity::Min15, 1).unwrap();
        assert_eq!(f.rows()[0][3], 0.0);
    }

    #[test]
    fn minute_extremes() {
        assert_eq!(raw_features(at(0, 0, 0))[3], -0.5);
        assert!((raw_features(at(0, 59, 0))[3] - (59.0 / 60.0 - 0.5)).abs() < 1e-15);
        assert!((raw_features(at(0, 59, 0))[3] - 0.48333).abs() < 1e-4);
    }

    #[test]
    fn daily_masks_sub_daily_columns() {
        let f = derive_date_features(at(0, 0, 0), Granularity::Daily, 40).unwrap();
        for row in f.rows() {
            assert_eq!(&row[2..], &[MASKED; 3]);
            assert!((-0.5..=0.5).contains(&row[0]) && (-0.5..=0.5).contains(&row[1]));
        }
    }

    #[test]
    fn calendar_values() {
        // 2021-03-03 is a Wednesday (Monday = 0).
        let f = derive_date_features(at(6, 15, 0), Granularity::Min15, 1).unwrap();
        assert_eq!(f.rows()[0], [2.0 / 12.0 - 0.5, 2.0 / 7.0 - 0.5, 6.0 / 24.0 - 0.5, 0.25 - 0.5, MASKED]);
        let f = derive_date_features(at(0, 0, 0), Granularity::Monthly, 12).unwrap();
        assert_eq!(f.rows()[9][0], 11.0 / 12.0 - 0.5);
        assert!(f.rows().iter().all(|r| r[1..] == [MASKED; 4]));
    }
}
