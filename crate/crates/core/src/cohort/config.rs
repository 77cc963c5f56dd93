use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::DatePrecision;

/// Month-day anchors for estimated dates annotated only as early, mid or
/// late in a year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct YearPartAnchors {
    pub early: (u32, u32),
    pub mid: (u32, u32),
    pub late: (u32, u32),
}

impl Default for YearPartAnchors {
    fn default() -> Self {
        YearPartAnchors { early: (2, 15), mid: (7, 1), late: (10, 15) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub min_valid_uploads: usize,
    /// Day of month used for dates known only to the month.
    pub month_anchor_day: u32,
    pub year_part_anchors: YearPartAnchors,
    pub window_months: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            min_valid_uploads: 10,
            month_anchor_day: 15,
            year_part_anchors: YearPartAnchors::default(),
            window_months: 18,
        }
    }
}

impl DatasetConfig {
    /// Resolves an event-date field into a calendar date.
    ///
    /// Accepted forms: `YYYY-MM-DD` for any precision, `YYYY-MM` for month
    /// precision and `YYYY-early|mid|late` for year-part precision.
    pub fn resolve_event_date(&self, raw: &str, precision: DatePrecision) -> Option<NaiveDate> {
        let raw = raw.trim();
        if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
            return Some(d);
        }
        let (year, rest) = raw.split_once('-')?;
        let year: i32 = year.parse().ok()?;
        match precision {
            DatePrecision::Exact => None,
            DatePrecision::Month => {
                let month: u32 = rest.parse().ok()?;
                NaiveDate::from_ymd_opt(year, month, self.month_anchor_day)
            }
            DatePrecision::YearPart => {
                let (m, d) = match rest {
                    "early" => self.year_part_anchors.early,
                    "mid" => self.year_part_anchors.mid,
                    "late" => self.year_part_anchors.late,
                    _ => return None,
                };
                NaiveDate::from_ymd_opt(year, m, d)
            }
        }
    }

    /// The alignment window expressed in whole weeks (18 months → 78 weeks).
    pub fn window_weeks(&self) -> i64 {
        window_weeks(self.window_months)
    }
}

pub(crate) fn window_weeks(months: u32) -> i64 {
    (months as f64 * 52.0 / 12.0).round() as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_buckets_resolve_to_anchor_days() {
        let cfg = DatasetConfig::default();
        let d = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).unwrap();
        assert_eq!(cfg.resolve_event_date("2017-05", DatePrecision::Month), Some(d(2017, 5, 15)));
        assert_eq!(cfg.resolve_event_date("2017-early", DatePrecision::YearPart), Some(d(2017, 2, 15)));
        assert_eq!(cfg.resolve_event_date("2017-mid", DatePrecision::YearPart), Some(d(2017, 7, 1)));
        assert_eq!(cfg.resolve_event_date("2017-late", DatePrecision::YearPart), Some(d(2017, 10, 15)));
        assert_eq!(cfg.resolve_event_date("2017-05-02", DatePrecision::Exact), Some(d(2017, 5, 2)));
        // already-resolved dates reload unchanged
        assert_eq!(cfg.resolve_event_date("2017-05-15", DatePrecision::Month), Some(d(2017, 5, 15)));
        assert_eq!(cfg.resolve_event_date("2017-05", DatePrecision::Exact), None);
        assert_eq!(cfg.resolve_event_date("2017-spring", DatePrecision::YearPart), None);
    }

    #[test]
    fn eighteen_months_is_78_weeks() {
        assert_eq!(DatasetConfig::default().window_weeks(), 78);
    }
}
