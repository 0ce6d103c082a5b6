//! Locale-independent date normalization.
//!
//! Accepted inputs: `YYYY-MM-DD`, `YYYY-MM`, `YYYY`, `Month D, YYYY`,
//! `D Month YYYY`, `Month YYYY` and month-first `MM/DD/YYYY`. The output
//! precision always reflects what the input actually carried.

use std::cmp::Ordering;
use std::fmt;
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatePrecision {
    Year,
    Month,
    Day,
}

/// A normalized date at its native precision.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DateValue {
    canonical: String,
    precision: DatePrecision,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unparseable date: {raw:?}")]
pub struct UnparseableDate {
    pub raw: String,
}

impl DateValue {
    pub fn year(year: i32) -> Option<Self> {
        (1..=9999).contains(&year).then(|| Self {
            canonical: format!("{year:04}"),
            precision: DatePrecision::Year,
        })
    }

    pub fn month(year: i32, month: u32) -> Option<Self> {
        if !(1..=9999).contains(&year) || !(1..=12).contains(&month) {
            return None;
        }
        Some(Self {
            canonical: format!("{year:04}-{month:02}"),
            precision: DatePrecision::Month,
        })
    }

    pub fn day(year: i32, month: u32, day: u32) -> Option<Self> {
        if !(1..=9999).contains(&year) {
            return None;
        }
        NaiveDate::from_ymd_opt(year, month, day).map(|d| Self {
            canonical: d.format("%Y-%m-%d").to_string(),
            precision: DatePrecision::Day,
        })
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    pub fn precision(&self) -> DatePrecision {
        self.precision
    }

    /// Drops components finer than `precision`. Never adds detail.
    pub fn truncate(&self, precision: DatePrecision) -> DateValue {
        let target = precision.min(self.precision);
        let len = match target {
            DatePrecision::Year => 4,
            DatePrecision::Month => 7,
            DatePrecision::Day => 10,
        };
        DateValue {
            canonical: self.canonical[..len].to_string(),
            precision: target,
        }
    }

    /// Equality after truncating both sides to the coarser precision.
    pub fn matches_leniently(&self, other: &DateValue) -> bool {
        let coarse = self.precision.min(other.precision);
        self.truncate(coarse) == other.truncate(coarse)
    }
}

impl fmt::Display for DateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

impl PartialOrd for DateValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DateValue {
    fn cmp(&self, other: &Self) -> Ordering {
        self.canonical
            .cmp(&other.canonical)
            .then(self.precision.cmp(&other.precision))
    }
}

static ISO: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{4})(?:-(\d{2})(?:-(\d{2}))?)?$").unwrap());
static SLASHED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{1,2})/(\d{1,2})/(\d{4})$").unwrap());
static MONTH_DAY_YEAR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^([A-Za-z]+)\.?\s+(\d{1,2})(?:st|nd|rd|th)?,?\s+(\d{4})$").unwrap()
});
static DAY_MONTH_YEAR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(\d{1,2})(?:st|nd|rd|th)?\s+([A-Za-z]+)\.?,?\s+(\d{4})$").unwrap()
});
static MONTH_YEAR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([A-Za-z]+)\.?,?\s+(\d{4})$").unwrap());

const MONTHS: [&str; 12] = [
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];

fn month_number(name: &str) -> Option<u32> {
    let lower = name.to_ascii_lowercase();
    if lower == "sept" {
        return Some(9);
    }
    MONTHS
        .iter()
        .position(|m| *m == lower || (lower.len() == 3 && m.starts_with(&lower)))
        .map(|i| i as u32 + 1)
}

/// Parses `raw` into a [`DateValue`] at the precision the input carries.
pub fn normalize_date(raw: &str) -> Result<DateValue, UnparseableDate> {
    let err = || UnparseableDate {
        raw: raw.to_string(),
    };
    let s = raw.trim();
    let num = |m: Option<regex::Match<'_>>| -> Option<u32> { m.and_then(|m| m.as_str().parse().ok()) };

    if let Some(c) = ISO.captures(s) {
        let year = num(c.get(1)).ok_or_else(err)? as i32;
        let parsed = match (num(c.get(2)), num(c.get(3))) {
            (None, _) => DateValue::year(year),
            (Some(m), None) => DateValue::month(year, m),
            (Some(m), Some(d)) => DateValue::day(year, m, d),
        };
        return parsed.ok_or_else(err);
    }

    if let Some(c) = SLASHED.captures(s) {
        let (first, second) = (num(c.get(1)).ok_or_else(err)?, num(c.get(2)).ok_or_else(err)?);
        let year = num(c.get(3)).ok_or_else(err)? as i32;
        // Month-first; refuse to guess when both readings are valid and differ.
        if first <= 12 && second <= 12 && first != second {
            return Err(err());
        }
        return DateValue::day(year, first, second).ok_or_else(err);
    }

    if let Some(c) = MONTH_DAY_YEAR.captures(s) {
        let month = month_number(&c[1]).ok_or_else(err)?;
        let day = num(c.get(2)).ok_or_else(err)?;
        let year = num(c.get(3)).ok_or_else(err)? as i32;
        return DateValue::day(year, month, day).ok_or_else(err);
    }

    if let Some(c) = DAY_MONTH_YEAR.captures(s) {
        let day = num(c.get(1)).ok_or_else(err)?;
        let month = month_number(&c[2]).ok_or_else(err)?;
        let year = num(c.get(3)).ok_or_else(err)? as i32;
        return DateValue::day(year, month, day).ok_or_else(err);
    }

    if let Some(c) = MONTH_YEAR.captures(s) {
        let month = month_number(&c[1]).ok_or_else(err)?;
        let year = num(c.get(2)).ok_or_else(err)? as i32;
        return DateValue::month(year, month).ok_or_else(err);
    }

    Err(err())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(raw: &str) -> (String, DatePrecision) {
        let d = normalize_date(raw).unwrap();
        (d.canonical().to_string(), d.precision())
    }

    #[test]
    fn iso_forms_keep_their_precision() {
        assert_eq!(ok("2021"), ("2021".into(), DatePrecision::Year));
        assert_eq!(ok("2024-03"), ("2024-03".into(), DatePrecision::Month));
        assert_eq!(ok("2024-03-05"), ("2024-03-05".into(), DatePrecision::Day));
        assert_eq!(ok("  2024-03-05 "), ("2024-03-05".into(), DatePrecision::Day));
    }

    #[test]
    fn written_month_forms() {
        assert_eq!(ok("August 14, 2021"), ("2021-08-14".into(), DatePrecision::Day));
        assert_eq!(ok("Aug. 14 2021"), ("2021-08-14".into(), DatePrecision::Day));
        assert_eq!(ok("14 August 2021"), ("2021-08-14".into(), DatePrecision::Day));
        assert_eq!(ok("March 2024"), ("2024-03".into(), DatePrecision::Month));
        assert_eq!(ok("sept 2020"), ("2020-09".into(), DatePrecision::Month));
    }

    #[test]
    fn slashed_is_month_first_and_refuses_ambiguity() {
        assert_eq!(ok("08/14/2021"), ("2021-08-14".into(), DatePrecision::Day));
        assert_eq!(ok("3/3/2021"), ("2021-03-03".into(), DatePrecision::Day));
        assert!(normalize_date("03/04/2021").is_err());
        assert!(normalize_date("14/08/2021").is_err());
        assert!(normalize_date("13/13/2021").is_err());
        assert!(normalize_date("03/04/05").is_err());
    }

    #[test]
    fn rejects_invalid_calendar_and_free_text() {
        for raw in ["2021-02-30", "2021-13", "next Tuesday", "early March", "", "21", "Smarch 2020"] {
            assert!(normalize_date(raw).is_err(), "{raw}");
        }
    }

    #[test]
    fn truncation_and_lenient_match() {
        let day = normalize_date("2021-08-14").unwrap();
        let month = normalize_date("2021-08").unwrap();
        let other = normalize_date("2021-09").unwrap();
        assert_eq!(day.truncate(DatePrecision::Month), month);
        assert_eq!(month.truncate(DatePrecision::Day), month);
        assert!(day.matches_leniently(&month));
        assert!(!day.matches_leniently(&other));
    }
}
