//! Study period and day indexing.

use chrono::{Datelike, Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a day within the study calendar; day 0 is the start date.
pub type Day = u32;

/// Inclusive study period. Both endpoints are addressable days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyCalendar {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Default for StudyCalendar {
    fn default() -> Self {
        StudyCalendar {
            start: NaiveDate::from_ymd_opt(2019, 10, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2022, 7, 1).unwrap(),
        }
    }
}

impl StudyCalendar {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::Config(format!("calendar end {end} precedes start {start}")));
        }
        Ok(StudyCalendar { start, end })
    }

    /// Number of addressable days, `(end - start) + 1`.
    pub fn total_days(&self) -> u32 {
        (self.end - self.start).num_days() as u32 + 1
    }

    pub fn last_day(&self) -> Day {
        self.total_days() - 1
    }

    /// Day index of `date`, or `None` when the date falls outside the calendar.
    pub fn day_index(&self, date: NaiveDate) -> Option<Day> {
        if date < self.start || date > self.end {
            return None;
        }
        Some((date - self.start).num_days() as Day)
    }

    /// Signed offset from the start date, for dates on either side of the calendar.
    pub fn offset(&self, date: NaiveDate) -> i64 {
        (date - self.start).num_days()
    }

    pub fn date(&self, day: Day) -> NaiveDate {
        self.start + Days::new(u64::from(day))
    }

    pub fn contains_offset(&self, offset: i64) -> bool {
        offset >= 0 && offset <= i64::from(self.last_day())
    }

    /// Number of calendar months touched by the study period.
    pub fn total_months(&self) -> u32 {
        let span = (self.end.year() - self.start.year()) * 12 + self.end.month() as i32 - self.start.month() as i32;
        span as u32 + 1
    }

    /// Month index of `(year, month)` relative to the start month.
    pub fn month_index(&self, year: i32, month: u32) -> Option<u32> {
        let idx = (year - self.start.year()) * 12 + month as i32 - self.start.month() as i32;
        (idx >= 0 && (idx as u32) < self.total_months()).then_some(idx as u32)
    }

    /// Days covered by a month index, clipped to the calendar.
    pub fn month_days(&self, month_index: u32) -> Option<DayRange> {
        if month_index >= self.total_months() {
            return None;
        }
        let m0 = self.start.month0() + month_index;
        let year = self.start.year() + (m0 / 12) as i32;
        let month = m0 % 12 + 1;
        let first = NaiveDate::from_ymd_opt(year, month, 1)?;
        let next = if month == 12 {
            NaiveDate::from_ymd_opt(year + 1, 1, 1)?
        } else {
            NaiveDate::from_ymd_opt(year, month + 1, 1)?
        };
        let lo = self.offset(first);
        let hi = self.offset(next) - 1;
        DayRange::clipped(lo, hi, self)
    }

    /// Month index containing a day.
    pub fn month_of_day(&self, day: Day) -> u32 {
        let d = self.date(day);
        self.month_index(d.year(), d.month()).expect("in-range day always falls in a calendar month")
    }
}

/// Inclusive range of days, always within a calendar once constructed via [`DayRange::clipped`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DayRange {
    pub first: Day,
    pub last: Day,
}

impl DayRange {
    pub fn new(first: Day, last: Day) -> Self {
        assert!(first <= last, "empty day range {first}..={last}");
        DayRange { first, last }
    }

    /// Clips the signed range `[lo, hi]` to the calendar; `None` when nothing remains.
    pub fn clipped(lo: i64, hi: i64, calendar: &StudyCalendar) -> Option<Self> {
        let lo = lo.max(0);
        let hi = hi.min(i64::from(calendar.last_day()));
        (lo <= hi).then(|| DayRange::new(lo as Day, hi as Day))
    }

    pub fn len(&self) -> u32 {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, day: Day) -> bool {
        self.first <= day && day <= self.last
    }

    pub fn days(&self) -> impl Iterator<Item = Day> {
        self.first..=self.last
    }
}
