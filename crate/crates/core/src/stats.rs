// SPDX-License-Identifier: Apache-2.0

//! Recovery summaries: per-day totals, calendar-month series and weekly
//! 1-10 scores. All calendar bucketing uses the user's fixed UTC offset.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, FixedOffset, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{ConsumptionEvent, DailyFeedback, Substance};

/// Days of logging that define a personal baseline.
pub const BASELINE_DAYS: i64 = 14;
/// Lowest allowed baseline, in ounces or cigarettes per day.
pub const BASELINE_FLOOR: f64 = 1.0;

pub fn local_date(at: DateTime<Utc>, offset: FixedOffset) -> NaiveDate {
    at.with_timezone(&offset).date_naive()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DailySummary {
    pub date: NaiveDate,
    pub alcohol_times: u32,
    pub alcohol_oz: f64,
    pub tobacco_times: u32,
    pub cigarettes: f64,
}

impl DailySummary {
    fn empty(date: NaiveDate) -> Self {
        Self {
            date,
            ..Self::default()
        }
    }

    fn add(&mut self, e: &ConsumptionEvent) {
        match e.substance {
            Substance::Alcohol => {
                self.alcohol_times += 1;
                self.alcohol_oz += e.quantity;
            }
            Substance::Tobacco => {
                self.tobacco_times += 1;
                self.cigarettes += e.quantity;
            }
        }
    }

    pub fn quantity(&self, s: Substance) -> f64 {
        match s {
            Substance::Alcohol => self.alcohol_oz,
            Substance::Tobacco => self.cigarettes,
        }
    }
}

pub fn daily_summary(events: &[ConsumptionEvent], date: NaiveDate, offset: FixedOffset) -> DailySummary {
    let mut out = DailySummary::empty(date);
    for e in events.iter().filter(|e| local_date(e.at, offset) == date) {
        out.add(e);
    }
    out
}

/// Mean daily quantity over the first [`BASELINE_DAYS`] calendar days
/// starting at the date of the user's first event of that substance,
/// floored at [`BASELINE_FLOOR`]. Users with no events of the substance get
/// the floor.
pub fn personal_baseline(events: &[ConsumptionEvent], substance: Substance, offset: FixedOffset) -> f64 {
    let dates = events
        .iter()
        .filter(|e| e.substance == substance)
        .map(|e| (local_date(e.at, offset), e.quantity));
    let Some(first) = dates.clone().map(|(d, _)| d).min() else {
        return BASELINE_FLOOR;
    };
    let end = first + Duration::days(BASELINE_DAYS);
    let total: f64 = dates.filter(|(d, _)| *d < end).map(|(_, q)| q).sum();
    (total / BASELINE_DAYS as f64).max(BASELINE_FLOOR)
}

/// 10 for a clean day, falling linearly to 1 at or above the baseline.
pub fn substance_score(quantity: f64, baseline: f64) -> f64 {
    10.0 - 9.0 * (quantity / baseline).clamp(0.0, 1.0)
}

/// Feedback-derived proxy: 1 without feedback, 5.5 with feedback, 10 when
/// the reported stress level is 1 or 2.
pub fn fitness_score(feedback: Option<&DailyFeedback>) -> f64 {
    let logged: f64 = if feedback.is_some() { 0.5 } else { 0.0 };
    let calm = if feedback.is_some_and(|f| f.stress_level <= 2) { 4.5 } else { 0.0 };
    (1.0 + 9.0 * logged + calm).clamp(1.0, 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayScores {
    pub date: NaiveDate,
    pub alcohol_score: f64,
    pub smoking_score: f64,
    pub fitness_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeeklyScores {
    /// Always a Monday.
    pub week_start: NaiveDate,
    pub days: Vec<DayScores>,
}

pub fn week_monday(date: NaiveDate) -> NaiveDate {
    date - Duration::days(i64::from(date.weekday().num_days_from_monday()))
}

/// Scores for the Monday-started week containing `week_start`.
pub fn weekly_scores(
    events: &[ConsumptionEvent],
    feedback: &[DailyFeedback],
    week_start: NaiveDate,
    offset: FixedOffset,
) -> WeeklyScores {
    let monday = week_monday(week_start);
    let alcohol_base = personal_baseline(events, Substance::Alcohol, offset);
    let tobacco_base = personal_baseline(events, Substance::Tobacco, offset);
    let days = (0..7)
        .map(|i| {
            let date = monday + Duration::days(i);
            let day = daily_summary(events, date, offset);
            DayScores {
                date,
                alcohol_score: substance_score(day.alcohol_oz, alcohol_base),
                smoking_score: substance_score(day.cigarettes, tobacco_base),
                fitness_score: fitness_score(feedback.iter().find(|f| f.date == date)),
            }
        })
        .collect();
    WeeklyScores {
        week_start: monday,
        days,
    }
}

/// A calendar month, written `YYYY-MM`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct YearMonth {
    year: i32,
    month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        NaiveDate::from_ymd_opt(year, month, 1).map(|_| Self { year, month })
    }

    pub fn of(date: NaiveDate) -> Self {
        Self {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("validated month")
    }

    pub fn days(self) -> impl Iterator<Item = NaiveDate> {
        let first = self.first_day();
        first.iter_days().take_while(move |d| d.month() == first.month())
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("expected a month as YYYY-MM, got {0:?}")]
pub struct BadMonth(String);

impl FromStr for YearMonth {
    type Err = BadMonth;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadMonth(s.to_owned());
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year = y.parse().map_err(|_| bad())?;
        let month = m.parse().map_err(|_| bad())?;
        Self::new(year, month).ok_or_else(bad)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub times: u32,
    pub quantity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthDay {
    pub date: NaiveDate,
    pub alcohol: Tally,
    pub tobacco: Tally,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthlySeries {
    pub month: YearMonth,
    pub days: Vec<MonthDay>,
}

impl MonthlySeries {
    pub fn total(&self, substance: Substance) -> Tally {
        self.days.iter().fold(Tally::default(), |acc, d| {
            let t = match substance {
                Substance::Alcohol => d.alcohol,
                Substance::Tobacco => d.tobacco,
            };
            Tally {
                times: acc.times + t.times,
                quantity: acc.quantity + t.quantity,
            }
        })
    }
}

pub fn monthly_series(events: &[ConsumptionEvent], month: YearMonth, offset: FixedOffset) -> MonthlySeries {
    let first = month.first_day();
    let mut days: Vec<MonthDay> = month
        .days()
        .map(|date| MonthDay {
            date,
            alcohol: Tally::default(),
            tobacco: Tally::default(),
        })
        .collect();
    for e in events {
        let date = local_date(e.at, offset);
        if YearMonth::of(date) != month {
            continue;
        }
        let day = &mut days[(date - first).num_days() as usize];
        let tally = match e.substance {
            Substance::Alcohol => &mut day.alcohol,
            Substance::Tobacco => &mut day.tobacco,
        };
        tally.times += 1;
        tally.quantity += e.quantity;
    }
    MonthlySeries { month, days }
}

/// CSV with header `date,substance,times,quantity`, one row per day and
/// substance, zero days included.
pub fn month_csv(series: &MonthlySeries) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["date", "substance", "times", "quantity"])
        .expect("in-memory write");
    for day in &series.days {
        for (substance, t) in [(Substance::Alcohol, day.alcohol), (Substance::Tobacco, day.tobacco)] {
            w.write_record([
                day.date.to_string(),
                substance.as_str().to_owned(),
                t.times.to_string(),
                t.quantity.to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}
