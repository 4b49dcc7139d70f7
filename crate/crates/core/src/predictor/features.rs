// SPDX-License-Identifier: Apache-2.0

use chrono::{DateTime, Datelike, Duration, DurationRound, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};

use super::{PredictorError, Sequence};
use crate::domain::{ConsumptionEvent, DailyFeedback, Substance};

/// Width of every feature vector.
pub const FEATURE_COUNT: usize = 5;

/// Inputs for one hour, in fixed order: alcohol ounces, cigarettes,
/// hour-of-day / 23, weekday / 6 (Monday = 0), scaled stress level
/// ((level - 1) / 4, or 0 without feedback for that date).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub hour_index: usize,
    pub values: [f64; FEATURE_COUNT],
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub fn floor_hour(t: DateTime<Utc>) -> DateTime<Utc> {
    t.duration_trunc(Duration::hours(1)).expect("hour truncation")
}

pub fn ceil_hour(t: DateTime<Utc>) -> DateTime<Utc> {
    let floor = floor_hour(t);
    if floor == t {
        t
    } else {
        floor + Duration::hours(1)
    }
}

fn stress_for(feedback: &[DailyFeedback], date: NaiveDate) -> f64 {
    feedback
        .iter()
        .find(|f| f.date == date)
        .map_or(0.0, |f| (f64::from(f.stress_level.clamp(1, 5)) - 1.0) / 4.0)
}

/// Calendar and stress features for the hour starting at `hour_start`, with
/// the given consumption totals.
pub fn hour_features(
    hour_start: DateTime<Utc>,
    alcohol_oz: f64,
    cigarettes: f64,
    feedback: &[DailyFeedback],
) -> [f64; FEATURE_COUNT] {
    [
        alcohol_oz,
        cigarettes,
        f64::from(hour_start.hour()) / 23.0,
        f64::from(hour_start.weekday().num_days_from_monday()) / 6.0,
        stress_for(feedback, hour_start.date_naive()),
    ]
}

/// One feature vector per hour in `[window_end - window_hours, window_end)`
/// (with `window_end` rounded down to a whole hour) and one label per hour
/// except the last: label `t` is 1 when hour `t + 1` holds any consumption
/// event.
pub fn extract_features(
    events: &[ConsumptionEvent],
    feedback: &[DailyFeedback],
    window_end: DateTime<Utc>,
    window_hours: usize,
) -> Result<(Vec<FeatureVector>, Vec<f64>), PredictorError> {
    if window_hours == 0 {
        return Err(PredictorError::EmptyWindow);
    }
    let end = floor_hour(window_end);
    let start = end - Duration::hours(window_hours as i64);
    let mut alcohol = vec![0.0; window_hours];
    let mut tobacco = vec![0.0; window_hours];
    let mut any = vec![false; window_hours];
    for e in events {
        if e.at < start || e.at >= end {
            continue;
        }
        let idx = ((e.at - start).num_seconds() / 3600) as usize;
        match e.substance {
            Substance::Alcohol => alcohol[idx] += e.quantity,
            Substance::Tobacco => tobacco[idx] += e.quantity,
        }
        any[idx] = true;
    }
    let features = (0..window_hours)
        .map(|h| FeatureVector {
            hour_index: h,
            values: hour_features(start + Duration::hours(h as i64), alcohol[h], tobacco[h], feedback),
        })
        .collect();
    let labels = any[1..].iter().map(|&hit| if hit { 1.0 } else { 0.0 }).collect();
    Ok((features, labels))
}

/// Cuts an extracted window into overlapping training sequences of
/// `sequence_hours` steps taken every `stride_hours`.
pub fn training_sequences(
    features: &[FeatureVector],
    labels: &[f64],
    sequence_hours: usize,
    stride_hours: usize,
) -> Vec<Sequence> {
    let len = sequence_hours.min(features.len());
    if len < 2 || stride_hours == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= features.len() {
        out.push(Sequence::new(
            features[start..start + len].iter().map(|f| f.values.to_vec()).collect(),
            labels[start..start + len - 1].to_vec(),
        ));
        start += stride_hours;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::EventSource;

    fn end() -> DateTime<Utc> {
        // a Monday midnight
        "2026-06-01T00:00:00Z".parse().unwrap()
    }

    fn ev(substance: Substance, q: f64, at: DateTime<Utc>) -> ConsumptionEvent {
        ConsumptionEvent {
            event_id: "e".into(),
            user_id: "u".into(),
            substance,
            quantity: q,
            at,
            location: None,
            source: EventSource::Manual,
        }
    }

    #[test]
    fn empty_window_of_30_days() {
        let (x, y) = extract_features(&[], &[], end(), 720).unwrap();
        assert_eq!(x.len(), 720);
        assert_eq!(y.len(), 719);
        assert!(y.iter().all(|&l| l == 0.0));
        assert!(x.iter().all(|f| f.values[0] == 0.0 && f.values[1] == 0.0));
        // window starts on Saturday 2 May at midnight
        assert_eq!(x[0].values[2], 0.0);
        assert_eq!(x[0].values[3], 5.0 / 6.0);
        assert_eq!(x[23].values[2], 1.0);
        assert_eq!(extract_features(&[], &[], end(), 0), Err(PredictorError::EmptyWindow));
    }

    #[test]
    fn bucketing_and_label_shift() {
        let start = end() - Duration::hours(720);
        let e = ev(Substance::Alcohol, 12.0, start + Duration::minutes(5 * 60 + 20));
        let (x, y) = extract_features(&[e], &[], end(), 720).unwrap();
        assert_eq!(x[5].values[0], 12.0);
        assert_eq!(y[4], 1.0);
        assert_eq!(y.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn same_hour_cigarettes_sum() {
        let start = end() - Duration::hours(48);
        let at = start + Duration::hours(10);
        let events = [
            ev(Substance::Tobacco, 1.0, at),
            ev(Substance::Tobacco, 2.0, at + Duration::minutes(30)),
        ];
        let (x, _) = extract_features(&events, &[], end(), 48).unwrap();
        assert_eq!(x[10].values[1], 3.0);
    }

    #[test]
    fn stress_is_scaled_per_date() {
        let fb = DailyFeedback {
            user_id: "u".into(),
            date: "2026-05-31".parse().unwrap(),
            stress_level: 5,
            consumed_unlogged: false,
            backfill_events: vec![],
            notes: String::new(),
        };
        let (x, _) = extract_features(&[], &[fb], end(), 48).unwrap();
        assert_eq!(x[0].values[4], 0.0);
        assert_eq!(x[24].values[4], 1.0);
    }

    #[test]
    fn sequences_overlap_by_stride() {
        let (x, y) = extract_features(&[], &[], end(), 100).unwrap();
        let seqs = training_sequences(&x, &y, 48, 24);
        assert_eq!(seqs.len(), 3);
        assert!(seqs.iter().all(|s| s.inputs.len() == 48 && s.labels.len() == 47));
    }
}
