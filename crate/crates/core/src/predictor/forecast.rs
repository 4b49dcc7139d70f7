// SPDX-License-Identifier: Apache-2.0

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::features::{ceil_hour, extract_features, floor_hour, hour_features};
use super::lstm::{forward_with_state, lstm_step, readout};
use super::{LstmParams, PredictorError};
use crate::domain::{ConsumptionEvent, DailyFeedback};

/// Forecasts need at least two days of history.
pub const MIN_HISTORY_HOURS: i64 = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HourlyRisk {
    pub hour_start: DateTime<Utc>,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub hours: Vec<HourlyRisk>,
    /// Index of the most likely hour; the earliest wins ties.
    pub peak: usize,
}

impl Forecast {
    pub fn peak_hour(&self) -> &HourlyRisk {
        &self.hours[self.peak]
    }
}

/// Probabilities for the `horizon_hours` whole hours starting at the first
/// hour boundary at or after `now`.
///
/// The model first runs over the observed window ending at that boundary
/// (the most recent `window_hours`, or everything since `history_start` if
/// shorter). Later hours are rolled out by feeding zero consumption with the
/// calendar and stress features of each further hour.
pub fn predict_next_hours(
    p: &LstmParams,
    events: &[ConsumptionEvent],
    feedback: &[DailyFeedback],
    history_start: DateTime<Utc>,
    now: DateTime<Utc>,
    horizon_hours: usize,
    window_hours: usize,
) -> Result<Forecast, PredictorError> {
    if horizon_hours == 0 {
        return Err(PredictorError::InvalidHorizon);
    }
    let anchor = ceil_hour(now);
    let available = (anchor - floor_hour(history_start)).num_hours();
    if available < MIN_HISTORY_HOURS {
        return Err(PredictorError::InsufficientHistory {
            available: available.max(0),
            required: MIN_HISTORY_HOURS,
        });
    }
    let window = window_hours.min(available as usize);
    let (features, _) = extract_features(events, feedback, anchor, window)?;
    let (outputs, mut state) = forward_with_state(p, &features)?;

    let mut hours = Vec::with_capacity(horizon_hours);
    hours.push(HourlyRisk {
        hour_start: anchor,
        probability: *outputs.last().expect("non-empty window"),
    });
    for k in 1..horizon_hours {
        let input_hour = anchor + Duration::hours(k as i64 - 1);
        let x = hour_features(input_hour, 0.0, 0.0, feedback);
        state = lstm_step(p, &x, &state)?;
        hours.push(HourlyRisk {
            hour_start: anchor + Duration::hours(k as i64),
            probability: readout(p, &state.h),
        });
    }
    let mut peak = 0;
    for (i, h) in hours.iter().enumerate() {
        if h.probability > hours[peak].probability {
            peak = i;
        }
    }
    Ok(Forecast { hours, peak })
}

/// One-step-ahead forecast for each of `hours` consecutive hours starting at
/// `from` (rounded up to a whole hour), paired with whether any event
/// actually fell in that hour. Each forecast only sees events before its hour.
pub fn next_hour_backtest(
    p: &LstmParams,
    events: &[ConsumptionEvent],
    feedback: &[DailyFeedback],
    history_start: DateTime<Utc>,
    from: DateTime<Utc>,
    hours: usize,
    window_hours: usize,
) -> Result<Vec<(HourlyRisk, bool)>, PredictorError> {
    let first = ceil_hour(from);
    crate::exec::map_range(hours, |k| {
        let hour_start = first + Duration::hours(k as i64);
        let f = predict_next_hours(p, events, feedback, history_start, hour_start, 1, window_hours)?;
        let hit = events
            .iter()
            .any(|e| e.at >= hour_start && e.at < hour_start + Duration::hours(1));
        Ok((f.hours[0].clone(), hit))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{forward, FEATURE_COUNT};

    fn t(s: &str) -> DateTime<Utc> {
        s.parse().unwrap()
    }

    #[test]
    fn zero_model_is_flat_and_peaks_first() {
        let p = LstmParams::zeros(4, FEATURE_COUNT);
        let f = predict_next_hours(&p, &[], &[], t("2026-01-01T00:00:00Z"), t("2026-01-10T09:15:00Z"), 24, 720)
            .unwrap();
        assert_eq!(f.hours.len(), 24);
        assert!(f.hours.iter().all(|h| h.probability == 0.5));
        assert_eq!(f.peak, 0);
        assert_eq!(f.hours[0].hour_start, t("2026-01-10T10:00:00Z"));
        assert_eq!(f.hours[23].hour_start, t("2026-01-11T09:00:00Z"));
    }

    #[test]
    fn horizon_one_matches_forward() {
        let p = LstmParams::init(5, FEATURE_COUNT, 3);
        let start = t("2026-01-01T00:00:00Z");
        let now = t("2026-01-05T00:00:00Z");
        let f = predict_next_hours(&p, &[], &[], start, now, 1, 720).unwrap();
        let (x, _) = extract_features(&[], &[], now, 96).unwrap();
        assert_eq!(f.hours[0].probability, *forward(&p, &x).unwrap().last().unwrap());
    }

    #[test]
    fn rollout_continues_the_sequence() {
        // Rolling out with zero consumption equals running forward over the
        // longer zero-consumption window.
        let p = LstmParams::init(5, FEATURE_COUNT, 8);
        let start = t("2026-01-01T00:00:00Z");
        let now = t("2026-01-04T00:00:00Z");
        let f = predict_next_hours(&p, &[], &[], start, now, 5, 720).unwrap();
        let (x, _) = extract_features(&[], &[], now + Duration::hours(4), 76).unwrap();
        let y = forward(&p, &x).unwrap();
        for k in 0..5 {
            assert!((f.hours[k].probability - y[71 + k]).abs() < 1e-15);
        }
    }

    #[test]
    fn short_history_and_bad_horizon() {
        let p = LstmParams::zeros(2, FEATURE_COUNT);
        let start = t("2026-01-01T00:00:00Z");
        assert_eq!(
            predict_next_hours(&p, &[], &[], start, t("2026-01-02T23:00:00Z"), 3, 720),
            Err(PredictorError::InsufficientHistory {
                available: 47,
                required: 48
            })
        );
        assert_eq!(
            predict_next_hours(&p, &[], &[], start, t("2026-01-09T00:00:00Z"), 0, 720),
            Err(PredictorError::InvalidHorizon)
        );
    }

    #[test]
    fn backtest_labels_and_matches_single_forecasts() {
        use crate::domain::{ConsumptionEvent, EventSource, Substance};
        let p = LstmParams::init(4, FEATURE_COUNT, 9);
        let start = t("2026-01-01T00:00:00Z");
        let ev = ConsumptionEvent {
            event_id: "e".into(),
            user_id: "u".into(),
            substance: Substance::Tobacco,
            quantity: 1.0,
            at: t("2026-01-05T03:30:00Z"),
            location: None,
            source: EventSource::Manual,
        };
        let events = [ev];
        let from = t("2026-01-05T00:20:00Z");
        let rows = next_hour_backtest(&p, &events, &[], start, from, 5, 720).unwrap();
        let hits: Vec<bool> = rows.iter().map(|r| r.1).collect();
        assert_eq!(hits, [false, false, true, false, false]);
        assert_eq!(rows[0].0.hour_start, t("2026-01-05T01:00:00Z"));
        for (risk, _) in &rows {
            let single = predict_next_hours(&p, &events, &[], start, risk.hour_start, 1, 720).unwrap();
            assert_eq!(single.hours[0], *risk);
        }
    }
}
