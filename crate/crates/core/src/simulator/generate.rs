// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::path::Path;
use crate::diversion::PointOfInterest;
use crate::domain::{
    ConsumptionEvent, DailyFeedback, EventId, EventSource, GeoPoint, InterestTag, LocationFix, RecoveryStage,
    Substance, UserId, UserProfile,
};
use crate::geo::{Geofence, TransitionRule};

const DAY_S: i64 = 86_400;

fn default_start() -> DateTime<Utc> {
    "2026-01-05T00:00:00Z".parse().expect("literal")
}

fn default_fix_interval() -> u32 {
    60
}

fn default_quantity() -> f64 {
    1.0
}

fn default_speed() -> f64 {
    1.4
}

fn default_stage() -> RecoveryStage {
    RecoveryStage::EarlyRecovery
}

/// A reproducible synthetic world: users with behaviour patterns plus the
/// fences, transition rules and POIs they move among.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub days: u32,
    /// First simulated instant.
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
    #[serde(default = "default_fix_interval")]
    pub fix_interval_s: u32,
    #[serde(default)]
    pub users: Vec<UserBehavior>,
    #[serde(default)]
    pub fences: Vec<Geofence>,
    #[serde(default)]
    pub rules: Vec<TransitionRule>,
    #[serde(default)]
    pub pois: Vec<PointOfInterest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserBehavior {
    pub user_id: UserId,
    #[serde(default)]
    pub display_name: String,
    #[serde(default)]
    pub utc_offset_minutes: i32,
    #[serde(default = "default_stage")]
    pub recovery_stage: RecoveryStage,
    #[serde(default)]
    pub interests: Vec<InterestTag>,
    pub substance: Substance,
    /// Ounces per drink or cigarettes per smoke.
    #[serde(default = "default_quantity")]
    pub quantity: f64,
    /// Local hour of day to probability of at least one event in that hour.
    #[serde(default, with = "hour_keys")]
    pub relapse_hours: BTreeMap<u32, f64>,
    /// Per-hour probability for hours not listed in `relapse_hours`.
    #[serde(default)]
    pub background_probability: f64,
    /// Chance of submitting the daily feedback survey.
    #[serde(default)]
    pub feedback_probability: f64,
    /// Without a home the user produces no location fixes and unlocated events.
    #[serde(default)]
    pub home: Option<GeoPoint>,
    /// Speed for trips to favourite spots, m/s.
    #[serde(default = "default_speed")]
    pub speed_mps: f64,
    #[serde(default)]
    pub favorite_spots: Vec<FavoriteSpot>,
    #[serde(default)]
    pub commute: Option<Commute>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FavoriteSpot {
    pub point: GeoPoint,
    /// Local hour (fractional allowed) at which the trip starts.
    pub depart_hour: f64,
    pub dwell_minutes: f64,
    /// Chance of making the trip on a given day.
    #[serde(default = "one")]
    pub probability: f64,
    /// Uniform jitter applied to departure and dwell, in minutes.
    #[serde(default)]
    pub jitter_minutes: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Commute {
    pub depart_hour: f64,
    pub waypoints: Vec<Waypoint>,
    /// When set, the user walks the waypoints back in reverse and returns home.
    #[serde(default)]
    pub return_hour: Option<f64>,
}

/// Leg target; `speed_mps` is the speed of the leg arriving here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub lat: f64,
    pub lon: f64,
    pub speed_mps: f64,
}

mod hour_keys {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<u32, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(h, p)| (h.to_string(), *p)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, f64>, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.trim()
                    .parse::<u32>()
                    .map(|h| (h, v))
                    .map_err(|_| D::Error::custom(format!("hour key {k:?} is not an integer")))
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field} = {value} is not a probability")]
    Probability { field: String, value: f64 },
    #[error("{field} = {value} must be positive")]
    NotPositive { field: String, value: f64 },
    #[error("{field} = {value} is not an hour of day")]
    Hour { field: String, value: f64 },
    #[error("user {0} listed twice")]
    DuplicateUser(UserId),
    #[error("utc offset {0} minutes out of range")]
    UtcOffset(i32),
    #[error("waypoint {0}: {1}")]
    Waypoint(usize, String),
    #[error("fix interval must be positive")]
    FixInterval,
}

/// Everything a scenario produces, each list sorted by time then user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub events: Vec<ConsumptionEvent>,
    pub fixes: Vec<LocationFix>,
    pub feedback: Vec<DailyFeedback>,
}

fn check_probability(field: impl Into<String>, p: f64) -> Result<(), ScenarioError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ScenarioError::Probability { field: field.into(), value: p })
    }
}

fn check_positive(field: impl Into<String>, v: f64) -> Result<(), ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ScenarioError::NotPositive { field: field.into(), value: v })
    }
}

fn check_hour(field: impl Into<String>, h: f64) -> Result<(), ScenarioError> {
    if (0.0..24.0).contains(&h) {
        Ok(())
    } else {
        Err(ScenarioError::Hour { field: field.into(), value: h })
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.fix_interval_s == 0 {
            return Err(ScenarioError::FixInterval);
        }
        let mut ids = BTreeSet::new();
        for u in &self.users {
            let id = u.user_id.as_str();
            if !ids.insert(&u.user_id) {
                return Err(ScenarioError::DuplicateUser(u.user_id.clone()));
            }
            if FixedOffset::east_opt(u.utc_offset_minutes * 60).is_none() {
                return Err(ScenarioError::UtcOffset(u.utc_offset_minutes));
            }
            for (&h, &p) in &u.relapse_hours {
                check_hour(format!("{id}.relapse_hours"), f64::from(h))?;
                check_probability(format!("{id}.relapse_hours.{h}"), p)?;
            }
            check_probability(format!("{id}.background_probability"), u.background_probability)?;
            check_probability(format!("{id}.feedback_probability"), u.feedback_probability)?;
            check_positive(format!("{id}.quantity"), u.quantity)?;
            check_positive(format!("{id}.speed_mps"), u.speed_mps)?;
            for (i, s) in u.favorite_spots.iter().enumerate() {
                check_hour(format!("{id}.favorite_spots[{i}].depart_hour"), s.depart_hour)?;
                check_probability(format!("{id}.favorite_spots[{i}].probability"), s.probability)?;
                if !(s.dwell_minutes >= 0.0 && s.jitter_minutes >= 0.0) {
                    return Err(ScenarioError::NotPositive {
                        field: format!("{id}.favorite_spots[{i}].dwell_minutes"),
                        value: s.dwell_minutes.min(s.jitter_minutes),
                    });
                }
            }
            if let Some(c) = &u.commute {
                check_hour(format!("{id}.commute.depart_hour"), c.depart_hour)?;
                if let Some(r) = c.return_hour {
                    check_hour(format!("{id}.commute.return_hour"), r)?;
                }
                for (i, w) in c.waypoints.iter().enumerate() {
                    check_positive(format!("{id}.commute.waypoints[{i}].speed_mps"), w.speed_mps)?;
                    GeoPoint::new(w.lat, w.lon).map_err(|e| ScenarioError::Waypoint(i, e.to_string()))?;
                }
            }
        }
        Ok(())
    }

    /// Profiles for the scenario's users, created at the scenario start.
    pub fn profiles(&self) -> Vec<UserProfile> {
        self.users
            .iter()
            .map(|u| UserProfile {
                user_id: u.user_id.clone(),
                display_name: if u.display_name.is_empty() {
                    u.user_id.as_str().to_owned()
                } else {
                    u.display_name.clone()
                },
                addiction_kinds: [u.substance].into_iter().collect(),
                recovery_stage: u.recovery_stage,
                interests: u.interests.clone(),
                home_region: u.home,
                utc_offset_minutes: u.utc_offset_minutes,
                created_at: self.start,
            })
            .collect()
    }
}

fn seconds(t: DateTime<Utc>, origin: DateTime<Utc>) -> f64 {
    (t - origin).num_milliseconds() as f64 / 1e3
}

fn local_midnight(date: NaiveDate, offset: FixedOffset) -> DateTime<Utc> {
    date.and_hms_opt(0, 0, 0).expect("midnight").and_utc() - Duration::seconds(i64::from(offset.local_minus_utc()))
}

fn user_rng(seed: u64, user_index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user_index as u64 * 4 + purpose);
    rng
}

enum Trip<'a> {
    Spot(&'a FavoriteSpot),
    CommuteOut(&'a Commute),
    CommuteBack(&'a Commute),
}

fn trajectory(u: &UserBehavior, home: GeoPoint, start: DateTime<Utc>, days: u32, rng: &mut ChaCha8Rng) -> Path {
    let offset = FixedOffset::east_opt(u.utc_offset_minutes * 60).expect("validated");
    let first_date = start.with_timezone(&offset).date_naive();
    let mut path = Path::new(0.0, home);
    // one extra local day covers a start that is not at local midnight
    for d in 0..=days {
        let midnight = seconds(local_midnight(first_date + Duration::days(i64::from(d)), offset), start);
        let mut trips: Vec<(f64, Trip<'_>)> = Vec::new();
        for spot in &u.favorite_spots {
            // draw every day so the stream does not depend on outcomes
            let go = rng.gen::<f64>() < spot.probability;
            let jitter = rng.gen_range(-1.0..=1.0) * spot.jitter_minutes * 60.0;
            if go {
                trips.push((midnight + spot.depart_hour * 3600.0 + jitter, Trip::Spot(spot)));
            }
        }
        if let Some(c) = &u.commute {
            trips.push((midnight + c.depart_hour * 3600.0, Trip::CommuteOut(c)));
            if let Some(r) = c.return_hour {
                trips.push((midnight + r * 3600.0, Trip::CommuteBack(c)));
            }
        }
        trips.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (at, trip) in trips {
            path.wait_until(at);
            match trip {
                Trip::Spot(spot) => {
                    path.travel_to(spot.point, u.speed_mps);
                    let dwell = (spot.dwell_minutes + rng.gen_range(-1.0..=1.0) * spot.jitter_minutes).max(0.0);
                    let (t, _) = path.end();
                    path.wait_until(t + dwell * 60.0);
                    path.travel_to(home, u.speed_mps);
                }
                Trip::CommuteOut(c) => {
                    for w in &c.waypoints {
                        path.travel_to(GeoPoint::new(w.lat, w.lon).expect("validated"), w.speed_mps);
                    }
                }
                Trip::CommuteBack(c) => {
                    let ws = &c.waypoints;
                    for i in (0..ws.len()).rev() {
                        let to = if i == 0 {
                            home
                        } else {
                            GeoPoint::new(ws[i - 1].lat, ws[i - 1].lon).expect("validated")
                        };
                        path.travel_to(to, ws[i].speed_mps);
                    }
                }
            }
        }
    }
    path
}

/// Runs the scenario. Output is a pure function of the scenario: every user
/// draws from their own seeded random streams.
pub fn generate(scenario: &Scenario) -> Result<SimOutput, ScenarioError> {
    scenario.validate()?;
    let start = scenario.start;
    let end = start + Duration::days(i64::from(scenario.days));
    let mut out = SimOutput::default();
    for (ui, u) in scenario.users.iter().enumerate() {
        let offset = FixedOffset::east_opt(u.utc_offset_minutes * 60).expect("validated");
        let path = u
            .home
            .map(|home| trajectory(u, home, start, scenario.days, &mut user_rng(scenario.seed, ui, 0)));

        if let Some(path) = &path {
            let step = i64::from(scenario.fix_interval_s);
            let total = i64::from(scenario.days) * DAY_S;
            let mut s = 0;
            while s < total {
                out.fixes.push(LocationFix {
                    user_id: u.user_id.clone(),
                    point: path.position(s as f64),
                    at: start + Duration::seconds(s),
                    accuracy_m: None,
                });
                s += step;
            }
        }

        let mut rng = user_rng(scenario.seed, ui, 1);
        let first_date = start.with_timezone(&offset).date_naive();
        for d in 0..=scenario.days {
            let date = first_date + Duration::days(i64::from(d));
            let midnight = local_midnight(date, offset);
            for h in 0..24u32 {
                let p = u.relapse_hours.get(&h).copied().unwrap_or(u.background_probability);
                let hit = rng.gen::<f64>() < p;
                let second = rng.gen_range(0..3600);
                let at = midnight + Duration::seconds(i64::from(h) * 3600 + second);
                if !hit || at < start || at >= end {
                    continue;
                }
                let quantity = match u.substance {
                    Substance::Alcohol => u.quantity,
                    Substance::Tobacco => u.quantity.round().max(1.0),
                };
                out.events.push(ConsumptionEvent {
                    event_id: EventId::new(format!("sim-{}-{date}-{h:02}", u.user_id.as_str())),
                    user_id: u.user_id.clone(),
                    substance: u.substance,
                    quantity,
                    at,
                    location: path.as_ref().map(|p| p.position(seconds(at, start))),
                    source: EventSource::Manual,
                });
            }
        }

        let mut rng = user_rng(scenario.seed, ui, 2);
        let last_date = (end - Duration::milliseconds(1)).with_timezone(&offset).date_naive();
        let mut date = first_date;
        while scenario.days > 0 && date <= last_date {
            let submit = rng.gen::<f64>() < u.feedback_probability;
            let stress = rng.gen_range(1..=5u8);
            if submit {
                out.feedback.push(DailyFeedback {
                    user_id: u.user_id.clone(),
                    date,
                    stress_level: stress,
                    consumed_unlogged: false,
                    backfill_events: Vec::new(),
                    notes: String::new(),
                });
            }
            date += Duration::days(1);
        }
    }
    out.events.sort_by(|a, b| (a.at, &a.user_id, &a.event_id).cmp(&(b.at, &b.user_id, &b.event_id)));
    out.fixes.sort_by(|a, b| (a.at, &a.user_id).cmp(&(b.at, &b.user_id)));
    out.feedback.sort_by(|a, b| (a.date, &a.user_id).cmp(&(b.date, &b.user_id)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::haversine_m;
    use chrono::Timelike;

    fn user(hours: &[(u32, f64)]) -> UserBehavior {
        UserBehavior {
            user_id: "u1".into(),
            display_name: String::new(),
            utc_offset_minutes: 0,
            recovery_stage: RecoveryStage::EarlyRecovery,
            interests: vec![],
            substance: Substance::Alcohol,
            quantity: 12.0,
            relapse_hours: hours.iter().copied().collect(),
            background_probability: 0.0,
            feedback_probability: 0.5,
            home: Some(GeoPoint::new(40.0, -3.7).unwrap()),
            speed_mps: 1.4,
            favorite_spots: vec![FavoriteSpot {
                point: GeoPoint::new(40.01, -3.7).unwrap(),
                depart_hour: 17.5,
                dwell_minutes: 60.0,
                probability: 0.8,
                jitter_minutes: 10.0,
            }],
            commute: Some(Commute {
                depart_hour: 8.0,
                waypoints: vec![
                    Waypoint { lat: 40.0, lon: -3.69, speed_mps: 5.0 },
                    Waypoint { lat: 40.02, lon: -3.66, speed_mps: 12.0 },
                ],
                return_hour: Some(16.0),
            }),
        }
    }

    fn scenario(days: u32, hours: &[(u32, f64)]) -> Scenario {
        Scenario {
            seed: 7,
            days,
            start: default_start(),
            fix_interval_s: 60,
            users: vec![user(hours)],
            fences: vec![],
            rules: vec![],
            pois: vec![],
        }
    }

    #[test]
    fn zero_days_is_empty() {
        assert_eq!(generate(&scenario(0, &[(18, 1.0)])).unwrap(), SimOutput::default());
    }

    #[test]
    fn certain_hour_gives_one_event_per_day() {
        let out = generate(&scenario(30, &[(18, 1.0)])).unwrap();
        assert_eq!(out.events.len(), 30);
        assert!(out.events.iter().all(|e| e.at.hour() == 18));
        assert_eq!(out.fixes.len(), 30 * 1440);
        // the event sits on the trajectory at its own instant
        let e = &out.events[0];
        let before = out.fixes.iter().rev().find(|f| f.at <= e.at).unwrap();
        assert!(haversine_m(before.point, e.location.unwrap()) <= 60.0 * 12.0 * 1.01);
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = scenario(5, &[(18, 0.9), (2, 0.3)]);
        let a = serde_json::to_vec(&generate(&s).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate(&s).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut other = s.clone();
        other.seed = 8;
        assert_ne!(a, serde_json::to_vec(&generate(&other).unwrap()).unwrap());
    }

    #[test]
    fn speed_never_exceeds_leg_speed() {
        let out = generate(&scenario(3, &[])).unwrap();
        for w in out.fixes.windows(2) {
            let v = haversine_m(w[0].point, w[1].point) / 60.0;
            assert!(v <= 12.0 * 1.01, "{v} m/s");
        }
    }

    #[test]
    fn offset_users_relapse_on_local_hours() {
        let mut s = scenario(10, &[(18, 1.0)]);
        s.users[0].utc_offset_minutes = 120;
        let out = generate(&s).unwrap();
        assert_eq!(out.events.len(), 10);
        assert!(out.events.iter().all(|e| e.at.hour() == 16));
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let text = r#"
            seed = 42
            days = 2
            [[users]]
            user_id = "ana"
            substance = "tobacco"
            relapse_hours = { 18 = 0.9, "7" = 0.5 }
            background_probability = 0.02
        "#;
        let s = Scenario::from_toml_str(text).unwrap();
        assert_eq!(s.users[0].relapse_hours[&7], 0.5);
        let back = Scenario::from_toml_str(&toml::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);

        let bad = text.replace("0.9", "1.5");
        assert!(matches!(Scenario::from_toml_str(&bad), Err(ScenarioError::Probability { .. })));
        let bad = text.replace("\"7\"", "\"seven\"");
        assert!(matches!(Scenario::from_toml_str(&bad), Err(ScenarioError::Parse(_))));
        let mut s = scenario(1, &[]);
        s.users[0].speed_mps = 0.0;
        assert!(matches!(s.validate(), Err(ScenarioError::NotPositive { .. })));
    }
}
