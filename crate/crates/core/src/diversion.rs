// SPDX-License-Identifier: Apache-2.0

//! Diversion notifications: nearby interest-matched places on fence entry,
//! pre-relapse nudges ahead of the predicted peak, dwell warnings, the
//! nightly feedback survey and a daily motivational quote.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::io::Read;
use std::sync::Mutex;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{FenceId, GeoPoint, InterestTheme, PoiId, UserId, UserProfile};
use crate::geo::{haversine_m, FenceEvent, FenceEventKind, FenceKind, Geofence};
use crate::predictor::HourlyRisk;

pub const DIVERSION_RADIUS_M: f64 = 2_000.0;
/// At most one fence-entry diversion per (user, fence) within this window.
pub const ENTRY_RATE_LIMIT_S: i64 = 3_600;
/// How long a fence-entry suggestion stays relevant.
pub const SUGGESTION_VALIDITY_S: i64 = 3_600;
pub const PRE_RELAPSE_LEAD_S: i64 = 600;
pub const DEFAULT_RELAPSE_THRESHOLD: f64 = 0.5;
pub const FEEDBACK_LOCAL_HOUR: u32 = 21;
pub const MOTIVATIONAL_LOCAL_HOUR: u32 = 9;

const QUOTES: [&str; 7] = [
    "One hour at a time is still progress.",
    "Cravings peak and pass. Ride this one out.",
    "You have already done the hardest part: starting.",
    "Every clean day makes the next one easier.",
    "Call someone who has your back today.",
    "Notice the urge, name it, let it go.",
    "Future you is grateful for today's choice.",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointOfInterest {
    pub poi_id: PoiId,
    pub name: String,
    pub location: GeoPoint,
    pub theme: InterestTheme,
    pub open: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NotificationKind {
    FenceEntryDiversion,
    PreRelapseDiversion,
    DwellViolation,
    Motivational,
    FeedbackRequest,
}

impl NotificationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NotificationKind::FenceEntryDiversion => "fence-entry-diversion",
            NotificationKind::PreRelapseDiversion => "pre-relapse-diversion",
            NotificationKind::DwellViolation => "dwell-violation",
            NotificationKind::Motivational => "motivational",
            NotificationKind::FeedbackRequest => "feedback-request",
        }
    }
}

/// Why a notification exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Reason {
    Fence {
        fence_id: FenceId,
        event: FenceEventKind,
        at: DateTime<Utc>,
    },
    PredictedPeak {
        hour_start: DateTime<Utc>,
        probability: f64,
    },
    Daily {
        date: NaiveDate,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    /// Derived from the notification's cause, so re-deriving it yields the
    /// same id.
    pub notif_id: String,
    pub user_id: UserId,
    pub kind: NotificationKind,
    pub body: String,
    #[serde(default)]
    pub recommendation: Option<PointOfInterest>,
    #[serde(default)]
    pub activities: Vec<String>,
    pub scheduled_for: DateTime<Utc>,
    #[serde(default)]
    pub expires_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub delivered_at: Option<DateTime<Utc>>,
    pub reason: Reason,
}

/// Nearest open POI within [`DIVERSION_RADIUS_M`] whose theme matches one of
/// the user's interests; equal distances go to the smaller `poi_id`.
pub fn recommend_diversion<'a>(
    user: &UserProfile,
    at: GeoPoint,
    pois: &'a [PointOfInterest],
) -> Option<&'a PointOfInterest> {
    pois.iter()
        .filter(|p| p.open && user.interests.iter().any(|i| i.theme == p.theme))
        .map(|p| (haversine_m(at, p.location), p))
        .filter(|(d, _)| *d <= DIVERSION_RADIUS_M)
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.poi_id.cmp(&b.poi_id)))
        .map(|(_, p)| p)
}

fn activities(user: &UserProfile) -> Vec<String> {
    user.interests.iter().map(|i| i.activity().to_owned()).collect()
}

fn spot_name(fence: &Geofence) -> String {
    if !fence.label.is_empty() {
        return fence.label.clone();
    }
    match fence.kind {
        FenceKind::AlcoholSpot => "an alcohol spot".into(),
        FenceKind::TobaccoSpot => "a smoking spot".into(),
        FenceKind::Custom => "one of your alert zones".into(),
    }
}

/// Turns fence events into notifications, remembering recent fence-entry
/// diversions for rate limiting.
#[derive(Debug, Default, Clone)]
pub struct DiversionPolicy {
    last_entry: HashMap<(UserId, FenceId), DateTime<Utc>>,
}

impl DiversionPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    /// `Entered` yields a fence-entry diversion (rate limited per fence),
    /// `DwellViolation` a dwell warning, anything else nothing. Notifications
    /// are due at the event time, or `now` if the event is already past.
    pub fn on_fence_event(
        &mut self,
        ev: &FenceEvent,
        user: &UserProfile,
        fence: &Geofence,
        pois: &[PointOfInterest],
        now: DateTime<Utc>,
    ) -> Option<Notification> {
        let due = ev.at.max(now);
        let reason = Reason::Fence {
            fence_id: ev.fence_id.clone(),
            event: ev.kind,
            at: ev.at,
        };
        match ev.kind {
            FenceEventKind::Entered => {
                let key = (ev.user_id.clone(), ev.fence_id.clone());
                if let Some(last) = self.last_entry.get(&key) {
                    if (ev.at - *last).num_seconds() < ENTRY_RATE_LIMIT_S {
                        return None;
                    }
                }
                self.last_entry.insert(key, ev.at);
                let recommendation = recommend_diversion(user, fence.center, pois).cloned();
                let body = match &recommendation {
                    Some(p) => format!(
                        "You just entered {}. How about {} instead? It is close by.",
                        spot_name(fence),
                        p.name
                    ),
                    None => format!("You just entered {}. Take a moment before you decide.", spot_name(fence)),
                };
                Some(Notification {
                    notif_id: format!(
                        "{}:{}:{}:{}",
                        NotificationKind::FenceEntryDiversion.as_str(),
                        ev.user_id,
                        ev.fence_id,
                        ev.at.timestamp()
                    ),
                    user_id: ev.user_id.clone(),
                    kind: NotificationKind::FenceEntryDiversion,
                    body,
                    recommendation,
                    activities: activities(user),
                    scheduled_for: due,
                    expires_at: Some(due + Duration::seconds(SUGGESTION_VALIDITY_S)),
                    delivered_at: None,
                    reason,
                })
            }
            FenceEventKind::DwellViolation => Some(Notification {
                notif_id: format!(
                    "{}:{}:{}:{}",
                    NotificationKind::DwellViolation.as_str(),
                    ev.user_id,
                    ev.fence_id,
                    ev.at.timestamp()
                ),
                user_id: ev.user_id.clone(),
                kind: NotificationKind::DwellViolation,
                body: format!("You have stayed at {} longer than planned. Time to head out?", spot_name(fence)),
                recommendation: None,
                activities: activities(user),
                scheduled_for: due,
                expires_at: None,
                delivered_at: None,
                reason,
            }),
            _ => None,
        }
    }
}

/// A pre-relapse diversion ten minutes before the most likely hour when
/// its probability reaches `threshold`. Returns `None` when that moment has
/// already passed at `now`.
pub fn schedule_prerelapse(
    predictions: &[HourlyRisk],
    threshold: f64,
    user: &UserProfile,
    now: DateTime<Utc>,
) -> Option<Notification> {
    let mut peak = predictions.first()?;
    for h in predictions {
        if h.probability > peak.probability {
            peak = h;
        }
    }
    if peak.probability < threshold {
        return None;
    }
    let scheduled_for = peak.hour_start - Duration::seconds(PRE_RELAPSE_LEAD_S);
    if scheduled_for < now {
        return None;
    }
    let local = peak.hour_start.with_timezone(&user.offset());
    let acts = activities(user);
    let suggestion = match acts.first() {
        Some(a) => format!(" Try some {a} instead."),
        None => String::new(),
    };
    Some(Notification {
        notif_id: format!(
            "{}:{}:{}",
            NotificationKind::PreRelapseDiversion.as_str(),
            user.user_id,
            peak.hour_start.timestamp()
        ),
        user_id: user.user_id.clone(),
        kind: NotificationKind::PreRelapseDiversion,
        body: format!(
            "The next hour ({}) is usually a hard one for you.{suggestion}",
            local.format("%H:%M")
        ),
        recommendation: None,
        activities: acts,
        scheduled_for,
        expires_at: Some(peak.hour_start + Duration::hours(1)),
        delivered_at: None,
        reason: Reason::PredictedPeak {
            hour_start: peak.hour_start,
            probability: peak.probability,
        },
    })
}

/// UTC instant of `hour`:00 on the user's local `date`.
pub fn local_time_utc(user: &UserProfile, date: NaiveDate, hour: u32) -> DateTime<Utc> {
    let local = date.and_time(NaiveTime::from_hms_opt(hour, 0, 0).expect("valid hour"));
    user.offset()
        .from_local_datetime(&local)
        .single()
        .expect("fixed offsets are unambiguous")
        .with_timezone(&Utc)
}

/// The end-of-day survey for the user's local `date`, due at 21:00 local.
/// The id depends only on user and date, so a queue keyed by id keeps one
/// request per day.
pub fn daily_feedback_request(user: &UserProfile, date: NaiveDate) -> Notification {
    Notification {
        notif_id: format!("{}:{}:{}", NotificationKind::FeedbackRequest.as_str(), user.user_id, date),
        user_id: user.user_id.clone(),
        kind: NotificationKind::FeedbackRequest,
        body: "How did today go? Two quick questions about stress and cravings.".into(),
        recommendation: None,
        activities: vec![],
        scheduled_for: local_time_utc(user, date, FEEDBACK_LOCAL_HOUR),
        expires_at: None,
        delivered_at: None,
        reason: Reason::Daily { date },
    }
}

pub fn motivational(user: &UserProfile, date: NaiveDate) -> Notification {
    let day = date.signed_duration_since(NaiveDate::default()).num_days();
    let quote = QUOTES[day.rem_euclid(QUOTES.len() as i64) as usize];
    Notification {
        notif_id: format!("{}:{}:{}", NotificationKind::Motivational.as_str(), user.user_id, date),
        user_id: user.user_id.clone(),
        kind: NotificationKind::Motivational,
        body: quote.into(),
        recommendation: None,
        activities: vec![],
        scheduled_for: local_time_utc(user, date, MOTIVATIONAL_LOCAL_HOUR),
        expires_at: None,
        delivered_at: None,
        reason: Reason::Daily { date },
    }
}

#[derive(Debug, Default)]
struct QueueState {
    heap: BinaryHeap<Reverse<(DateTime<Utc>, String)>>,
    pending: HashMap<String, Notification>,
    delivered: HashMap<String, DateTime<Utc>>,
}

/// Pending notifications ordered by due time (then id). Safe to share
/// between producers and a single dispatcher.
#[derive(Debug, Default)]
pub struct NotificationQueue {
    state: Mutex<QueueState>,
}

impl NotificationQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `n` unless a notification with the same id is pending or was
    /// already delivered; returns the pending copy in the first case and
    /// `n` otherwise, along with whether it was newly queued.
    pub fn enqueue(&self, n: Notification) -> (Notification, bool) {
        let mut st = self.state.lock().expect("queue lock");
        if let Some(existing) = st.pending.get(&n.notif_id) {
            return (existing.clone(), false);
        }
        if st.delivered.contains_key(&n.notif_id) {
            return (n, false);
        }
        st.heap.push(Reverse((n.scheduled_for, n.notif_id.clone())));
        st.pending.insert(n.notif_id.clone(), n.clone());
        (n, true)
    }

    /// Removes and returns everything due at `now`, in due order, stamped
    /// as delivered at `now`.
    pub fn drain_due(&self, now: DateTime<Utc>) -> Vec<Notification> {
        let mut st = self.state.lock().expect("queue lock");
        let mut out = Vec::new();
        while let Some(Reverse((due, _))) = st.heap.peek() {
            if *due > now {
                break;
            }
            let Reverse((_, id)) = st.heap.pop().expect("peeked");
            if let Some(mut n) = st.pending.remove(&id) {
                n.delivered_at = Some(now);
                st.delivered.insert(id, now);
                out.push(n);
            }
        }
        out
    }

    pub fn next_due(&self) -> Option<DateTime<Utc>> {
        let st = self.state.lock().expect("queue lock");
        st.heap.peek().map(|Reverse((t, _))| *t)
    }

    pub fn pending_len(&self) -> usize {
        self.state.lock().expect("queue lock").pending.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PoiImportError {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Deserialize)]
struct PoiRow {
    poi_id: String,
    name: String,
    lat: f64,
    lon: f64,
    theme: String,
    open: String,
}

/// Reads `poi_id,name,lat,lon,theme,open` rows (with header). `open`
/// accepts true/false, yes/no or 1/0.
pub fn read_poi_csv<R: Read>(input: R) -> Result<Vec<PointOfInterest>, PoiImportError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for row in reader.deserialize::<PoiRow>() {
        let row = row?;
        let line = out.len() as u64 + 2;
        let fail = |message: String| PoiImportError::Row { line, message };
        let location = GeoPoint::new(row.lat, row.lon).map_err(|e| fail(e.to_string()))?;
        let theme = InterestTheme::parse(&row.theme).ok_or_else(|| fail(format!("unknown theme {:?}", row.theme)))?;
        let open = match row.open.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => true,
            "false" | "no" | "0" => false,
            other => return Err(fail(format!("open must be true or false, got {other:?}"))),
        };
        if row.poi_id.is_empty() {
            return Err(fail("empty poi_id".into()));
        }
        out.push(PointOfInterest {
            poi_id: row.poi_id.into(),
            name: row.name,
            location,
            theme,
            open,
        });
    }
    Ok(out)
}
