// SPDX-License-Identifier: Apache-2.0

//! Shared domain vocabulary: users, consumption events, locations, feedback.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(UserId);
string_id!(EventId);
string_id!(FenceId);
string_id!(PoiId);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Substance {
    Alcohol,
    Tobacco,
}

impl Substance {
    pub const ALL: [Substance; 2] = [Substance::Alcohol, Substance::Tobacco];

    pub fn as_str(self) -> &'static str {
        match self {
            Substance::Alcohol => "alcohol",
            Substance::Tobacco => "tobacco",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryStage {
    ActiveUse,
    EarlyRecovery,
    SustainedRecovery,
    Recovered,
    Therapist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterestTheme {
    Food,
    Fitness,
    Shopping,
    Entertainment,
    Other,
}

impl InterestTheme {
    pub fn as_str(self) -> &'static str {
        match self {
            InterestTheme::Food => "food",
            InterestTheme::Fitness => "fitness",
            InterestTheme::Shopping => "shopping",
            InterestTheme::Entertainment => "entertainment",
            InterestTheme::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "food" => Some(InterestTheme::Food),
            "fitness" => Some(InterestTheme::Fitness),
            "shopping" => Some(InterestTheme::Shopping),
            "entertainment" => Some(InterestTheme::Entertainment),
            "other" => Some(InterestTheme::Other),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InterestTag {
    pub theme: InterestTheme,
    #[serde(default)]
    pub subcategory: String,
}

impl InterestTag {
    pub fn new(theme: InterestTheme, subcategory: impl Into<String>) -> Self {
        Self {
            theme,
            subcategory: subcategory.into(),
        }
    }

    /// Short label used in notification text.
    pub fn activity(&self) -> &str {
        if self.subcategory.trim().is_empty() {
            self.theme.as_str()
        } else {
            &self.subcategory
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("addiction kinds may only be empty for therapists")]
    NoAddictionKinds,
    #[error("duplicate interest {0:?}")]
    DuplicateInterest(InterestTag),
    #[error("interest with theme `other` needs a subcategory")]
    MissingSubcategory,
    #[error("stress level {0} outside 1..=5")]
    StressLevel(u8),
    #[error("utc offset {0} minutes out of range")]
    UtcOffset(i32),
    #[error("{0} must not be empty")]
    Empty(&'static str),
}

/// A point on the WGS84 sphere in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, DomainError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(DomainError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(DomainError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lat: f64,
            lon: f64,
        }
        let raw = Raw::deserialize(d)?;
        GeoPoint::new(raw.lat, raw.lon).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub display_name: String,
    pub addiction_kinds: BTreeSet<Substance>,
    pub recovery_stage: RecoveryStage,
    #[serde(default)]
    pub interests: Vec<InterestTag>,
    #[serde(default)]
    pub home_region: Option<GeoPoint>,
    /// Fixed offset from UTC used for calendar bucketing and local schedules.
    #[serde(default)]
    pub utc_offset_minutes: i32,
    pub created_at: DateTime<Utc>,
}

impl UserProfile {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.user_id.0.trim().is_empty() {
            return Err(DomainError::Empty("user_id"));
        }
        if self.addiction_kinds.is_empty() && self.recovery_stage != RecoveryStage::Therapist {
            return Err(DomainError::NoAddictionKinds);
        }
        let mut seen = HashSet::new();
        for tag in &self.interests {
            if tag.theme == InterestTheme::Other && tag.subcategory.trim().is_empty() {
                return Err(DomainError::MissingSubcategory);
            }
            if !seen.insert(tag) {
                return Err(DomainError::DuplicateInterest(tag.clone()));
            }
        }
        // real-world offsets span -12:00..=+14:00
        if !(-12 * 60..=14 * 60).contains(&self.utc_offset_minutes) {
            return Err(DomainError::UtcOffset(self.utc_offset_minutes));
        }
        Ok(())
    }

    pub fn is_therapist(&self) -> bool {
        self.recovery_stage == RecoveryStage::Therapist
    }

    pub fn offset(&self) -> chrono::FixedOffset {
        chrono::FixedOffset::east_opt(self.utc_offset_minutes * 60).expect("validated offset")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EventSource {
    #[default]
    Manual,
    SurveyBackfill,
}

/// One logged drink or smoke. Alcohol is measured in fluid ounces, tobacco in
/// cigarettes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionEvent {
    pub event_id: EventId,
    pub user_id: UserId,
    pub substance: Substance,
    pub quantity: f64,
    pub at: DateTime<Utc>,
    #[serde(default)]
    pub location: Option<GeoPoint>,
    #[serde(default)]
    pub source: EventSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationFix {
    pub user_id: UserId,
    pub point: GeoPoint,
    pub at: DateTime<Utc>,
    #[serde(default)]
    pub accuracy_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyFeedback {
    pub user_id: UserId,
    pub date: NaiveDate,
    pub stress_level: u8,
    pub consumed_unlogged: bool,
    #[serde(default)]
    pub backfill_events: Vec<ConsumptionEvent>,
    #[serde(default)]
    pub notes: String,
}

impl DailyFeedback {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(1..=5).contains(&self.stress_level) {
            return Err(DomainError::StressLevel(self.stress_level));
        }
        Ok(())
    }
}

/// Machine-readable reason an event was rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum EventRejection {
    #[error("event timestamp lies in the future")]
    FutureTimestamp,
    #[error("quantity must be non-negative")]
    NegativeQuantity,
    #[error("cigarette quantities must be whole numbers")]
    FractionalCigarette,
    #[error("quantity must be a finite number")]
    NonFiniteQuantity,
    #[error("unknown user")]
    UnknownUser,
}

impl EventRejection {
    pub fn code(self) -> &'static str {
        match self {
            EventRejection::FutureTimestamp => "FutureTimestamp",
            EventRejection::NegativeQuantity => "NegativeQuantity",
            EventRejection::FractionalCigarette => "FractionalCigarette",
            EventRejection::NonFiniteQuantity => "NonFiniteQuantity",
            EventRejection::UnknownUser => "UnknownUser",
        }
    }
}

/// Lookup used by [`validate_event`] to check that an event's owner exists.
pub trait UserDirectory {
    fn contains(&self, user: &UserId) -> bool;
}

impl<F: Fn(&UserId) -> bool> UserDirectory for F {
    fn contains(&self, user: &UserId) -> bool {
        self(user)
    }
}

impl UserDirectory for HashSet<UserId> {
    fn contains(&self, user: &UserId) -> bool {
        HashSet::contains(self, user)
    }
}

/// Checks a candidate event against ingestion rules and returns its
/// normalized form.
pub fn validate_event(
    raw: &ConsumptionEvent,
    now: DateTime<Utc>,
    users: &impl UserDirectory,
) -> Result<ConsumptionEvent, EventRejection> {
    if !users.contains(&raw.user_id) {
        return Err(EventRejection::UnknownUser);
    }
    if raw.at > now {
        return Err(EventRejection::FutureTimestamp);
    }
    if !raw.quantity.is_finite() {
        return Err(EventRejection::NonFiniteQuantity);
    }
    if raw.quantity < 0.0 {
        return Err(EventRejection::NegativeQuantity);
    }
    if raw.substance == Substance::Tobacco && raw.quantity.fract() != 0.0 {
        return Err(EventRejection::FractionalCigarette);
    }
    let mut event = raw.clone();
    // collapse -0.0
    event.quantity += 0.0;
    Ok(event)
}

/// Secret used to derive stable pseudonyms for exported events.
#[derive(Clone)]
pub struct PseudonymKey(Vec<u8>);

impl PseudonymKey {
    pub fn new(secret: impl AsRef<[u8]>) -> Self {
        Self(secret.as_ref().to_vec())
    }

    pub fn pseudonym(&self, user: &UserId) -> UserId {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(user.0.as_bytes());
        let digest = mac.finalize().into_bytes();
        UserId(format!("anon-{}", hex::encode(&digest[..16])))
    }
}

impl fmt::Debug for PseudonymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PseudonymKey(..)")
    }
}

/// Truncates a coordinate toward zero at three decimals (about 110 m).
pub fn coarsen_coordinate(value: f64) -> f64 {
    // the nudge keeps values like 0.29 (stored as 0.28999…) from losing a digit
    let scaled = value * 1000.0;
    let nudged = scaled + 1e-7 * scaled.signum();
    nudged.trunc() / 1000.0
}

/// Copy of `event` with the owner replaced by a keyed pseudonym and the
/// location coarsened to three decimal places.
pub fn anonymize(event: &ConsumptionEvent, key: &PseudonymKey) -> ConsumptionEvent {
    let mut out = event.clone();
    out.user_id = key.pseudonym(&event.user_id);
    out.location = event.location.map(|p| GeoPoint {
        lat: coarsen_coordinate(p.lat),
        lon: coarsen_coordinate(p.lon),
    });
    out
}
