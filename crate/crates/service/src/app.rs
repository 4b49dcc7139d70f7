// SPDX-License-Identifier: Apache-2.0

//! Everything the service does, independent of HTTP: ingestion, fence
//! tracking, statistics, predictions, notifications and the scheduler tick.
//! The HTTP layer and the CLI are thin wrappers over [`App`].

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex, RwLock};

use addictfree_core::clock::Clock;
use addictfree_core::community::{
    suggest_connections, Comment, Community, CommunityError, ConnectionSuggestion, Message, Post,
};
use addictfree_core::diversion::{
    daily_feedback_request, motivational, schedule_prerelapse, DiversionPolicy, Notification, NotificationQueue,
    PointOfInterest,
};
use addictfree_core::domain::{
    validate_event, ConsumptionEvent, DailyFeedback, EventId, EventSource, FenceId, GeoPoint, InterestTag,
    LocationFix, RecoveryStage, Substance, UserId, UserProfile,
};
use addictfree_core::exec;
use addictfree_core::geo::{
    active_fences_for, fences_overlap, step, validate_constraints, ConstraintViolation, DurationConstraint,
    FenceEvent, FenceKind, FenceLayout, FenceMachine, FenceOwner, Geofence, StepError, TransitionRule,
};
use addictfree_core::predictor::{
    extract_features, floor_hour, predict_next_hours, read_checkpoint, train_from_seed, training_sequences,
    write_checkpoint, Checkpoint, Forecast, LstmParams, PredictorError, Sequence, TrainReport,
    MIN_HISTORY_HOURS,
};
use addictfree_core::stats::{
    daily_summary, local_date, monthly_series, weekly_scores, DailySummary, MonthlySeries, WeeklyScores, YearMonth,
};
use addictfree_store::{time_key, Namespace, Store, StoreError, SyncMode, WriteBatch};
use chrono::{DateTime, Duration, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::config::{ServiceConfig, StoreSync};

/// Users and the state machine records sort after every user id, which
/// may not contain `~` or `/`.
const AUTH_PREFIX: &str = "~auth/";
const STATE_PREFIX: &str = "~state/";
const META_PREFIX: &str = "~meta/";
const POOLED_MODEL_KEY: &str = "~pooled";
const FENCE_PREFIX: &str = "fence/";
const RULE_PREFIX: &str = "rule/";
/// Local hour at which per-user models are retrained.
pub const RETRAIN_LOCAL_HOUR: u32 = 3;
pub const MAX_HORIZON_HOURS: usize = 168;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{message}")]
    Conflict { code: &'static str, message: String },
    #[error("{message}")]
    Rejected { code: &'static str, message: String },
    #[error("invalid constraints: {}", .0.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join("; "))]
    Constraints(Vec<ConstraintViolation>),
    #[error("{0}")]
    BadRequest(String),
    #[error("not allowed")]
    Forbidden,
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("{0}")]
    Internal(String),
}

impl AppError {
    fn rejected(code: &'static str, message: impl Into<String>) -> Self {
        AppError::Rejected { code, message: message.into() }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            AppError::NotFound(_) => "NotFound",
            AppError::Conflict { code, .. } | AppError::Rejected { code, .. } => code,
            AppError::Constraints(_) => "ConstraintViolation",
            AppError::BadRequest(_) => "BadRequest",
            AppError::Forbidden => "Forbidden",
            AppError::Store(StoreError::VersionConflict { .. }) => "VersionConflict",
            AppError::Store(_) => "StoreError",
            AppError::Internal(_) => "Internal",
        }
    }
}

impl From<CommunityError> for AppError {
    fn from(e: CommunityError) -> Self {
        match e {
            CommunityError::EmptyTitle => AppError::rejected("EmptyTitle", e.to_string()),
            CommunityError::EmptyBody => AppError::rejected("EmptyBody", e.to_string()),
            CommunityError::InvalidK => AppError::BadRequest(e.to_string()),
            CommunityError::UnknownUser(u) => AppError::NotFound(format!("user {u}")),
            CommunityError::UnknownPost(p) => AppError::NotFound(format!("post {p}")),
            CommunityError::Store(s) => AppError::Store(s),
        }
    }
}

impl From<PredictorError> for AppError {
    fn from(e: PredictorError) -> Self {
        match e {
            PredictorError::InsufficientHistory { .. } => AppError::rejected("InsufficientHistory", e.to_string()),
            PredictorError::InvalidHorizon => AppError::BadRequest(e.to_string()),
            other => AppError::Internal(other.to_string()),
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;

/// Who is making a request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Principal {
    Operator,
    User(UserId),
}

impl Principal {
    pub fn may_act_for(&self, user: &UserId) -> bool {
        match self {
            Principal::Operator => true,
            Principal::User(u) => u == user,
        }
    }

    pub fn require(&self, user: &UserId) -> AppResult<()> {
        if self.may_act_for(user) {
            Ok(())
        } else {
            Err(AppError::Forbidden)
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewUser {
    /// Generated when absent.
    #[serde(default)]
    pub user_id: Option<UserId>,
    pub display_name: String,
    #[serde(default)]
    pub addiction_kinds: BTreeSet<Substance>,
    pub recovery_stage: RecoveryStage,
    #[serde(default)]
    pub interests: Vec<InterestTag>,
    #[serde(default)]
    pub home_region: Option<GeoPoint>,
    #[serde(default)]
    pub utc_offset_minutes: i32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreatedUser {
    pub profile: UserProfile,
    /// Bearer token for this user. Shown once.
    pub token: String,
}

/// Body of an event submission. `user_id` may be omitted; when present it
/// must match the path.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventInput {
    #[serde(default)]
    pub event_id: Option<EventId>,
    #[serde(default)]
    pub user_id: Option<UserId>,
    pub substance: Substance,
    pub quantity: f64,
    /// Defaults to the current time.
    #[serde(default)]
    pub at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub location: Option<GeoPoint>,
    #[serde(default)]
    pub source: EventSource,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixInput {
    #[serde(default)]
    pub user_id: Option<UserId>,
    pub point: GeoPoint,
    pub at: DateTime<Utc>,
    #[serde(default)]
    pub accuracy_m: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackInput {
    #[serde(default)]
    pub user_id: Option<UserId>,
    pub date: NaiveDate,
    pub stress_level: u8,
    #[serde(default)]
    pub consumed_unlogged: bool,
    #[serde(default)]
    pub backfill_events: Vec<EventInput>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FenceInput {
    /// Generated when absent.
    #[serde(default)]
    pub fence_id: Option<FenceId>,
    pub owner: FenceOwner,
    pub center: GeoPoint,
    pub radius_m: f64,
    pub kind: FenceKind,
    #[serde(default)]
    pub state_constraint: Option<DurationConstraint>,
    #[serde(default)]
    pub label: String,
    /// Rules leaving this fence. Each names its destination; `from` must be
    /// this fence.
    #[serde(default)]
    pub transitions: Vec<TransitionRule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FenceSet {
    pub fences: Vec<Geofence>,
    pub rules: Vec<TransitionRule>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixOutcome {
    pub fix: LocationFix,
    pub events: Vec<FenceEvent>,
    /// Notifications created by this fix.
    pub notifications: Vec<Notification>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrackerState {
    machine: FenceMachine,
    fixes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub trained_at: DateTime<Utc>,
    /// Owner's local date at training time; nightly retraining runs once per date.
    pub local_date: NaiveDate,
    pub sequences: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub rejected_epochs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub at: DateTime<Utc>,
    pub users: usize,
    pub trained: usize,
    pub forecasts: usize,
    pub scheduled: usize,
    pub skipped: usize,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportReport {
    pub users: usize,
    pub events: usize,
    pub fixes: usize,
    pub feedback: usize,
    pub fences: usize,
    pub pois: usize,
    pub fence_events: usize,
    pub notifications: usize,
    pub rejected: usize,
}

fn valid_user_id(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '@'))
}

fn json_err(e: serde_json::Error) -> AppError {
    AppError::Store(StoreError::Serialization(e))
}

/// The service state. Cheap to share behind an `Arc`.
pub struct App {
    config: ServiceConfig,
    store: Store,
    clock: Arc<dyn Clock>,
    queue: NotificationQueue,
    policy: Mutex<DiversionPolicy>,
    community: Community,
    // one lock per user serializes fix processing
    trackers: Mutex<HashMap<UserId, Arc<Mutex<()>>>>,
    fences: RwLock<FenceSet>,
    pois: RwLock<Vec<PointOfInterest>>,
    models: RwLock<HashMap<String, Arc<LstmParams>>>,
}

impl App {
    /// Opens the store at `config.store_path` and restores pending
    /// notifications, fences and POIs from it.
    pub fn open(config: ServiceConfig, clock: Arc<dyn Clock>) -> AppResult<Self> {
        let sync = match config.store_sync {
            StoreSync::Always => SyncMode::Always,
            StoreSync::Never => SyncMode::Never,
        };
        let store = Store::open_with(&config.store_path, sync)?;
        Self::with_store(config, store, clock)
    }

    pub fn with_store(config: ServiceConfig, store: Store, clock: Arc<dyn Clock>) -> AppResult<Self> {
        let app = Self {
            community: Community::new(store.clone()),
            config,
            store,
            clock,
            queue: NotificationQueue::new(),
            policy: Mutex::new(DiversionPolicy::new()),
            trackers: Mutex::new(HashMap::new()),
            fences: RwLock::new(FenceSet {
                fences: vec![],
                rules: vec![],
            }),
            pois: RwLock::new(vec![]),
            models: RwLock::new(HashMap::new()),
        };
        app.reload()?;
        if let Some(path) = app.config.poi_csv_path.clone() {
            let file = std::fs::File::open(&path)
                .map_err(|e| AppError::Internal(format!("opening {}: {e}", path.display())))?;
            let pois = addictfree_core::diversion::read_poi_csv(file)
                .map_err(|e| AppError::BadRequest(format!("{}: {e}", path.display())))?;
            app.import_pois(pois)?;
        }
        Ok(app)
    }

    fn reload(&self) -> AppResult<()> {
        let fences = self
            .store
            .scan_json::<Geofence>(Namespace::Fences, FENCE_PREFIX, None)?
            .into_iter()
            .map(|(_, f)| f)
            .collect();
        let rules = self
            .store
            .scan_json::<TransitionRule>(Namespace::Fences, RULE_PREFIX, None)?
            .into_iter()
            .map(|(_, r)| r)
            .collect();
        *self.fences.write().expect("fence lock") = FenceSet { fences, rules };
        *self.pois.write().expect("poi lock") = self
            .store
            .scan_json::<PointOfInterest>(Namespace::Pois, "", None)?
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        for (_, n) in self.store.scan_json::<Notification>(Namespace::Notifications, "", None)? {
            if n.delivered_at.is_none() {
                self.queue.enqueue(n);
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn pending_notifications(&self) -> usize {
        self.queue.pending_len()
    }

    // ---- users and auth ----

    pub fn create_user(&self, new: NewUser) -> AppResult<CreatedUser> {
        let user_id = new
            .user_id
            .unwrap_or_else(|| UserId::new(uuid::Uuid::new_v4().simple().to_string()));
        if !valid_user_id(user_id.as_str()) {
            return Err(AppError::BadRequest(
                "user_id must be 1-64 characters of letters, digits, '-', '_', '.', '@'".into(),
            ));
        }
        let profile = UserProfile {
            user_id,
            display_name: new.display_name,
            addiction_kinds: new.addiction_kinds,
            recovery_stage: new.recovery_stage,
            interests: new.interests,
            home_region: new.home_region,
            utc_offset_minutes: new.utc_offset_minutes,
            created_at: self.now(),
        };
        self.insert_user(profile)
    }

    /// Stores a complete profile (used by imports that carry their own
    /// `created_at`) and issues a token.
    pub fn insert_user(&self, profile: UserProfile) -> AppResult<CreatedUser> {
        if !valid_user_id(profile.user_id.as_str()) {
            return Err(AppError::BadRequest(format!("invalid user_id {:?}", profile.user_id.as_str())));
        }
        profile
            .validate()
            .map_err(|e| AppError::rejected("InvalidProfile", e.to_string()))?;
        let token = uuid::Uuid::new_v4().simple().to_string();
        let mut batch = WriteBatch::new();
        batch.put_json(Namespace::Users, profile.user_id.as_str(), &profile, Some(0))?;
        batch.put_json(Namespace::Users, format!("{AUTH_PREFIX}{token}"), &profile.user_id, Some(0))?;
        match self.store.commit(batch) {
            Ok(_) => Ok(CreatedUser { profile, token }),
            Err(StoreError::VersionConflict { .. }) => Err(AppError::Conflict {
                code: "UserExists",
                message: format!("user {} already exists", profile.user_id),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn user(&self, id: &UserId) -> AppResult<UserProfile> {
        self.store
            .get_json::<UserProfile>(Namespace::Users, id.as_str())?
            .map(|(p, _)| p)
            .ok_or_else(|| AppError::NotFound(format!("user {id}")))
    }

    /// All profiles, ordered by id.
    pub fn users(&self) -> AppResult<Vec<UserProfile>> {
        self.store
            .scan(Namespace::Users, "", None)
            .filter(|r| !r.key.starts_with(b"~"))
            .map(|r| serde_json::from_slice(&r.value))
            .collect::<Result<_, _>>()
            .map_err(json_err)
    }

    pub fn authenticate(&self, token: &str) -> Option<Principal> {
        if token.is_empty() {
            return None;
        }
        if !self.config.operator_token.is_empty() && token == self.config.operator_token {
            return Some(Principal::Operator);
        }
        self.store
            .get_json::<UserId>(Namespace::Users, format!("{AUTH_PREFIX}{token}"))
            .ok()
            .flatten()
            .map(|(u, _)| Principal::User(u))
    }

    // ---- consumption events ----

    fn prepare_event(&self, user: &UserId, input: EventInput, now: DateTime<Utc>) -> AppResult<ConsumptionEvent> {
        if input.user_id.as_ref().is_some_and(|u| u != user) {
            return Err(AppError::BadRequest("user_id does not match the path".into()));
        }
        let raw = ConsumptionEvent {
            event_id: input
                .event_id
                .unwrap_or_else(|| EventId::new(uuid::Uuid::new_v4().simple().to_string())),
            user_id: user.clone(),
            substance: input.substance,
            quantity: input.quantity,
            at: input.at.unwrap_or(now),
            location: input.location,
            source: input.source,
        };
        let store = &self.store;
        let known = |u: &UserId| store.version(Namespace::Users, u.as_str()) > 0;
        validate_event(&raw, now, &known).map_err(|r| AppError::rejected(r.code(), r.to_string()))
    }

    fn event_key(e: &ConsumptionEvent) -> String {
        format!("{}/{}/{}", e.user_id, time_key(e.at.timestamp()), e.event_id)
    }

    pub fn ingest_event(&self, user: &UserId, input: EventInput) -> AppResult<ConsumptionEvent> {
        let event = self.prepare_event(user, input, self.now())?;
        match self.store.put_json(Namespace::Events, Self::event_key(&event), &event, Some(0)) {
            Ok(_) => Ok(event),
            Err(StoreError::VersionConflict { .. }) => Err(AppError::Conflict {
                code: "DuplicateEvent",
                message: format!("event {} already recorded", event.event_id),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn events(&self, user: &UserId) -> AppResult<Vec<ConsumptionEvent>> {
        Ok(self
            .store
            .scan_json(Namespace::Events, format!("{user}/"), None)?
            .into_iter()
            .map(|(_, e)| e)
            .collect())
    }

    // ---- feedback ----

    pub fn submit_feedback(&self, user: &UserId, input: FeedbackInput) -> AppResult<DailyFeedback> {
        if input.user_id.as_ref().is_some_and(|u| u != user) {
            return Err(AppError::BadRequest("user_id does not match the path".into()));
        }
        self.user(user)?;
        let now = self.now();
        let mut backfill = Vec::with_capacity(input.backfill_events.len());
        for mut e in input.backfill_events {
            e.source = EventSource::SurveyBackfill;
            backfill.push(self.prepare_event(user, e, now)?);
        }
        let fb = DailyFeedback {
            user_id: user.clone(),
            date: input.date,
            stress_level: input.stress_level,
            consumed_unlogged: input.consumed_unlogged,
            backfill_events: backfill,
            notes: input.notes,
        };
        fb.validate()
            .map_err(|e| AppError::rejected("InvalidFeedback", e.to_string()))?;
        let mut batch = WriteBatch::new();
        batch.put_json(Namespace::Feedback, format!("{user}/{}", fb.date), &fb, Some(0))?;
        for e in &fb.backfill_events {
            batch.put_json(Namespace::Events, Self::event_key(e), e, Some(0))?;
        }
        match self.store.commit(batch) {
            Ok(_) => Ok(fb),
            Err(StoreError::VersionConflict { .. }) => Err(AppError::Conflict {
                code: "DuplicateFeedback",
                message: format!("feedback for {} already submitted (or a backfill event id is reused)", fb.date),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn feedback(&self, user: &UserId) -> AppResult<Vec<DailyFeedback>> {
        Ok(self
            .store
            .scan_json(Namespace::Feedback, format!("{user}/"), None)?
            .into_iter()
            .map(|(_, f)| f)
            .collect())
    }

    // ---- fences ----

    /// Validates and stores a fence with its outgoing rules. Public fences
    /// need the operator; user fences need their owner. A fence may not
    /// overlap any fence that can be active alongside it.
    pub fn create_fence(&self, who: &Principal, input: FenceInput) -> AppResult<FenceSet> {
        match &input.owner {
            FenceOwner::Public if *who != Principal::Operator => return Err(AppError::Forbidden),
            FenceOwner::User { user_id } => {
                who.require(user_id)?;
                self.user(user_id)?;
            }
            FenceOwner::Public => {}
        }
        let fence = Geofence {
            fence_id: input
                .fence_id
                .unwrap_or_else(|| FenceId::new(uuid::Uuid::new_v4().simple().to_string())),
            owner: input.owner,
            center: input.center,
            radius_m: input.radius_m,
            kind: input.kind,
            state_constraint: input.state_constraint,
            label: input.label,
        };
        if !(fence.radius_m > 0.0 && fence.radius_m.is_finite()) {
            return Err(AppError::rejected("InvalidRadius", "radius_m must be positive"));
        }
        if fence.fence_id.as_str().is_empty() || fence.fence_id.as_str().contains('/') {
            return Err(AppError::BadRequest("fence_id must be non-empty and contain no '/'".into()));
        }
        let transitions: Vec<_> = input.transitions.iter().map(|r| r.constraint).collect();
        validate_constraints(std::slice::from_ref(&fence), &transitions).map_err(AppError::Constraints)?;

        let mut set = self.fences.write().expect("fence lock");
        for r in &input.transitions {
            if r.from != fence.fence_id {
                return Err(AppError::BadRequest(format!("rule from {} does not leave this fence", r.from)));
            }
            if r.to != fence.fence_id && !set.fences.iter().any(|f| f.fence_id == r.to) {
                return Err(AppError::NotFound(format!("fence {}", r.to)));
            }
        }
        let shares_active_set = |other: &Geofence| match (&fence.owner, &other.owner) {
            (FenceOwner::User { user_id: a }, FenceOwner::User { user_id: b }) => a == b,
            _ => true,
        };
        if let Some(clash) = set
            .fences
            .iter()
            .find(|other| shares_active_set(other) && fences_overlap(&fence, other))
        {
            return Err(AppError::Conflict {
                code: "FenceOverlap",
                message: format!("fence overlaps {}", clash.fence_id),
            });
        }
        let mut batch = WriteBatch::new();
        batch.put_json(Namespace::Fences, format!("{FENCE_PREFIX}{}", fence.fence_id), &fence, Some(0))?;
        for r in &input.transitions {
            batch.put_json(Namespace::Fences, format!("{RULE_PREFIX}{}/{}", r.from, r.to), r, Some(0))?;
        }
        match self.store.commit(batch) {
            Ok(_) => {}
            Err(StoreError::VersionConflict { .. }) => {
                return Err(AppError::Conflict {
                    code: "FenceExists",
                    message: format!("fence {} already exists", fence.fence_id),
                })
            }
            Err(e) => return Err(e.into()),
        }
        set.fences.push(fence.clone());
        set.rules.extend(input.transitions.iter().cloned());
        Ok(FenceSet {
            fences: vec![fence],
            rules: input.transitions,
        })
    }

    /// Adds transition rules between existing fences. Rules touching a
    /// user's fence need that user; rules between public fences need the
    /// operator.
    pub fn add_rules(&self, who: &Principal, rules: &[TransitionRule]) -> AppResult<()> {
        let constraints: Vec<_> = rules.iter().map(|r| r.constraint).collect();
        validate_constraints(&[], &constraints).map_err(AppError::Constraints)?;
        let mut set = self.fences.write().expect("fence lock");
        let mut batch = WriteBatch::new();
        for r in rules {
            for id in [&r.from, &r.to] {
                let fence = set
                    .fences
                    .iter()
                    .find(|f| &f.fence_id == id)
                    .ok_or_else(|| AppError::NotFound(format!("fence {id}")))?;
                match &fence.owner {
                    FenceOwner::Public if *who != Principal::Operator => return Err(AppError::Forbidden),
                    FenceOwner::User { user_id } => who.require(user_id)?,
                    FenceOwner::Public => {}
                }
            }
            batch.put_json(Namespace::Fences, format!("{RULE_PREFIX}{}/{}", r.from, r.to), r, Some(0))?;
        }
        match self.store.commit(batch) {
            Ok(_) => {}
            Err(StoreError::VersionConflict { .. }) => {
                return Err(AppError::Conflict {
                    code: "RuleExists",
                    message: "a rule for this fence pair already exists".into(),
                })
            }
            Err(e) => return Err(e.into()),
        }
        set.rules.extend(rules.iter().cloned());
        Ok(())
    }

    /// Fences watched for `user` and the rules among them.
    pub fn fences_for(&self, user: &UserProfile) -> FenceSet {
        let set = self.fences.read().expect("fence lock");
        let fences = active_fences_for(user, &set.fences);
        let ids: BTreeSet<&FenceId> = fences.iter().map(|f| &f.fence_id).collect();
        let rules = set
            .rules
            .iter()
            .filter(|r| ids.contains(&r.from) && ids.contains(&r.to))
            .cloned()
            .collect();
        FenceSet { fences, rules }
    }

    fn layout_for(&self, user: &UserProfile) -> AppResult<FenceLayout> {
        let set = self.fences_for(user);
        FenceLayout::new(set.fences, set.rules).map_err(|e| AppError::Internal(format!("fence layout: {e:?}")))
    }

    // ---- location fixes ----

    fn tracker_lock(&self, user: &UserId) -> Arc<Mutex<()>> {
        self.trackers
            .lock()
            .expect("tracker map lock")
            .entry(user.clone())
            .or_default()
            .clone()
    }

    /// Runs one fix through the user's fence machine, stores fix and state
    /// atomically, and turns the resulting fence events into notifications.
    pub fn ingest_fix(&self, user: &UserId, input: FixInput) -> AppResult<FixOutcome> {
        if input.user_id.as_ref().is_some_and(|u| u != user) {
            return Err(AppError::BadRequest("user_id does not match the path".into()));
        }
        let now = self.now();
        if input.at > now {
            return Err(AppError::rejected("FutureTimestamp", "fix timestamp lies in the future"));
        }
        if input.accuracy_m.is_some_and(|a| !(a >= 0.0 && a.is_finite())) {
            return Err(AppError::rejected("InvalidAccuracy", "accuracy_m must be non-negative"));
        }
        let profile = self.user(user)?;
        let fix = LocationFix {
            user_id: user.clone(),
            point: input.point,
            at: input.at,
            accuracy_m: input.accuracy_m,
        };

        let lock = self.tracker_lock(user);
        let _serial = lock.lock().expect("tracker lock");
        let state_key = format!("{STATE_PREFIX}{user}");
        let (state, version) = match self.store.get_json::<TrackerState>(Namespace::Fixes, &state_key)? {
            Some(found) => found,
            None => (
                TrackerState {
                    machine: FenceMachine::new(user.clone()),
                    fixes: 0,
                },
                0,
            ),
        };
        let layout = self.layout_for(&profile)?;
        let (machine, events) = step(&state.machine, &layout, &fix).map_err(|e| match e {
            StepError::OutOfOrderFix { .. } => AppError::Conflict {
                code: "OutOfOrderFix",
                message: e.to_string(),
            },
            other => AppError::Internal(other.to_string()),
        })?;
        let next = TrackerState {
            machine,
            fixes: state.fixes + 1,
        };
        let mut batch = WriteBatch::new();
        batch.put_json(
            Namespace::Fixes,
            format!("{user}/{}/{:012}", time_key(fix.at.timestamp()), state.fixes),
            &fix,
            Some(0),
        )?;
        batch.put_json(Namespace::Fixes, state_key, &next, Some(version))?;
        self.store.commit(batch)?;

        let mut notifications = Vec::new();
        if !events.is_empty() {
            let pois = self.pois.read().expect("poi lock");
            let mut policy = self.policy.lock().expect("policy lock");
            for ev in &events {
                let Some(fence) = layout.fence(&ev.fence_id) else { continue };
                if let Some(n) = policy.on_fence_event(ev, &profile, fence, &pois, now) {
                    notifications.push(n);
                }
            }
        }
        for n in &notifications {
            self.notify(n.clone())?;
        }
        Ok(FixOutcome {
            fix,
            events,
            notifications,
        })
    }

    pub fn fixes(&self, user: &UserId, range: Option<(DateTime<Utc>, DateTime<Utc>)>) -> AppResult<Vec<LocationFix>> {
        Ok(self
            .store
            .scan_json(
                Namespace::Fixes,
                format!("{user}/"),
                range.map(|(a, b)| (a.timestamp(), b.timestamp())),
            )?
            .into_iter()
            .map(|(_, f)| f)
            .collect())
    }

    // ---- POIs ----

    pub fn import_pois(&self, pois: Vec<PointOfInterest>) -> AppResult<usize> {
        let mut batch = WriteBatch::new();
        for p in &pois {
            batch.put_json(Namespace::Pois, p.poi_id.as_str(), p, None)?;
        }
        self.store.commit(batch)?;
        let mut current = self.pois.write().expect("poi lock");
        for p in pois.iter() {
            match current.iter_mut().find(|q| q.poi_id == p.poi_id) {
                Some(q) => *q = p.clone(),
                None => current.push(p.clone()),
            }
        }
        current.sort_by(|a, b| a.poi_id.cmp(&b.poi_id));
        Ok(pois.len())
    }

    pub fn pois(&self) -> Vec<PointOfInterest> {
        self.pois.read().expect("poi lock").clone()
    }

    // ---- statistics ----

    pub fn daily(&self, user: &UserId, date: Option<NaiveDate>) -> AppResult<DailySummary> {
        let profile = self.user(user)?;
        let offset = profile.offset();
        let date = date.unwrap_or_else(|| local_date(self.now(), offset));
        Ok(daily_summary(&self.events(user)?, date, offset))
    }

    pub fn weekly(&self, user: &UserId, week_start: Option<NaiveDate>) -> AppResult<WeeklyScores> {
        let profile = self.user(user)?;
        let offset = profile.offset();
        let date = week_start.unwrap_or_else(|| local_date(self.now(), offset));
        Ok(weekly_scores(&self.events(user)?, &self.feedback(user)?, date, offset))
    }

    pub fn monthly(&self, user: &UserId, month: Option<YearMonth>) -> AppResult<MonthlySeries> {
        let profile = self.user(user)?;
        let offset = profile.offset();
        let month = month.unwrap_or_else(|| YearMonth::of(local_date(self.now(), offset)));
        Ok(monthly_series(&self.events(user)?, month, offset))
    }

    // ---- models and predictions ----

    fn model_key(&self, user: &UserId) -> String {
        if self.config.pooled_model {
            POOLED_MODEL_KEY.to_owned()
        } else {
            user.as_str().to_owned()
        }
    }

    fn load_model(&self, key: &str) -> AppResult<Option<Arc<LstmParams>>> {
        if let Some(m) = self.models.read().expect("model lock").get(key) {
            return Ok(Some(m.clone()));
        }
        let Some((bytes, _)) = self.store.get(Namespace::Models, key) else {
            return Ok(None);
        };
        let ckpt = read_checkpoint(&bytes).map_err(|e| AppError::Internal(format!("model {key}: {e}")))?;
        let params = Arc::new(ckpt.params);
        self.models
            .write()
            .expect("model lock")
            .insert(key.to_owned(), params.clone());
        Ok(Some(params))
    }

    pub fn model_meta(&self, user: &UserId) -> AppResult<Option<ModelMeta>> {
        let key = format!("{META_PREFIX}{}", self.model_key(user));
        Ok(self.store.get_json(Namespace::Models, key)?.map(|(m, _)| m))
    }

    fn save_model(&self, key: &str, params: LstmParams, meta: &ModelMeta) -> AppResult<()> {
        let bytes = write_checkpoint(&Checkpoint {
            params: params.clone(),
            config: self.config.predictor.clone(),
        });
        let mut batch = WriteBatch::new();
        batch.put(Namespace::Models, key, bytes, None);
        batch.put_json(Namespace::Models, format!("{META_PREFIX}{key}"), meta, None)?;
        self.store.commit(batch)?;
        self.models
            .write()
            .expect("model lock")
            .insert(key.to_owned(), Arc::new(params));
        Ok(())
    }

    /// Stores externally trained parameters as the user's model (or the
    /// pooled model in pooled mode).
    pub fn install_model(&self, user: &UserId, params: LstmParams, meta: ModelMeta) -> AppResult<()> {
        self.save_model(&self.model_key(user), params, &meta)
    }

    pub fn prediction(&self, user: &UserId, horizon: usize) -> AppResult<Forecast> {
        if !(1..=MAX_HORIZON_HOURS).contains(&horizon) {
            return Err(AppError::BadRequest(format!("horizon must be 1..={MAX_HORIZON_HOURS}")));
        }
        let profile = self.user(user)?;
        let model = self.load_model(&self.model_key(user))?.ok_or_else(|| AppError::Rejected {
            code: "NoModel",
            message: format!("no model trained for {user} yet"),
        })?;
        let input = UserData::load(self, profile)?;
        Ok(predict_next_hours(
            &model,
            &input.events,
            &input.feedback,
            input.history_start(),
            self.now(),
            horizon,
            self.config.predictor.window_hours,
        )?)
    }

    /// Trains and stores a fresh model for `user` (or the pooled model) on
    /// history up to the current hour.
    pub fn train_user(&self, user: &UserId) -> AppResult<ModelMeta> {
        let now = self.now();
        let (key, data, offset) = if self.config.pooled_model {
            let all = self.load_all_users()?;
            (POOLED_MODEL_KEY.to_owned(), pooled_sequences(&all, now, &self.config), chrono::FixedOffset::east_opt(0).expect("utc"))
        } else {
            let input = UserData::load(self, self.user(user)?)?;
            let data = input.sequences(now, &self.config).ok_or_else(|| {
                AppError::rejected("InsufficientHistory", format!("{user} has less than {MIN_HISTORY_HOURS} h of history"))
            })?;
            (user.as_str().to_owned(), data, input.profile.offset())
        };
        if data.is_empty() {
            return Err(AppError::rejected("InsufficientHistory", "no training sequences"));
        }
        let report = train_from_seed(&data, &self.config.predictor)?;
        let meta = model_meta(&report, data.len(), now, offset);
        self.save_model(&key, report.params, &meta)?;
        Ok(meta)
    }

    fn load_all_users(&self) -> AppResult<Vec<UserData>> {
        self.users()?
            .into_iter()
            .map(|p| UserData::load(self, p))
            .collect()
    }

    // ---- notifications ----

    /// Persists and queues `n` unless a notification with the same id exists.
    /// Returns whether it was new.
    pub fn notify(&self, n: Notification) -> AppResult<bool> {
        let key = format!("{}/{}", n.user_id, n.notif_id);
        match self.store.put_json(Namespace::Notifications, key, &n, Some(0)) {
            Ok(_) => {
                self.queue.enqueue(n);
                Ok(true)
            }
            Err(StoreError::VersionConflict { .. }) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    /// Delivers every notification due at `now` and records the delivery.
    pub fn dispatch(&self, now: DateTime<Utc>) -> AppResult<Vec<Notification>> {
        let due = self.queue.drain_due(now);
        if !due.is_empty() {
            let mut batch = WriteBatch::new();
            for n in &due {
                batch.put_json(Namespace::Notifications, format!("{}/{}", n.user_id, n.notif_id), n, None)?;
            }
            self.store.commit(batch)?;
        }
        Ok(due)
    }

    /// Delivered notifications for `user`, delivering anything already due
    /// first. With `since`, only those delivered at or after it.
    pub fn notifications(&self, user: &UserId, since: Option<DateTime<Utc>>) -> AppResult<Vec<Notification>> {
        self.user(user)?;
        self.dispatch(self.now())?;
        let mut out: Vec<Notification> = self
            .store
            .scan_json::<Notification>(Namespace::Notifications, format!("{user}/"), None)?
            .into_iter()
            .map(|(_, n)| n)
            .filter(|n| n.delivered_at.is_some_and(|d| since.is_none_or(|s| d >= s)))
            .collect();
        out.sort_by(|a, b| (a.scheduled_for, &a.notif_id).cmp(&(b.scheduled_for, &b.notif_id)));
        Ok(out)
    }

    /// Notifications for `user` still waiting for their time.
    pub fn scheduled_notifications(&self, user: &UserId) -> AppResult<Vec<Notification>> {
        let mut out: Vec<Notification> = self
            .store
            .scan_json::<Notification>(Namespace::Notifications, format!("{user}/"), None)?
            .into_iter()
            .map(|(_, n)| n)
            .filter(|n| n.delivered_at.is_none())
            .collect();
        out.sort_by(|a, b| (a.scheduled_for, &a.notif_id).cmp(&(b.scheduled_for, &b.notif_id)));
        Ok(out)
    }

    // ---- scheduler ----

    /// One scheduler pass at `now`: trains missing or stale models, forecasts
    /// every user, schedules pre-relapse diversions and the daily feedback
    /// and motivational notifications. Per-user failures are reported, never
    /// raised.
    pub fn hourly_tick(&self, now: DateTime<Utc>) -> AppResult<TickReport> {
        let mut report = TickReport {
            at: now,
            ..TickReport::default()
        };
        let all = self.load_all_users()?;
        report.users = all.len();

        let cfg = &self.config;
        let pooled = if cfg.pooled_model {
            match self.refresh_pooled(&all, now) {
                Ok((model, trained)) => {
                    report.trained += usize::from(trained);
                    model
                }
                Err(e) => {
                    report.errors.push(format!("pooled model: {e}"));
                    None
                }
            }
        } else {
            None
        };

        let mut models = Vec::with_capacity(all.len());
        for u in &all {
            let m = match &pooled {
                Some(p) => Ok(Some(p.clone())),
                None if cfg.pooled_model => Ok(None),
                None => self.load_model(u.profile.user_id.as_str()),
            };
            let meta = if cfg.pooled_model {
                Ok(None)
            } else {
                self.model_meta(&u.profile.user_id)
            };
            models.push(m.and_then(|m| meta.map(|meta| (m, meta))));
        }

        let plans = exec::map_range(all.len(), |i| match &models[i] {
            Ok((model, meta)) => plan_user(&all[i], model.clone(), meta.as_ref(), now, cfg),
            Err(e) => UserPlan {
                error: Some(e.to_string()),
                ..UserPlan::default()
            },
        });

        for (u, plan) in all.iter().zip(plans) {
            let id = &u.profile.user_id;
            if let Some(e) = plan.error {
                report.errors.push(format!("{id}: {e}"));
            }
            if let Some((params, meta)) = plan.trained {
                match self.save_model(id.as_str(), params, &meta) {
                    Ok(()) => report.trained += 1,
                    Err(e) => report.errors.push(format!("{id}: saving model: {e}")),
                }
            }
            match plan.forecast {
                Some(_) => report.forecasts += 1,
                None => report.skipped += 1,
            }
            let mut due = plan.prerelapse.into_iter().collect::<Vec<_>>();
            due.extend(daily_notifications(&u.profile, now));
            for n in due {
                match self.notify(n) {
                    Ok(true) => report.scheduled += 1,
                    Ok(false) => {}
                    Err(e) => report.errors.push(format!("{id}: {e}")),
                }
            }
        }
        for e in &report.errors {
            warn!(error = %e, "tick");
        }
        info!(
            users = report.users,
            trained = report.trained,
            forecasts = report.forecasts,
            scheduled = report.scheduled,
            "tick done"
        );
        Ok(report)
    }

    fn refresh_pooled(&self, all: &[UserData], now: DateTime<Utc>) -> AppResult<(Option<Arc<LstmParams>>, bool)> {
        let existing = self.load_model(POOLED_MODEL_KEY)?;
        let meta: Option<ModelMeta> = self
            .store
            .get_json(Namespace::Models, format!("{META_PREFIX}{POOLED_MODEL_KEY}"))?
            .map(|(m, _)| m);
        let stale = match &meta {
            None => true,
            Some(m) => now.hour() == RETRAIN_LOCAL_HOUR && m.local_date != now.date_naive(),
        };
        if existing.is_some() && !stale {
            return Ok((existing, false));
        }
        let data = pooled_sequences(all, now, &self.config);
        if data.is_empty() {
            return Ok((existing, false));
        }
        let report = train_from_seed(&data, &self.config.predictor)?;
        let meta = model_meta(&report, data.len(), now, chrono::FixedOffset::east_opt(0).expect("utc"));
        self.save_model(POOLED_MODEL_KEY, report.params, &meta)?;
        Ok((self.load_model(POOLED_MODEL_KEY)?, true))
    }

    // ---- community ----

    pub fn create_post(&self, author: &UserId, title: &str, body: &str) -> AppResult<Post> {
        Ok(self.community.create_post(author, title, body, self.now())?)
    }

    pub fn feed(&self) -> AppResult<Vec<Post>> {
        Ok(self.community.list_feed()?)
    }

    pub fn add_comment(&self, post_id: &str, author: &UserId, body: &str) -> AppResult<Comment> {
        Ok(self.community.add_comment(post_id, author, body, self.now())?)
    }

    pub fn connections(&self, user: &UserId, k: usize) -> AppResult<Vec<ConnectionSuggestion>> {
        Ok(suggest_connections(user, &self.users()?, k)?)
    }

    pub fn send_message(&self, from: &UserId, to: &UserId, body: &str) -> AppResult<Message> {
        Ok(self.community.send_message(from, to, body, self.now())?)
    }

    pub fn inbox(&self, user: &UserId) -> AppResult<Vec<Message>> {
        Ok(self.community.inbox(user)?)
    }

    /// Delivers whatever is due and flushes the store; used on shutdown.
    pub fn shutdown(&self) -> AppResult<()> {
        self.dispatch(self.now())?;
        self.store.flush()?;
        Ok(())
    }
}

/// A user's profile and full history, loaded once per tick.
struct UserData {
    profile: UserProfile,
    events: Vec<ConsumptionEvent>,
    feedback: Vec<DailyFeedback>,
}

impl UserData {
    fn load(app: &App, profile: UserProfile) -> AppResult<Self> {
        let events = app.events(&profile.user_id)?;
        let feedback = app.feedback(&profile.user_id)?;
        Ok(Self {
            profile,
            events,
            feedback,
        })
    }

    /// Account creation, or the first logged event if that is earlier.
    fn history_start(&self) -> DateTime<Utc> {
        self.events
            .iter()
            .map(|e| e.at)
            .min()
            .map_or(self.profile.created_at, |first| first.min(self.profile.created_at))
    }

    fn history_hours(&self, now: DateTime<Utc>) -> i64 {
        (floor_hour(now) - floor_hour(self.history_start())).num_hours()
    }

    /// Training sequences over the trailing window ending at the current
    /// hour, or `None` with less than the minimum history.
    fn sequences(&self, now: DateTime<Utc>, cfg: &ServiceConfig) -> Option<Vec<Sequence>> {
        let hours = self.history_hours(now);
        if hours < MIN_HISTORY_HOURS {
            return None;
        }
        let window = cfg.predictor.window_hours.min(hours as usize);
        let (x, y) = extract_features(&self.events, &self.feedback, floor_hour(now), window).ok()?;
        Some(training_sequences(
            &x,
            &y,
            cfg.predictor.sequence_hours,
            cfg.predictor.stride_hours,
        ))
    }
}

fn pooled_sequences(all: &[UserData], now: DateTime<Utc>, cfg: &ServiceConfig) -> Vec<Sequence> {
    all.iter()
        .filter_map(|u| u.sequences(now, cfg))
        .flatten()
        .collect()
}

fn model_meta(report: &TrainReport, sequences: usize, now: DateTime<Utc>, offset: chrono::FixedOffset) -> ModelMeta {
    ModelMeta {
        trained_at: now,
        local_date: local_date(now, offset),
        sequences,
        initial_loss: report.losses[0],
        final_loss: report.final_loss(),
        rejected_epochs: report.rejected_epochs,
    }
}

#[derive(Default)]
struct UserPlan {
    trained: Option<(LstmParams, ModelMeta)>,
    forecast: Option<Forecast>,
    prerelapse: Option<Notification>,
    error: Option<String>,
}

/// The compute-heavy part of a tick for one user; touches no shared state.
fn plan_user(
    u: &UserData,
    model: Option<Arc<LstmParams>>,
    meta: Option<&ModelMeta>,
    now: DateTime<Utc>,
    cfg: &ServiceConfig,
) -> UserPlan {
    let mut plan = UserPlan::default();
    let offset = u.profile.offset();
    let local = now.with_timezone(&offset);
    let nightly = local.hour() == RETRAIN_LOCAL_HOUR && meta.is_none_or(|m| m.local_date != local.date_naive());
    let mut model = model.map(|m| (*m).clone());
    if !cfg.pooled_model && (model.is_none() || nightly) {
        if let Some(data) = u.sequences(now, cfg).filter(|d| !d.is_empty()) {
            match train_from_seed(&data, &cfg.predictor) {
                Ok(report) => {
                    let meta = model_meta(&report, data.len(), now, offset);
                    model = Some(report.params.clone());
                    plan.trained = Some((report.params, meta));
                }
                Err(e) => plan.error = Some(format!("training: {e}")),
            }
        }
    }
    let Some(model) = model else { return plan };
    match predict_next_hours(
        &model,
        &u.events,
        &u.feedback,
        u.history_start(),
        now,
        cfg.horizon_hours,
        cfg.predictor.window_hours,
    ) {
        Ok(f) => {
            plan.prerelapse = schedule_prerelapse(&f.hours, cfg.prediction_threshold, &u.profile, now);
            plan.forecast = Some(f);
        }
        Err(PredictorError::InsufficientHistory { .. }) => {}
        Err(e) => plan.error = Some(format!("forecast: {e}")),
    }
    plan
}

/// Today's and tomorrow's feedback request and motivational quote that are
/// still ahead of `now`.
fn daily_notifications(user: &UserProfile, now: DateTime<Utc>) -> Vec<Notification> {
    let today = local_date(now, user.offset());
    [today, today + Duration::days(1)]
        .into_iter()
        .flat_map(|d| [motivational(user, d), daily_feedback_request(user, d)])
        .filter(|n| n.scheduled_for >= now)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn user_ids_are_restricted() {
        assert!(valid_user_id("ana.m-1@x"));
        assert!(!valid_user_id(""));
        assert!(!valid_user_id("a/b"));
        assert!(!valid_user_id("~auth"));
        assert!(!valid_user_id(&"x".repeat(65)));
    }

    #[test]
    fn operator_acts_for_everyone() {
        let u: UserId = "u".into();
        assert!(Principal::Operator.may_act_for(&u));
        assert!(Principal::User(u.clone()).may_act_for(&u));
        assert!(Principal::User("v".into()).require(&u).is_err());
    }
}
