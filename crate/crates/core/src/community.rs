// SPDX-License-Identifier: Apache-2.0

//! Support community: posts with comment threads, a plain per-user inbox,
//! and connection suggestions by stage, addiction, vicinity and therapist
//! status.

use std::collections::BTreeSet;

use addictfree_store::{time_key, Namespace, Store, StoreError};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::domain::{GeoPoint, UserId, UserProfile};
use crate::geo::haversine_m;

pub const STAGE_WEIGHT: f64 = 0.4;
pub const ADDICTION_WEIGHT: f64 = 0.3;
pub const VICINITY_WEIGHT: f64 = 0.2;
pub const THERAPIST_WEIGHT: f64 = 0.1;
/// Full vicinity credit up to this distance, none beyond [`VICINITY_FAR_M`].
pub const VICINITY_NEAR_M: f64 = 50_000.0;
pub const VICINITY_FAR_M: f64 = 500_000.0;

const POST_PREFIX: &str = "post/";
const INBOX_PREFIX: &str = "inbox/";

#[derive(Debug, Error)]
pub enum CommunityError {
    #[error("title must not be empty")]
    EmptyTitle,
    #[error("body must not be empty")]
    EmptyBody,
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown post {0}")]
    UnknownPost(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comment {
    pub comment_id: String,
    pub author: UserId,
    pub author_name: String,
    pub body: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub author: UserId,
    /// Only the display name is shown; the author's addiction details stay
    /// in their profile.
    pub author_name: String,
    pub title: String,
    pub body: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub comments: Vec<Comment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: String,
    pub from: UserId,
    pub from_name: String,
    pub to: UserId,
    pub body: String,
    pub sent_at: DateTime<Utc>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    SameStage,
    SameAddiction,
    Vicinity,
    Therapist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSuggestion {
    pub user_id: UserId,
    pub candidate_id: UserId,
    pub score: f64,
    pub basis: BTreeSet<Basis>,
}

/// 1 within 50 km, falling linearly to 0 at 500 km; 0 when either home
/// region is unknown.
pub fn vicinity(a: Option<GeoPoint>, b: Option<GeoPoint>) -> f64 {
    let (Some(a), Some(b)) = (a, b) else {
        return 0.0;
    };
    let d = haversine_m(a, b);
    if d <= VICINITY_NEAR_M {
        1.0
    } else if d >= VICINITY_FAR_M {
        0.0
    } else {
        (VICINITY_FAR_M - d) / (VICINITY_FAR_M - VICINITY_NEAR_M)
    }
}

fn suggestion(user: &UserProfile, candidate: &UserProfile) -> ConnectionSuggestion {
    let mut basis = BTreeSet::new();
    let mut score = 0.0;
    if user.recovery_stage == candidate.recovery_stage {
        basis.insert(Basis::SameStage);
        score += STAGE_WEIGHT;
    }
    if !user.addiction_kinds.is_disjoint(&candidate.addiction_kinds) {
        basis.insert(Basis::SameAddiction);
        score += ADDICTION_WEIGHT;
    }
    let near = vicinity(user.home_region, candidate.home_region);
    if near > 0.0 {
        basis.insert(Basis::Vicinity);
        score += VICINITY_WEIGHT * near;
    }
    if candidate.is_therapist() {
        basis.insert(Basis::Therapist);
        score += THERAPIST_WEIGHT;
    }
    ConnectionSuggestion {
        user_id: user.user_id.clone(),
        candidate_id: candidate.user_id.clone(),
        score: score.clamp(0.0, 1.0),
        basis,
    }
}

/// The `k` best-scoring other users, highest first, ties by candidate id.
pub fn suggest_connections(
    user_id: &UserId,
    all_users: &[UserProfile],
    k: usize,
) -> Result<Vec<ConnectionSuggestion>, CommunityError> {
    if k == 0 {
        return Err(CommunityError::InvalidK);
    }
    let user = all_users
        .iter()
        .find(|u| &u.user_id == user_id)
        .ok_or_else(|| CommunityError::UnknownUser(user_id.clone()))?;
    let mut out: Vec<ConnectionSuggestion> = all_users
        .iter()
        .filter(|c| &c.user_id != user_id)
        .map(|c| suggestion(user, c))
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.candidate_id.cmp(&b.candidate_id)));
    out.dedup_by(|a, b| a.candidate_id == b.candidate_id);
    out.truncate(k);
    Ok(out)
}

/// Store-backed posts, comments and inbox. Profiles are read from the
/// users namespace, keyed by user id.
#[derive(Clone)]
pub struct Community {
    store: Store,
}

fn non_empty(s: &str) -> bool {
    !s.trim().is_empty()
}

impl Community {
    pub fn new(store: Store) -> Self {
        Self { store }
    }

    fn profile(&self, user: &UserId) -> Result<UserProfile, CommunityError> {
        self.store
            .get_json::<UserProfile>(Namespace::Users, user.as_str())?
            .map(|(p, _)| p)
            .ok_or_else(|| CommunityError::UnknownUser(user.clone()))
    }

    pub fn create_post(
        &self,
        author: &UserId,
        title: &str,
        body: &str,
        now: DateTime<Utc>,
    ) -> Result<Post, CommunityError> {
        if !non_empty(title) {
            return Err(CommunityError::EmptyTitle);
        }
        if !non_empty(body) {
            return Err(CommunityError::EmptyBody);
        }
        let profile = self.profile(author)?;
        let post = Post {
            post_id: Uuid::new_v4().to_string(),
            author: author.clone(),
            author_name: profile.display_name,
            title: title.to_owned(),
            body: body.to_owned(),
            created_at: now,
            comments: Vec::new(),
        };
        self.store
            .put_json(Namespace::Posts, format!("{POST_PREFIX}{}", post.post_id), &post, Some(0))?;
        Ok(post)
    }

    pub fn get_post(&self, post_id: &str) -> Result<Post, CommunityError> {
        self.store
            .get_json::<Post>(Namespace::Posts, format!("{POST_PREFIX}{post_id}"))?
            .map(|(p, _)| p)
            .ok_or_else(|| CommunityError::UnknownPost(post_id.to_owned()))
    }

    /// Every post, ordered by `(created_at, post_id)`.
    pub fn list_feed(&self) -> Result<Vec<Post>, CommunityError> {
        let mut posts: Vec<Post> = self
            .store
            .scan_json::<Post>(Namespace::Posts, POST_PREFIX, None)?
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        posts.sort_by(|a, b| (a.created_at, &a.post_id).cmp(&(b.created_at, &b.post_id)));
        Ok(posts)
    }

    /// Adds a comment with a compare-and-set retry loop, so concurrent
    /// commenters never overwrite each other.
    pub fn add_comment(
        &self,
        post_id: &str,
        author: &UserId,
        body: &str,
        now: DateTime<Utc>,
    ) -> Result<Comment, CommunityError> {
        if !non_empty(body) {
            return Err(CommunityError::EmptyBody);
        }
        let profile = self.profile(author)?;
        let comment = Comment {
            comment_id: Uuid::new_v4().to_string(),
            author: author.clone(),
            author_name: profile.display_name,
            body: body.to_owned(),
            created_at: now,
        };
        let key = format!("{POST_PREFIX}{post_id}");
        loop {
            let (mut post, version) = self
                .store
                .get_json::<Post>(Namespace::Posts, &key)?
                .ok_or_else(|| CommunityError::UnknownPost(post_id.to_owned()))?;
            let at = post
                .comments
                .partition_point(|c| (c.created_at, &c.comment_id) <= (comment.created_at, &comment.comment_id));
            post.comments.insert(at, comment.clone());
            match self.store.put_json(Namespace::Posts, key.as_str(), &post, Some(version)) {
                Ok(_) => return Ok(comment),
                Err(StoreError::VersionConflict { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn send_message(
        &self,
        from: &UserId,
        to: &UserId,
        body: &str,
        now: DateTime<Utc>,
    ) -> Result<Message, CommunityError> {
        if !non_empty(body) {
            return Err(CommunityError::EmptyBody);
        }
        let sender = self.profile(from)?;
        self.profile(to)?;
        let msg = Message {
            message_id: Uuid::new_v4().to_string(),
            from: from.clone(),
            from_name: sender.display_name,
            to: to.clone(),
            body: body.to_owned(),
            sent_at: now,
        };
        let key = format!("{INBOX_PREFIX}{to}/{}/{}", time_key(now.timestamp()), msg.message_id);
        self.store.put_json(Namespace::Posts, key, &msg, Some(0))?;
        Ok(msg)
    }

    /// Messages to `user`, oldest first.
    pub fn inbox(&self, user: &UserId) -> Result<Vec<Message>, CommunityError> {
        Ok(self
            .store
            .scan_json::<Message>(Namespace::Posts, format!("{INBOX_PREFIX}{user}/"), None)?
            .into_iter()
            .map(|(_, m)| m)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{RecoveryStage, Substance};

    fn profile(id: &str, stage: RecoveryStage, kinds: &[Substance], home: Option<(f64, f64)>) -> UserProfile {
        UserProfile {
            user_id: id.into(),
            display_name: format!("name-{id}"),
            addiction_kinds: kinds.iter().copied().collect(),
            recovery_stage: stage,
            interests: vec![],
            home_region: home.map(|(lat, lon)| GeoPoint::new(lat, lon).unwrap()),
            utc_offset_minutes: 0,
            created_at: "2026-01-01T00:00:00Z".parse().unwrap(),
        }
    }

    #[test]
    fn similar_neighbour_scores_point_nine() {
        // 0.09 degrees of latitude is about 10 km
        let me = profile("a", RecoveryStage::EarlyRecovery, &[Substance::Alcohol], Some((40.0, -75.0)));
        let peer = profile("b", RecoveryStage::EarlyRecovery, &[Substance::Alcohol], Some((40.09, -75.0)));
        let out = suggest_connections(&"a".into(), &[me, peer], 5).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].score - 0.9).abs() < 1e-12);
        assert_eq!(
            out[0].basis,
            [Basis::SameStage, Basis::SameAddiction, Basis::Vicinity].into()
        );
    }

    #[test]
    fn therapist_neighbour_with_same_stage_scores_one() {
        let me = profile("a", RecoveryStage::Therapist, &[Substance::Alcohol], Some((40.0, -75.0)));
        let t = profile("t", RecoveryStage::Therapist, &[Substance::Alcohol], Some((40.05, -75.0)));
        let out = suggest_connections(&"a".into(), &[me, t], 1).unwrap();
        assert!((out[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_scores_are_still_listed_and_alone_is_empty() {
        let me = profile("a", RecoveryStage::EarlyRecovery, &[Substance::Alcohol], None);
        let other = profile("z", RecoveryStage::Recovered, &[Substance::Tobacco], None);
        let good = profile("m", RecoveryStage::EarlyRecovery, &[Substance::Alcohol], None);
        let out = suggest_connections(&"a".into(), &[me.clone(), other, good], 5).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].candidate_id.as_str(), "m");
        assert_eq!(out[1].score, 0.0);
        assert!(suggest_connections(&"a".into(), &[me.clone()], 3).unwrap().is_empty());
        assert!(matches!(
            suggest_connections(&"nobody".into(), &[me], 3),
            Err(CommunityError::UnknownUser(_))
        ));
    }

    #[test]
    fn vicinity_decays_linearly() {
        let p = |lat: f64| Some(GeoPoint::new(lat, 0.0).unwrap());
        assert_eq!(vicinity(p(0.0), None), 0.0);
        assert_eq!(vicinity(p(0.0), p(0.3)), 1.0);
        assert_eq!(vicinity(p(0.0), p(5.0)), 0.0);
        let d = haversine_m(p(0.0).unwrap(), p(2.5).unwrap());
        let expected = (500_000.0 - d) / 450_000.0;
        assert!((vicinity(p(0.0), p(2.5)) - expected).abs() < 1e-12);
    }

    fn community() -> (tempfile::TempDir, Community) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open_with(dir.path().join("c.log"), addictfree_store::SyncMode::Never).unwrap();
        for id in ["a", "b"] {
            let p = profile(id, RecoveryStage::EarlyRecovery, &[Substance::Alcohol], None);
            store.put_json(Namespace::Users, id, &p, None).unwrap();
        }
        (dir, Community::new(store))
    }

    #[test]
    fn posts_and_comments() {
        let (_dir, c) = community();
        let now: DateTime<Utc> = "2026-05-01T12:00:00Z".parse().unwrap();
        let p1 = c.create_post(&"a".into(), "Day 10", "Still going", now).unwrap();
        let p2 = c.create_post(&"b".into(), "Hello", "New here", now).unwrap();
        let feed = c.list_feed().unwrap();
        assert_eq!(feed.len(), 2);
        let mut ids = [p1.post_id.clone(), p2.post_id.clone()];
        ids.sort();
        assert_eq!([feed[0].post_id.clone(), feed[1].post_id.clone()], ids);
        assert!(feed[0].author_name.starts_with("name-"));

        assert!(matches!(
            c.create_post(&"a".into(), "t", "  ", now),
            Err(CommunityError::EmptyBody)
        ));
        assert!(matches!(c.create_post(&"a".into(), "", "b", now), Err(CommunityError::EmptyTitle)));
        assert!(matches!(
            c.create_post(&"x".into(), "t", "b", now),
            Err(CommunityError::UnknownUser(_))
        ));

        c.add_comment(&p1.post_id, &"b".into(), "Keep it up", now).unwrap();
        assert_eq!(c.get_post(&p1.post_id).unwrap().comments.len(), 1);
        assert!(matches!(
            c.add_comment("missing", &"b".into(), "hi", now),
            Err(CommunityError::UnknownPost(_))
        ));
    }

    #[test]
    fn inbox_keeps_order() {
        let (_dir, c) = community();
        let t0: DateTime<Utc> = "2026-05-01T12:00:00Z".parse().unwrap();
        c.send_message(&"a".into(), &"b".into(), "second", t0 + chrono::Duration::minutes(5))
            .unwrap();
        c.send_message(&"a".into(), &"b".into(), "first", t0).unwrap();
        let inbox = c.inbox(&"b".into()).unwrap();
        assert_eq!(inbox.iter().map(|m| m.body.as_str()).collect::<Vec<_>>(), ["first", "second"]);
        assert!(c.inbox(&"a".into()).unwrap().is_empty());
    }
}
