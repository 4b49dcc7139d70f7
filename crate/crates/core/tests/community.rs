// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;
use std::thread;

use addictfree_core::community::{suggest_connections, vicinity, Community};
use addictfree_core::domain::{GeoPoint, RecoveryStage, Substance, UserId, UserProfile};
use addictfree_store::{Namespace, Store, SyncMode};
use chrono::{DateTime, Duration, Utc};
use proptest::prelude::*;

fn profile(id: &str) -> UserProfile {
    UserProfile {
        user_id: id.into(),
        display_name: id.to_uppercase(),
        addiction_kinds: [Substance::Tobacco].into(),
        recovery_stage: RecoveryStage::SustainedRecovery,
        interests: vec![],
        home_region: None,
        utc_offset_minutes: 0,
        created_at: "2026-01-01T00:00:00Z".parse().unwrap(),
    }
}

#[test]
fn concurrent_comments_are_all_kept() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open_with(dir.path().join("community.log"), SyncMode::Never).unwrap();
    for i in 0..10 {
        let id = format!("u{i}");
        store.put_json(Namespace::Users, id.as_str(), &profile(&id), None).unwrap();
    }
    let community = Community::new(store);
    let t0: DateTime<Utc> = "2026-05-01T08:00:00Z".parse().unwrap();
    let post = community.create_post(&"u0".into(), "Week one", "Tough but fine", t0).unwrap();

    let handles: Vec<_> = (0..10)
        .map(|w| {
            let community = community.clone();
            let post_id = post.post_id.clone();
            thread::spawn(move || {
                let author: UserId = format!("u{w}").into();
                for j in 0..10 {
                    let at = t0 + Duration::seconds(((j * 7 + w * 13) % 50) as i64);
                    community.add_comment(&post_id, &author, &format!("c{w}-{j}"), at).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }

    let stored = community.get_post(&post.post_id).unwrap();
    assert_eq!(stored.comments.len(), 100);
    let bodies: HashSet<&str> = stored.comments.iter().map(|c| c.body.as_str()).collect();
    assert_eq!(bodies.len(), 100);
    assert!(stored.comments.windows(2).all(|w| w[0].created_at <= w[1].created_at));
}

fn user_strategy() -> impl Strategy<Value = UserProfile> {
    (
        0usize..5,
        prop::sample::subsequence(vec![Substance::Alcohol, Substance::Tobacco], 0..=2),
        prop::option::of((-60.0f64..60.0, -170.0f64..170.0)),
    )
        .prop_map(|(stage, kinds, home)| {
            let stage = [
                RecoveryStage::ActiveUse,
                RecoveryStage::EarlyRecovery,
                RecoveryStage::SustainedRecovery,
                RecoveryStage::Recovered,
                RecoveryStage::Therapist,
            ][stage];
            UserProfile {
                addiction_kinds: kinds.into_iter().collect(),
                recovery_stage: stage,
                home_region: home.map(|(lat, lon)| GeoPoint::new(lat, lon).unwrap()),
                ..profile("x")
            }
        })
}

proptest! {
    #[test]
    fn suggestions_exclude_self_and_stay_in_range(
        users in prop::collection::vec(user_strategy(), 1..12),
        k in 1usize..15,
    ) {
        let users: Vec<UserProfile> = users
            .into_iter()
            .enumerate()
            .map(|(i, u)| UserProfile { user_id: format!("u{i:02}").into(), ..u })
            .collect();
        let me = users[0].user_id.clone();
        let out = suggest_connections(&me, &users, k).unwrap();
        prop_assert_eq!(out.len(), k.min(users.len() - 1));
        prop_assert!(out.iter().all(|s| s.candidate_id != me && (0.0..=1.0).contains(&s.score)));
        prop_assert!(out.windows(2).all(|w| w[0].score > w[1].score
            || (w[0].score == w[1].score && w[0].candidate_id < w[1].candidate_id)));
        prop_assert_eq!(out, suggest_connections(&me, &users, k).unwrap());
    }

    #[test]
    fn vicinity_is_symmetric(a in user_strategy(), b in user_strategy()) {
        prop_assert_eq!(vicinity(a.home_region, b.home_region), vicinity(b.home_region, a.home_region));
    }
}
