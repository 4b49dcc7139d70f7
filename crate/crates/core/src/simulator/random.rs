// SPDX-License-Identifier: Apache-2.0

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::path::{offset_point, Path};
use crate::domain::{GeoPoint, LocationFix, UserId};
use crate::geo::{fences_overlap, DurationConstraint, FenceKind, FenceOwner, Geofence, TransitionRule};

/// One user wandering among a few fences; input for engine-vs-oracle checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FenceScenario {
    pub user_id: UserId,
    pub fences: Vec<Geofence>,
    pub rules: Vec<TransitionRule>,
    pub fixes: Vec<LocationFix>,
}

fn minutes(rng: &mut ChaCha8Rng, max: u32) -> f64 {
    f64::from(rng.gen_range(0..=max)) * 60.0
}

/// Seeded random layout of 1 to 5 disjoint fences, random state and
/// transition constraints, and up to three days of 60 s fixes with
/// occasional silent gaps. Constraint bounds are whole minutes so they often
/// coincide exactly with fix spacing.
pub fn random_fence_scenario(seed: u64) -> FenceScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = GeoPoint::new(rng.gen_range(-60.0..60.0), rng.gen_range(-170.0..170.0)).expect("in range");
    let spread = 2000.0;

    let wanted = rng.gen_range(1..=5);
    let mut fences: Vec<Geofence> = Vec::new();
    for attempt in 0..200 {
        if fences.len() == wanted {
            break;
        }
        let center = offset_point(origin, rng.gen_range(-spread..spread), rng.gen_range(-spread..spread));
        let state_constraint = rng.gen_bool(0.6).then(|| {
            let l_min = minutes(&mut rng, 180);
            DurationConstraint::state(l_min, l_min + 60.0 + minutes(&mut rng, 240))
        });
        let candidate = Geofence {
            fence_id: format!("f{attempt}").into(),
            owner: FenceOwner::Public,
            center,
            radius_m: rng.gen_range(20.0..400.0),
            kind: FenceKind::AlcoholSpot,
            state_constraint,
            label: String::new(),
        };
        if fences.iter().all(|f| !fences_overlap(f, &candidate)) {
            fences.push(candidate);
        }
    }

    let mut rules = Vec::new();
    for from in &fences {
        for to in &fences {
            if !rng.gen_bool(0.35) {
                continue;
            }
            let l_min = if rng.gen_bool(0.3) { 0.0 } else { minutes(&mut rng, 60) };
            let mut l_max = l_min + minutes(&mut rng, 120);
            if l_max == 0.0 {
                l_max = 60.0;
            }
            rules.push(TransitionRule {
                from: from.fence_id.clone(),
                to: to.fence_id.clone(),
                constraint: DurationConstraint::transition(l_min, l_max),
            });
        }
    }

    let total = rng.gen_range(3600.0..=3.0 * 86_400.0);
    let mut path = Path::new(0.0, offset_point(origin, rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)));
    while path.end().0 < total {
        let target = match fences.choose(&mut rng) {
            Some(f) if rng.gen_bool(0.75) => {
                // land around the boundary as often as well inside it
                let r = f.radius_m * rng.gen_range(0.0..1.4);
                let bearing = rng.gen_range(0.0..std::f64::consts::TAU);
                offset_point(f.center, r * bearing.cos(), r * bearing.sin())
            }
            _ => offset_point(origin, rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)),
        };
        path.travel_to(target, rng.gen_range(0.5..20.0));
        let (t, _) = path.end();
        let dwell = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..14_400.0) };
        path.wait_until(t + dwell);
    }

    let user_id: UserId = format!("rand-{seed}").into();
    let t0: DateTime<Utc> = "2026-03-02T00:00:00Z".parse().expect("literal");
    let mut fixes = Vec::new();
    let mut s: i64 = 0;
    while (s as f64) < total {
        fixes.push(LocationFix {
            user_id: user_id.clone(),
            point: path.position(s as f64),
            at: t0 + Duration::seconds(s),
            accuracy_m: None,
        });
        s += 60;
        if rng.gen_bool(0.003) {
            s += *[1740, 1800, 1860, 3600, 7200].choose(&mut rng).expect("non-empty");
        }
    }

    FenceScenario {
        user_id,
        fences,
        rules,
        fixes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::FenceLayout;

    #[test]
    fn scenarios_are_valid_and_repeatable() {
        for seed in 0..50 {
            let s = random_fence_scenario(seed);
            assert!((1..=5).contains(&s.fences.len()));
            assert!(s.fixes.len() <= 3 * 1440 + 1);
            FenceLayout::new(s.fences.clone(), s.rules.clone()).unwrap();
            assert_eq!(s, random_fence_scenario(seed));
        }
    }
}
