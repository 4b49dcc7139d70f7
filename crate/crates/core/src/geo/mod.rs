// SPDX-License-Identifier: Apache-2.0

//! Circular geofences with duration constraints and the per-user state
//! machine that turns location fixes into enter/dwell/exit/transit events.

mod machine;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FenceId, GeoPoint, Substance, UserId, UserProfile};

pub use machine::{replay, replay_tracks, step, FenceEvent, FenceEventKind, FenceMachine, FenceMode, StepError};
pub(crate) use machine::seconds_between;

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Longest silence between fixes before an inside or transit state is
/// abandoned, in seconds.
pub const FIX_GAP_LIMIT_S: f64 = 1800.0;

/// Transit window for a fence that has no outgoing transition rules.
pub const DEFAULT_TRANSIT_WINDOW_S: f64 = 1800.0;

/// Great-circle distance in metres.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat().to_radians();
    let phi2 = b.lat().to_radians();
    let dphi = (b.lat() - a.lat()).to_radians();
    let dlambda = (b.lon() - a.lon()).to_radians();
    let s1 = (dphi / 2.0).sin();
    let s2 = (dlambda / 2.0).sin();
    let h = s1 * s1 + phi1.cos() * phi2.cos() * s2 * s2;
    2.0 * EARTH_RADIUS_M * h.clamp(0.0, 1.0).sqrt().asin()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FenceOwner {
    Public,
    User { user_id: UserId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FenceKind {
    AlcoholSpot,
    TobaccoSpot,
    Custom,
}

impl FenceKind {
    pub fn substance(self) -> Option<Substance> {
        match self {
            FenceKind::AlcoholSpot => Some(Substance::Alcohol),
            FenceKind::TobaccoSpot => Some(Substance::Tobacco),
            FenceKind::Custom => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintTarget {
    FenceState,
    Transition,
}

/// Allowed duration interval `[l_min, l_max]` in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationConstraint {
    pub l_min: f64,
    pub l_max: f64,
    pub applies_to: ConstraintTarget,
}

impl DurationConstraint {
    pub fn state(l_min: f64, l_max: f64) -> Self {
        Self {
            l_min,
            l_max,
            applies_to: ConstraintTarget::FenceState,
        }
    }

    pub fn transition(l_min: f64, l_max: f64) -> Self {
        Self {
            l_min,
            l_max,
            applies_to: ConstraintTarget::Transition,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geofence {
    pub fence_id: FenceId,
    pub owner: FenceOwner,
    pub center: GeoPoint,
    pub radius_m: f64,
    pub kind: FenceKind,
    #[serde(default)]
    pub state_constraint: Option<DurationConstraint>,
    #[serde(default)]
    pub label: String,
}

impl Geofence {
    /// Closed-ball membership: a point exactly on the boundary is inside.
    pub fn contains(&self, p: GeoPoint) -> bool {
        haversine_m(self.center, p) <= self.radius_m
    }
}

pub fn fence_contains(f: &Geofence, p: GeoPoint) -> bool {
    f.contains(p)
}

/// Duration constraint on travel from one fence to another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRule {
    pub from: FenceId,
    pub to: FenceId,
    pub constraint: DurationConstraint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolatedClause {
    /// l_min < 0 (or not finite)
    NegativeMinimum,
    /// l_max <= 0 (or not finite)
    NonPositiveMaximum,
    /// fence-state constraints need l_min < l_max
    MinimumNotBelowMaximum,
    /// transition constraints need l_min <= l_max
    MinimumAboveMaximum,
    /// constraint tagged for the other kind of use
    WrongTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintSite {
    Fence,
    Transition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintViolation {
    pub site: ConstraintSite,
    pub index: usize,
    pub clause: ViolatedClause,
    pub message: String,
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn clause_message(clause: ViolatedClause, c: &DurationConstraint) -> String {
    match clause {
        ViolatedClause::NegativeMinimum => format!("l_min must be >= 0 (got {})", c.l_min),
        ViolatedClause::NonPositiveMaximum => format!("l_max must be > 0 (got {})", c.l_max),
        ViolatedClause::MinimumNotBelowMaximum => format!(
            "fence-state constraint requires l_min < l_max (got l_min = {}, l_max = {})",
            c.l_min, c.l_max
        ),
        ViolatedClause::MinimumAboveMaximum => format!(
            "transition constraint requires l_min <= l_max (got l_min = {}, l_max = {})",
            c.l_min, c.l_max
        ),
        ViolatedClause::WrongTarget => format!("constraint is tagged {:?}", c.applies_to),
    }
}

fn check_constraint(c: &DurationConstraint, target: ConstraintTarget) -> Vec<ViolatedClause> {
    let mut out = Vec::new();
    if c.applies_to != target {
        out.push(ViolatedClause::WrongTarget);
    }
    // NaN fails every comparison, so these are written to reject it
    if !(c.l_min >= 0.0 && c.l_min.is_finite()) {
        out.push(ViolatedClause::NegativeMinimum);
    }
    if !(c.l_max > 0.0 && c.l_max.is_finite()) {
        out.push(ViolatedClause::NonPositiveMaximum);
    }
    match target {
        ConstraintTarget::FenceState if !(c.l_min < c.l_max) => {
            out.push(ViolatedClause::MinimumNotBelowMaximum)
        }
        ConstraintTarget::Transition if !(c.l_min <= c.l_max) => {
            out.push(ViolatedClause::MinimumAboveMaximum)
        }
        _ => {}
    }
    out
}

/// Checks every fence-state constraint against `l_min >= 0, l_max > 0,
/// l_min < l_max` and every transition constraint against `l_min >= 0,
/// l_max > 0, l_min <= l_max`. Returns all violations with their indices.
pub fn validate_constraints(
    fences: &[Geofence],
    transitions: &[DurationConstraint],
) -> Result<(), Vec<ConstraintViolation>> {
    let mut violations = Vec::new();
    for (index, fence) in fences.iter().enumerate() {
        if let Some(c) = &fence.state_constraint {
            for clause in check_constraint(c, ConstraintTarget::FenceState) {
                violations.push(ConstraintViolation {
                    site: ConstraintSite::Fence,
                    index,
                    clause,
                    message: clause_message(clause, c),
                });
            }
        }
    }
    for (index, c) in transitions.iter().enumerate() {
        for clause in check_constraint(c, ConstraintTarget::Transition) {
            violations.push(ConstraintViolation {
                site: ConstraintSite::Transition,
                index,
                clause,
                message: clause_message(clause, c),
            });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Public fences whose kind matches one of the user's addictions, plus every
/// fence the user owns.
pub fn active_fences_for(user: &UserProfile, all: &[Geofence]) -> Vec<Geofence> {
    all.iter()
        .filter(|f| match &f.owner {
            FenceOwner::Public => f
                .kind
                .substance()
                .is_some_and(|s| user.addiction_kinds.contains(&s)),
            FenceOwner::User { user_id } => *user_id == user.user_id,
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayoutError {
    #[error("invalid duration constraints: {}", .0.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join("; "))]
    Constraints(Vec<ConstraintViolation>),
    #[error("fence {0} needs a positive finite radius")]
    InvalidRadius(FenceId),
    #[error("fences {0} and {1} overlap")]
    Overlap(FenceId, FenceId),
    #[error("fence id {0} used twice")]
    DuplicateFence(FenceId),
    #[error("more than one transition rule from {0} to {1}")]
    DuplicateRule(FenceId, FenceId),
}

/// A validated, pairwise non-overlapping fence set together with its
/// transition rules. This is what the state machine steps against.
#[derive(Clone, Debug, Default)]
pub struct FenceLayout {
    fences: Vec<Geofence>,
    rules: BTreeMap<(FenceId, FenceId), DurationConstraint>,
    windows: BTreeMap<FenceId, f64>,
}

impl FenceLayout {
    pub fn new(fences: Vec<Geofence>, rules: Vec<TransitionRule>) -> Result<Self, LayoutError> {
        let transitions: Vec<_> = rules.iter().map(|r| r.constraint).collect();
        validate_constraints(&fences, &transitions).map_err(LayoutError::Constraints)?;

        let mut ids = BTreeSet::new();
        for f in &fences {
            if !(f.radius_m > 0.0 && f.radius_m.is_finite()) {
                return Err(LayoutError::InvalidRadius(f.fence_id.clone()));
            }
            if !ids.insert(f.fence_id.clone()) {
                return Err(LayoutError::DuplicateFence(f.fence_id.clone()));
            }
        }
        for (i, a) in fences.iter().enumerate() {
            for b in &fences[i + 1..] {
                if fences_overlap(a, b) {
                    return Err(LayoutError::Overlap(a.fence_id.clone(), b.fence_id.clone()));
                }
            }
        }

        let mut table = BTreeMap::new();
        let mut windows: BTreeMap<FenceId, f64> = BTreeMap::new();
        for rule in rules {
            let w = windows.entry(rule.from.clone()).or_insert(0.0);
            *w = w.max(rule.constraint.l_max);
            let key = (rule.from, rule.to);
            if table.insert(key.clone(), rule.constraint).is_some() {
                return Err(LayoutError::DuplicateRule(key.0, key.1));
            }
        }
        Ok(Self {
            fences,
            rules: table,
            windows,
        })
    }

    pub fn fences(&self) -> &[Geofence] {
        &self.fences
    }

    pub fn fence(&self, id: &FenceId) -> Option<&Geofence> {
        self.fences.iter().find(|f| &f.fence_id == id)
    }

    pub fn rule(&self, from: &FenceId, to: &FenceId) -> Option<&DurationConstraint> {
        self.rules.get(&(from.clone(), to.clone()))
    }

    pub fn rules(&self) -> impl Iterator<Item = TransitionRule> + '_ {
        self.rules.iter().map(|((from, to), c)| TransitionRule {
            from: from.clone(),
            to: to.clone(),
            constraint: *c,
        })
    }

    /// How long a transit leaving `from` stays open: the largest `l_max` of
    /// its outgoing rules, or [`DEFAULT_TRANSIT_WINDOW_S`] without rules.
    pub fn transit_window(&self, from: &FenceId) -> f64 {
        self.windows
            .get(from)
            .copied()
            .unwrap_or(DEFAULT_TRANSIT_WINDOW_S)
    }

    /// Fences containing `p`.
    pub fn containing(&self, p: GeoPoint) -> Vec<&Geofence> {
        self.fences.iter().filter(|f| f.contains(p)).collect()
    }
}

/// Closed discs intersect when the centre distance is at most the radius sum.
pub fn fences_overlap(a: &Geofence, b: &Geofence) -> bool {
    haversine_m(a.center, b.center) <= a.radius_m + b.radius_m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RecoveryStage;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn fence(id: &str, owner: FenceOwner, kind: FenceKind, center: GeoPoint, r: f64) -> Geofence {
        Geofence {
            fence_id: id.into(),
            owner,
            center,
            radius_m: r,
            kind,
            state_constraint: None,
            label: id.to_owned(),
        }
    }

    #[test]
    fn distance_identity_and_equator_degree() {
        let a = pt(33.58, -101.87);
        assert_eq!(haversine_m(a, a), 0.0);
        // R * pi / 180
        let closed_form = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        let d = haversine_m(pt(0.0, 0.0), pt(0.0, 1.0));
        assert!((d - closed_form).abs() < 1e-6);
        assert!((d - 111_194.93).abs() <= 0.01);
    }

    fn any_point() -> impl Strategy<Value = GeoPoint> {
        (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(a, b)| pt(a, b))
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(a in any_point(), b in any_point()) {
            prop_assert_eq!(haversine_m(a, b), haversine_m(b, a));
        }

        #[test]
        fn distance_triangle_inequality(a in any_point(), b in any_point(), c in any_point()) {
            let ab = haversine_m(a, b);
            let bc = haversine_m(b, c);
            let ac = haversine_m(a, c);
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-6) + 1e-6);
        }
    }

    #[test]
    fn containment_center_boundary_outside() {
        let center = pt(0.0, 0.0);
        let f = fence("f", FenceOwner::Public, FenceKind::AlcoholSpot, center, 100.0);
        assert!(fence_contains(&f, center));
        assert!(!fence_contains(&f, pt(0.0, 1.0)));
        let edge = pt(0.0, 0.0005);
        let on_boundary = Geofence {
            radius_m: haversine_m(center, edge),
            ..f
        };
        assert!(fence_contains(&on_boundary, edge));
    }

    #[test]
    fn constraint_examples() {
        let mut f = fence("f", FenceOwner::Public, FenceKind::AlcoholSpot, pt(0.0, 0.0), 50.0);
        f.state_constraint = Some(DurationConstraint::state(300.0, 300.0));
        let v = validate_constraints(&[f.clone()], &[]).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].clause, ViolatedClause::MinimumNotBelowMaximum);
        assert!(v[0].message.contains("l_min < l_max"));

        let v = validate_constraints(&[], &[DurationConstraint::transition(0.0, 0.0)]).unwrap_err();
        assert_eq!(v[0].clause, ViolatedClause::NonPositiveMaximum);
        assert_eq!((v[0].site, v[0].index), (ConstraintSite::Transition, 0));

        f.state_constraint = Some(DurationConstraint::state(0.0, 600.0));
        assert!(validate_constraints(&[f], &[DurationConstraint::transition(60.0, 60.0)]).is_ok());
    }

    #[test]
    fn violations_are_all_reported_with_indices() {
        let ok = fence("a", FenceOwner::Public, FenceKind::AlcoholSpot, pt(0.0, 0.0), 50.0);
        let mut bad = ok.clone();
        bad.state_constraint = Some(DurationConstraint::state(-1.0, -1.0));
        let v = validate_constraints(
            &[ok, bad],
            &[DurationConstraint::transition(5.0, 1.0), DurationConstraint::state(0.0, 1.0)],
        )
        .unwrap_err();
        let sites: Vec<_> = v.iter().map(|x| (x.site, x.index, x.clause)).collect();
        assert_eq!(
            sites,
            vec![
                (ConstraintSite::Fence, 1, ViolatedClause::NegativeMinimum),
                (ConstraintSite::Fence, 1, ViolatedClause::NonPositiveMaximum),
                (ConstraintSite::Fence, 1, ViolatedClause::MinimumNotBelowMaximum),
                (ConstraintSite::Transition, 0, ViolatedClause::MinimumAboveMaximum),
                (ConstraintSite::Transition, 1, ViolatedClause::WrongTarget),
            ]
        );
    }

    fn user(kinds: &[Substance]) -> UserProfile {
        UserProfile {
            user_id: "me".into(),
            display_name: "Me".into(),
            addiction_kinds: kinds.iter().copied().collect(),
            recovery_stage: RecoveryStage::EarlyRecovery,
            interests: vec![],
            home_region: None,
            utc_offset_minutes: 0,
            created_at: "2026-01-01T00:00:00Z".parse().unwrap(),
        }
    }

    #[test]
    fn active_set_filters_kind_and_owner() {
        let a = fence("A", FenceOwner::Public, FenceKind::AlcoholSpot, pt(0.0, 0.0), 10.0);
        let t = fence("T", FenceOwner::Public, FenceKind::TobaccoSpot, pt(1.0, 0.0), 10.0);
        let mine = fence(
            "mine",
            FenceOwner::User { user_id: "me".into() },
            FenceKind::Custom,
            pt(2.0, 0.0),
            10.0,
        );
        let theirs = fence(
            "theirs",
            FenceOwner::User { user_id: "other".into() },
            FenceKind::AlcoholSpot,
            pt(3.0, 0.0),
            10.0,
        );
        let all = vec![a, t, mine, theirs];
        let ids: Vec<_> = active_fences_for(&user(&[Substance::Alcohol]), &all)
            .into_iter()
            .map(|f| f.fence_id.0)
            .collect();
        assert_eq!(ids, ["A", "mine"]);
    }

    #[test]
    fn layout_rejects_overlap_and_bad_radius() {
        let a = fence("a", FenceOwner::Public, FenceKind::AlcoholSpot, pt(0.0, 0.0), 100.0);
        let b = fence("b", FenceOwner::Public, FenceKind::AlcoholSpot, pt(0.0, 0.001), 100.0);
        assert!(matches!(
            FenceLayout::new(vec![a.clone(), b], vec![]),
            Err(LayoutError::Overlap(..))
        ));
        let zero = fence("z", FenceOwner::Public, FenceKind::AlcoholSpot, pt(1.0, 0.0), 0.0);
        assert!(matches!(
            FenceLayout::new(vec![a, zero], vec![]),
            Err(LayoutError::InvalidRadius(_))
        ));
    }

    #[test]
    fn transit_window_is_largest_outgoing_max() {
        let a = fence("a", FenceOwner::Public, FenceKind::AlcoholSpot, pt(0.0, 0.0), 10.0);
        let b = fence("b", FenceOwner::Public, FenceKind::AlcoholSpot, pt(0.0, 0.01), 10.0);
        let rules = vec![
            TransitionRule {
                from: "a".into(),
                to: "b".into(),
                constraint: DurationConstraint::transition(0.0, 300.0),
            },
            TransitionRule {
                from: "a".into(),
                to: "a".into(),
                constraint: DurationConstraint::transition(60.0, 900.0),
            },
        ];
        let layout = FenceLayout::new(vec![a, b], rules).unwrap();
        assert_eq!(layout.transit_window(&"a".into()), 900.0);
        assert_eq!(layout.transit_window(&"b".into()), DEFAULT_TRANSIT_WINDOW_S);
    }
}
