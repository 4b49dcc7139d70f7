// SPDX-License-Identifier: Apache-2.0

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FenceLayout, FIX_GAP_LIMIT_S};
use crate::domain::{FenceId, LocationFix, UserId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FenceMode {
    Outside,
    Inside {
        fence_id: FenceId,
        since: DateTime<Utc>,
        confirmed: bool,
        /// DwellViolation already reported for this stay.
        violated: bool,
    },
    Transit {
        from_fence_id: FenceId,
        since: DateTime<Utc>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FenceEventKind {
    Entered,
    DwellConfirmed,
    Exited,
    DwellViolation,
    TransitCompleted,
    TransitViolation,
}

/// For transit events `fence_id` is the destination and `from_fence_id` the
/// origin; for every other kind `from_fence_id` is `None`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FenceEvent {
    pub user_id: UserId,
    pub fence_id: FenceId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_fence_id: Option<FenceId>,
    pub kind: FenceEventKind,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("fix at {fix} is older than the last accepted fix at {last}")]
    OutOfOrderFix {
        fix: DateTime<Utc>,
        last: DateTime<Utc>,
    },
    #[error("fix lies inside more than one fence: {0:?}")]
    AmbiguousFences(Vec<FenceId>),
    #[error("fix belongs to {fix_user}, machine tracks {machine_user}")]
    WrongUser { fix_user: UserId, machine_user: UserId },
}

/// Per-user runtime state: where the user is relative to their fences and
/// for how long.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FenceMachine {
    pub user_id: UserId,
    pub mode: FenceMode,
    pub last_fix_at: Option<DateTime<Utc>>,
}

pub(crate) fn seconds_between(from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
    let d = to - from;
    match d.num_microseconds() {
        Some(us) => us as f64 / 1e6,
        None => d.num_milliseconds() as f64 / 1e3,
    }
}

struct Emitter<'a> {
    user: &'a UserId,
    out: Vec<FenceEvent>,
}

impl Emitter<'_> {
    fn push(&mut self, kind: FenceEventKind, fence: &FenceId, from: Option<&FenceId>, at: DateTime<Utc>) {
        self.out.push(FenceEvent {
            user_id: self.user.clone(),
            fence_id: fence.clone(),
            from_fence_id: from.cloned(),
            kind,
            at,
        });
    }
}

impl FenceMachine {
    pub fn new(user_id: UserId) -> Self {
        Self {
            user_id,
            mode: FenceMode::Outside,
            last_fix_at: None,
        }
    }

    /// Advances the machine by one fix. On error the machine is unchanged.
    ///
    /// Event order within one fix is Exited, Entered, transit outcome,
    /// DwellConfirmed, DwellViolation.
    pub fn step(&mut self, layout: &FenceLayout, fix: &LocationFix) -> Result<Vec<FenceEvent>, StepError> {
        let (next, events) = step(self, layout, fix)?;
        *self = next;
        Ok(events)
    }
}

/// Feeds a whole time-ordered track through a fresh machine.
pub fn replay(layout: &FenceLayout, user_id: &UserId, fixes: &[LocationFix]) -> Result<Vec<FenceEvent>, StepError> {
    let mut m = FenceMachine::new(user_id.clone());
    let mut out = Vec::new();
    for fix in fixes {
        out.extend(m.step(layout, fix)?);
    }
    Ok(out)
}

/// [`replay`] over independent tracks, in parallel when enabled.
pub fn replay_tracks(
    layout: &FenceLayout,
    tracks: &[(UserId, Vec<LocationFix>)],
) -> Vec<Result<Vec<FenceEvent>, StepError>> {
    crate::exec::map(tracks, |(user, fixes)| replay(layout, user, fixes))
}

/// Pure form of [`FenceMachine::step`].
pub fn step(
    machine: &FenceMachine,
    layout: &FenceLayout,
    fix: &LocationFix,
) -> Result<(FenceMachine, Vec<FenceEvent>), StepError> {
    if fix.user_id != machine.user_id {
        return Err(StepError::WrongUser {
            fix_user: fix.user_id.clone(),
            machine_user: machine.user_id.clone(),
        });
    }
    let t = fix.at;
    if let Some(last) = machine.last_fix_at {
        if t < last {
            return Err(StepError::OutOfOrderFix { fix: t, last });
        }
    }
    let hits = layout.containing(fix.point);
    if hits.len() > 1 {
        return Err(StepError::AmbiguousFences(
            hits.into_iter().map(|f| f.fence_id.clone()).collect(),
        ));
    }
    let region = hits.first().map(|f| f.fence_id.clone());

    let mut em = Emitter {
        user: &machine.user_id,
        out: Vec::new(),
    };
    let mut mode = machine.mode.clone();

    // A long silence ends any stay at the last observed fix.
    if let Some(last) = machine.last_fix_at {
        if seconds_between(last, t) > FIX_GAP_LIMIT_S {
            if let FenceMode::Inside { fence_id, .. } = &mode {
                em.push(FenceEventKind::Exited, fence_id, None, last);
            }
            mode = FenceMode::Outside;
        }
    }
    if let FenceMode::Transit { from_fence_id, since } = &mode {
        if seconds_between(*since, t) > layout.transit_window(from_fence_id) {
            mode = FenceMode::Outside;
        }
    }

    mode = match (mode, region) {
        (
            FenceMode::Inside {
                fence_id,
                since,
                confirmed,
                violated,
            },
            Some(here),
        ) if here == fence_id => dwell(&mut em, layout, fence_id, since, confirmed, violated, t),
        (FenceMode::Inside { fence_id, .. }, region) => {
            em.push(FenceEventKind::Exited, &fence_id, None, t);
            match region {
                Some(to) => arrive(&mut em, layout, Some((&fence_id, t)), to, t),
                None => FenceMode::Transit {
                    from_fence_id: fence_id,
                    since: t,
                },
            }
        }
        (FenceMode::Transit { from_fence_id, since }, Some(to)) => {
            arrive(&mut em, layout, Some((&from_fence_id, since)), to, t)
        }
        (transit @ FenceMode::Transit { .. }, None) => transit,
        (FenceMode::Outside, Some(to)) => arrive(&mut em, layout, None, to, t),
        (FenceMode::Outside, None) => FenceMode::Outside,
    };

    let events = em.out;
    Ok((
        FenceMachine {
            user_id: machine.user_id.clone(),
            mode,
            last_fix_at: Some(t),
        },
        events,
    ))
}

fn arrive(
    em: &mut Emitter<'_>,
    layout: &FenceLayout,
    transit: Option<(&FenceId, DateTime<Utc>)>,
    to: FenceId,
    t: DateTime<Utc>,
) -> FenceMode {
    em.push(FenceEventKind::Entered, &to, None, t);
    if let Some((from, since)) = transit {
        let travel = seconds_between(since, t);
        let kind = match layout.rule(from, &to) {
            Some(c) if travel < c.l_min || travel > c.l_max => FenceEventKind::TransitViolation,
            _ => FenceEventKind::TransitCompleted,
        };
        em.push(kind, &to, Some(from), t);
    }
    dwell(em, layout, to, t, false, false, t)
}

fn dwell(
    em: &mut Emitter<'_>,
    layout: &FenceLayout,
    fence_id: FenceId,
    since: DateTime<Utc>,
    mut confirmed: bool,
    mut violated: bool,
    t: DateTime<Utc>,
) -> FenceMode {
    let d = seconds_between(since, t);
    match layout.fence(&fence_id).and_then(|f| f.state_constraint) {
        Some(c) => {
            if !confirmed && d >= c.l_min {
                confirmed = true;
                em.push(FenceEventKind::DwellConfirmed, &fence_id, None, t);
            }
            if !violated && d > c.l_max {
                violated = true;
                em.push(FenceEventKind::DwellViolation, &fence_id, None, t);
            }
        }
        // unconstrained stays need some positive duration
        None => {
            if !confirmed && d > 0.0 {
                confirmed = true;
                em.push(FenceEventKind::DwellConfirmed, &fence_id, None, t);
            }
        }
    }
    FenceMode::Inside {
        fence_id,
        since,
        confirmed,
        violated,
    }
}
