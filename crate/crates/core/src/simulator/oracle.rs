// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use crate::domain::{FenceId, LocationFix};
use crate::geo::{
    seconds_between, DurationConstraint, FenceEvent, FenceEventKind, Geofence, TransitionRule,
    DEFAULT_TRANSIT_WINDOW_S, FIX_GAP_LIMIT_S,
};

/// A maximal run of consecutive fixes inside one fence with no silent gap.
struct Stay {
    fence: usize,
    first: usize,
    last: usize,
}

/// Reference fence-event stream for one user's time-ordered fixes.
///
/// Works on whole intervals instead of a running state: fixes are grouped
/// into stays, and entry, exit, dwell and transit events are derived from
/// each stay's endpoints. Fences must be valid and pairwise disjoint.
pub fn oracle_fence_events(fixes: &[LocationFix], fences: &[Geofence], rules: &[TransitionRule]) -> Vec<FenceEvent> {
    let n = fixes.len();
    let region: Vec<Option<usize>> = fixes
        .iter()
        .map(|f| fences.iter().position(|g| g.contains(f.point)))
        .collect();
    let gap_before: Vec<bool> = (0..n)
        .map(|i| i > 0 && seconds_between(fixes[i - 1].at, fixes[i].at) > FIX_GAP_LIMIT_S)
        .collect();

    let mut stays: Vec<Stay> = Vec::new();
    for i in 0..n {
        let Some(fence) = region[i] else { continue };
        match stays.last_mut() {
            Some(s) if s.last + 1 == i && s.fence == fence && !gap_before[i] => s.last = i,
            _ => stays.push(Stay { fence, first: i, last: i }),
        }
    }

    let rule_table: BTreeMap<(&FenceId, &FenceId), &DurationConstraint> =
        rules.iter().map(|r| ((&r.from, &r.to), &r.constraint)).collect();
    let window = |from: &FenceId| {
        rules
            .iter()
            .filter(|r| &r.from == from)
            .map(|r| r.constraint.l_max)
            .reduce(f64::max)
            .unwrap_or(DEFAULT_TRANSIT_WINDOW_S)
    };

    // (fix index being processed, rank within that fix, event)
    let mut out: Vec<(usize, u8, FenceEvent)> = Vec::new();
    let mut push = |idx: usize, rank: u8, kind: FenceEventKind, fence: &FenceId, from: Option<&FenceId>, fix: usize| {
        out.push((
            idx,
            rank,
            FenceEvent {
                user_id: fixes[idx].user_id.clone(),
                fence_id: fence.clone(),
                from_fence_id: from.cloned(),
                kind,
                at: fixes[fix].at,
            },
        ));
    };

    for (si, stay) in stays.iter().enumerate() {
        let g = &fences[stay.fence];
        let a = stay.first;
        push(a, 1, FenceEventKind::Entered, &g.fence_id, None, a);

        if si > 0 {
            let prev = &stays[si - 1];
            let f = &fences[prev.fence].fence_id;
            let exit = prev.last + 1;
            let unbroken = !(exit..=a).any(|k| gap_before[k]);
            if unbroken {
                let travel = seconds_between(fixes[exit].at, fixes[a].at);
                if travel <= window(f) {
                    let kind = match rule_table.get(&(f, &g.fence_id)) {
                        Some(c) if travel < c.l_min || travel > c.l_max => FenceEventKind::TransitViolation,
                        _ => FenceEventKind::TransitCompleted,
                    };
                    push(a, 2, kind, &g.fence_id, Some(f), a);
                }
            }
        }

        let dwell = |k: usize| seconds_between(fixes[a].at, fixes[k].at);
        let stay_fixes = a..=stay.last;
        let confirm = match g.state_constraint {
            Some(c) => stay_fixes.clone().find(|&k| dwell(k) >= c.l_min),
            None => stay_fixes.clone().find(|&k| dwell(k) > 0.0),
        };
        if let Some(k) = confirm {
            push(k, 3, FenceEventKind::DwellConfirmed, &g.fence_id, None, k);
        }
        if let Some(c) = g.state_constraint {
            if let Some(k) = stay_fixes.clone().find(|&k| dwell(k) > c.l_max) {
                push(k, 4, FenceEventKind::DwellViolation, &g.fence_id, None, k);
            }
        }

        let next = stay.last + 1;
        if next < n {
            // a silent gap closes the stay at its last fix
            let at = if gap_before[next] { stay.last } else { next };
            push(next, 0, FenceEventKind::Exited, &g.fence_id, None, at);
        }
    }

    out.sort_by_key(|(idx, rank, _)| (*idx, *rank));
    out.into_iter().map(|(_, _, e)| e).collect()
}
