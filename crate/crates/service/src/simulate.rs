// SPDX-License-Identifier: Apache-2.0

//! Replays a generated scenario through an [`App`] on a virtual clock, as
//! if the records had arrived live.

use addictfree_core::clock::VirtualClock;
use addictfree_core::simulator::{generate, Scenario, ScenarioError, SimOutput};
use addictfree_core::predictor::ceil_hour;
use chrono::{DateTime, Duration, Utc};
use tracing::warn;

use crate::app::{App, AppError, EventInput, FeedbackInput, FenceInput, FixInput, ImportReport, Principal};

#[derive(Debug, thiserror::Error)]
pub enum SimulateError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    App(#[from] AppError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Run the scheduler at every whole hour of the timeline.
    pub ticks: bool,
}

enum Item<'a> {
    Tick,
    Event(&'a addictfree_core::domain::ConsumptionEvent),
    Fix(&'a addictfree_core::domain::LocationFix),
    Feedback(&'a addictfree_core::domain::DailyFeedback),
}

/// Registers the scenario's users, fences and POIs, then feeds events,
/// fixes and feedback in time order while advancing `clock`. Feedback for a
/// day is submitted at the user's next local midnight. Rejected records are
/// counted and logged.
pub fn replay(app: &App, clock: &VirtualClock, scenario: &Scenario, opts: ReplayOptions) -> Result<ImportReport, SimulateError> {
    let out = generate(scenario)?;
    replay_output(app, clock, scenario, &out, opts)
}

pub fn replay_output(
    app: &App,
    clock: &VirtualClock,
    scenario: &Scenario,
    out: &SimOutput,
    opts: ReplayOptions,
) -> Result<ImportReport, SimulateError> {
    scenario.validate()?;
    let mut report = ImportReport::default();
    clock.set(scenario.start);
    for profile in scenario.profiles() {
        app.insert_user(profile)?;
        report.users += 1;
    }
    report.pois = app.import_pois(scenario.pois.clone())?;
    for fence in &scenario.fences {
        let input = FenceInput {
            fence_id: Some(fence.fence_id.clone()),
            owner: fence.owner.clone(),
            center: fence.center,
            radius_m: fence.radius_m,
            kind: fence.kind,
            state_constraint: fence.state_constraint,
            label: fence.label.clone(),
            // rules may point at fences created later
            transitions: vec![],
        };
        app.create_fence(&Principal::Operator, input)?;
        report.fences += 1;
    }
    app.add_rules(&Principal::Operator, &scenario.rules)?;

    let end = scenario.start + Duration::days(i64::from(scenario.days));
    let offsets: std::collections::HashMap<_, _> = scenario
        .users
        .iter()
        .map(|u| (u.user_id.clone(), u.utc_offset_minutes))
        .collect();
    let mut timeline: Vec<(DateTime<Utc>, u8, Item)> = Vec::new();
    if opts.ticks {
        let mut t = ceil_hour(scenario.start);
        while t < end {
            timeline.push((t, 0, Item::Tick));
            t += Duration::hours(1);
        }
    }
    for e in &out.events {
        timeline.push((e.at, 1, Item::Event(e)));
    }
    for f in &out.fixes {
        timeline.push((f.at, 2, Item::Fix(f)));
    }
    for fb in &out.feedback {
        let minutes = offsets.get(&fb.user_id).copied().unwrap_or(0);
        let midnight = (fb.date + Duration::days(1)).and_hms_opt(0, 0, 0).expect("midnight").and_utc()
            - Duration::minutes(i64::from(minutes));
        timeline.push((midnight, 3, Item::Feedback(fb)));
    }
    // stable: generator order is kept within equal keys
    timeline.sort_by_key(|(t, rank, _)| (*t, *rank));

    for (t, _, item) in timeline {
        clock.set(t);
        let result = match item {
            Item::Tick => app.hourly_tick(t).map(|_| ()),
            Item::Event(e) => app
                .ingest_event(
                    &e.user_id,
                    EventInput {
                        event_id: Some(e.event_id.clone()),
                        user_id: None,
                        substance: e.substance,
                        quantity: e.quantity,
                        at: Some(e.at),
                        location: e.location,
                        source: e.source,
                    },
                )
                .map(|_| report.events += 1),
            Item::Fix(f) => app
                .ingest_fix(
                    &f.user_id,
                    FixInput {
                        user_id: None,
                        point: f.point,
                        at: f.at,
                        accuracy_m: f.accuracy_m,
                    },
                )
                .map(|o| {
                    report.fixes += 1;
                    report.fence_events += o.events.len();
                    report.notifications += o.notifications.len();
                }),
            Item::Feedback(fb) => app
                .submit_feedback(
                    &fb.user_id,
                    FeedbackInput {
                        user_id: None,
                        date: fb.date,
                        stress_level: fb.stress_level,
                        consumed_unlogged: fb.consumed_unlogged,
                        backfill_events: vec![],
                        notes: fb.notes.clone(),
                    },
                )
                .map(|_| report.feedback += 1),
        };
        if let Err(e) = result {
            warn!(at = %t, error = %e, "replay record rejected");
            report.rejected += 1;
        }
        app.dispatch(t)?;
    }
    clock.set(end);
    app.dispatch(end)?;
    Ok(report)
}
