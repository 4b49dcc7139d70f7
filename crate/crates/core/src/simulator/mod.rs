// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic data and brute-force reference implementations
//! used to check the geofence engine and the relapse predictor.

mod auc;
mod generate;
mod oracle;
mod path;
mod random;

pub use auc::{oracle_auc, trapezoid_auc, DegenerateLabels};
pub use generate::{
    generate, Commute, FavoriteSpot, Scenario, ScenarioError, SimOutput, UserBehavior, Waypoint,
};
pub use oracle::oracle_fence_events;
pub use path::{offset_point, Path};
pub use random::{random_fence_scenario, FenceScenario};
