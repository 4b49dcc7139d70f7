// SPDX-License-Identifier: Apache-2.0

//! Core logic for a relapse-intervention service: geofence dwell detection,
//! an LSTM relapse predictor, recovery statistics, diversion scheduling and
//! the support community.

pub mod clock;
pub mod domain;
pub mod exec;
pub mod geo;
pub mod predictor;
pub mod simulator;
pub mod stats;
pub mod diversion;
pub mod community;
