// SPDX-License-Identifier: Apache-2.0

//! HTTP service, scheduler and operator tooling.

pub mod api;
pub mod app;
pub mod config;
pub mod simulate;
