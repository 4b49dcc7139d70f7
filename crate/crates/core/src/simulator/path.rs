// SPDX-License-Identifier: Apache-2.0

use crate::domain::GeoPoint;
use crate::geo::{haversine_m, EARTH_RADIUS_M};

/// Point `north_m` metres north and `east_m` metres east of `origin`, using
/// a local flat-earth approximation (fine for legs under 10 km).
pub fn offset_point(origin: GeoPoint, north_m: f64, east_m: f64) -> GeoPoint {
    let lat = origin.lat() + (north_m / EARTH_RADIUS_M).to_degrees();
    let lon = origin.lon() + (east_m / (EARTH_RADIUS_M * origin.lat().to_radians().cos())).to_degrees();
    GeoPoint::new(lat.clamp(-89.9, 89.9), lon.clamp(-180.0, 180.0)).expect("clamped")
}

/// Piecewise-linear trajectory: position is interpolated linearly in
/// latitude and longitude between time-ordered knots, and held constant
/// before the first and after the last.
#[derive(Clone, Debug)]
pub struct Path {
    knots: Vec<(f64, GeoPoint)>,
}

impl Path {
    pub fn new(t: f64, at: GeoPoint) -> Self {
        Self { knots: vec![(t, at)] }
    }

    pub fn end(&self) -> (f64, GeoPoint) {
        *self.knots.last().expect("never empty")
    }

    /// Stays put until `t` (no-op if `t` is not later than the last knot).
    pub fn wait_until(&mut self, t: f64) {
        let (t0, p) = self.end();
        if t > t0 {
            self.knots.push((t, p));
        }
    }

    /// Travels in a straight line to `to` at `speed_mps`; returns arrival time.
    pub fn travel_to(&mut self, to: GeoPoint, speed_mps: f64) -> f64 {
        let (t0, from) = self.end();
        let arrive = t0 + haversine_m(from, to) / speed_mps;
        self.knots.push((arrive, to));
        arrive
    }

    pub fn position(&self, t: f64) -> GeoPoint {
        let i = self.knots.partition_point(|(kt, _)| *kt <= t);
        if i == 0 {
            return self.knots[0].1;
        }
        if i == self.knots.len() {
            return self.knots[i - 1].1;
        }
        let (t0, a) = self.knots[i - 1];
        let (t1, b) = self.knots[i];
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
        GeoPoint::new(a.lat() + w * (b.lat() - a.lat()), a.lon() + w * (b.lon() - a.lon())).expect("between valid points")
    }
}
