//! Image-method tracing of direct and first-order reflected paths.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::geometry::{blocks, intersect_params, wrap_angle, Point2};
use super::scene::Scene;
use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// One propagation path between the base station and a UE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    /// Linear amplitude.
    pub amplitude: f64,
    /// Phase in radians.
    pub phase: f64,
    /// Delay in seconds.
    pub delay: f64,
    /// Departure angle at the base station, radians in `[-pi, pi)`.
    pub aod: f64,
    /// Arrival angle at the UE, radians in `[-pi, pi)`.
    pub aoa: f64,
    /// Reflection order, 0 for the direct path.
    pub order: u8,
}

impl Path {
    /// Geometric length implied by the delay.
    pub fn length(&self) -> f64 {
        self.delay * SPEED_OF_LIGHT
    }
}

pub type PathSet = Vec<Path>;

fn make_path(length: f64, aod: f64, aoa: f64, order: u8, carrier_hz: f64) -> Path {
    let delay = length / SPEED_OF_LIGHT;
    Path {
        amplitude: 1.0 / length,
        phase: wrap_angle(-2.0 * PI * carrier_hz * delay),
        delay,
        aod: wrap_angle(aod),
        aoa: wrap_angle(aoa),
        order,
    }
}

/// Traces the direct path (if unblocked) and, for `max_order >= 1`, one
/// specular reflection per wall whose two legs are unblocked. Phases are
/// the carrier propagation phase `-2 pi f_c tau`.
pub fn trace_paths(scene: &Scene, ue: Point2, max_order: u8, carrier_hz: f64) -> Result<PathSet> {
    if max_order > 1 {
        return Err(Error::Contract(format!("max_order {max_order} not supported (0 or 1)")));
    }
    if !scene.bounds.contains(ue) {
        return Err(Error::Contract(format!("UE ({}, {}) outside scene bounds", ue.x, ue.y)));
    }
    let bs = scene.bs;
    let distance = bs.dist(ue);
    if distance < 1e-6 {
        return Err(Error::DegenerateGeometry { distance });
    }

    let mut paths = Vec::new();
    if !scene.walls.iter().any(|w| blocks(w, bs, ue)) {
        paths.push(make_path(distance, (ue - bs).angle(), (bs - ue).angle(), 0, carrier_hz));
    }
    if max_order == 0 {
        return Ok(paths);
    }

    for (j, wall) in scene.walls.iter().enumerate() {
        let (sb, su) = (wall.side(bs), wall.side(ue));
        if sb * su <= 0.0 {
            continue;
        }
        let image = wall.mirror(bs);
        let Some((t, u)) = intersect_params(image, ue, wall.a, wall.b) else {
            continue;
        };
        if !(0.0..=1.0).contains(&u) || t <= 0.0 || t >= 1.0 {
            continue;
        }
        let hit = image + (ue - image) * t;
        let clear = scene
            .walls
            .iter()
            .enumerate()
            .all(|(k, w)| k == j || (!blocks(w, bs, hit) && !blocks(w, hit, ue)));
        if clear {
            let length = image.dist(ue);
            paths.push(make_path(length, (hit - bs).angle(), (hit - ue).angle(), 1, carrier_hz));
        }
    }
    Ok(paths)
}
