//! Scripted oracle driver: pure-pursuit steering on the active route point
//! with curvature- and clearance-based slowdown. It reads the true vehicle
//! state and the world directly — it generates supervision, it is not the
//! learned pipeline.

use lidarpilot_core::controller::ControlCommand;
use lidarpilot_core::geonav::{rotate_to_local, Bearing};
use serde::{Deserialize, Serialize};

use crate::vehicle::{VehicleParams, VehicleState};
use crate::world::{Route, World, FINISH_RADIUS_M};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Advance to the next route point inside this radius.
    pub switch_radius_m: f64,
    /// Saturation scale on path curvature for the speed cut.
    pub curve_gain: f64,
    /// Fraction of top speed shed in the tightest turns.
    pub curve_cut: f64,
    /// Obstacle clearance below which the expert slows, then crawls.
    pub slow_clearance_m: f64,
    pub crawl_clearance_m: f64,
    /// Forward probe distances for the clearance check.
    pub probe_reach_m: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            switch_radius_m: 3.0,
            curve_gain: 4.0,
            curve_cut: 0.65,
            slow_clearance_m: 1.8,
            crawl_clearance_m: 1.0,
            probe_reach_m: 2.4,
        }
    }
}

/// Progress along one route; advance is idempotent in the position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteProgress {
    pub next_index: usize,
    pub finished: bool,
}

impl RouteProgress {
    pub fn start() -> Self {
        RouteProgress { next_index: 0, finished: false }
    }

    pub fn advance(&mut self, position: [f64; 2], route: &Route, cfg: &ExpertConfig) {
        let dist = |p: [f64; 2]| {
            ((p[0] - position[0]).powi(2) + (p[1] - position[1]).powi(2)).sqrt()
        };
        while self.next_index + 1 < route.points.len()
            && dist(route.points[self.next_index]) < cfg.switch_radius_m
        {
            self.next_index += 1;
        }
        if self.next_index + 1 == route.points.len()
            && dist(route.points[self.next_index]) < FINISH_RADIUS_M
        {
            self.finished = true;
        }
    }
}

/// One control decision. Call `progress.advance` separately so replaying a
/// tick never double-advances.
pub fn expert_policy(
    state: &VehicleState,
    params: &VehicleParams,
    route: &Route,
    progress: &RouteProgress,
    world: &World,
    cfg: &ExpertConfig,
) -> ControlCommand {
    if progress.finished {
        return ControlCommand { steering: 0.0, throttle: 0.0 };
    }
    let target = route.points[progress.next_index];
    let bearing = Bearing::new(state.heading - std::f64::consts::FRAC_PI_2);
    let local = rotate_to_local(
        target[0] - state.position[0],
        target[1] - state.position[1],
        bearing,
    );
    let dist2 = (local.x * local.x + local.y * local.y).max(1e-6);
    // pure pursuit: arc through the target ⇒ curvature 2·lateral/d²;
    // positive steering turns toward negative local x
    let curvature = 2.0 * (-local.x) / dist2;
    let yaw_desired = curvature * params.speed_cap_mps;
    let steering = (yaw_desired / params.yaw_rate_max).clamp(-1.0, 1.0);

    let curve_factor =
        1.0 - cfg.curve_cut * (curvature.abs() * cfg.curve_gain).min(1.0);

    let (sin_h, cos_h) = state.heading.sin_cos();
    let mut clearance = f64::INFINITY;
    let mut probe = 0.6;
    while probe <= cfg.probe_reach_m {
        let p = [
            state.position[0] + probe * cos_h,
            state.position[1] + probe * sin_h,
        ];
        clearance = clearance.min(world.obstacle_clearance(p));
        probe += 0.6;
    }
    let clearance_factor = if clearance < cfg.crawl_clearance_m {
        0.25
    } else if clearance < cfg.slow_clearance_m {
        0.55
    } else {
        1.0
    };

    ControlCommand {
        steering,
        throttle: (curve_factor * clearance_factor).clamp(0.0, 1.0),
    }
}
