//! Closed-loop episode runner.
//!
//! Each 4 Hz tick: sample sensors for the motion just completed, update the
//! heading filter and GNSS position estimate, scan the lidar, localize the
//! next two route points in the estimated body frame, derive the discrete
//! command, ask the policy for a control, and gate it through the safety
//! monitor before stepping the vehicle. The safety monitor rolls the vehicle
//! model forward under the candidate control; if any predicted pose leaves
//! traversable ground or comes too close to an obstacle, a takeover starts:
//! the scripted driver takes the wheel for at least a minimum hold and keeps
//! it until the policy's proposal passes the same rollout check. Ground-truth
//! waypoints are filled in afterwards from the true trajectory.

use lidarpilot_core::controller::{derive_command, Command, ControlCommand};
use lidarpilot_core::geonav::{
    geo_delta, heading_update, rotate_to_local, Bearing, GeonavError, HeadingFilterConfig,
    HeadingFilterState, LocalPoint,
};
use lidarpilot_core::projection::LabeledPointCloud;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

use crate::expert::{expert_policy, ExpertConfig, RouteProgress};
use crate::log::LogSample;
use crate::raycast::{raycast_scan, LidarConfig};
use crate::sensors::{sense, NoiseConfig, SensorFrame};
use crate::vehicle::{step_vehicle, Pose, VehicleParams, VehicleState};
use crate::world::{Route, World, FINISH_RADIUS_M};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("route index {0} out of range")]
    BadRoute(usize),
    #[error(transparent)]
    Geo(#[from] GeonavError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    /// How far ahead the candidate control is simulated.
    pub horizon_s: f64,
    /// Minimum predicted obstacle clearance.
    pub clearance_m: f64,
    /// Minimum takeover hold once triggered.
    pub min_takeover_s: f64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig { horizon_s: 1.5, clearance_m: 0.3, min_takeover_s: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub dt: f64,
    pub max_ticks: usize,
    pub lidar: LidarConfig,
    pub noise: NoiseConfig,
    pub intervention: InterventionConfig,
    pub expert: ExpertConfig,
    /// Skip the lidar scan entirely (logs then carry empty clouds).
    pub capture_lidar: bool,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            dt: 0.25,
            max_ticks: 2400,
            lidar: LidarConfig::desk_default(),
            noise: NoiseConfig::default(),
            intervention: InterventionConfig::default(),
            expert: ExpertConfig::default(),
            capture_lidar: true,
            seed: 0,
        }
    }
}

/// Everything a driving policy may look at on one tick. True state is
/// exposed for scripted oracle policies; learned policies must only use the
/// sensed fields.
#[derive(Debug)]
pub struct TickContext<'a> {
    pub tick: usize,
    pub timestamp: f64,
    pub cloud: Option<&'a LabeledPointCloud>,
    pub sensors: &'a SensorFrame,
    pub est_position: [f64; 2],
    pub est_heading: f64,
    /// Next two route points in the estimated body frame.
    pub rp1: LocalPoint,
    pub rp2: LocalPoint,
    pub command: Command,
    pub true_state: &'a VehicleState,
    pub route_next_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub samples: Vec<LogSample>,
    /// True pose before each tick, plus the final pose (len = ticks + 1).
    pub poses: Vec<Pose>,
    pub interventions: u32,
    pub intervention_time_s: f64,
    pub finished: bool,
    pub ticks: usize,
}

/// Wraps the scripted driver as a tick policy.
pub fn expert_as_policy<'a>(
    world: &'a World,
    route: &'a Route,
    params: &'a VehicleParams,
    cfg: &'a ExpertConfig,
) -> impl FnMut(&TickContext) -> ControlCommand + 'a {
    move |ctx: &TickContext| {
        let progress = RouteProgress { next_index: ctx.route_next_index, finished: false };
        expert_policy(ctx.true_state, params, route, &progress, world, cfg)
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Simulates the candidate control forward and checks every predicted pose.
fn rollout_safe(
    world: &World,
    state: &VehicleState,
    params: &VehicleParams,
    control: &ControlCommand,
    cfg: &InterventionConfig,
    dt: f64,
) -> bool {
    let steps = (cfg.horizon_s / dt).ceil() as usize;
    let mut rolled = *state;
    for _ in 0..steps {
        rolled = step_vehicle(&rolled, params, control, dt);
        if !world.traversable_at(rolled.position)
            || world.obstacle_clearance(rolled.position) < cfg.clearance_m
        {
            return false;
        }
    }
    true
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Runs one episode of `world.routes[route_index]` from a standstill at the
/// first route point, facing the second.
pub fn run_episode<F>(
    world: &World,
    route_index: usize,
    params: &VehicleParams,
    policy: &mut F,
    cfg: &EpisodeConfig,
) -> Result<EpisodeResult, EpisodeError>
where
    F: FnMut(&TickContext) -> ControlCommand,
{
    let route = world.routes.get(route_index).ok_or(EpisodeError::BadRoute(route_index))?;
    let p0 = route.points[0];
    let p1 = route.points[1];
    let start = Pose {
        position: p0,
        heading: (p1[1] - p0[1]).atan2(p1[0] - p0[0]),
    };
    run_episode_from(world, route, start, params, policy, cfg)
}

pub fn run_episode_from<F>(
    world: &World,
    route: &Route,
    start: Pose,
    params: &VehicleParams,
    policy: &mut F,
    cfg: &EpisodeConfig,
) -> Result<EpisodeResult, EpisodeError>
where
    F: FnMut(&TickContext) -> ControlCommand,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // trust mag fixes only when the accelerometer is quiet: 4σ of its noise,
    // floored so a noise-free run keeps the route-point pipeline sub-mm
    let filter_cfg = HeadingFilterConfig {
        accel_gate_mps2: (4.0 * cfg.noise.accel_sigma).max(2e-3),
        ..HeadingFilterConfig::default()
    };
    let mut filter = HeadingFilterState::new();
    let mut state = VehicleState::at_rest(start);
    let mut progress = RouteProgress::start();
    let finish = *route.points.last().expect("validated route");

    let mut samples: Vec<LogSample> = Vec::new();
    let mut poses: Vec<Pose> = Vec::new();
    let mut interventions = 0u32;
    let mut intervention_time_s = 0.0;
    let mut in_takeover = false;
    let mut takeover_elapsed = 0.0;
    let mut finished = false;
    // motion over the previous step, as the inertial sensors see it
    let mut last_yaw = 0.0;
    let mut last_accel = 0.0;
    let mut tick = 0;

    while tick < cfg.max_ticks {
        let timestamp = tick as f64 * cfg.dt;
        poses.push(state.pose());

        let frame = sense(world.origin, &state, params, last_yaw, last_accel, &cfg.noise, &mut rng)?;
        filter = heading_update(filter, &frame.imu, cfg.dt, &filter_cfg);
        let (est_x, est_y) = geo_delta(world.origin, frame.gnss)?;
        let est_bearing = filter.bearing;
        let est_heading = est_bearing.radians() + FRAC_PI_2;

        let cloud = if cfg.capture_lidar {
            let mut scan = raycast_scan(world, state.pose(), &cfg.lidar, timestamp);
            for p in &mut scan.points {
                p.x = quantize(p.x);
                p.y = quantize(p.y);
                p.z = quantize(p.z);
            }
            Some(scan)
        } else {
            None
        };

        progress.advance(state.position, route, &cfg.expert);
        let rp1_world = route.points[progress.next_index];
        let rp2_world = route.points[(progress.next_index + 1).min(route.points.len() - 1)];
        let rp1 = rotate_to_local(rp1_world[0] - est_x, rp1_world[1] - est_y, est_bearing);
        let rp2 = rotate_to_local(rp2_world[0] - est_x, rp2_world[1] - est_y, est_bearing);
        let command = derive_command(rp1, rp2);

        let ctx = TickContext {
            tick,
            timestamp,
            cloud: cloud.as_ref(),
            sensors: &frame,
            est_position: [est_x, est_y],
            est_heading,
            rp1,
            rp2,
            command,
            true_state: &state,
            route_next_index: progress.next_index,
        };
        let candidate = policy(&ctx);
        let candidate_safe =
            rollout_safe(world, &state, params, &candidate, &cfg.intervention, cfg.dt);

        if in_takeover {
            if takeover_elapsed >= cfg.intervention.min_takeover_s && candidate_safe {
                in_takeover = false;
            }
        } else if !candidate_safe {
            in_takeover = true;
            takeover_elapsed = 0.0;
            interventions += 1;
        }

        let applied = if in_takeover {
            takeover_elapsed += cfg.dt;
            intervention_time_s += cfg.dt;
            expert_policy(&state, params, route, &progress, world, &cfg.expert)
        } else {
            candidate
        };
        let applied = ControlCommand {
            steering: applied.steering.clamp(-1.0, 1.0),
            throttle: applied.throttle.clamp(0.0, 1.0),
        };

        samples.push(LogSample {
            timestamp,
            points: cloud.map(|c| c.points).unwrap_or_default(),
            gnss: frame.gnss,
            imu: lidarpilot_core::geonav::ImuSample {
                accel: frame.imu.accel.map(quantize),
                gyro: frame.imu.gyro.map(quantize),
                mag: frame.imu.mag.map(quantize),
            },
            omega_l: frame.omega_l as f32,
            omega_r: frame.omega_r as f32,
            steering: applied.steering as f32,
            throttle: applied.throttle as f32,
            gt_waypoints: [0.0; 6], // filled from the true trajectory below
            command: command as u8,
            rp1: [rp1.x as f32, rp1.y as f32],
            rp2: [rp2.x as f32, rp2.y as f32],
        });

        let v0 = state.speed(params);
        state = step_vehicle(&state, params, &applied, cfg.dt);
        last_yaw = applied.steering * params.yaw_rate_max;
        last_accel = (state.speed(params) - v0) / cfg.dt;
        tick += 1;

        if dist2(state.position, finish) < FINISH_RADIUS_M * FINISH_RADIUS_M {
            finished = true;
            break;
        }
    }
    poses.push(state.pose());

    // ground-truth waypoints: true displacement to the poses 1, 2, 3 s ahead,
    // expressed in the true body frame at the sample tick
    let per_second = (1.0 / cfg.dt).round().max(1.0) as usize;
    let last = poses.len() - 1;
    for (i, sample) in samples.iter_mut().enumerate() {
        let here = poses[i];
        let bearing = Bearing::new(here.heading - FRAC_PI_2);
        for k in 0..3 {
            let ahead = poses[(i + (k + 1) * per_second).min(last)];
            let wp = rotate_to_local(
                ahead.position[0] - here.position[0],
                ahead.position[1] - here.position[1],
                bearing,
            );
            sample.gt_waypoints[2 * k] = wp.x as f32;
            sample.gt_waypoints[2 * k + 1] = wp.y as f32;
        }
    }

    Ok(EpisodeResult {
        ticks: samples.len(),
        samples,
        poses,
        interventions,
        intervention_time_s,
        finished,
    })
}
