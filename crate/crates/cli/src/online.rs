//! Closed-loop evaluation: drive each (condition, route, repeat) episode with
//! every candidate policy and count safety-monitor takeovers. A scripted
//! reference run per episode sets the timeout — a candidate that has not
//! reached the finish within `timeout_factor` times the reference duration is
//! scored as incomplete with whatever interventions it accumulated. Seeds
//! depend only on (master, condition, route, repeat), never on the policy, so
//! two policies driving the same episode see identical sensor noise.

use std::path::{Path, PathBuf};

use lidarpilot_core::controller::{
    aim_geometry, fuse_controls, linear_speed, pid_step, ControlCommand, ControlWeights, PidState,
};
use lidarpilot_core::model::{Model, ModelOutput, ObservationInput};
use lidarpilot_core::projection::{project_bev, project_front, GridConfig, LabeledPointCloud};
use lidarpilot_sim::episode::{run_episode, EpisodeConfig, EpisodeError, TickContext};
use lidarpilot_sim::log::{write_episode_log, LogError};
use lidarpilot_sim::scenes::{apply_traffic, build_campus, CampusVariant, TrafficCondition};
use lidarpilot_sim::vehicle::VehicleParams;
use lidarpilot_sim::world::World;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::{mean_std, OnlineRow};

#[derive(Debug, Error)]
pub enum OnlineError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("writing replay log {path}: {source}")]
    Replay { path: String, source: LogError },
    #[error(
        "reference driver failed to finish {condition} route {route} repeat {repeat} \
         within {ticks} ticks; the scene or route is unusable"
    )]
    ReferenceStuck { condition: String, route: usize, repeat: usize, ticks: usize },
    #[error("online plan needs at least one {0}")]
    EmptyPlan(&'static str),
}

/// Maps model waypoint/control outputs to a driveable command: aim-point
/// PIDs on the predicted waypoints, deadband-fused with the predicted
/// controls. Zero output degenerates to a zero aim and a zero speed target,
/// so both sources idle and the fused command holds the vehicle still.
#[allow(clippy::too_many_arguments)]
pub fn controls_from_output(
    out: &ModelOutput,
    omega_l: f64,
    omega_r: f64,
    dt: f64,
    wheel_radius_m: f64,
    lateral: &mut PidState,
    longitudinal: &mut PidState,
    weights: &ControlWeights,
) -> ControlCommand {
    let aim = aim_geometry(out.waypoints[0], out.waypoints[1]);
    let (pid_st, lat) = pid_step(*lateral, aim.theta_deg - 90.0, dt);
    *lateral = lat;
    let nu = linear_speed(omega_l, omega_r, wheel_radius_m);
    let (pid_th, lon) = pid_step(*longitudinal, aim.gamma - nu, dt);
    *longitudinal = lon;
    fuse_controls(out.steering, out.throttle, pid_st, pid_th, weights)
}

/// Per-episode driving state for a trained model.
pub struct LearnedDriver<'a> {
    pub model: &'a Model<f32>,
    pub front: GridConfig,
    pub bev: GridConfig,
    pub weights: ControlWeights,
    pub lateral: PidState,
    pub longitudinal: PidState,
    pub wheel_radius_m: f64,
    pub dt: f64,
}

impl LearnedDriver<'_> {
    pub fn control(&mut self, ctx: &TickContext) -> ControlCommand {
        let empty = LabeledPointCloud { points: Vec::new(), timestamp: ctx.timestamp };
        let cloud = ctx.cloud.unwrap_or(&empty);
        let front = project_front(cloud, &self.front);
        let bev = project_bev(cloud, &self.bev);
        let out = self
            .model
            .forward(&ObservationInput {
                front: &front,
                bev: &bev,
                rp1: ctx.rp1,
                rp2: ctx.rp2,
                omega_l: ctx.sensors.omega_l,
                omega_r: ctx.sensors.omega_r,
                command: ctx.command,
            })
            .expect("grid configs derived from the model config");
        controls_from_output(
            &out,
            ctx.sensors.omega_l,
            ctx.sensors.omega_r,
            self.dt,
            self.wheel_radius_m,
            &mut self.lateral,
            &mut self.longitudinal,
            &self.weights,
        )
    }
}

/// Immutable per-model pieces from which each episode builds a fresh driver.
#[derive(Clone, Copy)]
pub struct LearnedSpec<'a> {
    pub model: &'a Model<f32>,
    pub weights: ControlWeights,
    pub lateral: PidState,
    pub longitudinal: PidState,
    pub wheel_radius_m: f64,
}

#[derive(Clone, Copy)]
pub enum DrivePolicy<'a> {
    /// The scripted driver scored as its own candidate.
    Expert,
    Learned(LearnedSpec<'a>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlinePlan {
    pub variant: CampusVariant,
    pub routes: Vec<usize>,
    pub conditions: Vec<TrafficCondition>,
    pub repeats: usize,
    /// Timeout as a multiple of the reference episode duration.
    pub timeout_factor: f64,
    pub master_seed: u64,
    /// Episode template; per-run seed, tick budget, and lidar capture are
    /// overridden by the harness.
    pub episode: EpisodeConfig,
    pub vehicle: VehicleParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub model: String,
    pub condition: String,
    pub route: usize,
    pub repeat: usize,
    pub seed: u64,
    pub interventions: u32,
    pub intervention_time_s: f64,
    pub finished: bool,
    pub ticks: usize,
    pub reference_ticks: usize,
    pub replay_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineEvalResult {
    pub rows: Vec<OnlineRow>,
    pub episodes: Vec<EpisodeOutcome>,
    pub routes: usize,
    pub repeats: usize,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Decorrelates a salted stream from the master seed.
pub fn mix_seed(master: u64, salt: u64) -> u64 {
    splitmix64(master ^ splitmix64(salt))
}

/// Sensor-noise seed for one episode; policy-independent by construction.
pub fn task_seed(master: u64, condition_index: usize, route: usize, repeat: usize) -> u64 {
    mix_seed(master, (condition_index as u64) << 32 | (route as u64) << 16 | repeat as u64)
}

/// Parked-traffic seed for one (condition, repeat) world.
fn traffic_seed(master: u64, condition_index: usize, repeat: usize) -> u64 {
    splitmix64(master ^ 0xD1CE ^ ((condition_index as u64) << 24 | repeat as u64))
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

fn run_task(
    plan: &OnlinePlan,
    world: &World,
    policies: &[(&str, DrivePolicy)],
    condition: &TrafficCondition,
    condition_index: usize,
    route: usize,
    repeat: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<EpisodeOutcome>, OnlineError> {
    let seed = task_seed(plan.master_seed, condition_index, route, repeat);

    // reference run: scripted driver, full tick budget; the scan is captured
    // only when an expert replay log will be written from this result (the
    // scan never feeds back into the scripted driver, so outcomes match)
    let expert_replay = out_dir.is_some()
        && policies.iter().any(|(_, p)| matches!(p, DrivePolicy::Expert));
    let mut ref_cfg = plan.episode.clone();
    ref_cfg.capture_lidar = expert_replay && plan.episode.capture_lidar;
    ref_cfg.seed = seed;
    let reference = {
        let r = &world.routes[route];
        let mut policy = lidarpilot_sim::episode::expert_as_policy(
            world,
            r,
            &plan.vehicle,
            &plan.episode.expert,
        );
        run_episode(world, route, &plan.vehicle, &mut policy, &ref_cfg)?
    };
    if !reference.finished {
        return Err(OnlineError::ReferenceStuck {
            condition: condition.name.clone(),
            route,
            repeat,
            ticks: reference.ticks,
        });
    }
    let timeout_ticks = ((reference.ticks as f64) * plan.timeout_factor).ceil() as usize;

    let mut outcomes = Vec::with_capacity(policies.len());
    for (label, policy) in policies {
        let result;
        let owned;
        match policy {
            DrivePolicy::Expert => {
                result = &reference;
            }
            DrivePolicy::Learned(spec) => {
                let mut cfg = plan.episode.clone();
                cfg.capture_lidar = true;
                cfg.seed = seed;
                cfg.max_ticks = timeout_ticks;
                let (front, bev) = crate::config::grid_configs(&spec.model.config);
                let mut driver = LearnedDriver {
                    model: spec.model,
                    front,
                    bev,
                    weights: spec.weights,
                    lateral: spec.lateral,
                    longitudinal: spec.longitudinal,
                    wheel_radius_m: spec.wheel_radius_m,
                    dt: plan.episode.dt,
                };
                let mut policy_fn = |ctx: &TickContext| driver.control(ctx);
                owned = run_episode(world, route, &plan.vehicle, &mut policy_fn, &cfg)?;
                result = &owned;
            }
        }
        let replay_file = match out_dir {
            Some(dir) => {
                let name = format!(
                    "{}_{}_r{route}_k{repeat}.dpl2",
                    sanitize(label),
                    condition.name
                );
                let path = dir.join(&name);
                write_episode_log(&path, &result.samples).map_err(|source| {
                    OnlineError::Replay { path: path.display().to_string(), source }
                })?;
                Some(name)
            }
            None => None,
        };
        outcomes.push(EpisodeOutcome {
            model: label.to_string(),
            condition: condition.name.clone(),
            route,
            repeat,
            seed,
            interventions: result.interventions,
            intervention_time_s: result.intervention_time_s,
            finished: result.finished,
            ticks: result.ticks,
            reference_ticks: reference.ticks,
            replay_file,
        });
    }
    Ok(outcomes)
}

/// Pools episodes per (condition, model) over routes x repeats, preserving
/// the plan's condition order and the caller's policy order.
pub fn aggregate_outcomes(
    episodes: &[EpisodeOutcome],
    conditions: &[String],
    models: &[&str],
) -> Vec<OnlineRow> {
    let mut rows = Vec::with_capacity(conditions.len() * models.len());
    for condition in conditions {
        for model in models {
            let mut counts = Vec::new();
            let mut times = Vec::new();
            for ep in episodes {
                if ep.condition == *condition && ep.model == *model {
                    counts.push(ep.interventions as f64);
                    times.push(ep.intervention_time_s);
                }
            }
            let (interventions, interventions_std) = mean_std(&counts);
            let (time_s, time_s_std) = mean_std(&times);
            rows.push(OnlineRow {
                condition: condition.clone(),
                model: model.to_string(),
                interventions,
                interventions_std,
                time_s,
                time_s_std,
            });
        }
    }
    rows
}

/// Drives every (condition, route, repeat) episode with every policy.
/// Episodes run in parallel; results are collected in task order, so reports
/// and replay logs are deterministic for a fixed plan.
pub fn online_eval(
    plan: &OnlinePlan,
    policies: &[(&str, DrivePolicy)],
    out_dir: Option<&Path>,
) -> Result<OnlineEvalResult, OnlineError> {
    if plan.routes.is_empty() {
        return Err(OnlineError::EmptyPlan("route"));
    }
    if plan.conditions.is_empty() {
        return Err(OnlineError::EmptyPlan("condition"));
    }
    if plan.repeats == 0 {
        return Err(OnlineError::EmptyPlan("repeat"));
    }
    if policies.is_empty() {
        return Err(OnlineError::EmptyPlan("policy"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| OnlineError::Replay {
            path: dir.display().to_string(),
            source: LogError::from(source),
        })?;
    }

    // one world per (condition, repeat); parked traffic reshuffles across repeats
    let base = build_campus(plan.variant);
    let mut worlds: Vec<Vec<World>> = Vec::with_capacity(plan.conditions.len());
    for (ci, condition) in plan.conditions.iter().enumerate() {
        let mut per_repeat = Vec::with_capacity(plan.repeats);
        for k in 0..plan.repeats {
            per_repeat.push(apply_traffic(
                &base,
                plan.variant,
                condition,
                traffic_seed(plan.master_seed, ci, k),
            ));
        }
        worlds.push(per_repeat);
    }

    let mut tasks: Vec<(usize, usize, usize)> = Vec::new();
    for ci in 0..plan.conditions.len() {
        for &route in &plan.routes {
            for k in 0..plan.repeats {
                tasks.push((ci, route, k));
            }
        }
    }

    let results: Vec<Result<Vec<EpisodeOutcome>, OnlineError>> = tasks
        .par_iter()
        .map(|&(ci, route, k)| {
            run_task(
                plan,
                &worlds[ci][k],
                policies,
                &plan.conditions[ci],
                ci,
                route,
                k,
                out_dir,
            )
        })
        .collect();

    let mut episodes = Vec::with_capacity(tasks.len() * policies.len());
    for r in results {
        episodes.extend(r?);
    }

    let condition_names: Vec<String> =
        plan.conditions.iter().map(|c| c.name.clone()).collect();
    let model_names: Vec<&str> = policies.iter().map(|(n, _)| *n).collect();
    let rows = aggregate_outcomes(&episodes, &condition_names, &model_names);
    Ok(OnlineEvalResult {
        rows,
        episodes,
        routes: plan.routes.len(),
        repeats: plan.repeats,
    })
}

/// Replay-log index written next to the logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriveManifest {
    pub episodes: Vec<EpisodeOutcome>,
}

pub fn write_drive_manifest(dir: &Path, episodes: &[EpisodeOutcome]) -> std::io::Result<PathBuf> {
    let path = dir.join("drive_manifest.json");
    let manifest = DriveManifest { episodes: episodes.to_vec() };
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable"))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use lidarpilot_core::controller::init_control_weights;
    use lidarpilot_core::geonav::LocalPoint;

    fn zero_output() -> ModelOutput {
        ModelOutput {
            waypoints: [LocalPoint::new(0.0, 0.0); 3],
            deltas: [LocalPoint::new(0.0, 0.0); 3],
            steering: 0.0,
            throttle: 0.0,
        }
    }

    fn quick_plan() -> OnlinePlan {
        let mut episode = EpisodeConfig::default();
        episode.capture_lidar = false;
        OnlinePlan {
            variant: CampusVariant::North,
            routes: vec![0],
            conditions: vec![TrafficCondition::clear()],
            repeats: 1,
            timeout_factor: 3.0,
            master_seed: 11,
            episode,
            vehicle: VehicleParams::default(),
        }
    }

    #[test]
    fn zero_model_output_holds_the_vehicle_still() {
        let world = build_campus(CampusVariant::North);
        let params = VehicleParams::default();
        let mut cfg = EpisodeConfig::default();
        cfg.capture_lidar = false;
        cfg.max_ticks = 120;
        cfg.seed = 3;
        let weights = init_control_weights([1.0, 1.0, 1.0]);
        let mut lateral = PidState::lateral_default();
        let mut longitudinal = PidState::longitudinal_default();
        let out = zero_output();
        let mut policy = |ctx: &TickContext| {
            controls_from_output(
                &out,
                ctx.sensors.omega_l,
                ctx.sensors.omega_r,
                cfg.dt,
                params.wheel_radius_m,
                &mut lateral,
                &mut longitudinal,
                &weights,
            )
        };
        let result =
            run_episode(&world, 0, &params, &mut policy, &cfg).expect("route 0 exists");
        assert!(!result.finished, "a zero policy must never reach the finish");
        assert_eq!(result.ticks, 120, "times out at the full tick budget");
        assert_eq!(result.interventions, 0, "standing still is safe");
        let start = result.poses[0].position;
        let end = result.poses[result.poses.len() - 1].position;
        assert_abs_diff_eq!(start[0], end[0], epsilon = 1e-9);
        assert_abs_diff_eq!(start[1], end[1], epsilon = 1e-9);
    }

    #[test]
    fn scripted_reference_scores_zero_interventions() {
        let plan = quick_plan();
        let result = online_eval(&plan, &[("expert", DrivePolicy::Expert)], None).unwrap();
        assert_eq!(result.rows.len(), 1);
        let row = &result.rows[0];
        assert_eq!(row.interventions, 0.0);
        assert_eq!(row.time_s, 0.0);
        assert!(result.episodes.iter().all(|e| e.finished));
        assert!(result.episodes.iter().all(|e| e.ticks == e.reference_ticks));
    }

    #[test]
    fn repeated_evaluation_is_deterministic() {
        let plan = quick_plan();
        let a = online_eval(&plan, &[("expert", DrivePolicy::Expert)], None).unwrap();
        let b = online_eval(&plan, &[("expert", DrivePolicy::Expert)], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_depend_only_on_the_task_coordinates() {
        let s = task_seed(7, 1, 3, 2);
        assert_eq!(s, task_seed(7, 1, 3, 2));
        assert_ne!(s, task_seed(7, 1, 3, 1));
        assert_ne!(s, task_seed(7, 1, 2, 2));
        assert_ne!(s, task_seed(7, 0, 3, 2));
        assert_ne!(s, task_seed(8, 1, 3, 2));
    }

    #[test]
    fn aggregation_pools_routes_and_repeats_per_condition() {
        let mk = |model: &str, condition: &str, route, repeat, n: u32, t: f64| EpisodeOutcome {
            model: model.into(),
            condition: condition.into(),
            route,
            repeat,
            seed: 0,
            interventions: n,
            intervention_time_s: t,
            finished: true,
            ticks: 100,
            reference_ticks: 100,
            replay_file: None,
        };
        let episodes = vec![
            mk("m", "clear", 0, 0, 2, 2.5),
            mk("m", "clear", 1, 0, 4, 5.0),
            mk("m", "busy", 0, 0, 1, 1.0),
            mk("x", "clear", 0, 0, 0, 0.0),
        ];
        let rows = aggregate_outcomes(
            &episodes,
            &["clear".into(), "busy".into()],
            &["m", "x"],
        );
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].interventions, 3.0);
        assert_abs_diff_eq!(rows[0].interventions_std, 2.0f64.sqrt(), epsilon = 1e-12);
        assert_eq!(rows[0].time_s, 3.75);
        assert_eq!(rows[2].condition, "busy");
        assert_eq!(rows[2].interventions, 1.0);
        assert_eq!(rows[3].model, "x");
        assert_eq!(rows[3].interventions, 0.0);
    }

    #[test]
    fn fused_zero_sources_produce_a_standstill_command() {
        let weights = init_control_weights([1.0, 1.0, 1.0]);
        let mut lateral = PidState::lateral_default();
        let mut longitudinal = PidState::longitudinal_default();
        let cmd = controls_from_output(
            &zero_output(),
            0.0,
            0.0,
            0.25,
            0.15,
            &mut lateral,
            &mut longitudinal,
            &weights,
        );
        assert_eq!(cmd, ControlCommand { steering: 0.0, throttle: 0.0 });
    }
}
