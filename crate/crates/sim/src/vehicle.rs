//! Differential-drive platform with a first-order speed lag and a constant
//! yaw-rate steering actuator.
//!
//! Within one step the yaw rate a = steering·ψ̇_max is constant and speed
//! follows v(t) = v* + (v₀ − v*)·e^(−t/τ), so the displacement integral
//! ∫ v(t)·e^(i(θ₀ + a·t)) dt has the closed form
//!
//!   e^(iθ₀)·[ v*·E(ia) + (v₀ − v*)·E(ia − 1/τ) ],  E(c) = (e^(c·dt) − 1)/c
//!
//! which this module evaluates exactly — the step therefore composes: two
//! half steps equal one full step to float precision, and the path never
//! has a lateral-slip component. Positive steering yaws counterclockwise
//! (toward the side the lateral controller calls positive error).

use lidarpilot_core::controller::{linear_speed, ControlCommand};
use lidarpilot_core::geonav::wrap_to_pi;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// World meters east/north of the scene origin.
    pub position: [f64; 2],
    /// Counterclockwise from east, radians.
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub wheel_radius_m: f64,
    pub track_width_m: f64,
    pub speed_cap_mps: f64,
    pub yaw_rate_max: f64,
    /// Speed-lag time constant, seconds.
    pub speed_tau_s: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheel_radius_m: 0.15,
            track_width_m: 0.55,
            speed_cap_mps: 1.25,
            yaw_rate_max: 1.0,
            speed_tau_s: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: [f64; 2],
    pub heading: f64,
    pub omega_l: f64,
    pub omega_r: f64,
}

impl VehicleState {
    pub fn at_rest(pose: Pose) -> Self {
        VehicleState {
            position: pose.position,
            heading: pose.heading,
            omega_l: 0.0,
            omega_r: 0.0,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose { position: self.position, heading: self.heading }
    }

    pub fn speed(&self, params: &VehicleParams) -> f64 {
        linear_speed(self.omega_l, self.omega_r, params.wheel_radius_m)
    }
}

/// (e^(c·dt) − 1) / c for complex c = re + i·im.
fn transfer(re: f64, im: f64, dt: f64) -> (f64, f64) {
    let norm2 = re * re + im * im;
    if norm2 < 1e-24 {
        return (dt, 0.0);
    }
    let scale = (re * dt).exp();
    let (s, c) = (im * dt).sin_cos();
    let num = (scale * c - 1.0, scale * s);
    ((num.0 * re + num.1 * im) / norm2, (num.1 * re - num.0 * im) / norm2)
}

/// Advances the platform by `dt` seconds under constant controls.
pub fn step_vehicle(
    state: &VehicleState,
    params: &VehicleParams,
    control: &ControlCommand,
    dt: f64,
) -> VehicleState {
    assert!(dt > 0.0, "step_vehicle needs dt > 0");
    let steering = control.steering.clamp(-1.0, 1.0);
    let throttle = control.throttle.clamp(0.0, 1.0);

    let v0 = state.speed(params);
    let v_star = throttle * params.speed_cap_mps;
    let dv = v0 - v_star;
    let yaw = steering * params.yaw_rate_max;
    let tau = params.speed_tau_s;

    let v1 = v_star + dv * (-dt / tau).exp();

    let e_cruise = transfer(0.0, yaw, dt);
    let e_lag = transfer(-1.0 / tau, yaw, dt);
    let local = (
        v_star * e_cruise.0 + dv * e_lag.0,
        v_star * e_cruise.1 + dv * e_lag.1,
    );
    let (sin_h, cos_h) = state.heading.sin_cos();
    let disp = (
        local.0 * cos_h - local.1 * sin_h,
        local.0 * sin_h + local.1 * cos_h,
    );

    // wrap lazily: re-normalizing an in-range heading costs a bit of
    // precision, and most steps never leave [−π, π)
    let heading = state.heading + yaw * dt;
    let heading = if heading >= std::f64::consts::PI || heading < -std::f64::consts::PI {
        wrap_to_pi(heading)
    } else {
        heading
    };

    let half_track = params.track_width_m / 2.0;
    VehicleState {
        position: [state.position[0] + disp.0, state.position[1] + disp.1],
        heading,
        omega_l: (v1 - yaw * half_track) / params.wheel_radius_m,
        omega_r: (v1 + yaw * half_track) / params.wheel_radius_m,
    }
}
