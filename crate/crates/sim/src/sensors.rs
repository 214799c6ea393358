//! GNSS, 9-axis IMU, and wheel-odometry emulation.
//!
//! The magnetometer reads (sin θ_ro, cos θ_ro, ·) for a level vehicle so
//! tilt-compensated extraction returns the bearing exactly; the gyro z axis
//! carries the applied yaw rate plus an optional constant bias; the GNSS fix
//! is the true position perturbed in meters before conversion to
//! latitude/longitude. All draws happen in a fixed order from the caller's
//! generator, so a seeded episode is reproducible bit for bit.

use lidarpilot_core::geonav::{geo_delta_inverse, GeoPoint, GeonavError, ImuSample};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::vehicle::{VehicleParams, VehicleState};

pub use lidarpilot_core::geonav::STANDARD_GRAVITY_MPS2 as GRAVITY_MPS2;
/// Vertical component of the synthetic magnetic field (arbitrary units,
/// horizontal magnitude is 1).
pub const MAG_VERTICAL: f64 = -0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub gnss_sigma_m: f64,
    pub gyro_sigma: f64,
    pub gyro_bias: f64,
    pub accel_sigma: f64,
    pub mag_sigma: f64,
    pub wheel_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            gnss_sigma_m: 0.3,
            gyro_sigma: 0.01,
            gyro_bias: 0.003,
            accel_sigma: 0.05,
            mag_sigma: 0.02,
            wheel_sigma: 0.02,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        NoiseConfig {
            gnss_sigma_m: 0.0,
            gyro_sigma: 0.0,
            gyro_bias: 0.0,
            accel_sigma: 0.0,
            mag_sigma: 0.0,
            wheel_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub gnss: GeoPoint,
    pub imu: ImuSample,
    pub omega_l: f64,
    pub omega_r: f64,
}

/// Samples every sensor once. `yaw_rate` and `accel_long` describe the
/// motion over the step being measured.
pub fn sense<R: Rng>(
    origin: GeoPoint,
    state: &VehicleState,
    params: &VehicleParams,
    yaw_rate: f64,
    accel_long: f64,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<SensorFrame, GeonavError> {
    let mut gauss = || -> f64 { rng.sample(StandardNormal) };

    let gnss = geo_delta_inverse(
        origin,
        state.position[0] + noise.gnss_sigma_m * gauss(),
        state.position[1] + noise.gnss_sigma_m * gauss(),
    )?;

    let v = state.speed(params);
    let theta_ro = state.heading - std::f64::consts::FRAC_PI_2;
    let (sin_b, cos_b) = theta_ro.sin_cos();
    let imu = ImuSample {
        // specific force in the body frame: centripetal (−v·ψ̇ on +x when
        // yawing counterclockwise), longitudinal, gravity reaction
        accel: [
            -v * yaw_rate + noise.accel_sigma * gauss(),
            accel_long + noise.accel_sigma * gauss(),
            GRAVITY_MPS2 + noise.accel_sigma * gauss(),
        ],
        gyro: [
            noise.gyro_sigma * gauss(),
            noise.gyro_sigma * gauss(),
            yaw_rate + noise.gyro_bias + noise.gyro_sigma * gauss(),
        ],
        mag: [
            sin_b + noise.mag_sigma * gauss(),
            cos_b + noise.mag_sigma * gauss(),
            MAG_VERTICAL + noise.mag_sigma * gauss(),
        ],
    };

    Ok(SensorFrame {
        gnss,
        imu,
        omega_l: state.omega_l + noise.wheel_sigma * gauss(),
        omega_r: state.omega_r + noise.wheel_sigma * gauss(),
    })
}
