//! Global-to-local coordinate transforms, bearing estimation, and waypoint
//! accumulation.
//!
//! Coordinate conventions, fixed here and relied on everywhere else:
//!
//! * World deltas are (east, north) meters on a spherical earth with
//!   equatorial circumference 40 075 km and meridional circumference
//!   40 008 km.
//! * The vehicle-local frame has +y pointing forward; a route point directly
//!   ahead of the vehicle lands at (0, d > 0). `bearing_convention_*` tests
//!   pin the sign so it cannot drift silently.
//! * [`Bearing`] wraps to [−π, π) and is zero when the vehicle faces north;
//!   positive bearings turn counterclockwise (toward west) when viewed from
//!   above.

use thiserror::Error;

/// Equatorial earth circumference, meters.
pub const C_EARTH_EQUATORIAL_M: f64 = 40_075_000.0;
/// Meridional earth circumference, meters.
pub const C_EARTH_MERIDIONAL_M: f64 = 40_008_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeonavError {
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("latitude {lat} too close to a pole for a planar east offset")]
    DegenerateLatitude { lat: f64 },
    #[error("{op}: expected {expected} entries, got {got}")]
    WrongCount {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Global position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        debug_assert!((-90.0..=90.0).contains(&lat), "latitude out of range");
        debug_assert!((-180.0..=180.0).contains(&lon), "longitude out of range");
        GeoPoint { lat, lon }
    }
}

/// Vehicle-local position in meters; the ego vehicle is always at (0, 0)
/// with +y forward.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LocalPoint {
    pub x: f64,
    pub y: f64,
}

impl LocalPoint {
    pub fn new(x: f64, y: f64) -> Self {
        LocalPoint { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Absolute vehicle orientation relative to north, radians in [−π, π).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bearing {
    theta_ro: f64,
}

impl Bearing {
    pub fn new(theta_ro: f64) -> Self {
        Bearing {
            theta_ro: wrap_to_pi(theta_ro),
        }
    }

    pub fn radians(&self) -> f64 {
        self.theta_ro
    }
}

/// Wraps an angle to [−π, π).
pub fn wrap_to_pi(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    // rem_euclid can return exactly two_pi - tiny, putting r at +π
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// One 9-axis IMU reading: specific force, angular rate, normalized magnetic
/// field, all in the body frame (+x right, +y forward, +z up).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImuSample {
    pub accel: [f64; 3],
    pub gyro: [f64; 3],
    pub mag: [f64; 3],
}

/// East/north meter offset from `ro` to `rp` on the spherical model.
///
/// One degree of longitude spans `C_e · cos(lat) / 360` meters, one degree of
/// latitude `C_m / 360` meters.
pub fn geo_delta(ro: GeoPoint, rp: GeoPoint) -> Result<(f64, f64), GeonavError> {
    let vals = [ro.lat, ro.lon, rp.lat, rp.lon];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(GeonavError::NonFinite { op: "geo_delta" });
    }
    let dx = (rp.lon - ro.lon) * C_EARTH_EQUATORIAL_M * ro.lat.to_radians().cos() / 360.0;
    let dy = (rp.lat - ro.lat) * C_EARTH_MERIDIONAL_M / 360.0;
    Ok((dx, dy))
}

/// Global point lying `(dx, dy)` meters east/north of `ro`; inverse of
/// [`geo_delta`] (it reuses the cos(ro.lat) scale factor so the round trip is
/// exact to float precision).
pub fn geo_delta_inverse(ro: GeoPoint, dx: f64, dy: f64) -> Result<GeoPoint, GeonavError> {
    if !dx.is_finite() || !dy.is_finite() || !ro.lat.is_finite() || !ro.lon.is_finite() {
        return Err(GeonavError::NonFinite {
            op: "geo_delta_inverse",
        });
    }
    let cos_lat = ro.lat.to_radians().cos();
    if cos_lat.abs() < 1e-6 {
        return Err(GeonavError::DegenerateLatitude { lat: ro.lat });
    }
    Ok(GeoPoint {
        lat: ro.lat + dy * 360.0 / C_EARTH_MERIDIONAL_M,
        lon: ro.lon + dx * 360.0 / (C_EARTH_EQUATORIAL_M * cos_lat),
    })
}

/// Rotates a world (east, north) offset into the vehicle-local frame:
/// `[x; y] = R(θ)ᵀ · [dx; dy]`.
pub fn rotate_to_local(dx: f64, dy: f64, bearing: Bearing) -> LocalPoint {
    let (s, c) = bearing.theta_ro.sin_cos();
    LocalPoint {
        x: dx * c + dy * s,
        y: -dx * s + dy * c,
    }
}

/// Inverse of [`rotate_to_local`]: local offset back to world east/north.
pub fn rotate_to_world(p: LocalPoint, bearing: Bearing) -> (f64, f64) {
    let (s, c) = bearing.theta_ro.sin_cos();
    (p.x * c - p.y * s, p.x * s + p.y * c)
}

/// Cumulative sum of exactly three (Δx, Δy) steps from `origin`.
pub fn accumulate_waypoints(
    deltas: &[(f64, f64)],
    origin: LocalPoint,
) -> Result<[LocalPoint; 3], GeonavError> {
    if deltas.len() != 3 {
        return Err(GeonavError::WrongCount {
            op: "accumulate_waypoints",
            expected: 3,
            got: deltas.len(),
        });
    }
    let mut out = [origin; 3];
    let mut acc = origin;
    for (i, (dx, dy)) in deltas.iter().enumerate() {
        acc = LocalPoint::new(acc.x + dx, acc.y + dy);
        out[i] = acc;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Heading estimation
// ---------------------------------------------------------------------------

/// Standard gravity, shared by the tilt model and the mag acceptance gate.
pub const STANDARD_GRAVITY_MPS2: f64 = 9.81;

/// Noise model for the heading filter.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct HeadingFilterConfig {
    /// Bearing process noise density, rad²/s.
    pub q_bearing: f64,
    /// Gyro-bias process noise density, (rad/s)²/s.
    pub q_bias: f64,
    /// Magnetometer heading measurement variance, rad².
    pub r_mag: f64,
    /// Mag fixes are fused only while the horizontal accelerometer
    /// magnitude √(ax² + ay²) stays below this. Under launch, braking, or
    /// cornering the tilt-compensation plane leans with the dynamic
    /// acceleration and the fix is biased, so it is discarded and the gyro
    /// carries the bearing alone. (The platform is assumed level, so body
    /// x/y read dynamics only; scale the gate with the accel noise floor.)
    pub accel_gate_mps2: f64,
}

impl Default for HeadingFilterConfig {
    fn default() -> Self {
        HeadingFilterConfig {
            q_bearing: 1e-5,
            q_bias: 1e-7,
            r_mag: 8e-3,
            accel_gate_mps2: 0.2,
        }
    }
}

/// Two-state Kalman estimate: bearing and gyro-z bias.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct HeadingFilterState {
    pub bearing: Bearing,
    pub gyro_bias: f64,
    /// Row-major 2×2 error covariance over [bearing, bias].
    pub cov: [[f64; 2]; 2],
    initialized: bool,
}

impl HeadingFilterState {
    /// Fresh filter; the first magnetometer heading it sees is adopted
    /// verbatim as the initial bearing.
    pub fn new() -> Self {
        HeadingFilterState {
            bearing: Bearing::new(0.0),
            gyro_bias: 0.0,
            cov: [[4.0, 0.0], [0.0, 1e-2]],
            initialized: false,
        }
    }
}

impl Default for HeadingFilterState {
    fn default() -> Self {
        Self::new()
    }
}

/// Magnetometer heading after tilt compensation, or `None` when the field
/// (or its horizontal projection) vanishes.
///
/// The accel vector supplies the up direction; the field is projected onto
/// the horizontal plane and read off against the horizontal body axes. For a
/// level vehicle this reduces to `atan2(m_x, m_y)`.
pub fn mag_heading(imu: &ImuSample) -> Option<f64> {
    let m = imu.mag;
    let norm2 = m[0] * m[0] + m[1] * m[1] + m[2] * m[2];
    if norm2 <= 0.0 || !norm2.is_finite() {
        return None;
    }
    let a = imu.accel;
    let a_norm = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    // up direction in body coordinates; fall back to +z when in free fall
    let up = if a_norm > 1e-9 {
        [a[0] / a_norm, a[1] / a_norm, a[2] / a_norm]
    } else {
        [0.0, 0.0, 1.0]
    };
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    // horizontal forward: body +y projected onto the plane normal to up,
    // normalized; horizontal right completes the orthonormal pair
    let fd = up[1];
    let fwd = [-fd * up[0], 1.0 - fd * up[1], -fd * up[2]];
    let fwd_norm = dot(fwd, fwd).sqrt();
    if fwd_norm < 1e-9 {
        // nose pointing straight up or down: heading undefined
        return None;
    }
    let yh = [fwd[0] / fwd_norm, fwd[1] / fwd_norm, fwd[2] / fwd_norm];
    let xh = [
        yh[1] * up[2] - yh[2] * up[1],
        yh[2] * up[0] - yh[0] * up[2],
        yh[0] * up[1] - yh[1] * up[0],
    ];
    let mx = dot(m, xh);
    let my = dot(m, yh);
    if mx == 0.0 && my == 0.0 {
        return None;
    }
    Some(mx.atan2(my))
}

/// One predict/update cycle of the heading filter.
///
/// Predict integrates bias-corrected gyro-z; update corrects toward the
/// tilt-compensated magnetometer heading when one is available and the
/// accelerometer reads close enough to plain gravity to trust the tilt
/// estimate. With no usable field the prediction is propagated unchanged.
pub fn heading_update(
    state: HeadingFilterState,
    imu: &ImuSample,
    dt: f64,
    cfg: &HeadingFilterConfig,
) -> HeadingFilterState {
    assert!(dt > 0.0, "heading_update needs dt > 0");
    let mut s = state;

    let a = imu.accel;
    let quiescent = (a[0] * a[0] + a[1] * a[1]).sqrt() <= cfg.accel_gate_mps2;
    let measured = if quiescent { mag_heading(imu) } else { None };

    if !s.initialized {
        if let Some(theta) = measured {
            s.bearing = Bearing::new(theta);
            s.cov = [[cfg.r_mag, 0.0], [0.0, 1e-2]];
            s.initialized = true;
        }
        // no usable mag yet: integrate blind below
    }

    // predict: theta += (gyro_z - bias) dt, bias constant
    let theta_pred = wrap_to_pi(s.bearing.radians() + (imu.gyro[2] - s.gyro_bias) * dt);
    let p = s.cov;
    // F = [[1, -dt], [0, 1]];  P = F P Fᵀ + Q dt
    let p00 = p[0][0] - dt * (p[1][0] + p[0][1]) + dt * dt * p[1][1] + cfg.q_bearing * dt;
    let p01 = p[0][1] - dt * p[1][1];
    let p10 = p[1][0] - dt * p[1][1];
    let p11 = p[1][1] + cfg.q_bias * dt;
    let mut pred = HeadingFilterState {
        bearing: Bearing::new(theta_pred),
        gyro_bias: s.gyro_bias,
        cov: [[p00, p01], [p10, p11]],
        initialized: s.initialized,
    };

    let Some(theta_mag) = measured else {
        return pred;
    };
    if !pred.initialized {
        return pred;
    }

    // update with H = [1, 0], Joseph-form covariance
    let innovation = wrap_to_pi(theta_mag - pred.bearing.radians());
    let p = pred.cov;
    let s_inno = p[0][0] + cfg.r_mag;
    let k0 = p[0][0] / s_inno;
    let k1 = p[1][0] / s_inno;
    pred.bearing = Bearing::new(pred.bearing.radians() + k0 * innovation);
    pred.gyro_bias += k1 * innovation;
    let a00 = 1.0 - k0;
    // (I - K H) = [[1-k0, 0], [-k1, 1]]
    let q00 = a00 * p[0][0];
    let q01 = a00 * p[0][1];
    let q10 = -k1 * p[0][0] + p[1][0];
    let q11 = -k1 * p[0][1] + p[1][1];
    // multiply by (I - K H)ᵀ on the right and add K R Kᵀ
    pred.cov = [
        [
            q00 * a00 + k0 * cfg.r_mag * k0,
            q00 * -k1 + q01 + k0 * cfg.r_mag * k1,
        ],
        [
            q10 * a00 + k1 * cfg.r_mag * k0,
            q10 * -k1 + q11 + k1 * cfg.r_mag * k1,
        ],
    ];
    pred
}
