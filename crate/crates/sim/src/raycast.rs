//! Spinning-LiDAR emulation by exact ray intersection.
//!
//! Rays leave the sensor (mounted `mount_height_m` above ground) on a grid
//! of ring elevations × azimuth steps. Each ray keeps the nearest hit
//! against the flat ground (z = 0, labeled by the region underneath) or any
//! extruded obstacle (side walls and top face, labeled with its class).
//! Returned points are in the vehicle frame: +x right, +y forward, z
//! relative to the sensor, so a point's range equals the ray parameter.

use lidarpilot_core::projection::{LabeledPoint, LabeledPointCloud};
use serde::{Deserialize, Serialize};

use crate::vehicle::Pose;
use crate::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub rings: usize,
    pub azimuth_steps: usize,
    pub max_range_m: f64,
    pub mount_height_m: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl LidarConfig {
    /// Desk-scale default: 5 760 rays per sweep.
    pub fn desk_default() -> Self {
        LidarConfig {
            rings: 16,
            azimuth_steps: 360,
            max_range_m: 80.0,
            mount_height_m: 0.8,
            elevation_min_deg: -30.0,
            elevation_max_deg: 10.0,
        }
    }

    /// Dense profile mirroring a 32-ring automotive unit.
    pub fn full() -> Self {
        LidarConfig { rings: 32, azimuth_steps: 1080, ..Self::desk_default() }
    }

    pub fn ring_elevation_deg(&self, ring: usize) -> f64 {
        if self.rings <= 1 {
            return self.elevation_min_deg;
        }
        let span = self.elevation_max_deg - self.elevation_min_deg;
        self.elevation_min_deg + ring as f64 * span / (self.rings - 1) as f64
    }
}

/// One full sweep from `pose`. Points come back in the vehicle frame.
pub fn raycast_scan(
    world: &World,
    pose: Pose,
    cfg: &LidarConfig,
    timestamp: f64,
) -> LabeledPointCloud {
    let (sin_h, cos_h) = pose.heading.sin_cos();
    // vehicle frame → world frame basis
    let right = [sin_h, -cos_h];
    let forward = [cos_h, sin_h];
    let origin = pose.position;
    let h = cfg.mount_height_m;

    let mut points = Vec::new();
    for ring in 0..cfg.rings {
        let elev = cfg.ring_elevation_deg(ring).to_radians();
        let (sin_e, cos_e) = elev.sin_cos();
        for step in 0..cfg.azimuth_steps {
            // azimuth 0 = straight ahead, increasing toward +x (right)
            let az = step as f64 * std::f64::consts::TAU / cfg.azimuth_steps as f64;
            let (sin_a, cos_a) = az.sin_cos();
            let local = [sin_a * cos_e, cos_a * cos_e, sin_e];
            let dir_xy = [
                right[0] * local[0] + forward[0] * local[1],
                right[1] * local[0] + forward[1] * local[1],
            ];
            let dz = local[2];

            let mut best: Option<(f64, u8)> = None;

            // ground plane z = 0
            if dz < -1e-12 {
                let t = h / -dz;
                if t <= cfg.max_range_m {
                    let gx = origin[0] + t * dir_xy[0];
                    let gy = origin[1] + t * dir_xy[1];
                    if let Some(class) = world.ground_class_at([gx, gy]) {
                        best = Some((t, class));
                    }
                }
            }

            for obstacle in &world.obstacles {
                // 2D prism clip shares the 3D ray parameter because the
                // planar components are the same linear map of t
                let Some((near, far)) = obstacle.polygon.clip_ray(origin, dir_xy) else {
                    continue;
                };
                // clamp to the extrusion's z-slab [0, height]
                let (z_lo, z_hi) = if dz.abs() < 1e-12 {
                    if h < 0.0 || h > obstacle.height {
                        continue;
                    }
                    (0.0, f64::INFINITY)
                } else {
                    let t0 = (0.0 - h) / dz;
                    let t1 = (obstacle.height - h) / dz;
                    (t0.min(t1), t0.max(t1))
                };
                let entry = near.max(z_lo).max(1e-9);
                let exit = far.min(z_hi);
                if entry > exit || entry > cfg.max_range_m {
                    continue;
                }
                if best.map_or(true, |(t, _)| entry < t) {
                    best = Some((entry, obstacle.class));
                }
            }

            if let Some((t, class)) = best {
                points.push(LabeledPoint::new(
                    t * local[0],
                    t * local[1],
                    t * local[2],
                    class,
                ));
            }
        }
    }
    LabeledPointCloud { points, timestamp }
}
