//! Built-in desk-campus maps and the behavior-cloning dataset generator.
//!
//! One base layout — a ladder of two east-west roads joined by three
//! north-south roads — is reused as three map variants: the base, a mirrored
//! copy, and a transposed copy, each with its own building draw and GNSS
//! origin. Six fixed routes per map follow road centerlines with the
//! standard 12 m point spacing. Traffic conditions add parked vehicles in
//! curbside slots kept clear of junctions so every route corridor stays
//! drivable at full width.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{expert_as_policy, run_episode, EpisodeConfig, EpisodeError};
use crate::log::{write_episode_log, LogError};
use crate::vehicle::VehicleParams;
use crate::world::{class, Obstacle, Polygon, Region, Route, World, WorldError};
use lidarpilot_core::geonav::GeoPoint;

pub const ROUTES_PER_MAP: usize = 6;

/// Half-width of every road; sidewalks add 2 m beyond each edge.
const ROAD_HALF_M: f64 = 4.0;
const SIDEWALK_M: f64 = 2.0;
/// Junction x (on both horizontal roads) and y (on all vertical roads).
const JUNCTION_XS: [f64; 3] = [0.0, 60.0, 120.0];
const JUNCTION_YS: [f64; 2] = [0.0, 60.0];
/// Curbside slot lateral offsets from the road centerline.
const CAR_LATERAL_M: f64 = 2.6;
const TRUCK_LATERAL_M: f64 = 2.75;
const SLOT_JUNCTION_KEEPOUT_M: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("serialize error: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("route index {route} out of range for map {map}")]
    BadRoute { map: String, route: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampusVariant {
    North,
    South,
    East,
}

impl CampusVariant {
    pub fn name(self) -> &'static str {
        match self {
            CampusVariant::North => "campus_north",
            CampusVariant::South => "campus_south",
            CampusVariant::East => "campus_east",
        }
    }

    /// Maps used for expert data collection.
    pub fn training() -> [CampusVariant; 2] {
        [CampusVariant::North, CampusVariant::South]
    }

    /// Held-out map for online evaluation.
    pub fn heldout() -> CampusVariant {
        CampusVariant::East
    }

    fn origin(self) -> GeoPoint {
        match self {
            CampusVariant::North => GeoPoint::new(47.6210, -122.3480),
            CampusVariant::South => GeoPoint::new(47.6180, -122.3520),
            CampusVariant::East => GeoPoint::new(47.6195, -122.3455),
        }
    }

    fn building_seed(self) -> u64 {
        splitmix64(0x5EED_0000 + self as u64)
    }

    fn transform(self, p: [f64; 2]) -> [f64; 2] {
        match self {
            CampusVariant::North => p,
            CampusVariant::South => [p[0], -p[1]],
            CampusVariant::East => [p[1], p[0]],
        }
    }
}

/// Named traffic density: how many curbside slots get a parked vehicle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCondition {
    pub name: String,
    pub parked_cars: usize,
}

impl TrafficCondition {
    pub fn clear() -> Self {
        TrafficCondition { name: "clear".into(), parked_cars: 0 }
    }

    pub fn light() -> Self {
        TrafficCondition { name: "light".into(), parked_cars: 4 }
    }

    pub fn busy() -> Self {
        TrafficCondition { name: "busy".into(), parked_cars: 9 }
    }

    pub fn all() -> Vec<TrafficCondition> {
        vec![Self::clear(), Self::light(), Self::busy()]
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn transformed_rect(v: CampusVariant, x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
    let corners: Vec<[f64; 2]> = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
        .iter()
        .map(|&p| v.transform(p))
        .collect();
    Polygon::new(corners).expect("rect stays valid under isometry")
}

fn region(v: CampusVariant, cls: u8, x0: f64, y0: f64, x1: f64, y1: f64) -> Region {
    Region::new(cls, transformed_rect(v, x0, y0, x1, y1)).expect("fixed layout class")
}

fn obstacle(v: CampusVariant, cls: u8, x0: f64, y0: f64, x1: f64, y1: f64, h: f64) -> Obstacle {
    Obstacle::new(cls, transformed_rect(v, x0, y0, x1, y1), h).expect("fixed layout obstacle")
}

/// Road centerline points every 12 m from `from` to `to` (exclusive of
/// `from` when `skip_first`), both on the junction grid.
fn segment(points: &mut Vec<[f64; 2]>, from: [f64; 2], to: [f64; 2]) {
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    let len = dx.hypot(dy);
    let n = (len / 12.0).round() as usize;
    let start = if points.last() == Some(&from) { 1 } else { 0 };
    for k in start..=n {
        let t = k as f64 / n as f64;
        points.push([from[0] + t * dx, from[1] + t * dy]);
    }
}

fn base_routes() -> Vec<Vec<[f64; 2]>> {
    let a = [0.0, 0.0];
    let b = [60.0, 0.0];
    let c = [120.0, 0.0];
    let d = [0.0, 60.0];
    let e = [60.0, 60.0];
    let f = [120.0, 60.0];
    let legs: [&[[f64; 2]]; ROUTES_PER_MAP] = [
        &[a, c],
        &[a, b, e, f],
        &[d, e, b, c],
        &[c, b, e, d],
        &[f, d],
        &[a, d, e, b],
    ];
    legs.iter()
        .map(|leg| {
            let mut pts = Vec::new();
            for pair in leg.windows(2) {
                segment(&mut pts, pair[0], pair[1]);
            }
            pts
        })
        .collect()
}

fn buildings(v: CampusVariant) -> Vec<Obstacle> {
    let mut rng = ChaCha8Rng::seed_from_u64(v.building_seed());
    // inner-block cells: two 2×2 m-margin cells per column of block one,
    // and two wide cells in block two north of the parking lot
    let cells: [[f64; 4]; 6] = [
        [9.0, 9.0, 30.0, 30.0],
        [30.0, 9.0, 51.0, 30.0],
        [9.0, 30.0, 30.0, 51.0],
        [30.0, 30.0, 51.0, 51.0],
        [69.0, 29.0, 90.0, 51.0],
        [90.0, 29.0, 111.0, 51.0],
    ];
    cells
        .iter()
        .map(|&[x0, y0, x1, y1]| {
            let w = 8.0 + 6.0 * rng.gen::<f64>();
            let l = 8.0 + 6.0 * rng.gen::<f64>();
            let h = 4.0 + 4.0 * rng.gen::<f64>();
            let cx = x0 + 2.0 + w / 2.0 + (x1 - x0 - 4.0 - w) * rng.gen::<f64>();
            let cy = y0 + 2.0 + l / 2.0 + (y1 - y0 - 4.0 - l) * rng.gen::<f64>();
            obstacle(v, class::BUILDING, cx - w / 2.0, cy - l / 2.0, cx + w / 2.0, cy + l / 2.0, h)
        })
        .collect()
}

/// Every curbside parking slot of the map, junction keep-outs applied.
/// Every fourth slot holds a truck footprint instead of a car.
pub fn parked_slots(v: CampusVariant) -> Vec<Obstacle> {
    let clear_of_junctions = |coord: f64, junctions: &[f64]| {
        junctions.iter().all(|j| (coord - j).abs() >= SLOT_JUNCTION_KEEPOUT_M)
    };
    // (along-road coordinate, road centerline, side, road runs along x)
    let mut slots: Vec<(f64, f64, f64, bool)> = Vec::new();
    for &road_y in &JUNCTION_YS {
        let mut x = 12.0;
        while x < 120.0 {
            if clear_of_junctions(x, &JUNCTION_XS) {
                for side in [-1.0, 1.0] {
                    slots.push((x, road_y, side, true));
                }
            }
            x += 12.0;
        }
    }
    for &road_x in &JUNCTION_XS {
        let mut y = 12.0;
        while y < 60.0 {
            if clear_of_junctions(y, &JUNCTION_YS) {
                for side in [-1.0, 1.0] {
                    slots.push((y, road_x, side, false));
                }
            }
            y += 12.0;
        }
    }
    slots
        .iter()
        .enumerate()
        .map(|(i, &(along, center, side, along_x))| {
            // trucks are wider, so they sit further off the centerline
            let (half_w, half_l, lateral, h, cls) = if i % 4 == 3 {
                (1.15, 3.25, TRUCK_LATERAL_M, 2.8, class::TRUCK)
            } else {
                (0.9, 2.2, CAR_LATERAL_M, 1.5, class::CAR)
            };
            let off = center + side * lateral;
            if along_x {
                obstacle(v, cls, along - half_l, off - half_w, along + half_l, off + half_w, h)
            } else {
                obstacle(v, cls, off - half_w, along - half_l, off + half_w, along + half_l, h)
            }
        })
        .collect()
}

pub fn build_campus(v: CampusVariant) -> World {
    let mut regions = Vec::new();
    // ground fill, then overlays; later regions paint over earlier ones
    regions.push(region(v, class::GROUND, -40.0, -40.0, 160.0, 100.0));
    regions.push(region(v, class::TERRAIN, 8.0, 68.0, 52.0, 96.0));
    regions.push(region(v, class::TERRAIN, -36.0, -36.0, -8.0, -8.0));
    regions.push(region(v, class::PARKING, 69.0, 8.0, 111.0, 26.0));
    // sidewalks flank every road; roads painted last win the junctions
    let curb = ROAD_HALF_M + SIDEWALK_M;
    for &y in &JUNCTION_YS {
        regions.push(region(v, class::SIDEWALK, -20.0, y - curb, 140.0, y - ROAD_HALF_M));
        regions.push(region(v, class::SIDEWALK, -20.0, y + ROAD_HALF_M, 140.0, y + curb));
    }
    for &x in &JUNCTION_XS {
        regions.push(region(v, class::SIDEWALK, x - curb, -curb, x - ROAD_HALF_M, 66.0));
        regions.push(region(v, class::SIDEWALK, x + ROAD_HALF_M, -curb, x + curb, 66.0));
    }
    for &y in &JUNCTION_YS {
        regions.push(region(v, class::ROAD, -20.0, y - ROAD_HALF_M, 140.0, y + ROAD_HALF_M));
    }
    for &x in &JUNCTION_XS {
        regions.push(region(v, class::ROAD, x - ROAD_HALF_M, -4.0, x + ROAD_HALF_M, 64.0));
    }

    let mut obstacles = buildings(v);
    obstacles.push(obstacle(v, class::FENCE, 10.0, 7.0, 34.0, 7.3, 1.4));
    obstacles.push(obstacle(v, class::FENCE, 70.0, 52.5, 95.0, 52.8, 1.4));
    obstacles.push(obstacle(v, class::VEGETATION, 14.0, 74.0, 18.0, 78.0, 0.9));
    obstacles.push(obstacle(v, class::VEGETATION, 40.0, 86.0, 44.0, 90.0, 0.7));
    obstacles.push(obstacle(v, class::VEGETATION, -30.0, -30.0, -26.0, -26.0, 0.8));
    obstacles.push(obstacle(v, class::TRUNK, 19.8, 81.8, 20.2, 82.2, 4.5));
    obstacles.push(obstacle(v, class::TRUNK, 33.8, 71.8, 34.2, 72.2, 4.2));
    obstacles.push(obstacle(v, class::TRUNK, -20.2, -20.2, -19.8, -19.8, 4.8));
    for pole in [[24.0, 6.5], [96.0, 6.5], [24.0, 53.5], [6.5, 30.0]] {
        let [px, py] = pole;
        obstacles.push(obstacle(v, class::POLE, px - 0.125, py - 0.125, px + 0.125, py + 0.125, 5.0));
    }
    for sign in [[5.2, 5.2], [54.8, 5.2], [114.8, 5.2], [5.2, 54.8]] {
        let [sx, sy] = sign;
        obstacles.push(obstacle(v, class::TRAFFIC_SIGN, sx - 0.15, sy - 0.15, sx + 0.15, sy + 0.15, 2.4));
    }
    obstacles.push(obstacle(v, class::PERSON, 29.8, 4.7, 30.2, 5.1, 1.7));
    obstacles.push(obstacle(v, class::PERSON, 89.8, 64.9, 90.2, 65.3, 1.7));

    let routes = base_routes()
        .into_iter()
        .map(|pts| {
            Route::new(pts.into_iter().map(|p| v.transform(p)).collect())
                .expect("fixed routes keep 12 m spacing")
        })
        .collect();

    World { origin: v.origin(), regions, obstacles, routes }
}

/// Base world plus `condition.parked_cars` vehicles drawn from the slot pool.
pub fn apply_traffic(base: &World, v: CampusVariant, condition: &TrafficCondition, seed: u64) -> World {
    let mut world = base.clone();
    let mut slots = parked_slots(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    slots.shuffle(&mut rng);
    world.obstacles.extend(slots.into_iter().take(condition.parked_cars));
    world
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub variants: Vec<CampusVariant>,
    /// Route indices driven on each map.
    pub route_indices: Vec<usize>,
    pub conditions: Vec<TrafficCondition>,
    pub episode: EpisodeConfig,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub map: String,
    pub route: usize,
    pub condition: String,
    pub file: String,
    pub ticks: usize,
    pub interventions: u32,
    pub intervention_time_s: f64,
    pub finished: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episodes: Vec<EpisodeRecord>,
}

/// Drives the expert over every (map, route, condition) combination and
/// writes one log per episode plus `manifest.json`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest, DatasetError> {
    fs::create_dir_all(out_dir)?;
    let params = VehicleParams::default();
    let mut episodes = Vec::new();
    let mut index = 0u64;
    for &variant in &spec.variants {
        let base = build_campus(variant);
        for &route_idx in &spec.route_indices {
            if route_idx >= base.routes.len() {
                return Err(DatasetError::BadRoute { map: variant.name().into(), route: route_idx });
            }
            for condition in &spec.conditions {
                index += 1;
                let seed = splitmix64(spec.master_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let world = apply_traffic(&base, variant, condition, splitmix64(seed ^ 0xCAFE));
                let cfg = EpisodeConfig { seed, ..spec.episode.clone() };
                let expert_cfg = cfg.expert;
                let route = world.routes[route_idx].clone();
                let mut policy = expert_as_policy(&world, &route, &params, &expert_cfg);
                let result = run_episode(&world, route_idx, &params, &mut policy, &cfg)?;
                let file = format!("{}_r{}_{}.dpl2", variant.name(), route_idx, condition.name);
                write_episode_log(&out_dir.join(&file), &result.samples)?;
                episodes.push(EpisodeRecord {
                    map: variant.name().into(),
                    route: route_idx,
                    condition: condition.name.clone(),
                    file,
                    ticks: result.ticks,
                    interventions: result.interventions,
                    intervention_time_s: result.intervention_time_s,
                    finished: result.finished,
                    seed,
                });
            }
        }
    }
    let manifest = DatasetManifest { episodes };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raycast::LidarConfig;
    use crate::sensors::NoiseConfig;

    fn scene_path(v: CampusVariant) -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("scenes").join(format!("{}.json", v.name()))
    }

    const VARIANTS: [CampusVariant; 3] =
        [CampusVariant::North, CampusVariant::South, CampusVariant::East];

    /// Run `cargo test -p lidarpilot-sim regenerate_scene_files -- --ignored`
    /// after editing the layout, then commit the JSON.
    #[test]
    #[ignore]
    fn regenerate_scene_files() {
        for v in VARIANTS {
            let json = build_campus(v).to_scene_json().unwrap();
            fs::create_dir_all(scene_path(v).parent().unwrap()).unwrap();
            fs::write(scene_path(v), json).unwrap();
        }
    }

    #[test]
    fn checked_in_scenes_match_the_builder() {
        for v in VARIANTS {
            let expected = build_campus(v).to_scene_json().unwrap();
            let on_disk = fs::read_to_string(scene_path(v))
                .expect("scene JSON missing; run the regenerate_scene_files test");
            assert_eq!(on_disk, expected, "{} drifted from the builder", v.name());
            // and the JSON loads back into an identical world
            let reloaded = World::from_scene_json(&on_disk).unwrap();
            let direct = build_campus(v);
            assert_eq!(reloaded.regions.len(), direct.regions.len());
            assert_eq!(reloaded.obstacles.len(), direct.obstacles.len());
            assert_eq!(reloaded.routes.len(), direct.routes.len());
        }
    }

    #[test]
    fn every_map_has_six_valid_routes() {
        for v in VARIANTS {
            let world = build_campus(v);
            assert_eq!(world.routes.len(), ROUTES_PER_MAP);
            for route in &world.routes {
                assert!(route.points.len() >= 11);
            }
        }
    }

    #[test]
    fn route_corridors_stay_drivable_under_max_traffic() {
        let busy = TrafficCondition::busy();
        for v in VARIANTS {
            let base = build_campus(v);
            let mut world = apply_traffic(&base, v, &busy, 99);
            // corridors must hold for any slot assignment, so check all slots
            world.obstacles.extend(parked_slots(v));
            for (r, route) in world.routes.iter().enumerate() {
                for pair in route.points.windows(2) {
                    let steps = 12;
                    for k in 0..=steps {
                        let t = k as f64 / steps as f64;
                        let p = [
                            pair[0][0] + t * (pair[1][0] - pair[0][0]),
                            pair[0][1] + t * (pair[1][1] - pair[0][1]),
                        ];
                        assert!(
                            world.traversable_at(p),
                            "{} route {r}: centerline leaves the road at {p:?}",
                            v.name()
                        );
                        let clearance = world.obstacle_clearance(p);
                        assert!(
                            clearance >= 1.5,
                            "{} route {r}: clearance {clearance:.2} at {p:?}",
                            v.name()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn slot_pool_is_deep_enough_for_every_condition() {
        let max_cars = TrafficCondition::all().iter().map(|c| c.parked_cars).max().unwrap();
        for v in VARIANTS {
            let slots = parked_slots(v);
            assert!(slots.len() >= 4 * max_cars, "want headroom over {max_cars}");
            assert!(slots.iter().any(|s| s.class == class::TRUCK));
            assert!(slots.iter().filter(|s| s.class == class::CAR).count() > slots.len() / 2);
        }
    }

    #[test]
    fn expert_completes_every_training_route_untouched() {
        let cfg = EpisodeConfig {
            capture_lidar: false,
            max_ticks: 1600,
            ..EpisodeConfig::default()
        };
        let params = VehicleParams::default();
        let busy = TrafficCondition::busy();
        for v in CampusVariant::training() {
            let base = build_campus(v);
            let world = apply_traffic(&base, v, &busy, 7);
            for route_idx in 0..world.routes.len() {
                let cfg = EpisodeConfig { seed: 1000 + route_idx as u64, ..cfg.clone() };
                let expert_cfg = cfg.expert;
                let route = world.routes[route_idx].clone();
                let mut policy = expert_as_policy(&world, &route, &params, &expert_cfg);
                let result = run_episode(&world, route_idx, &params, &mut policy, &cfg).unwrap();
                assert!(
                    result.finished,
                    "{} route {route_idx}: expert stalled after {} ticks",
                    v.name(),
                    result.ticks
                );
                assert_eq!(
                    result.interventions, 0,
                    "{} route {route_idx}: expert tripped the safety monitor",
                    v.name()
                );
            }
        }
    }

    #[test]
    fn dataset_generation_writes_one_log_per_episode() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            variants: vec![CampusVariant::North],
            route_indices: vec![0, 4],
            conditions: vec![TrafficCondition::clear(), TrafficCondition::light()],
            episode: EpisodeConfig {
                lidar: LidarConfig { rings: 2, azimuth_steps: 24, ..LidarConfig::desk_default() },
                noise: NoiseConfig::zero(),
                max_ticks: 1600,
                ..EpisodeConfig::default()
            },
            master_seed: 42,
        };
        let manifest = generate_dataset(&spec, dir.path()).unwrap();
        assert_eq!(manifest.episodes.len(), 4);
        for ep in &manifest.episodes {
            assert!(ep.finished && ep.interventions == 0, "{:?}", ep);
            assert!(dir.path().join(&ep.file).is_file());
            let samples = crate::log::read_episode_log(&dir.path().join(&ep.file)).unwrap();
            assert_eq!(samples.len(), ep.ticks);
            assert!(samples.iter().all(|s| !s.points.is_empty()));
        }
        let manifest_json = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let parsed: DatasetManifest = serde_json::from_str(&manifest_json).unwrap();
        assert_eq!(parsed, manifest);
    }
}
