//! Class-labeled 2.5D world: flat ground regions (polygons at z = 0) and
//! extruded convex obstacles, plus the JSON scene-file schema.
//!
//! Regions may overlap; later entries paint over earlier ones, so scenes
//! list broad fill (ground, terrain) first and roads/sidewalks after.
//! Routes live in the scene file as latitude/longitude and in memory as
//! world-frame meters east/north of the origin.

use lidarpilot_core::geonav::{geo_delta, geo_delta_inverse, GeoPoint, GeonavError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Semantic class ids shared with the grid projector's 20-class palette.
pub mod class {
    pub const NONE: u8 = 0;
    pub const CAR: u8 = 1;
    pub const BICYCLE: u8 = 2;
    pub const MOTORCYCLE: u8 = 3;
    pub const TRUCK: u8 = 4;
    pub const OTHER_VEHICLE: u8 = 5;
    pub const PERSON: u8 = 6;
    pub const BICYCLIST: u8 = 7;
    pub const MOTORCYCLIST: u8 = 8;
    pub const ROAD: u8 = 9;
    pub const PARKING: u8 = 10;
    pub const SIDEWALK: u8 = 11;
    pub const GROUND: u8 = 12;
    pub const BUILDING: u8 = 13;
    pub const FENCE: u8 = 14;
    pub const VEGETATION: u8 = 15;
    pub const TRUNK: u8 = 16;
    pub const TERRAIN: u8 = 17;
    pub const POLE: u8 = 18;
    pub const TRAFFIC_SIGN: u8 = 19;
}

/// Ground classes a vehicle may drive on.
pub const TRAVERSABLE_CLASSES: [u8; 4] =
    [class::ROAD, class::PARKING, class::SIDEWALK, class::GROUND];

const GROUND_CLASSES: [u8; 5] = [
    class::ROAD,
    class::PARKING,
    class::SIDEWALK,
    class::GROUND,
    class::TERRAIN,
];

/// Spacing between consecutive route points.
pub const ROUTE_GAP_M: f64 = 12.0;
pub const ROUTE_GAP_TOLERANCE_M: f64 = 0.5;
/// A route counts as finished within this distance of its last point.
pub const FINISH_RADIUS_M: f64 = 2.0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has non-finite or duplicate vertices")]
    DegeneratePolygon,
    #[error("obstacle polygon must be convex")]
    NonConvexObstacle,
    #[error("class {class} not valid for {context}")]
    BadClass { class: u8, context: &'static str },
    #[error("obstacle height must be positive, got {0}")]
    BadHeight(f64),
    #[error("route needs at least 2 points, got {0}")]
    RouteTooShort(usize),
    #[error("route gap {gap:.3} m between points {index} and {} outside {ROUTE_GAP_M}±{ROUTE_GAP_TOLERANCE_M}", index + 1)]
    RouteGap { index: usize, gap: f64 },
    #[error("geodesy error: {0}")]
    Geo(#[from] GeonavError),
    #[error("scene parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Simple polygon in world meters, stored counterclockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(mut vertices: Vec<[f64; 2]>) -> Result<Self, WorldError> {
        if vertices.len() < 3 {
            return Err(WorldError::TooFewVertices(vertices.len()));
        }
        if vertices
            .iter()
            .any(|v| !v[0].is_finite() || !v[1].is_finite())
        {
            return Err(WorldError::DegeneratePolygon);
        }
        let area = signed_area(&vertices);
        if area.abs() < 1e-9 {
            return Err(WorldError::DegeneratePolygon);
        }
        if area < 0.0 {
            vertices.reverse();
        }
        Ok(Polygon { vertices })
    }

    /// Axis-aligned rectangle helper.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let (x0, x1) = (x0.min(x1), x0.max(x1));
        let (y0, y1) = (y0.min(y1), y0.max(y1));
        Polygon::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]).expect("rect is valid")
    }

    /// Rectangle of the given size centered at `c`, rotated by `angle`.
    pub fn oriented_rect(c: [f64; 2], width: f64, length: f64, angle: f64) -> Self {
        let (s, co) = angle.sin_cos();
        let hw = width / 2.0;
        let hl = length / 2.0;
        let corners = [[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]];
        Polygon::new(
            corners
                .iter()
                .map(|[u, v]| [c[0] + u * co - v * s, c[1] + u * s + v * co])
                .collect(),
        )
        .expect("oriented rect is valid")
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        let mut sign = 0.0f64;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross.abs() < 1e-12 {
                continue; // collinear run
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
        true
    }

    /// Even-odd crossing test; boundary points may land either way.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[j];
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x_cross = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Zero inside, otherwise the distance to the nearest edge.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        let n = self.vertices.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            best = best.min(segment_distance(p, a, b));
        }
        best
    }

    /// Entry/exit parameters of a 2D ray against this polygon's interior,
    /// by half-plane clipping. Convex polygons only.
    pub fn clip_ray(&self, origin: [f64; 2], dir: [f64; 2]) -> Option<(f64, f64)> {
        debug_assert!(self.is_convex(), "clip_ray needs a convex polygon");
        let n = self.vertices.len();
        let mut t_near = 0.0f64;
        let mut t_far = f64::INFINITY;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            // CCW winding: interior is left of each edge; inward normal
            let edge = [b[0] - a[0], b[1] - a[1]];
            let normal = [-edge[1], edge[0]];
            let denom = normal[0] * dir[0] + normal[1] * dir[1];
            let dist = normal[0] * (origin[0] - a[0]) + normal[1] * (origin[1] - a[1]);
            if denom.abs() < 1e-15 {
                if dist < 0.0 {
                    return None; // parallel and outside this half-plane
                }
                continue;
            }
            let t = -dist / denom;
            if denom < 0.0 {
                t_far = t_far.min(t); // exiting
            } else {
                t_near = t_near.max(t); // entering
            }
            if t_near > t_far {
                return None;
            }
        }
        Some((t_near, t_far))
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }
}

fn signed_area(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc / 2.0
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let closest = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - closest[0]).powi(2) + (p[1] - closest[1]).powi(2)).sqrt()
}

/// Flat ground patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub class: u8,
    pub polygon: Polygon,
}

impl Region {
    pub fn new(class: u8, polygon: Polygon) -> Result<Self, WorldError> {
        if !GROUND_CLASSES.contains(&class) {
            return Err(WorldError::BadClass { class, context: "ground region" });
        }
        Ok(Region { class, polygon })
    }
}

/// Vertical extrusion of a convex footprint from z = 0 to `height`.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub class: u8,
    pub polygon: Polygon,
    pub height: f64,
}

impl Obstacle {
    pub fn new(class: u8, polygon: Polygon, height: f64) -> Result<Self, WorldError> {
        if class == class::NONE || GROUND_CLASSES.contains(&class) || class > 19 {
            return Err(WorldError::BadClass { class, context: "obstacle" });
        }
        if !polygon.is_convex() {
            return Err(WorldError::NonConvexObstacle);
        }
        if !(height > 0.0) || !height.is_finite() {
            return Err(WorldError::BadHeight(height));
        }
        Ok(Obstacle { class, polygon, height })
    }
}

/// Ordered route points in world meters, 12 m apart.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub points: Vec<[f64; 2]>,
}

impl Route {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self, WorldError> {
        if points.len() < 2 {
            return Err(WorldError::RouteTooShort(points.len()));
        }
        for (i, pair) in points.windows(2).enumerate() {
            let gap = ((pair[1][0] - pair[0][0]).powi(2) + (pair[1][1] - pair[0][1]).powi(2)).sqrt();
            if (gap - ROUTE_GAP_M).abs() > ROUTE_GAP_TOLERANCE_M {
                return Err(WorldError::RouteGap { index: i, gap });
            }
        }
        Ok(Route { points })
    }

    pub fn finish(&self) -> [f64; 2] {
        *self.points.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub origin: GeoPoint,
    pub regions: Vec<Region>,
    pub obstacles: Vec<Obstacle>,
    pub routes: Vec<Route>,
}

impl World {
    /// Ground class under a point; later regions paint over earlier ones.
    pub fn ground_class_at(&self, p: [f64; 2]) -> Option<u8> {
        self.regions
            .iter()
            .rev()
            .find(|r| r.polygon.contains(p))
            .map(|r| r.class)
    }

    pub fn traversable_at(&self, p: [f64; 2]) -> bool {
        self.ground_class_at(p)
            .is_some_and(|c| TRAVERSABLE_CLASSES.contains(&c))
    }

    /// Distance to the nearest obstacle footprint (0 when inside one).
    pub fn obstacle_clearance(&self, p: [f64; 2]) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.polygon.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_scene(&self) -> Result<SceneFile, WorldError> {
        let mut routes = Vec::new();
        for route in &self.routes {
            let mut pts = Vec::new();
            for p in &route.points {
                let geo = geo_delta_inverse(self.origin, p[0], p[1])?;
                pts.push(SceneGeo { lat: geo.lat, lon: geo.lon });
            }
            routes.push(pts);
        }
        Ok(SceneFile {
            origin: SceneGeo { lat: self.origin.lat, lon: self.origin.lon },
            regions: self
                .regions
                .iter()
                .map(|r| SceneRegion { class: r.class, polygon: r.polygon.vertices().to_vec() })
                .collect(),
            obstacles: self
                .obstacles
                .iter()
                .map(|o| SceneObstacle {
                    class: o.class,
                    polygon: o.polygon.vertices().to_vec(),
                    height: o.height,
                })
                .collect(),
            routes,
        })
    }

    pub fn from_scene(scene: &SceneFile) -> Result<Self, WorldError> {
        let origin = GeoPoint::new(scene.origin.lat, scene.origin.lon);
        let regions = scene
            .regions
            .iter()
            .map(|r| Region::new(r.class, Polygon::new(r.polygon.clone())?))
            .collect::<Result<Vec<_>, _>>()?;
        let obstacles = scene
            .obstacles
            .iter()
            .map(|o| Obstacle::new(o.class, Polygon::new(o.polygon.clone())?, o.height))
            .collect::<Result<Vec<_>, _>>()?;
        let mut routes = Vec::new();
        for pts in &scene.routes {
            let mut meters = Vec::new();
            for g in pts {
                let (dx, dy) = geo_delta(origin, GeoPoint::new(g.lat, g.lon))?;
                meters.push([dx, dy]);
            }
            routes.push(Route::new(meters)?);
        }
        Ok(World { origin, regions, obstacles, routes })
    }

    pub fn from_scene_json(json: &str) -> Result<Self, WorldError> {
        let scene: SceneFile = serde_json::from_str(json)?;
        World::from_scene(&scene)
    }

    pub fn to_scene_json(&self) -> Result<String, WorldError> {
        Ok(serde_json::to_string_pretty(&self.to_scene()?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGeo {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRegion {
    pub class: u8,
    pub polygon: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObstacle {
    pub class: u8,
    pub polygon: Vec<[f64; 2]>,
    pub height: f64,
}

/// On-disk scene schema: regions and obstacles in world meters, routes in
/// latitude/longitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub origin: SceneGeo,
    pub regions: Vec<SceneRegion>,
    pub obstacles: Vec<SceneObstacle>,
    pub routes: Vec<Vec<SceneGeo>>,
}
