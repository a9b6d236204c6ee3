//! Procedural driving scenes: a road, lane lines, vehicles and pedestrians,
//! rendered through a camera rig, with exact plan-view ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::Class;
use crate::error::{CoreError, Result};
use crate::geometry::{BevGridSpec, CameraModel, Rig, Vec3};

pub const LANE_HALF_WIDTH: f64 = 0.3;
pub const PEDESTRIAN_RADIUS: f64 = 0.3;
pub const PEDESTRIAN_HEIGHT: f64 = 1.7;
const PLACEMENT_ATTEMPTS: usize = 500;
/// Objects keep this far from the ego origin, where the cameras sit.
const EGO_KEEP_OUT: f64 = 2.0;
const NEAR_PLANE: f64 = 0.05;

const SKY: [f64; 3] = [0.62, 0.76, 0.92];
const GROUND: [f64; 3] = [0.36, 0.45, 0.27];
const ROAD: [f64; 3] = [0.33, 0.33, 0.35];
const LANE: [f64; 3] = [0.95, 0.93, 0.85];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Metric extent (along x, along y); matches the BEV grid in use.
    pub extent: (f64, f64),
    /// Cells of the target grid, used to snap pedestrians near a cell center
    /// so that every pedestrian owns at least one ground-truth cell.
    pub cells: (usize, usize),
    pub classes: Vec<Class>,
    pub vehicles: (usize, usize),
    pub pedestrians: (usize, usize),
    pub lanes: (usize, usize),
}

impl SceneSpec {
    pub fn for_grid(seed: u64, grid: &BevGridSpec) -> Self {
        Self {
            seed,
            extent: (grid.length_m, grid.width_m),
            cells: (grid.rows, grid.cols),
            classes: Class::ALL.to_vec(),
            vehicles: (2, 8),
            pedestrians: (0, 6),
            lanes: (2, 6),
        }
    }
}

type P2 = [f64; 2];

fn rot(p: P2, yaw: f64) -> P2 {
    let (s, c) = yaw.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Rounded rectangle in plan view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub center: P2,
    pub yaw: f64,
    pub half_length: f64,
    pub half_width: f64,
    pub corner_radius: f64,
}

impl Road {
    fn local(&self, p: P2) -> P2 {
        rot([p[0] - self.center[0], p[1] - self.center[1]], -self.yaw)
    }

    /// Signed distance to the boundary, negative inside.
    pub fn signed_distance(&self, p: P2) -> f64 {
        let q = self.local(p);
        let r = self.corner_radius;
        let dx = q[0].abs() - (self.half_length - r);
        let dy = q[1].abs() - (self.half_width - r);
        let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
        outside + dx.max(dy).min(0.0) - r
    }

    pub fn contains(&self, p: P2) -> bool {
        self.signed_distance(p) <= 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneLine {
    pub points: Vec<P2>,
}

fn segment_distance(p: P2, a: P2, b: P2) -> f64 {
    let (ab, ap) = ([b[0] - a[0], b[1] - a[1]], [p[0] - a[0], p[1] - a[1]]);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((ap[0] - t * ab[0]).powi(2) + (ap[1] - t * ab[1]).powi(2)).sqrt()
}

impl LaneLine {
    pub fn distance(&self, p: P2) -> f64 {
        self.points
            .windows(2)
            .map(|w| segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub center: P2,
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub albedo: [f64; 3],
}

impl Vehicle {
    /// Plan-view corners, counter-clockwise.
    pub fn footprint(&self) -> [P2; 4] {
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|c| {
            let r = rot(c, self.yaw);
            [r[0] + self.center[0], r[1] + self.center[1]]
        })
    }

    /// Footprint corners at the ground, then the same corners at the roof.
    pub fn corners(&self) -> [Vec3; 8] {
        let f = self.footprint();
        std::array::from_fn(|i| {
            let c = f[i % 4];
            [c[0], c[1], if i < 4 { 0.0 } else { self.height }]
        })
    }

    pub fn contains(&self, p: P2) -> bool {
        let q = rot([p[0] - self.center[0], p[1] - self.center[1]], -self.yaw);
        q[0].abs() <= self.length / 2.0 && q[1].abs() <= self.width / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pedestrian {
    pub center: P2,
    pub radius: f64,
    pub height: f64,
    pub albedo: [f64; 3],
}

impl Pedestrian {
    pub fn contains(&self, p: P2) -> bool {
        (p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2) <= self.radius * self.radius
    }
}

/// Everything needed to re-render a scene or rebuild its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub extent: P2,
    pub classes: Vec<Class>,
    pub road: Road,
    pub lanes: Vec<LaneLine>,
    pub vehicles: Vec<Vehicle>,
    pub pedestrians: Vec<Pedestrian>,
}

impl SceneMeta {
    /// The road alone.
    pub fn empty(extent: P2, road: Road) -> Self {
        Self {
            seed: 0,
            extent,
            classes: Class::ALL.to_vec(),
            road,
            lanes: Vec::new(),
            vehicles: Vec::new(),
            pedestrians: Vec::new(),
        }
    }
}

/// Separating-axis test on two convex quads.
fn quads_overlap(a: &[P2; 4], b: &[P2; 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let (p, q) = (poly[i], poly[(i + 1) % 4]);
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |s: &[P2; 4]| {
                s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let d = v[0] * axis[0] + v[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let ((alo, ahi), (blo, bhi)) = (proj(a), proj(b));
            if ahi < blo || bhi < alo {
                return false;
            }
        }
    }
    true
}

fn jitter_color(rng: &mut impl Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

/// Draw a scene. Vehicles sit fully on the road without overlapping each
/// other, pedestrians stand beside it, and every object center lies inside
/// the metric extent.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneMeta> {
    let bad_range = |what: &str, (lo, hi): (usize, usize)| {
        (lo > hi).then(|| CoreError::Placement(format!("{what} count range {lo}..={hi} is empty")))
    };
    for (what, r) in [("vehicle", spec.vehicles), ("pedestrian", spec.pedestrians), ("lane", spec.lanes)] {
        if let Some(e) = bad_range(what, r) {
            return Err(e);
        }
    }
    if !(spec.extent.0 > 0.0 && spec.extent.1 > 0.0) || spec.cells.0 == 0 || spec.cells.1 == 0 {
        return Err(CoreError::Placement("scene extent and grid must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (hx, hy) = (spec.extent.0 / 2.0, spec.extent.1 / 2.0);
    let half_width = rng.random_range(5.0..7.5);
    let road = Road {
        center: [rng.random_range(-3.0..3.0), rng.random_range(-2.5..2.5)],
        yaw: rng.random_range(-0.25..0.25),
        half_length: rng.random_range(0.7..1.3) * hx.max(hy),
        half_width,
        corner_radius: rng.random_range(1.0..4.0f64).min(half_width),
    };

    let n_lanes = rng.random_range(spec.lanes.0..=spec.lanes.1);
    let lanes = (0..n_lanes)
        .map(|j| {
            let v = -road.half_width + (j + 1) as f64 * 2.0 * road.half_width / (n_lanes + 1) as f64;
            let u_max = road.half_length - road.corner_radius;
            let points = [-u_max, 0.0, u_max]
                .iter()
                .map(|&u| {
                    let p = rot([u, v], road.yaw);
                    [p[0] + road.center[0], p[1] + road.center[1]]
                })
                .collect();
            LaneLine { points }
        })
        .collect();

    let n_vehicles = rng.random_range(spec.vehicles.0..=spec.vehicles.1);
    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(n_vehicles);
    for k in 0..n_vehicles {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let length = rng.random_range(3.5..5.5);
            let width = rng.random_range(1.6..2.2);
            let local = [
                rng.random_range(-road.half_length..road.half_length),
                rng.random_range(-road.half_width..road.half_width),
            ];
            let p = rot(local, road.yaw);
            let heading = if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::PI };
            let v = Vehicle {
                center: [p[0] + road.center[0], p[1] + road.center[1]],
                yaw: road.yaw + heading + rng.random_range(-0.15..0.15),
                length,
                width,
                height: rng.random_range(1.4..1.9),
                albedo: jitter_color(&mut rng, [0.85, 0.35, 0.1], 0.12),
            };
            let fp = v.footprint();
            let grown = Vehicle {
                length: v.length + 0.4,
                width: v.width + 0.4,
                ..v.clone()
            };
            let ego = Vehicle {
                length: v.length + 2.0 * EGO_KEEP_OUT,
                width: v.width + 2.0 * EGO_KEEP_OUT,
                ..v.clone()
            };
            let ok = v.center[0].abs() < hx
                && v.center[1].abs() < hy
                && fp.iter().all(|&c| road.contains(c))
                && !ego.contains([0.0, 0.0])
                && vehicles.iter().all(|o| !quads_overlap(&grown.footprint(), &o.footprint()));
            if ok {
                placed = Some(v);
                break;
            }
        }
        match placed {
            Some(v) => vehicles.push(v),
            None => {
                return Err(CoreError::Placement(format!(
                    "vehicle {} of {n_vehicles}: no position on the road clear of other vehicles and the ego \
                     keep-out after {PLACEMENT_ATTEMPTS} attempts",
                    k + 1
                )))
            }
        }
    }

    let (sx, sy) = (spec.extent.0 / spec.cells.0 as f64, spec.extent.1 / spec.cells.1 as f64);
    let n_peds = rng.random_range(spec.pedestrians.0..=spec.pedestrians.1);
    let mut pedestrians: Vec<Pedestrian> = Vec::with_capacity(n_peds);
    for k in 0..n_peds {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let row = rng.random_range(0..spec.cells.0);
            let col = rng.random_range(0..spec.cells.1);
            let jitter = 0.2 * PEDESTRIAN_RADIUS;
            let center = [
                -hx + (row as f64 + 0.5) * sx + rng.random_range(-jitter..jitter),
                -hy + (col as f64 + 0.5) * sy + rng.random_range(-jitter..jitter),
            ];
            let clear = 2.0 * PEDESTRIAN_RADIUS + 0.2;
            let ok = road.signed_distance(center) > PEDESTRIAN_RADIUS + 0.2
                && (center[0].powi(2) + center[1].powi(2)).sqrt() > EGO_KEEP_OUT + PEDESTRIAN_RADIUS
                && pedestrians
                    .iter()
                    .all(|o| (o.center[0] - center[0]).hypot(o.center[1] - center[1]) > clear);
            if ok {
                placed = Some(Pedestrian {
                    center,
                    radius: PEDESTRIAN_RADIUS,
                    height: PEDESTRIAN_HEIGHT,
                    albedo: jitter_color(&mut rng, [0.15, 0.3, 0.9], 0.08),
                });
                break;
            }
        }
        match placed {
            Some(p) => pedestrians.push(p),
            None => {
                return Err(CoreError::Placement(format!(
                    "pedestrian {} of {n_peds}: no free side-region position off the road after \
                     {PLACEMENT_ATTEMPTS} attempts",
                    k + 1
                )))
            }
        }
    }

    Ok(SceneMeta {
        seed: spec.seed,
        extent: [spec.extent.0, spec.extent.1],
        classes: spec.classes.clone(),
        road,
        lanes,
        vehicles,
        pedestrians,
    })
}

/// A binary plan-view map, row-major `rows×cols`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BevMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BevMap {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> bevr_tensor::Tensor {
        bevr_tensor::Tensor::new(&[self.rows, self.cols], self.data.iter().map(|&b| f64::from(b as u8)).collect())
            .expect("matching length")
    }
}

/// Orthographic ground truth: a cell is set iff its center lies inside a
/// footprint of `class` (boxes as rectangles, pedestrians as disks, lanes as
/// polylines widened to `LANE_HALF_WIDTH`, the road as its rounded
/// rectangle).
pub fn render_gt_bev(meta: &SceneMeta, grid: &BevGridSpec, class: Class) -> Result<BevMap> {
    if !meta.classes.contains(&class) {
        return Err(CoreError::ClassNotInScene(class.name()));
    }
    let mut data = Vec::with_capacity(grid.rows * grid.cols);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let (x, y) = grid.cell_center(0, row, col);
            let p = [x, y];
            data.push(match class {
                Class::Vehicle => meta.vehicles.iter().any(|v| v.contains(p)),
                Class::Pedestrian => meta.pedestrians.iter().any(|o| o.contains(p)),
                Class::Drivable => meta.road.contains(p),
                Class::Lane => meta.lanes.iter().any(|l| l.distance(p) <= LANE_HALF_WIDTH),
            });
        }
    }
    Ok(BevMap {
        rows: grid.rows,
        cols: grid.cols,
        data,
    })
}

/// An RGB image, row-major `height×width×3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_tensor(&self) -> bevr_tensor::Tensor {
        bevr_tensor::Tensor::new(&[self.height, self.width, 3], self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("matching length")
    }
}

/// Which scene object covers each pixel: 0 for none, `1 + k` for vehicle
/// `k`, `1 + n_vehicles + k` for pedestrian `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdBuffer {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

struct Face {
    verts: Vec<Vec3>,
    color: [f64; 3],
    id: u32,
    depth: f64,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn shade(albedo: [f64; 3], normal: Vec3) -> [f64; 3] {
    let light = [0.39, 0.24, 0.89];
    let k = 0.55 + 0.45 * dot(normal, light).max(0.0);
    albedo.map(|a| (a * k).clamp(0.0, 1.0))
}

fn centroid(verts: &[Vec3]) -> Vec3 {
    let n = verts.len() as f64;
    [0, 1, 2].map(|j| verts.iter().map(|v| v[j]).sum::<f64>() / n)
}

fn object_faces(meta: &SceneMeta, eye: Vec3) -> Vec<Face> {
    let mut faces = Vec::new();
    let mut push = |verts: Vec<Vec3>, normal: Vec3, albedo: [f64; 3], id: u32| {
        let c = centroid(&verts);
        if dot(normal, sub(c, eye)) >= 0.0 {
            return;
        }
        let d = sub(c, eye);
        faces.push(Face {
            verts,
            color: shade(albedo, normal),
            id,
            depth: dot(d, d).sqrt(),
        });
    };
    for (k, v) in meta.vehicles.iter().enumerate() {
        let c = v.corners();
        let id = 1 + k as u32;
        push(vec![c[4], c[5], c[6], c[7]], [0.0, 0.0, 1.0], v.albedo, id);
        push(vec![c[3], c[2], c[1], c[0]], [0.0, 0.0, -1.0], v.albedo, id);
        for i in 0..4 {
            let j = (i + 1) % 4;
            let e = sub(c[j], c[i]);
            let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
            // footprint is counter-clockwise, so the outward normal is the
            // edge direction turned clockwise
            let normal = [e[1] / len, -e[0] / len, 0.0];
            push(vec![c[i], c[j], c[j + 4], c[i + 4]], normal, v.albedo, id);
        }
    }
    let base = meta.vehicles.len() as u32 + 1;
    for (k, p) in meta.pedestrians.iter().enumerate() {
        let to_eye = [eye[0] - p.center[0], eye[1] - p.center[1]];
        let len = to_eye[0].hypot(to_eye[1]);
        if len <= p.radius {
            continue;
        }
        let n = [to_eye[0] / len, to_eye[1] / len, 0.0];
        let side = [-n[1] * p.radius, n[0] * p.radius];
        let (a, b) = (
            [p.center[0] - side[0], p.center[1] - side[1]],
            [p.center[0] + side[0], p.center[1] + side[1]],
        );
        let verts = vec![[a[0], a[1], 0.0], [b[0], b[1], 0.0], [b[0], b[1], p.height], [a[0], a[1], p.height]];
        push(verts, n, p.albedo, base + k as u32);
    }
    faces
}

/// Clip a camera-frame polygon to `z ≥ NEAR_PLANE`.
fn clip_near(poly: &[Vec3]) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (ina, inb) = (a[2] >= NEAR_PLANE, b[2] >= NEAR_PLANE);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR_PLANE - a[2]) / (b[2] - a[2]);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), NEAR_PLANE]);
        }
    }
    out
}

/// Fill a convex image-space polygon, visiting pixels whose centers lie
/// inside it.
fn fill_convex(pts: &[(f64, f64)], height: usize, width: usize, mut visit: impl FnMut(usize, usize)) {
    if pts.len() < 3 {
        return;
    }
    let area: f64 = (0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    if area == 0.0 {
        return;
    }
    let sign = area.signum();
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(u, v) in pts {
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
    }
    let c0 = (u0 - 0.5).ceil().max(0.0) as usize;
    let r0 = (v0 - 0.5).ceil().max(0.0) as usize;
    let c1 = ((u1 - 0.5).floor().min(width as f64 - 1.0)).max(-1.0);
    let r1 = ((v1 - 0.5).floor().min(height as f64 - 1.0)).max(-1.0);
    if c1 < 0.0 || r1 < 0.0 {
        return;
    }
    for row in r0..=r1 as usize {
        let y = row as f64 + 0.5;
        for col in c0..=c1 as usize {
            let x = col as f64 + 0.5;
            let inside = (0..pts.len()).all(|i| {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                sign * ((b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)) >= 0.0
            });
            if inside {
                visit(row, col);
            }
        }
    }
}

/// Ground color under a pixel ray, or the sky.
fn ground_color(meta: &SceneMeta, eye: Vec3, dir: Vec3) -> [f64; 3] {
    if dir[2] > -1e-9 {
        return SKY;
    }
    let t = -eye[2] / dir[2];
    let p = [eye[0] + t * dir[0], eye[1] + t * dir[1]];
    if meta.road.contains(p) {
        if meta.lanes.iter().any(|l| l.distance(p) <= LANE_HALF_WIDTH) {
            LANE
        } else {
            ROAD
        }
    } else {
        GROUND
    }
}

/// One camera's view: ray-cast ground, road and lanes, then object faces
/// painted far to near with backface culling and near-plane clipping.
pub fn render_view(meta: &SceneMeta, cam: &CameraModel) -> (Image, IdBuffer) {
    let (h, w) = (cam.height, cam.width);
    let eye = cam.center();
    let r = &cam.rotation;
    let mut color = vec![[0.0; 3]; h * w];
    for row in 0..h {
        for col in 0..w {
            let dc = [
                (col as f64 + 0.5 - cam.cx) / cam.fx,
                (row as f64 + 0.5 - cam.cy) / cam.fy,
                1.0,
            ];
            let dir = [0, 1, 2].map(|j| r[0][j] * dc[0] + r[1][j] * dc[1] + r[2][j] * dc[2]);
            color[row * w + col] = ground_color(meta, eye, dir);
        }
    }
    let mut ids = vec![0u32; h * w];
    let mut faces = object_faces(meta, eye);
    faces.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for f in &faces {
        let cam_pts: Vec<Vec3> = f.verts.iter().map(|&p| cam.to_camera(p)).collect();
        let clipped = clip_near(&cam_pts);
        let px: Vec<(f64, f64)> = clipped.iter().map(|&p| cam.pixel(p)).collect();
        fill_convex(&px, h, w, |row, col| {
            color[row * w + col] = f.color;
            ids[row * w + col] = f.id;
        });
    }
    let data = color.iter().flat_map(|c| c.map(|v| v as f32)).collect();
    (
        Image {
            height: h,
            width: w,
            data,
        },
        IdBuffer { height: h, width: w, ids },
    )
}

pub fn render_camera_views(meta: &SceneMeta, rig: &Rig) -> Vec<Image> {
    rig.cameras.iter().map(|c| render_view(meta, c).0).collect()
}

/// Rendered images, ground-truth maps and the metadata behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub images: Vec<Image>,
    pub maps: Vec<(Class, BevMap)>,
    pub meta: SceneMeta,
}

impl SceneSample {
    pub fn map(&self, class: Class) -> Option<&BevMap> {
        self.maps.iter().find(|(c, _)| *c == class).map(|(_, m)| m)
    }
}

/// Seed of sample `index` in a dataset drawn from `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn generate_sample(spec: &SceneSpec, rig: &Rig, grid: &BevGridSpec) -> Result<SceneSample> {
    let meta = generate_scene(spec)?;
    let images = render_camera_views(&meta, rig);
    let maps = spec
        .classes
        .iter()
        .map(|&c| Ok((c, render_gt_bev(&meta, grid, c)?)))
        .collect::<Result<_>>()?;
    Ok(SceneSample { images, maps, meta })
}

/// `count` samples from consecutive seeds of `base`.
pub fn generate_dataset(base: u64, count: usize, rig: &Rig, grid: &BevGridSpec) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| generate_sample(&SceneSpec::for_grid(sample_seed(base, i), grid), rig, grid))
        .collect()
}
