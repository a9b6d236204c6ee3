//! Cameras, the BEV grid and its pillar reference points.
//!
//! Ego frame: `x` forward, `y` left, `z` up, meters. Camera frame: `x` right,
//! `y` down, `z` along the optical axis. BEV rows run along ego `x` and
//! columns along ego `y`; row 0 is the rear edge of the grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{CoreError, Result};

/// Minimum camera-frame depth of a valid projection.
pub const MIN_DEPTH: f64 = 1e-6;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Pinhole camera with zero skew and no distortion.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Ego-to-camera rotation.
    pub rotation: Mat3,
    /// Ego-to-camera translation: `p_cam = R·p_ego + t`.
    pub translation: Vec3,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl CameraModel {
    pub fn new(
        [fx, fy, cx, cy]: [f64; 4],
        rotation: Mat3,
        translation: Vec3,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            height,
            width,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at ego position `center`, optical axis at `yaw` (counter-
    /// clockwise from ego `x`) tilted down by `pitch`, with horizontal field
    /// of view `hfov` (radians) and square pixels.
    pub fn looking(
        center: Vec3,
        yaw: f64,
        pitch: f64,
        hfov: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let forward = [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin()];
        let right = [yaw.sin(), -yaw.cos(), 0.0];
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let rc = mat_vec(&rotation, center);
        let f = width as f64 / 2.0 / (hfov / 2.0).tan();
        Self::new(
            [f, f, width as f64 / 2.0, height as f64 / 2.0],
            rotation,
            [-rc[0], -rc[1], -rc[2]],
            height,
            width,
        )
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Camera(m));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive, got {} {}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64 && 0.0 <= self.cy && self.cy < self.height as f64) {
            return bad(format!(
                "principal point ({}, {}) outside {}×{} image",
                self.cx, self.cy, self.height, self.width
            ));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return bad(format!("rotation rows {i},{j} not orthonormal (dot {dot})"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return bad(format!("rotation determinant {det} is not +1"));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return bad("translation must be finite".into());
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Optical center in the ego frame, `-Rᵀ·t`.
    pub fn center(&self) -> Vec3 {
        let (r, t) = (&self.rotation, &self.translation);
        [0, 1, 2].map(|j| -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]))
    }

    /// Pixel coordinates of a camera-frame point (no validity check).
    pub fn pixel(&self, pc: Vec3) -> (f64, f64) {
        (self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy)
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v)
    }
}

pub fn project_to_image(cam: &CameraModel, point: Vec3) -> Projection {
    let pc = cam.to_camera(point);
    let (u, v) = cam.pixel(pc);
    Projection {
        u,
        v,
        depth: pc[2],
        valid: pc[2] > MIN_DEPTH && cam.in_image(u, v),
    }
}

/// Target-resolution BEV grid and its query pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGridSpec {
    pub rows: usize,
    pub cols: usize,
    pub length_m: f64,
    pub width_m: f64,
    pub channels: usize,
    pub z_anchors: Vec<f64>,
    /// Pyramid depth N_s. Level 0 is the target resolution, level
    /// `levels - 1` the coarsest.
    pub levels: usize,
}

pub const DEFAULT_Z_ANCHORS: [f64; 4] = [-1.0, 0.0, 1.0, 2.0];

impl BevGridSpec {
    pub fn new(
        rows: usize,
        cols: usize,
        extent_m: (f64, f64),
        channels: usize,
        z_anchors: Vec<f64>,
        levels: usize,
    ) -> Result<Self> {
        let spec = Self {
            rows,
            cols,
            length_m: extent_m.0,
            width_m: extent_m.1,
            channels,
            z_anchors,
            levels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 64×64 cells over 40 m × 40 m, C = 32, three levels.
    pub fn desk() -> Self {
        Self::new(64, 64, (40.0, 40.0), 32, DEFAULT_Z_ANCHORS.to_vec(), 3).expect("valid")
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Grid(m));
        if self.levels == 0 {
            return bad("at least one pyramid level is required".into());
        }
        let div = 1usize << (self.levels - 1);
        if self.rows == 0 || self.cols == 0 || self.rows % div != 0 || self.cols % div != 0 {
            return bad(format!(
                "{}×{} cells cannot form {} levels (extents must be positive multiples of {div})",
                self.rows, self.cols, self.levels
            ));
        }
        if !(self.length_m > 0.0 && self.width_m > 0.0) {
            return bad("metric extent must be positive".into());
        }
        if self.z_anchors.is_empty() || self.z_anchors.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("z-anchors {:?} must be strictly increasing", self.z_anchors));
        }
        Ok(())
    }

    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        (self.rows >> level, self.cols >> level)
    }

    /// Metric size (along x, along y) of one cell at `level`.
    pub fn cell_size(&self, level: usize) -> (f64, f64) {
        let (r, c) = self.level_dims(level);
        (self.length_m / r as f64, self.width_m / c as f64)
    }

    /// Ego-frame `(x, y)` of the center of a cell.
    pub fn cell_center(&self, level: usize, row: usize, col: usize) -> (f64, f64) {
        let (sx, sy) = self.cell_size(level);
        (
            -self.length_m / 2.0 + (row as f64 + 0.5) * sx,
            -self.width_m / 2.0 + (col as f64 + 0.5) * sy,
        )
    }

    fn check_cell(&self, level: usize, row: usize, col: usize) -> Result<()> {
        let (rows, cols) = if level < self.levels { self.level_dims(level) } else { (0, 0) };
        if row >= rows || col >= cols {
            return Err(CoreError::CellOutOfRange {
                level,
                row,
                col,
                rows,
                cols,
            });
        }
        Ok(())
    }
}

/// The pillar of 3D reference points above a cell center, one per z-anchor.
pub fn bev_cell_to_world(spec: &BevGridSpec, level: usize, row: usize, col: usize) -> Result<Vec<Vec3>> {
    spec.check_cell(level, row, col)?;
    let (x, y) = spec.cell_center(level, row, col);
    Ok(spec.z_anchors.iter().map(|&z| [x, y, z]).collect())
}

/// Cameras into which at least one pillar point of the cell projects.
pub fn compute_hit_set(
    spec: &BevGridSpec,
    level: usize,
    row: usize,
    col: usize,
    cameras: &[CameraModel],
) -> Result<Vec<usize>> {
    let pillar = bev_cell_to_world(spec, level, row, col)?;
    Ok((0..cameras.len())
        .filter(|&i| pillar.iter().any(|&p| project_to_image(&cameras[i], p).valid))
        .collect())
}

#[derive(Clone, Debug)]
pub struct LevelTable {
    pub rows: usize,
    pub cols: usize,
    cameras: usize,
    anchors: usize,
    entries: Vec<Projection>,
    /// Image size (height, width) per camera.
    sizes: Vec<(usize, usize)>,
}

impl LevelTable {
    fn index(&self, cell: usize, cam: usize, z: usize) -> usize {
        (cell * self.cameras + cam) * self.anchors + z
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cameras(&self) -> usize {
        self.cameras
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    /// Entry for the row-major cell index `cell`.
    pub fn get(&self, cell: usize, cam: usize, z: usize) -> Projection {
        self.entries[self.index(cell, cam, z)]
    }

    pub fn hit(&self, cell: usize, cam: usize) -> bool {
        (0..self.anchors).any(|z| self.get(cell, cam, z).valid)
    }

    pub fn hit_set(&self, cell: usize) -> Vec<usize> {
        (0..self.cameras).filter(|&i| self.hit(cell, i)).collect()
    }

    /// `(u / W_I, v / H_I)` of a valid entry; `None` for an invalid one.
    pub fn normalized(&self, cell: usize, cam: usize, z: usize) -> Option<(f64, f64)> {
        let p = self.get(cell, cam, z);
        let (h, w) = self.sizes[cam];
        p.valid.then(|| (p.u / w as f64, p.v / h as f64))
    }
}

/// Projections of every pillar point of every cell at every level into every
/// camera. Immutable once built.
#[derive(Clone, Debug)]
pub struct ProjectionTable {
    levels: Vec<LevelTable>,
}

impl ProjectionTable {
    pub fn level(&self, level: usize) -> Result<&LevelTable> {
        self.levels
            .get(level)
            .ok_or_else(|| CoreError::Input(format!("projection table has no level {level}")))
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

pub fn precompute_projection_table(spec: &BevGridSpec, cameras: &[CameraModel]) -> ProjectionTable {
    let anchors = spec.z_anchors.len();
    let levels = (0..spec.levels)
        .map(|level| {
            let (rows, cols) = spec.level_dims(level);
            let mut entries = Vec::with_capacity(rows * cols * cameras.len() * anchors);
            for row in 0..rows {
                for col in 0..cols {
                    let (x, y) = spec.cell_center(level, row, col);
                    for cam in cameras {
                        for &z in &spec.z_anchors {
                            entries.push(project_to_image(cam, [x, y, z]));
                        }
                    }
                }
            }
            LevelTable {
                rows,
                cols,
                cameras: cameras.len(),
                anchors,
                entries,
                sizes: cameras.iter().map(|c| (c.height, c.width)).collect(),
            }
        })
        .collect();
    ProjectionTable { levels }
}

/// An ordered set of cameras, persisted in a plain-text rig file.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub cameras: Vec<CameraModel>,
}

pub const DESK_IMAGE: (usize, usize) = (96, 160);
pub const DESK_CAMERA_HEIGHT: f64 = 1.0;

impl Rig {
    /// Four cameras at the ego origin, 1 m up, yawed 0°, 90°, 180° and 270°,
    /// each with a 100° horizontal field of view.
    pub fn desk() -> Self {
        Self::surround(DESK_IMAGE.0, DESK_IMAGE.1, 100f64.to_radians())
    }

    pub fn surround(height: usize, width: usize, hfov: f64) -> Self {
        let cameras = (0..4)
            .map(|k| {
                let yaw = k as f64 * std::f64::consts::FRAC_PI_2;
                CameraModel::looking([0.0, 0.0, DESK_CAMERA_HEIGHT], yaw, 0.0, hfov, height, width)
                    .expect("valid camera")
            })
            .collect();
        Self { cameras }
    }

    /// Four roughly surround-facing cameras with jittered pose and optics.
    pub fn random(rng: &mut impl Rng, height: usize, width: usize) -> Self {
        let cameras = (0..4)
            .map(|k| {
                let yaw = (k as f64 * 90.0 + rng.random_range(-15.0..15.0)).to_radians();
                let pitch = rng.random_range(-5.0f64..12.0).to_radians();
                let hfov = rng.random_range(80.0f64..120.0).to_radians();
                let center = [
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.8..2.0),
                ];
                let mut cam = CameraModel::looking(center, yaw, pitch, hfov, height, width).expect("valid camera");
                cam.cx += rng.random_range(-4.0..4.0);
                cam.cy += rng.random_range(-4.0..4.0);
                cam.fy *= rng.random_range(0.95..1.05);
                cam
            })
            .collect();
        Self { cameras }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cameras = Vec::new();
        let mut current: Option<Partial> = None;
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last_line = line;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |reason: String| CoreError::RigParse { line, reason };
            let mut words = content.split_whitespace();
            let key = words.next().expect("non-empty");
            let nums: Vec<&str> = words.collect();
            let floats = |n: usize| -> Result<Vec<f64>> {
                if nums.len() != n {
                    return Err(err(format!("`{key}` needs {n} values, got {}", nums.len())));
                }
                nums.iter()
                    .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}"))))
                    .collect()
            };
            if key == "camera" {
                if let Some(p) = current.take() {
                    cameras.push(p.finish(line)?);
                }
                let index: usize = match nums.as_slice() {
                    [s] => s.parse().map_err(|_| err(format!("bad camera index {s:?}")))?,
                    _ => return Err(err("`camera` needs one index".into())),
                };
                if index != cameras.len() {
                    return Err(err(format!("expected camera {}, got {index}", cameras.len())));
                }
                current = Some(Partial::default());
                continue;
            }
            let Some(p) = current.as_mut() else {
                return Err(err(format!("`{key}` before any `camera` block")));
            };
            match key {
                "K" => p.k = Some(floats(4)?.try_into().expect("4")),
                "R" => {
                    let v = floats(9)?;
                    p.r = Some([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]);
                }
                "t" => p.t = Some(floats(3)?.try_into().expect("3")),
                "size" => {
                    let v = floats(2)?;
                    if v.iter().any(|x| x.fract() != 0.0 || *x <= 0.0) {
                        return Err(err("image size must be positive integers".into()));
                    }
                    p.size = Some((v[0] as usize, v[1] as usize));
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        if let Some(p) = current.take() {
            cameras.push(p.finish(last_line)?);
        }
        if cameras.is_empty() {
            return Err(CoreError::RigParse {
                line: last_line,
                reason: "no cameras".into(),
            });
        }
        Ok(Self { cameras })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.cameras.iter().enumerate() {
            let r = c.rotation;
            let t = c.translation;
            writeln!(s, "camera {i}").unwrap();
            writeln!(s, "K {} {} {} {}", c.fx, c.fy, c.cx, c.cy).unwrap();
            writeln!(
                s,
                "R {} {} {} {} {} {} {} {} {}",
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]
            )
            .unwrap();
            writeln!(s, "t {} {} {}", t[0], t[1], t[2]).unwrap();
            writeln!(s, "size {} {}", c.height, c.width).unwrap();
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| CoreError::io(path, e))
    }
}

#[derive(Default)]
struct Partial {
    k: Option<[f64; 4]>,
    r: Option<Mat3>,
    t: Option<Vec3>,
    size: Option<(usize, usize)>,
}

impl Partial {
    fn finish(self, line: usize) -> Result<CameraModel> {
        let missing = |what: &str| CoreError::RigParse {
            line,
            reason: format!("camera block is missing `{what}`"),
        };
        let (h, w) = self.size.ok_or_else(|| missing("size"))?;
        CameraModel::new(
            self.k.ok_or_else(|| missing("K"))?,
            self.r.ok_or_else(|| missing("R"))?,
            self.t.ok_or_else(|| missing("t"))?,
            h,
            w,
        )
        .map_err(|e| CoreError::RigParse {
            line,
            reason: e.to_string(),
        })
    }
}
