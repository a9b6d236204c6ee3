//! Brute-force projection of every pillar point of a grid, compared with
//! the precomputed table and the hit-set helpers.

#![allow(dead_code)]

use bevr_core::geometry::{compute_hit_set, precompute_projection_table, BevGridSpec, CameraModel, Rig, MIN_DEPTH};

pub struct Oracle {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

pub fn project(cam: &CameraModel, p: [f64; 3]) -> Oracle {
    let r = cam.rotation;
    let t = cam.translation;
    let mut pc = [0.0; 3];
    for i in 0..3 {
        pc[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
    }
    let u = cam.fx * pc[0] / pc[2] + cam.cx;
    let v = cam.fy * pc[1] / pc[2] + cam.cy;
    let inside = u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64;
    Oracle {
        u,
        v,
        depth: pc[2],
        valid: pc[2] > MIN_DEPTH && inside,
    }
}

#[derive(Debug, Default)]
pub struct Comparison {
    /// Pillar points compared.
    pub points: usize,
    pub valid: usize,
    pub cells: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<String>,
}

impl Comparison {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.mismatches += 1;
            self.first_mismatch.get_or_insert_with(what);
        }
    }
}

/// Exact comparison at every level, cell, camera and anchor. Metric
/// extents centered on the ego origin; cells indexed row along `x`.
pub fn compare(spec: &BevGridSpec, rig: &Rig) -> Comparison {
    let table = precompute_projection_table(spec, &rig.cameras);
    let mut cmp = Comparison::default();
    cmp.check(table.num_levels() == spec.levels, || "level count".into());
    for level in 0..spec.levels {
        let lt = table.level(level).unwrap();
        let (rows, cols) = (spec.rows >> level, spec.cols >> level);
        cmp.check((lt.rows, lt.cols) == (rows, cols), || format!("level {level} dims"));
        let (sx, sy) = (spec.length_m / rows as f64, spec.width_m / cols as f64);
        for row in 0..rows {
            for col in 0..cols {
                let cell = row * cols + col;
                let x = -spec.length_m / 2.0 + (row as f64 + 0.5) * sx;
                let y = -spec.width_m / 2.0 + (col as f64 + 0.5) * sy;
                let mut hits = Vec::new();
                for (i, cam) in rig.cameras.iter().enumerate() {
                    let mut hit = false;
                    for (z, &zh) in spec.z_anchors.iter().enumerate() {
                        let want = project(cam, [x, y, zh]);
                        let got = lt.get(cell, i, z);
                        let at = || format!("level {level} cell ({row},{col}) cam {i} z {z}");
                        cmp.check(got.valid == want.valid, at);
                        cmp.check((got.u, got.v, got.depth) == (want.u, want.v, want.depth), at);
                        let norm = want.valid.then(|| (want.u / cam.width as f64, want.v / cam.height as f64));
                        cmp.check(lt.normalized(cell, i, z) == norm, at);
                        hit |= want.valid;
                        cmp.valid += usize::from(want.valid);
                        cmp.points += 1;
                    }
                    if hit {
                        hits.push(i);
                    }
                }
                let at = || format!("level {level} cell ({row},{col}) hit set");
                cmp.check(lt.hit_set(cell) == hits, at);
                cmp.check(compute_hit_set(spec, level, row, col, &rig.cameras).unwrap() == hits, at);
                cmp.cells += 1;
            }
        }
    }
    cmp
}
