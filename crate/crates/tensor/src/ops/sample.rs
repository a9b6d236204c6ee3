//! Bilinear reads at continuous positions and bilinear upsampling.
//!
//! Sampling positions are `(x, y)` pixel coordinates: `x` indexes the
//! column (width axis), `y` the row. Integer coordinates hit texels exactly;
//! texels outside the map contribute zero.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tape::{Backward, OpKind, Tape};
use crate::tensor::Tensor;

/// One bilinear tap: texel index (row-major, `None` outside the map), its
/// weight and the weight's partial derivatives in `x` and `y`.
#[derive(Clone, Copy)]
struct Tap {
    texel: Option<usize>,
    w: f64,
    dx: f64,
    dy: f64,
}

#[inline]
fn taps(x: f64, y: f64, h: usize, w: usize) -> [Tap; 4] {
    let xf = x.floor();
    let yf = y.floor();
    let (fx, fy) = (x - xf, y - yf);
    let (x0, y0) = (xf as i64, yf as i64);
    let texel = |xi: i64, yi: i64| {
        (xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h)
            .then(|| yi as usize * w + xi as usize)
    };
    [
        Tap {
            texel: texel(x0, y0),
            w: (1.0 - fx) * (1.0 - fy),
            dx: -(1.0 - fy),
            dy: -(1.0 - fx),
        },
        Tap {
            texel: texel(x0 + 1, y0),
            w: fx * (1.0 - fy),
            dx: 1.0 - fy,
            dy: -fx,
        },
        Tap {
            texel: texel(x0, y0 + 1),
            w: (1.0 - fx) * fy,
            dx: -fy,
            dy: 1.0 - fx,
        },
        Tap {
            texel: texel(x0 + 1, y0 + 1),
            w: fx * fy,
            dx: fy,
            dy: fx,
        },
    ]
}

/// Geometry of a grouped weighted multi-point read.
#[derive(Clone, Copy)]
struct SampleGeom {
    h: usize,
    w: usize,
    channels: usize,
    groups: usize,
    points: usize,
    queries: usize,
}

impl SampleGeom {
    fn depth(&self) -> usize {
        self.channels / self.groups
    }

    fn forward(&self, map: &[f64], pts: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
        let (c, d) = (self.channels, self.depth());
        let mut out = vec![0.0; self.queries * c];
        for n in 0..self.queries {
            for g in 0..self.groups {
                let dst = n * c + g * d;
                for k in 0..self.points {
                    let s = (n * self.groups + g) * self.points + k;
                    let wk = weights.map_or(1.0, |w| w[s]);
                    for tap in taps(pts[2 * s], pts[2 * s + 1], self.h, self.w) {
                        let Some(t) = tap.texel else { continue };
                        let coef = wk * tap.w;
                        if coef == 0.0 {
                            continue;
                        }
                        let src = t * c + g * d;
                        for j in 0..d {
                            out[dst + j] += coef * map[src + j];
                        }
                    }
                }
            }
        }
        out
    }
}

struct SampleBackward {
    geom: SampleGeom,
    map: Arc<[f64]>,
    points: Arc<[f64]>,
    weights: Option<Arc<[f64]>>,
}

impl Backward for SampleBackward {
    fn backward(&self, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let geom = self.geom;
        let (c, d) = (geom.channels, geom.depth());
        let need_map = needs[0];
        let need_pts = needs[1];
        let need_w = needs.get(2).copied().unwrap_or(false);
        let mut gmap = need_map.then(|| vec![0.0; self.map.len()]);
        let mut gpts = need_pts.then(|| vec![0.0; self.points.len()]);
        let mut gw = need_w.then(|| vec![0.0; geom.queries * geom.groups * geom.points]);
        let pts = &self.points;
        for n in 0..geom.queries {
            for grp in 0..geom.groups {
                let go = &g[n * c + grp * d..n * c + grp * d + d];
                for k in 0..geom.points {
                    let s = (n * geom.groups + grp) * geom.points + k;
                    let wk = self.weights.as_ref().map_or(1.0, |w| w[s]);
                    let (mut val_dot, mut sx, mut sy) = (0.0, 0.0, 0.0);
                    for tap in taps(pts[2 * s], pts[2 * s + 1], geom.h, geom.w) {
                        let Some(t) = tap.texel else { continue };
                        let src = t * c + grp * d;
                        if need_pts || need_w {
                            let dot: f64 =
                                (0..d).map(|j| go[j] * self.map[src + j]).sum();
                            val_dot += tap.w * dot;
                            sx += tap.dx * dot;
                            sy += tap.dy * dot;
                        }
                        if let Some(gm) = gmap.as_mut() {
                            let coef = wk * tap.w;
                            if coef != 0.0 {
                                for j in 0..d {
                                    gm[src + j] += coef * go[j];
                                }
                            }
                        }
                    }
                    if let Some(gp) = gpts.as_mut() {
                        gp[2 * s] += wk * sx;
                        gp[2 * s + 1] += wk * sy;
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[s] += val_dot;
                    }
                }
            }
        }
        let mut out = vec![gmap, gpts];
        if self.weights.is_some() {
            out.push(gw);
        }
        out
    }
}

#[derive(Clone)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

/// Half-pixel (align-corners false) source positions, clamped to the edge.
fn axis_taps(n_in: usize, factor: usize) -> AxisTaps {
    let n_out = n_in * factor;
    let mut t = AxisTaps {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        frac: Vec::with_capacity(n_out),
    };
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(src - lo as f64);
    }
    t
}

struct UpsampleBackward {
    rows: AxisTaps,
    cols: AxisTaps,
    w_in: usize,
    channels: usize,
    len_in: usize,
}

fn upsample_apply(
    rows: &AxisTaps,
    cols: &AxisTaps,
    w_in: usize,
    channels: usize,
    mut op: impl FnMut(usize, usize, f64),
) {
    let w_out = cols.lo.len();
    for oy in 0..rows.lo.len() {
        let fy = rows.frac[oy];
        for ox in 0..w_out {
            let fx = cols.frac[ox];
            let dst = (oy * w_out + ox) * channels;
            let taps = [
                (rows.lo[oy], cols.lo[ox], (1.0 - fy) * (1.0 - fx)),
                (rows.lo[oy], cols.hi[ox], (1.0 - fy) * fx),
                (rows.hi[oy], cols.lo[ox], fy * (1.0 - fx)),
                (rows.hi[oy], cols.hi[ox], fy * fx),
            ];
            for (y, x, w) in taps {
                if w == 0.0 {
                    continue;
                }
                let src = (y * w_in + x) * channels;
                for c in 0..channels {
                    op(dst + c, src + c, w);
                }
            }
        }
    }
}

impl Backward for UpsampleBackward {
    fn backward(&self, g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; self.len_in];
        upsample_apply(&self.rows, &self.cols, self.w_in, self.channels, |o, i, w| {
            gx[i] += w * g[o]
        });
        vec![Some(gx)]
    }
}

impl Tape {
    /// Bilinear read of an `H×W×C` map at `N` points given as `N×2` `(x, y)`.
    pub fn bilinear_sample(&self, map: &Tensor, points: &Tensor) -> Result<Tensor> {
        let op = OpKind::BilinearSample;
        if map.rank() != 3 {
            return shape_err(op, format!("map must be H×W×C, got {:?}", map.shape()));
        }
        if points.rank() != 2 || points.shape()[1] != 2 {
            return shape_err(op, format!("points must be N×2, got {:?}", points.shape()));
        }
        let geom = SampleGeom {
            h: map.shape()[0],
            w: map.shape()[1],
            channels: map.shape()[2],
            groups: 1,
            points: 1,
            queries: points.shape()[0],
        };
        let out = geom.forward(map.data(), points.data(), None);
        self.record(op, &[map, points], vec![geom.queries, geom.channels], out, || {
            Box::new(SampleBackward {
                geom,
                map: map.shared(),
                points: points.shared(),
                weights: None,
            })
        })
    }

    /// Grouped weighted multi-point bilinear read, the core of deformable
    /// attention.
    ///
    /// `map` is `H×W×(G·D)`, `points` is `N×G×K×2` and `weights` is `N×G×K`.
    /// Group `g` reads channels `g·D..(g+1)·D` of the map; the result is
    /// `N×(G·D)` with
    /// `out[n, g·D + j] = Σ_k weights[n,g,k] · bilinear(map_j, points[n,g,k])`.
    pub fn deform_sample(&self, map: &Tensor, points: &Tensor, weights: &Tensor) -> Result<Tensor> {
        let op = OpKind::DeformSample;
        if map.rank() != 3 {
            return shape_err(op, format!("map must be H×W×C, got {:?}", map.shape()));
        }
        if points.rank() != 4 || points.shape()[3] != 2 {
            return shape_err(op, format!("points must be N×G×K×2, got {:?}", points.shape()));
        }
        let (n, groups, k) = (points.shape()[0], points.shape()[1], points.shape()[2]);
        if weights.shape() != [n, groups, k] {
            return shape_err(
                op,
                format!(
                    "weights {:?} do not match points {:?}",
                    weights.shape(),
                    points.shape()
                ),
            );
        }
        let channels = map.shape()[2];
        if groups == 0 || channels % groups != 0 {
            return shape_err(
                op,
                format!("{channels} map channels cannot be split into {groups} groups"),
            );
        }
        let geom = SampleGeom {
            h: map.shape()[0],
            w: map.shape()[1],
            channels,
            groups,
            points: k,
            queries: n,
        };
        let out = geom.forward(map.data(), points.data(), Some(weights.data()));
        self.record(op, &[map, points, weights], vec![n, channels], out, || {
            Box::new(SampleBackward {
                geom,
                map: map.shared(),
                points: points.shared(),
                weights: Some(weights.shared()),
            })
        })
    }

    /// Bilinear upsampling of an `h×w×C` map by an integer factor.
    ///
    /// Output pixel `i` reads input coordinate `(i + 0.5) / factor - 0.5`,
    /// clamped to the map.
    pub fn upsample_bilinear(&self, map: &Tensor, factor: usize) -> Result<Tensor> {
        let op = OpKind::UpsampleBilinear;
        if map.rank() != 3 || map.shape()[0] == 0 || map.shape()[1] == 0 {
            return shape_err(op, format!("map must be non-empty h×w×C, got {:?}", map.shape()));
        }
        if factor == 0 {
            return shape_err(op, "factor must be at least 1");
        }
        let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let rows = axis_taps(h, factor);
        let cols = axis_taps(w, factor);
        let mut out = vec![0.0; h * factor * w * factor * c];
        let src = map.data();
        upsample_apply(&rows, &cols, w, c, |o, i, wt| out[o] += wt * src[i]);
        self.record(op, &[map], vec![h * factor, w * factor, c], out, || {
            Box::new(UpsampleBackward {
                rows,
                cols,
                w_in: w,
                channels: c,
                len_in: map.len(),
            })
        })
    }
}
