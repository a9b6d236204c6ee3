//! Deformable attention: across cameras in image space, within a BEV query
//! map, and from BEV queries into the camera feature pyramids.
//!
//! Offsets live in normalized map units (`[0, 1]` spans the map). A
//! normalized location `(x, y)` reads the pixel position
//! `(x·W − 0.5, y·H − 0.5)`, so normalized cell centers land exactly on
//! texels.

use bevr_tensor::{Tensor, Tape};

use crate::error::{CoreError, Result};
use crate::geometry::LevelTable;
use crate::nn::{self, Ctx, Init};

/// Normalized location given to pillar points that do not project into a
/// camera. Far enough outside the map that every bilinear tap is padding.
pub const OFF_IMAGE: f64 = -4.0;

/// Sinusoidal embedding of a 2D position.
///
/// The first `C/2` channels encode `x`, the rest `y`; within each half,
/// channel `2k` is `sin(pos·ω_k)` and `2k+1` is `cos(pos·ω_k)` with
/// `ω_k = 10000^(−k/(C/4))`.
pub fn sinusoidal_pos_embed(x: f64, y: f64, channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || channels % 4 != 0 {
        return Err(CoreError::Input(format!(
            "positional embedding needs channels divisible by 4, got {channels}"
        )));
    }
    let quarter = channels / 4;
    let mut out = Vec::with_capacity(channels);
    for pos in [x, y] {
        for k in 0..quarter {
            let omega = 10000f64.powf(-(k as f64) / quarter as f64);
            out.push((pos * omega).sin());
            out.push((pos * omega).cos());
        }
    }
    Ok(out)
}

/// Embeddings of every integer position of a `rows×cols` map, row-major,
/// as `(rows·cols)×C` with position `(x, y) = (col, row)`.
pub fn pos_embed_grid(rows: usize, cols: usize, channels: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows * cols * channels);
    for r in 0..rows {
        for c in 0..cols {
            data.extend(sinusoidal_pos_embed(c as f64, r as f64, channels)?);
        }
    }
    Ok(Tensor::new(&[rows * cols, channels], data)?)
}

/// `δ·tanh(raw)`: offsets bounded by `δ` per coordinate.
pub fn clamp_offsets(tape: &Tape, raw: &Tensor, delta: f64) -> Result<Tensor> {
    Ok(tape.scale(&tape.tanh(raw)?, delta)?)
}

/// Per-head reference points in normalized image coordinates `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefPointPattern {
    pub heads: Vec<[(f64, f64); 4]>,
}

impl RefPointPattern {
    /// Eight heads over a 2-row × 4-column partition of the image; head `h`
    /// owns cell `(h / 4, h % 4)` and places its four points at the centers
    /// of that cell's quadrants.
    pub fn partitioned() -> Self {
        let heads = (0..8)
            .map(|h| {
                let (row, col) = ((h / 4) as f64, (h % 4) as f64);
                let mut pts = [(0.0, 0.0); 4];
                for (q, p) in pts.iter_mut().enumerate() {
                    let (qy, qx) = ((q / 2) as f64, (q % 2) as f64);
                    *p = ((col + 0.25 + 0.5 * qx) / 4.0, (row + 0.25 + 0.5 * qy) / 2.0);
                }
                pts
            })
            .collect();
        Self { heads }
    }

    /// Cell `[x0, x1) × [y0, y1)` owned by head `h` in the partition.
    pub fn cell(h: usize) -> (f64, f64, f64, f64) {
        let (row, col) = ((h / 4) as f64, (h % 4) as f64);
        (col / 4.0, (col + 1.0) / 4.0, row / 2.0, (row + 1.0) / 2.0)
    }
}

/// Where the inter-camera attention anchors its samples.
#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    /// Fixed per-head points shared by every query.
    Pattern(RefPointPattern),
    /// Every head samples around the query's own normalized pixel position.
    QueryPixel,
}

/// What an attention call produced besides its output, for inspection.
#[derive(Clone, Debug)]
pub struct AttnTrace {
    /// Attention weights; each softmax group runs along the last axis.
    pub weights: Tensor,
    /// Offsets as applied, normalized units, last axis `(x, y)`.
    pub offsets: Tensor,
    /// Weighted samples before the output projection.
    pub sampled: Tensor,
    /// Output projection of `sampled`, before any residual.
    pub attended: Tensor,
}

fn check_map(op: &str, t: &Tensor, channels: usize) -> Result<(usize, usize)> {
    if t.rank() != 3 || t.shape()[2] != channels {
        return Err(CoreError::Input(format!(
            "{op}: expected an h×w×{channels} map, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Offset bias placing point `k` of head `h` at radius `(k+1)·step` in
/// direction `2πh/H`, in normalized units of a `rows×cols` map.
fn radial_offsets(heads: usize, points: usize, rows: usize, cols: usize, step: f64) -> Vec<f64> {
    let mut b = Vec::with_capacity(heads * points * 2);
    for h in 0..heads {
        let a = 2.0 * std::f64::consts::PI * h as f64 / heads as f64;
        for k in 0..points {
            let r = (k + 1) as f64 * step;
            b.push(r * a.cos() / cols as f64);
            b.push(r * a.sin() / rows as f64);
        }
    }
    b
}

/// Normalized centers `((c+0.5)/cols, (r+0.5)/rows)` of every cell.
fn cell_centers(rows: usize, cols: usize) -> Vec<(f64, f64)> {
    (0..rows * cols)
        .map(|i| (((i % cols) as f64 + 0.5) / cols as f64, ((i / cols) as f64 + 0.5) / rows as f64))
        .collect()
}

/// Pixel sampling positions `(ref + Δ)·(W, H) − 0.5`.
fn to_pixels(tape: &Tape, offsets: &Tensor, reference: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let loc = tape.add(offsets, reference)?;
    let scale = Tensor::new(&[2], vec![cols as f64, rows as f64])?;
    Ok(tape.add_scalar(&tape.mul(&loc, &scale)?, -0.5)?)
}

fn tile_channels(tape: &Tape, map: &Tensor, times: usize) -> Result<Tensor> {
    let copies: Vec<&Tensor> = std::iter::repeat_n(map, times).collect();
    Ok(tape.concat(&copies, 2)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterCimConfig {
    pub channels: usize,
    pub cameras: usize,
    pub heads: usize,
    pub points: usize,
    /// Offset bound `δ`; `None` leaves offsets unclamped.
    pub delta: Option<f64>,
    pub reference: Reference,
    pub camera_embed: bool,
    pub ffn_hidden: usize,
}

impl InterCimConfig {
    pub fn proposed(channels: usize, cameras: usize, delta: f64) -> Self {
        let pattern = RefPointPattern::partitioned();
        Self {
            channels,
            cameras,
            heads: pattern.heads.len(),
            points: 4,
            delta: Some(delta),
            reference: Reference::Pattern(pattern),
            camera_embed: true,
            ffn_hidden: 2 * channels,
        }
    }

    /// Reference at the query pixel, no clamp, no camera embeddings.
    pub fn conventional(channels: usize, cameras: usize) -> Self {
        Self {
            delta: None,
            reference: Reference::QueryPixel,
            camera_embed: false,
            ..Self::proposed(channels, cameras, 0.0)
        }
    }

    pub fn init(&self, init: &mut Init, prefix: &str) -> Result<()> {
        let (c, hp) = (self.channels, self.heads * self.points);
        if self.camera_embed {
            init.normal(&format!("{prefix}.cam_embed"), &[self.cameras, c], 1.0)?;
        }
        for mlp in ["off", "attw"] {
            let out = if mlp == "off" { 2 * hp } else { hp };
            let gain = if mlp == "off" { 0.05 } else { 0.1 };
            init.mlp2(&format!("{prefix}.{mlp}"), c, c, out, gain)?;
            if self.camera_embed {
                init.normal(&format!("{prefix}.{mlp}.cam"), &[c, c], (1.0 / c as f64).sqrt())?;
            }
        }
        init.linear(&format!("{prefix}.out"), self.heads * c, c, 0.5)?;
        init.layer_norm(&format!("{prefix}.ln"), c)?;
        init.ffn_block(prefix, c, self.ffn_hidden)
    }

    /// Offset bias for the query-pixel reference, spreading each head's
    /// points around the query as in the usual deformable-attention init.
    pub fn spread_offsets(&self, store: &mut bevr_tensor::ParamStore, prefix: &str, rows: usize, cols: usize) -> Result<()> {
        let b = radial_offsets(self.heads, self.points, rows, cols, 1.0);
        store.set(&format!("{prefix}.off.1.b"), Tensor::new(&[b.len()], b)?)?;
        Ok(())
    }
}

/// Per-camera output of the offset or weight MLP: the hidden layer sees the
/// query embedding plus, when enabled, a projection of the sampled camera's
/// embedding.
fn camera_mlp(ctx: &Ctx, prefix: &str, q: &Tensor, cam_rows: Option<&Tensor>) -> Result<Tensor> {
    let t = ctx.tape;
    let mut pre = nn::linear(ctx, &format!("{prefix}.0"), q)?;
    if let Some(c) = cam_rows {
        pre = t.add(&pre, c)?;
    }
    nn::linear(ctx, &format!("{prefix}.1"), &t.relu(&pre)?)
}

/// Inter-camera deformable attention over one feature level.
///
/// Every pixel `p` of every camera `i` is a query with
/// `q_emb = F_i(p) + P(p) + c_i`. Head `h` reads feature map `F_j` at
/// `r + Δ_{h,r,j}` for each reference point `r` and camera `j`; its weights
/// are normalized jointly over `(r, j)`. Head results are projected and
/// summed, then pass through `LN(x + ·)` and an FFN block.
///
/// Trace shapes, with `N` queries camera-major: weights `N×H×(P·N_c)`
/// ordered `(r, j)`, offsets `N×H×P×N_c×2`, sampled `N×(H·C)`.
pub fn inter_camera_attn(
    ctx: &Ctx,
    prefix: &str,
    cfg: &InterCimConfig,
    maps: &[Tensor],
) -> Result<(Vec<Tensor>, AttnTrace)> {
    let t = ctx.tape;
    let (c, heads, points, nc) = (cfg.channels, cfg.heads, cfg.points, cfg.cameras);
    if maps.len() != nc {
        return Err(CoreError::Input(format!("inter-camera attention expects {nc} maps, got {}", maps.len())));
    }
    let (rows, cols) = check_map("inter-camera attention", &maps[0], c)?;
    for m in maps {
        if m.shape() != maps[0].shape() {
            return Err(CoreError::Input(format!(
                "inter-camera attention: camera maps disagree in shape ({:?} vs {:?})",
                m.shape(),
                maps[0].shape()
            )));
        }
    }
    let hw = rows * cols;
    let n = nc * hw;
    let flat: Vec<Tensor> = maps.iter().map(|m| t.reshape(m, &[hw, c])).collect::<Result<_, _>>()?;
    let x = t.concat(&flat.iter().collect::<Vec<_>>(), 0)?;

    let pe = pos_embed_grid(rows, cols, c)?;
    let pe_all = t.concat(&std::iter::repeat_n(&pe, nc).collect::<Vec<_>>(), 0)?;
    let mut q = t.add(&x, &pe_all)?;
    let query_cam: Vec<usize> = (0..n).map(|i| i / hw).collect();
    let cam_embed = if cfg.camera_embed {
        let e = ctx.p(&format!("{prefix}.cam_embed"))?;
        q = t.add(&q, &t.gather_rows(e, &query_cam)?)?;
        Some(e)
    } else {
        None
    };

    let mut offsets = Vec::with_capacity(nc);
    let mut logits = Vec::with_capacity(nc);
    for j in 0..nc {
        let mut per = Vec::with_capacity(2);
        for mlp in ["off", "attw"] {
            let name = format!("{prefix}.{mlp}");
            let cam_rows = match cam_embed {
                Some(e) => {
                    let ej = t.slice(e, 0, j, 1)?;
                    Some(t.matmul(&ej, ctx.p(&format!("{name}.cam"))?)?)
                }
                None => None,
            };
            per.push(camera_mlp(ctx, &name, &q, cam_rows.as_ref())?);
        }
        let raw = t.reshape(&per[0], &[n, heads, points, 1, 2])?;
        offsets.push(match cfg.delta {
            Some(d) => clamp_offsets(t, &raw, d)?,
            None => raw,
        });
        logits.push(t.reshape(&per[1], &[n, heads, points, 1])?);
    }
    let offsets = t.concat(&offsets.iter().collect::<Vec<_>>(), 3)?;
    let logits = t.concat(&logits.iter().collect::<Vec<_>>(), 3)?;
    let weights = t.softmax(&t.reshape(&logits, &[n, heads, points * nc])?, 2)?;
    let w4 = t.reshape(&weights, &[n, heads, points, nc])?;

    let reference = match &cfg.reference {
        Reference::Pattern(p) => {
            let mut d = Vec::with_capacity(n * heads * points * 2);
            for _ in 0..n {
                for pts in &p.heads {
                    for &(px, py) in pts {
                        d.extend([px, py]);
                    }
                }
            }
            Tensor::new(&[n, heads, points, 2], d)?
        }
        Reference::QueryPixel => {
            let centers = cell_centers(rows, cols);
            let mut d = Vec::with_capacity(n * heads * points * 2);
            for i in 0..n {
                let (px, py) = centers[i % hw];
                for _ in 0..heads * points {
                    d.extend([px, py]);
                }
            }
            Tensor::new(&[n, heads, points, 2], d)?
        }
    };

    let mut sampled: Option<Tensor> = None;
    for (j, map) in maps.iter().enumerate() {
        let off_j = t.reshape(&t.slice(&offsets, 3, j, 1)?, &[n, heads, points, 2])?;
        let pts = to_pixels(t, &off_j, &reference, rows, cols)?;
        let w_j = t.reshape(&t.slice(&w4, 3, j, 1)?, &[n, heads, points])?;
        let tiled = tile_channels(t, map, heads)?;
        let s = t.deform_sample(&tiled, &pts, &w_j)?;
        sampled = Some(match sampled {
            Some(acc) => t.add(&acc, &s)?,
            None => s,
        });
    }
    let sampled = sampled.expect("at least one camera");
    let attended = nn::linear(ctx, &format!("{prefix}.out"), &sampled)?;
    let y = nn::layer_norm(ctx, &format!("{prefix}.ln"), &t.add(&x, &attended)?)?;
    let y = nn::ffn_block(ctx, prefix, &y)?;
    let outs = (0..nc)
        .map(|i| Ok(t.reshape(&t.slice(&y, 0, i * hw, hw)?, &[rows, cols, c])?))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        outs,
        AttnTrace {
            weights,
            offsets,
            sampled,
            attended,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttnConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_hidden: usize,
}

impl SelfAttnConfig {
    pub fn init(&self, init: &mut Init, prefix: &str) -> Result<()> {
        let (c, hz) = (self.channels, self.heads * self.points);
        init.linear(&format!("{prefix}.value"), c, c, 1.0)?;
        init.mlp2(&format!("{prefix}.off"), c, c, 2 * hz, 0.05)?;
        init.mlp2(&format!("{prefix}.attw"), c, c, hz, 0.1)?;
        init.linear(&format!("{prefix}.out"), c, c, 0.5)?;
        init.layer_norm(&format!("{prefix}.ln"), c)?;
        init.ffn_block(prefix, c, self.ffn_hidden)
    }

    /// Spread the sampling points of each head radially, one cell apart.
    pub fn spread_offsets(&self, store: &mut bevr_tensor::ParamStore, prefix: &str, rows: usize, cols: usize) -> Result<()> {
        let b = radial_offsets(self.heads, self.points, rows, cols, 1.0);
        store.set(&format!("{prefix}.off.1.b"), Tensor::new(&[b.len()], b)?)?;
        Ok(())
    }
}

/// Deformable self-attention within a BEV query map.
///
/// Offsets and weights come from `Q(p) + P(p)`; values are a linear
/// projection of `Q`. Head `h` owns channels `h·C/H..(h+1)·C/H` of the
/// values and normalizes its weights over its points. The block returns
/// `FFN-block(LN(Q + out(·)))`.
///
/// Trace shapes (`N = rows·cols`): weights `N×H×Z`, offsets `N×H×Z×2`,
/// sampled `N×C`.
pub fn bev_self_attn(ctx: &Ctx, prefix: &str, cfg: &SelfAttnConfig, q_map: &Tensor) -> Result<(Tensor, AttnTrace)> {
    let t = ctx.tape;
    let (c, heads, points) = (cfg.channels, cfg.heads, cfg.points);
    let (rows, cols) = check_map("self-attention", q_map, c)?;
    if c % heads != 0 {
        return Err(CoreError::Input(format!("{c} channels cannot be split over {heads} heads")));
    }
    let n = rows * cols;
    let x = t.reshape(q_map, &[n, c])?;
    let q = t.add(&x, &pos_embed_grid(rows, cols, c)?)?;
    let v = nn::linear(ctx, &format!("{prefix}.value"), &x)?;
    let v_map = t.reshape(&v, &[rows, cols, c])?;

    let offsets = t.reshape(&nn::mlp2(ctx, &format!("{prefix}.off"), &q)?, &[n, heads, points, 2])?;
    let logits = t.reshape(&nn::mlp2(ctx, &format!("{prefix}.attw"), &q)?, &[n, heads, points])?;
    let weights = t.softmax(&logits, 2)?;

    let mut refs = Vec::with_capacity(n * heads * points * 2);
    for (px, py) in cell_centers(rows, cols) {
        for _ in 0..heads * points {
            refs.extend([px, py]);
        }
    }
    let reference = Tensor::new(&[n, heads, points, 2], refs)?;
    let pts = to_pixels(t, &offsets, &reference, rows, cols)?;
    let sampled = t.deform_sample(&v_map, &pts, &weights)?;
    let attended = nn::linear(ctx, &format!("{prefix}.out"), &sampled)?;
    let y = nn::layer_norm(ctx, &format!("{prefix}.ln"), &t.add(&x, &attended)?)?;
    let y = nn::ffn_block(ctx, prefix, &y)?;
    Ok((
        t.reshape(&y, &[rows, cols, c])?,
        AttnTrace {
            weights,
            offsets,
            sampled,
            attended,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnConfig {
    pub channels: usize,
    pub heads: usize,
    pub anchors: usize,
    pub feature_levels: usize,
    pub cameras: usize,
}

impl CrossAttnConfig {
    pub fn init(&self, init: &mut Init, prefix: &str) -> Result<()> {
        let c = self.channels;
        let per_cam = self.heads * self.anchors * self.feature_levels;
        init.linear(&format!("{prefix}.value"), c, c, 1.0)?;
        init.mlp2(&format!("{prefix}.off"), c, c, 2 * per_cam * self.cameras, 0.02)?;
        init.mlp2(&format!("{prefix}.attw"), c, c, per_cam * self.cameras, 0.1)?;
        init.linear(&format!("{prefix}.out"), c, c, 0.5)?;
        init.layer_norm(&format!("{prefix}.ln"), c)
    }
}

/// Spatial cross-attention from a BEV query map into the camera features.
///
/// `features[i][l]` is level `l` of camera `i`. For query `p` and hit camera
/// `i`, head `h` reads the projected features `V_i^l` at
/// `T_i(p, z) + Δ_{i,z,l}` with weights normalized over `(z, l)`; hit
/// cameras are averaged. Output is `LN(Q + out(·))` where the query hits
/// some camera, `Q` unchanged elsewhere.
///
/// The offset MLP emits `N_c × N_l × H × Z × 2` values per query (camera
/// slots in rig order), the weight MLP `N_c × H × N_l × Z`.
///
/// Trace shapes: weights `N×N_c×H×(N_l·Z)`, offsets
/// `N×(N_c·N_l)×H×Z×2` (both empty unless `ctx.full_traces`), sampled `N×C`
/// (after the hit average).
pub fn spatial_cross_attn(
    ctx: &Ctx,
    prefix: &str,
    cfg: &CrossAttnConfig,
    q_map: &Tensor,
    features: &[Vec<Tensor>],
    table: &LevelTable,
) -> Result<(Tensor, AttnTrace)> {
    let t = ctx.tape;
    let (c, heads, nz, nl, nc) = (cfg.channels, cfg.heads, cfg.anchors, cfg.feature_levels, cfg.cameras);
    let (rows, cols) = check_map("cross-attention", q_map, c)?;
    if (table.rows, table.cols) != (rows, cols) || table.cameras() != nc || table.anchors() != nz {
        return Err(CoreError::Input(format!(
            "cross-attention: table is {}×{} with {} cameras and {} anchors, queries are {rows}×{cols} with {nc} and {nz}",
            table.rows,
            table.cols,
            table.cameras(),
            table.anchors()
        )));
    }
    if features.len() != nc || features.iter().any(|f| f.len() != nl) {
        return Err(CoreError::Input(format!("cross-attention expects {nc} cameras × {nl} feature levels")));
    }
    if c % heads != 0 {
        return Err(CoreError::Input(format!("{c} channels cannot be split over {heads} heads")));
    }
    let n = rows * cols;
    let x = t.reshape(q_map, &[n, c])?;
    let q = t.add(&x, &pos_embed_grid(rows, cols, c)?)?;
    let hid_off = t.relu(&nn::linear(ctx, &format!("{prefix}.off.0"), &q)?)?;
    let hid_w = t.relu(&nn::linear(ctx, &format!("{prefix}.attw.0"), &q)?)?;

    // Each camera only evaluates the rows of queries that hit it.
    let hit_sets: Vec<Vec<usize>> = (0..n).map(|cell| table.hit_set(cell)).collect();
    let mut sampled = Tensor::zeros(&[n, c]);
    for i in 0..nc {
        let rows_i: Vec<usize> = (0..n).filter(|&cell| hit_sets[cell].contains(&i)).collect();
        if rows_i.is_empty() {
            continue;
        }
        let m = rows_i.len();
        let off = nn::linear_block(ctx, &format!("{prefix}.off.1"), &t.gather_rows(&hid_off, &rows_i)?, nc, i)?;
        let off = t.reshape(&off, &[m, nl, heads, nz, 2])?;
        let logits = nn::linear_block(ctx, &format!("{prefix}.attw.1"), &t.gather_rows(&hid_w, &rows_i)?, nc, i)?;
        let w = t.softmax(&t.reshape(&logits, &[m, heads, nl * nz])?, 2)?;
        let w = t.reshape(&w, &[m, heads, nl, nz])?;
        let mut refs = Vec::with_capacity(m * heads * nz * 2);
        for &cell in &rows_i {
            for _ in 0..heads {
                for z in 0..nz {
                    let (u, v) = table.normalized(cell, i, z).unwrap_or((OFF_IMAGE, OFF_IMAGE));
                    refs.extend([u, v]);
                }
            }
        }
        let reference = Tensor::new(&[m, heads, nz, 2], refs)?;
        let mut cam: Option<Tensor> = None;
        for (l, feat) in features[i].iter().enumerate() {
            let (fh, fw) = check_map("cross-attention features", feat, c)?;
            let value = nn::linear(ctx, &format!("{prefix}.value"), &t.reshape(feat, &[fh * fw, c])?)?;
            let value = t.reshape(&value, &[fh, fw, c])?;
            let off_l = t.reshape(&t.slice(&off, 1, l, 1)?, &[m, heads, nz, 2])?;
            let pts = to_pixels(t, &off_l, &reference, fh, fw)?;
            let w_l = t.reshape(&t.slice(&w, 2, l, 1)?, &[m, heads, nz])?;
            let s = t.deform_sample(&value, &pts, &w_l)?;
            cam = Some(match cam {
                Some(acc) => t.add(&acc, &s)?,
                None => s,
            });
        }
        let scale: Vec<f64> = rows_i.iter().map(|&cell| 1.0 / hit_sets[cell].len() as f64).collect();
        let scaled = t.mul(&cam.expect("at least one level"), &Tensor::new(&[m, 1], scale)?)?;
        sampled = t.add(&sampled, &t.scatter_rows(&scaled, &rows_i, n)?)?;
    }
    let attended = nn::linear(ctx, &format!("{prefix}.out"), &sampled)?;
    let updated = nn::layer_norm(ctx, &format!("{prefix}.ln"), &t.add(&x, &attended)?)?;
    let hit: Vec<f64> = hit_sets.iter().map(|hs| f64::from(!hs.is_empty() as u8)).collect();
    let miss: Vec<f64> = hit.iter().map(|h| 1.0 - h).collect();
    let y = t.add(
        &t.mul(&updated, &Tensor::new(&[n, 1], hit)?)?,
        &t.mul(&x, &Tensor::new(&[n, 1], miss)?)?,
    )?;
    let (weights, offsets) = if ctx.full_traces {
        dense_cross_trace(ctx, prefix, &hid_off, &hid_w, [n, nc, nl, heads, nz])?
    } else {
        (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
    };
    Ok((
        t.reshape(&y, &[rows, cols, c])?,
        AttnTrace {
            weights,
            offsets,
            sampled,
            attended,
        },
    ))
}

/// Offsets and weights of every query for every camera slot, hit or not.
fn dense_cross_trace(
    ctx: &Ctx,
    prefix: &str,
    hid_off: &Tensor,
    hid_w: &Tensor,
    [n, nc, nl, heads, nz]: [usize; 5],
) -> Result<(Tensor, Tensor)> {
    let t = Tape::no_grad();
    let dense = |name: &str, h: &Tensor| -> Result<Tensor> {
        let w = ctx.p(&format!("{prefix}.{name}.w"))?.detach();
        let b = ctx.p(&format!("{prefix}.{name}.b"))?.detach();
        Ok(t.add(&t.matmul(&h.detach(), &w)?, &b)?)
    };
    let offsets = t.reshape(&dense("off.1", hid_off)?, &[n, nc * nl, heads, nz, 2])?;
    let logits = t.reshape(&dense("attw.1", hid_w)?, &[n, nc, heads, nl * nz])?;
    Ok((t.softmax(&logits, 3)?, offsets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_embedding_is_sin_zero_cos_one() {
        let e = sinusoidal_pos_embed(0.0, 0.0, 16).unwrap();
        for (k, v) in e.iter().enumerate() {
            assert_eq!(*v, if k % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(sinusoidal_pos_embed(0.0, 0.0, 6).is_err());
    }

    #[test]
    fn embedding_norm_is_position_independent() {
        let norm = |x, y| sinusoidal_pos_embed(x, y, 32).unwrap().iter().map(|v| v * v).sum::<f64>();
        for (x, y) in [(0.0, 0.0), (3.0, 7.0), (-2.5, 100.0)] {
            assert!((norm(x, y) - 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_values() {
        let tape = Tape::no_grad();
        let raw = Tensor::new(&[3], vec![0.0, 1.0, 1e3]).unwrap();
        let o = clamp_offsets(&tape, &raw, 0.25).unwrap();
        assert_eq!(o.data()[0], 0.0);
        assert!((o.data()[1] - 0.190_398_9).abs() < 1e-6);
        assert_eq!(o.data()[2], 0.25);
    }

    #[test]
    fn partition_tiles_the_unit_square() {
        let p = RefPointPattern::partitioned();
        assert_eq!(p.heads.len(), 8);
        let mut area = 0.0;
        for (h, pts) in p.heads.iter().enumerate() {
            let (x0, x1, y0, y1) = RefPointPattern::cell(h);
            area += (x1 - x0) * (y1 - y0);
            for &(x, y) in pts {
                assert!(x0 < x && x < x1 && y0 < y && y < y1);
            }
        }
        assert!((area - 1.0).abs() < 1e-15);
        assert_eq!(p.heads[0][0], (0.0625, 0.125));
        assert_eq!(p.heads[7][3], (0.9375, 0.875));
    }
}
