//! The three attention blocks against direct loop-by-loop evaluation of
//! their defining sums, on small grids with freshly drawn parameters.

#![allow(dead_code)]

use bevr_core::attention::{
    bev_self_attn, inter_camera_attn, spatial_cross_attn, CrossAttnConfig, InterCimConfig, Reference,
    SelfAttnConfig, OFF_IMAGE,
};
use bevr_core::geometry::{precompute_projection_table, BevGridSpec, LevelTable, Rig};
use bevr_core::nn::{Ctx, Init};
use bevr_tensor::{NormMode, ParamStore, Precision, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Replace every trainable parameter with fresh uniform values; offset
/// heads get smaller ones so samples land near their references.
fn redraw(store: &mut ParamStore, rng: &mut ChaCha8Rng, offset_scale: f64) {
    let names: Vec<(String, Vec<usize>)> = store
        .iter()
        .filter(|(n, _)| !bevr_tensor::is_buffer(n))
        .map(|(n, t)| (n.to_owned(), t.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        let t = Tensor::from_fn(&shape, |_| {
            let u = rng.random_range(-0.5..0.5);
            if name.ends_with("gamma") {
                1.0 + u
            } else if name.contains(".off.1") {
                offset_scale * u
            } else {
                u
            }
        });
        store.set(&name, t).unwrap();
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0))
}

struct P<'a>(&'a ParamStore);

impl P<'_> {
    fn v(&self, name: &str) -> &[f64] {
        self.0.get(name).unwrap().data()
    }

    /// `x·W + b` for a row vector.
    fn lin(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w = self.0.get(&format!("{prefix}.w")).unwrap();
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        assert_eq!(cin, x.len());
        let b = self.v(&format!("{prefix}.b"));
        (0..cout)
            .map(|o| b[o] + (0..cin).map(|i| x[i] * w.data()[i * cout + o]).sum::<f64>())
            .collect()
    }

    fn ln(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let (g, b) = (self.v(&format!("{prefix}.gamma")), self.v(&format!("{prefix}.beta")));
        x.iter()
            .enumerate()
            .map(|(i, v)| g[i] * (v - mean) / (var + 1e-5).sqrt() + b[i])
            .collect()
    }

    fn mlp2(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.lin(&format!("{prefix}.0"), x).into_iter().map(|v| v.max(0.0)).collect();
        self.lin(&format!("{prefix}.1"), &h)
    }

    /// `LN(y + FFN(y))`.
    fn ffn_block(&self, prefix: &str, y: &[f64]) -> Vec<f64> {
        let f = self.mlp2(&format!("{prefix}.ffn"), y);
        let s: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a + b).collect();
        self.ln(&format!("{prefix}.ln_ffn"), &s)
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Sinusoidal embedding written out from its definition.
fn pos_embed(x: f64, y: f64, c: usize) -> Vec<f64> {
    let quarter = c / 4;
    let mut out = Vec::new();
    for pos in [x, y] {
        for k in 0..quarter {
            let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
            out.push((pos * omega).sin());
            out.push((pos * omega).cos());
        }
    }
    out
}

/// Texel `(row, col)`'s channels `lo..hi`, zero outside the map.
fn texel(map: &Tensor, row: i64, col: i64, lo: usize, hi: usize) -> Vec<f64> {
    let (h, w, c) = (map.shape()[0] as i64, map.shape()[1] as i64, map.shape()[2]);
    if row < 0 || col < 0 || row >= h || col >= w {
        return vec![0.0; hi - lo];
    }
    let base = (row * w + col) as usize * c;
    map.data()[base + lo..base + hi].to_vec()
}

/// Bilinear read at normalized `(x, y)`, i.e. pixel `(x·W − ½, y·H − ½)`.
fn read(map: &Tensor, x: f64, y: f64, lo: usize, hi: usize) -> Vec<f64> {
    let (h, w) = (map.shape()[0] as f64, map.shape()[1] as f64);
    let (px, py) = (x * w - 0.5, y * h - 0.5);
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut out = vec![0.0; hi - lo];
    for (dr, dc, wt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (0, 1, fx * (1.0 - fy)),
        (1, 0, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let t = texel(map, y0 as i64 + dr, x0 as i64 + dc, lo, hi);
        for (o, v) in out.iter_mut().zip(t) {
            *o += wt * v;
        }
    }
    out
}

fn row_of(map: &Tensor, i: usize) -> Vec<f64> {
    let c = map.shape()[map.rank() - 1];
    map.data()[i * c..(i + 1) * c].to_vec()
}

/// Largest elementwise gap between implementation and oracle over a run
/// of draws, with where it occurred.
#[derive(Clone, Debug, Default)]
pub struct Agreement {
    pub draws: usize,
    pub compared: usize,
    pub max_err: f64,
    pub worst: String,
    /// Cross-attention only: cells with and without a hit camera.
    pub hit_cells: usize,
    pub missed_cells: usize,
}

impl Agreement {
    fn compare(&mut self, got: &[f64], want: &[f64], what: impl Fn() -> String) {
        let err = if got.len() == want.len() {
            got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        self.compared += want.len();
        if !(err <= self.max_err) {
            self.max_err = err;
            self.worst = what();
        }
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Inter-camera attention evaluated query by query.
fn inter_oracle(p: &P, cfg: &InterCimConfig, maps: &[Tensor]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (rows, cols, c) = (maps[0].shape()[0], maps[0].shape()[1], cfg.channels);
    let (heads, points, nc) = (cfg.heads, cfg.points, cfg.cameras);
    let mut outs = Vec::new();
    let mut sampled_all = Vec::new();
    let cam_embed = |j: usize| p.v("inter.cam_embed")[j * c..(j + 1) * c].to_vec();
    for i in 0..nc {
        for pix in 0..rows * cols {
            let (r, col) = (pix / cols, pix % cols);
            let x = row_of(&maps[i], pix);
            let mut q = add(&x, &pos_embed(col as f64, r as f64, c));
            if cfg.camera_embed {
                q = add(&q, &cam_embed(i));
            }
            // per camera j: offsets [h][k][2] and logits [h][k]
            let mut off = vec![vec![vec![[0.0; 2]; points]; heads]; nc];
            let mut logit = vec![vec![vec![0.0; points]; heads]; nc];
            for j in 0..nc {
                let mut mlp_out = Vec::new();
                for mlp in ["off", "attw"] {
                    let mut pre = p.lin(&format!("inter.{mlp}.0"), &q);
                    if cfg.camera_embed {
                        let proj = {
                            let w = p.0.get(&format!("inter.{mlp}.cam")).unwrap();
                            let e = cam_embed(j);
                            (0..c)
                                .map(|o| (0..c).map(|k| e[k] * w.data()[k * c + o]).sum::<f64>())
                                .collect::<Vec<_>>()
                        };
                        pre = add(&pre, &proj);
                    }
                    let hid: Vec<f64> = pre.into_iter().map(|v| v.max(0.0)).collect();
                    mlp_out.push(p.lin(&format!("inter.{mlp}.1"), &hid));
                }
                for h in 0..heads {
                    for k in 0..points {
                        for a in 0..2 {
                            let raw = mlp_out[0][(h * points + k) * 2 + a];
                            off[j][h][k][a] = match cfg.delta {
                                Some(d) => d * raw.tanh(),
                                None => raw,
                            };
                        }
                        logit[j][h][k] = mlp_out[1][h * points + k];
                    }
                }
            }
            let mut sampled = vec![0.0; heads * c];
            for h in 0..heads {
                // one softmax over every (point, camera) pair of the head
                let flat: Vec<f64> = (0..points).flat_map(|k| (0..nc).map(move |j| (k, j))).map(|(k, j)| logit[j][h][k]).collect();
                let w = softmax(&flat);
                for k in 0..points {
                    let (rx, ry) = match &cfg.reference {
                        Reference::Pattern(pat) => pat.heads[h][k],
                        Reference::QueryPixel => ((col as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64),
                    };
                    for j in 0..nc {
                        let v = read(&maps[j], rx + off[j][h][k][0], ry + off[j][h][k][1], 0, c);
                        for ch in 0..c {
                            sampled[h * c + ch] += w[k * nc + j] * v[ch];
                        }
                    }
                }
            }
            let attended = p.lin("inter.out", &sampled);
            let y = p.ln("inter.ln", &add(&x, &attended));
            outs.push(p.ffn_block("inter", &y));
            sampled_all.push(sampled);
        }
    }
    (outs, sampled_all)
}

pub fn inter_agreement(draws: usize, seed: u64) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agr = Agreement { draws, ..Agreement::default() };
    for draw in 0..draws {
        let c = [8, 16][draw % 2];
        let nc = rng.random_range(1..=3);
        let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let cfg = if draw % 4 == 3 {
            InterCimConfig::conventional(c, nc)
        } else {
            InterCimConfig::proposed(c, nc, 0.25)
        };
        let mut store = ParamStore::new(Precision::F64);
        cfg.init(&mut Init::new(&mut store, draw as u64), "inter").unwrap();
        redraw(&mut store, &mut rng, 0.4);
        let maps: Vec<Tensor> = (0..nc).map(|_| random_map(&mut rng, rows, cols, c)).collect();

        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store, NormMode::Eval);
        let (out, trace) = inter_camera_attn(&ctx, "inter", &cfg, &maps).unwrap();
        let (want, want_sampled) = inter_oracle(&P(&store), &cfg, &maps);
        let hw = rows * cols;
        for (n, w) in want.iter().enumerate() {
            agr.compare(&row_of(&out[n / hw], n % hw), w, || format!("draw {draw} query {n} output"));
            agr.compare(&row_of(&trace.sampled, n), &want_sampled[n], || format!("draw {draw} query {n} sampled"));
        }
    }
    agr
}

/// BEV self-attention evaluated cell by cell.
fn self_oracle(p: &P, cfg: &SelfAttnConfig, q_map: &Tensor) -> Vec<Vec<f64>> {
    let (rows, cols, c) = (q_map.shape()[0], q_map.shape()[1], cfg.channels);
    let d = c / cfg.heads;
    let value: Vec<f64> = (0..rows * cols).flat_map(|i| p.lin("sa.value", &row_of(q_map, i))).collect();
    let value = Tensor::new(&[rows, cols, c], value).unwrap();
    (0..rows * cols)
        .map(|i| {
            let (r, col) = (i / cols, i % cols);
            let x = row_of(q_map, i);
            let q = add(&x, &pos_embed(col as f64, r as f64, c));
            let off = p.mlp2("sa.off", &q);
            let logit = p.mlp2("sa.attw", &q);
            let (rx, ry) = ((col as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64);
            let mut sampled = vec![0.0; c];
            for h in 0..cfg.heads {
                let w = softmax(&logit[h * cfg.points..(h + 1) * cfg.points]);
                for k in 0..cfg.points {
                    let o = (h * cfg.points + k) * 2;
                    let v = read(&value, rx + off[o], ry + off[o + 1], h * d, (h + 1) * d);
                    for (j, vv) in v.iter().enumerate() {
                        sampled[h * d + j] += w[k] * vv;
                    }
                }
            }
            let y = p.ln("sa.ln", &add(&x, &p.lin("sa.out", &sampled)));
            p.ffn_block("sa", &y)
        })
        .collect()
}

pub fn self_agreement(draws: usize, seed: u64) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agr = Agreement { draws, ..Agreement::default() };
    for draw in 0..draws {
        let c = [8, 16][draw % 2];
        let heads = [1, 2, 4][draw % 3];
        let cfg = SelfAttnConfig {
            channels: c,
            heads,
            points: rng.random_range(1..=4),
            ffn_hidden: 2 * c,
        };
        let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mut store = ParamStore::new(Precision::F64);
        cfg.init(&mut Init::new(&mut store, draw as u64), "sa").unwrap();
        redraw(&mut store, &mut rng, 0.4);
        let q_map = random_map(&mut rng, rows, cols, c);

        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store, NormMode::Eval);
        let (out, _) = bev_self_attn(&ctx, "sa", &cfg, &q_map).unwrap();
        for (i, w) in self_oracle(&P(&store), &cfg, &q_map).iter().enumerate() {
            agr.compare(&row_of(&out, i), w, || format!("draw {draw} cell {i}"));
        }
    }
    agr
}

/// Spatial cross-attention evaluated cell by cell from the projection table.
fn cross_oracle(p: &P, cfg: &CrossAttnConfig, q_map: &Tensor, features: &[Vec<Tensor>], table: &LevelTable) -> Vec<Vec<f64>> {
    let (rows, cols, c) = (q_map.shape()[0], q_map.shape()[1], cfg.channels);
    let (heads, nz, nl, nc) = (cfg.heads, cfg.anchors, cfg.feature_levels, cfg.cameras);
    let d = c / heads;
    let values: Vec<Vec<Tensor>> = features
        .iter()
        .map(|cam| {
            cam.iter()
                .map(|f| {
                    let (h, w) = (f.shape()[0], f.shape()[1]);
                    let v = (0..h * w).flat_map(|i| p.lin("ca.value", &row_of(f, i))).collect();
                    Tensor::new(&[h, w, c], v).unwrap()
                })
                .collect()
        })
        .collect();
    (0..rows * cols)
        .map(|cell| {
            let (r, col) = (cell / cols, cell % cols);
            let x = row_of(q_map, cell);
            let hits: Vec<usize> = (0..nc).filter(|&i| (0..nz).any(|z| table.get(cell, i, z).valid)).collect();
            if hits.is_empty() {
                return x;
            }
            let q = add(&x, &pos_embed(col as f64, r as f64, c));
            let off = p.mlp2("ca.off", &q);
            let logit = p.mlp2("ca.attw", &q);
            let mut sampled = vec![0.0; c];
            for &i in &hits {
                for h in 0..heads {
                    let base = (i * heads + h) * nl * nz;
                    let w = softmax(&logit[base..base + nl * nz]);
                    for l in 0..nl {
                        for z in 0..nz {
                            let (u, v) = table.normalized(cell, i, z).unwrap_or((OFF_IMAGE, OFF_IMAGE));
                            let o = ((((i * nl + l) * heads + h) * nz) + z) * 2;
                            let s = read(&values[i][l], u + off[o], v + off[o + 1], h * d, (h + 1) * d);
                            for (j, sv) in s.iter().enumerate() {
                                sampled[h * d + j] += w[l * nz + z] * sv / hits.len() as f64;
                            }
                        }
                    }
                }
            }
            p.ln("ca.ln", &add(&x, &p.lin("ca.out", &sampled)))
        })
        .collect()
}

pub fn cross_agreement(draws: usize, seed: u64) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agr = Agreement { draws, ..Agreement::default() };
    for draw in 0..draws {
        let c = [8, 16][draw % 2];
        let rows = [2, 4, 8][rng.random_range(0..3)];
        let cols = [2, 4, 8][rng.random_range(0..3)];
        let anchors = vec![-1.0, 0.0, 1.0, 2.0][..rng.random_range(1..=4)].to_vec();
        let grid = BevGridSpec::new(rows, cols, (12.0, 12.0), c, anchors, 1).unwrap();
        let mut rig = Rig::random(&mut rng, 16, 24);
        rig.cameras.truncate(rng.random_range(1..=3));
        let table = precompute_projection_table(&grid, &rig.cameras);
        let level = table.level(0).unwrap();
        let cfg = CrossAttnConfig {
            channels: c,
            heads: [1, 2, 4][draw % 3],
            anchors: grid.z_anchors.len(),
            feature_levels: rng.random_range(1..=3),
            cameras: rig.cameras.len(),
        };
        let mut store = ParamStore::new(Precision::F64);
        cfg.init(&mut Init::new(&mut store, draw as u64), "ca").unwrap();
        redraw(&mut store, &mut rng, 0.1);
        let q_map = random_map(&mut rng, rows, cols, c);
        let features: Vec<Vec<Tensor>> = (0..cfg.cameras)
            .map(|_| (0..cfg.feature_levels).map(|l| random_map(&mut rng, 4 >> l, 6 >> l, c)).collect())
            .collect();

        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store, NormMode::Eval);
        let (out, _) = spatial_cross_attn(&ctx, "ca", &cfg, &q_map, &features, level).unwrap();
        for (cell, w) in cross_oracle(&P(&store), &cfg, &q_map, &features, level).iter().enumerate() {
            agr.compare(&row_of(&out, cell), w, || format!("draw {draw} cell {cell}"));
            if level.hit_set(cell).is_empty() {
                agr.missed_cells += 1;
            } else {
                agr.hit_cells += 1;
            }
        }
    }
    agr
}
