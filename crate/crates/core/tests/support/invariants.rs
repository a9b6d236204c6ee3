//! Attention traces under random and saturating parameters, and the two
//! measurements taken on them: softmax group sums and offset magnitudes.

#![allow(dead_code)]

use bevr_core::attention::{
    bev_self_attn, inter_camera_attn, spatial_cross_attn, AttnTrace, CrossAttnConfig, InterCimConfig, SelfAttnConfig,
};
use bevr_core::geometry::{precompute_projection_table, BevGridSpec, Rig};
use bevr_core::gradsuite::{tiny_model, tiny_rig};
use bevr_core::model::{forward, init_model};
use bevr_core::nn::{Ctx, Init};
use bevr_tensor::{NormMode, ParamStore, Precision, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest `|Σw − 1|` over the groups of the last axis; infinite when a
/// weight is negative or the tensor is empty.
pub fn normalization_error(weights: &Tensor) -> f64 {
    let k = weights.shape().last().copied().unwrap_or(0);
    if k == 0 || weights.is_empty() {
        return f64::INFINITY;
    }
    weights
        .data()
        .chunks(k)
        .map(|g| {
            if g.iter().any(|&w| !(w >= 0.0)) {
                f64::INFINITY
            } else {
                (g.iter().sum::<f64>() - 1.0).abs()
            }
        })
        .fold(0.0, f64::max)
}

pub fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0f64, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) })
}

/// Scale every trainable parameter by `gain` after a normal init, pushing
/// logits and raw offsets far into saturation for large gains.
fn scaled(store: &mut ParamStore, gain: f64) {
    let names: Vec<String> = store.names().filter(|n| !bevr_tensor::is_buffer(n)).map(str::to_owned).collect();
    for n in names {
        let t = store.get(&n).unwrap().map(|v| v * gain);
        store.set(&n, t).unwrap();
    }
}

fn map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_fn(&[h, w, c], |_| rng.random_range(-scale..scale))
}

pub fn inter_trace(seed: u64, gain: f64, input_scale: f64) -> AttnTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = InterCimConfig::proposed(8, 3, 0.25);
    let mut store = ParamStore::new(Precision::F64);
    cfg.init(&mut Init::new(&mut store, seed), "inter").unwrap();
    scaled(&mut store, gain);
    let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let maps: Vec<Tensor> = (0..3).map(|_| map(&mut rng, h, w, 8, input_scale)).collect();
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, NormMode::Eval);
    inter_camera_attn(&ctx, "inter", &cfg, &maps).unwrap().1
}

/// 4×4 query map, 2 heads of 4 points.
pub fn self_trace(seed: u64, gain: f64) -> AttnTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SelfAttnConfig { channels: 8, heads: 2, points: 4, ffn_hidden: 8 };
    let mut store = ParamStore::new(Precision::F64);
    cfg.init(&mut Init::new(&mut store, seed), "sa").unwrap();
    scaled(&mut store, gain);
    let q = map(&mut rng, 4, 4, 8, 1.0);
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, NormMode::Eval);
    bev_self_attn(&ctx, "sa", &cfg, &q).unwrap().1
}

/// 4×4 grid, random four-camera rig, 3 anchors, 2 feature levels, 2 heads.
pub fn cross_trace(seed: u64, gain: f64) -> AttnTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = BevGridSpec::new(4, 4, (16.0, 16.0), 8, vec![0.0, 1.0, 2.0], 1).unwrap();
    let rig = Rig::random(&mut rng, 16, 16);
    let table = precompute_projection_table(&grid, &rig.cameras);
    let cfg = CrossAttnConfig { channels: 8, heads: 2, anchors: 3, feature_levels: 2, cameras: 4 };
    let mut store = ParamStore::new(Precision::F64);
    cfg.init(&mut Init::new(&mut store, seed), "ca").unwrap();
    scaled(&mut store, gain);
    let q = map(&mut rng, 4, 4, 8, 1.0);
    let feats: Vec<Vec<Tensor>> = (0..4).map(|_| vec![map(&mut rng, 4, 4, 8, 1.0), map(&mut rng, 2, 2, 8, 1.0)]).collect();
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, NormMode::Eval);
    spatial_cross_attn(&ctx, "ca", &cfg, &q, &feats, table.level(0).unwrap()).unwrap().1
}

/// Every attention trace of one forward pass of the tiny model, labelled,
/// with the offset bound that applies (none for unclamped blocks).
pub fn model_traces(seed: u64) -> Vec<(String, AttnTrace, Option<f64>)> {
    let cfg = tiny_model();
    let store = init_model(&cfg, seed, Precision::F64).unwrap();
    let table = precompute_projection_table(&cfg.effective_grid(), &tiny_rig());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[8, 8, 3], |_| rng.random_range(0.0..1.0))).collect();
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, NormMode::Eval);
    let out = forward(&ctx, &cfg, &images, &table).unwrap();
    let mut traces = Vec::new();
    for (l, tr) in out.features.inter_traces.into_iter().enumerate() {
        traces.push((format!("inter-camera level {l}"), tr, Some(cfg.delta)));
    }
    for (s, level) in out.refined.traces.into_iter().enumerate() {
        for (k, layer) in level.into_iter().enumerate() {
            traces.push((format!("self-attention level {s} layer {k}"), layer.self_attn, None));
            traces.push((format!("cross-attention level {s} layer {k}"), layer.cross_attn, None));
        }
    }
    traces
}
