//! Finite-difference checks of every differentiable building block, from
//! single tape operations up to a tiny end-to-end model.

use std::collections::BTreeMap;

use bevr_tensor::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use bevr_tensor::{BnStats, Conv2dSpec, NormMode, OpKind, ParamStore, Precision, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bev_self_attn, inter_camera_attn, spatial_cross_attn, CrossAttnConfig, InterCimConfig, SelfAttnConfig,
};
use crate::class::Class;
use crate::error::{CoreError, Result};
use crate::geometry::{precompute_projection_table, BevGridSpec, CameraModel, ProjectionTable};
use crate::heads::{focal_loss, total_loss, FocalParams, LossWeights};
use crate::model::{forward, init_model, ModelConfig, Variant};
use crate::nn::{Ctx, Init};

pub const SUITE_RTOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Corrupt this operation's backward pass, scaling it by the factor.
    pub fault: Option<(OpKind, f64)>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Values bounded away from zero, so kinks at 0 are never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Points away from integer pixel coordinates, where bilinear reads kink.
fn off_grid(rng: &mut ChaCha8Rng, shape: &[usize], w: f64, h: f64) -> Tensor {
    let mut k = 0;
    Tensor::from_fn(shape, |_| {
        let extent = if k % 2 == 0 { w } else { h };
        k += 1;
        rng.random_range(-1..extent as i32 + 1) as f64 + rng.random_range(0.15..0.85)
    })
}

/// `Σ y ⊙ w` for a fixed random `w`, a readout with non-trivial gradients
/// everywhere.
fn project(tape: &Tape, y: &Tensor, seed: u64) -> bevr_tensor::Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00C0_FFEE);
    let w = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
    tape.sum(&tape.mul(y, &w)?)
}

fn to_tensor_err(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Shape {
            op: OpKind::Leaf,
            detail: other.to_string(),
        },
    }
}

type Probe = Box<dyn Fn(&Tape, &[Tensor]) -> bevr_tensor::Result<Tensor>>;

struct Check {
    name: &'static str,
    inputs: Vec<Tensor>,
    max_elements: usize,
    step: f64,
    f: Probe,
}

fn op(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&Tape, &[Tensor]) -> bevr_tensor::Result<Tensor> + 'static) -> Check {
    Check {
        name,
        inputs,
        max_elements: 24,
        step: 1e-5,
        f: Box::new(f),
    }
}

/// A check through a parameterized block: the inputs are `data` followed by
/// every trainable parameter of `store`; buffers are passed unchanged.
fn module(
    name: &'static str,
    store: &ParamStore,
    data: Vec<Tensor>,
    mode: NormMode,
    max_elements: usize,
    f: impl Fn(&Ctx, &[Tensor]) -> Result<Tensor> + 'static,
) -> Check {
    let mut names = Vec::new();
    let mut buffers = BTreeMap::new();
    let mut inputs = data;
    let n_data = inputs.len();
    for (k, v) in store.iter() {
        if bevr_tensor::is_buffer(k) {
            buffers.insert(k.to_owned(), v.clone());
        } else {
            names.push(k.to_owned());
            inputs.push(v.clone());
        }
    }
    Check {
        name,
        inputs,
        max_elements,
        step: 1e-5,
        f: Box::new(move |tape, xs| {
            let (d, p) = xs.split_at(n_data);
            let mut params = buffers.clone();
            params.extend(names.iter().cloned().zip(p.iter().cloned()));
            let ctx = Ctx::from_params(tape, params, mode);
            f(&ctx, d).map_err(to_tensor_err)
        }),
    }
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut v = Vec::new();
    v.push(op("matmul", vec![rand_tensor(rng, &[3, 4], 1.0), rand_tensor(rng, &[4, 5], 1.0)], |t, x| {
        project(t, &t.matmul(&x[0], &x[1])?, 1)
    }));
    v.push(op("add_broadcast", vec![rand_tensor(rng, &[3, 4], 1.0), rand_tensor(rng, &[4], 1.0)], |t, x| {
        project(t, &t.add(&x[0], &x[1])?, 2)
    }));
    v.push(op("sub", vec![rand_tensor(rng, &[2, 3], 1.0), rand_tensor(rng, &[2, 3], 1.0)], |t, x| {
        project(t, &t.sub(&x[0], &x[1])?, 3)
    }));
    v.push(op("mul", vec![rand_tensor(rng, &[2, 3], 1.0), rand_tensor(rng, &[3], 1.0)], |t, x| {
        project(t, &t.mul(&x[0], &x[1])?, 4)
    }));
    v.push(op("scale", vec![rand_tensor(rng, &[5], 1.0)], |t, x| project(t, &t.scale(&x[0], -1.7)?, 5)));
    v.push(op("add_scalar", vec![rand_tensor(rng, &[5], 1.0)], |t, x| {
        let y = t.add_scalar(&x[0], 0.3)?;
        project(t, &t.mul(&y, &y)?, 6)
    }));
    v.push(op(
        "conv2d_same",
        vec![rand_tensor(rng, &[5, 4, 2], 1.0), rand_tensor(rng, &[3, 3, 2, 3], 0.5)],
        |t, x| project(t, &t.conv2d(&x[0], &x[1], Conv2dSpec::same(3))?, 7),
    ));
    v.push(op(
        "conv2d_strided",
        vec![rand_tensor(rng, &[6, 6, 2], 1.0), rand_tensor(rng, &[3, 3, 2, 2], 0.5)],
        |t, x| project(t, &t.conv2d(&x[0], &x[1], Conv2dSpec::new(2, 1))?, 8),
    ));
    let bn_in = vec![rand_tensor(rng, &[3, 2, 3], 1.0), rand_tensor(rng, &[3], 1.0), rand_tensor(rng, &[3], 1.0)];
    v.push(op("batchnorm_train", bn_in.clone(), |t, x| {
        let (y, _) = t.batch_norm(&x[0], &x[1], &x[2], &BnStats::identity(3), NormMode::Train, 1e-5)?;
        project(t, &y, 9)
    }));
    v.push(op("batchnorm_eval", bn_in, |t, x| {
        let running = BnStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        };
        let (y, _) = t.batch_norm(&x[0], &x[1], &x[2], &running, NormMode::Eval, 1e-5)?;
        project(t, &y, 10)
    }));
    v.push(op(
        "layernorm",
        vec![rand_tensor(rng, &[4, 5], 1.0), rand_tensor(rng, &[5], 1.0), rand_tensor(rng, &[5], 1.0)],
        |t, x| project(t, &t.layer_norm(&x[0], &x[1], &x[2], 1e-5)?, 11),
    ));
    v.push(op("relu", vec![off_zero(rng, &[12])], |t, x| project(t, &t.relu(&x[0])?, 12)));
    v.push(op("tanh", vec![rand_tensor(rng, &[8], 2.0)], |t, x| project(t, &t.tanh(&x[0])?, 13)));
    v.push(op("sigmoid", vec![rand_tensor(rng, &[8], 3.0)], |t, x| project(t, &t.sigmoid(&x[0])?, 14)));
    v.push(op("exp", vec![rand_tensor(rng, &[8], 1.5)], |t, x| project(t, &t.exp(&x[0])?, 15)));
    v.push(op("log_sigmoid", vec![rand_tensor(rng, &[8], 6.0)], |t, x| {
        project(t, &t.log_sigmoid(&x[0])?, 16)
    }));
    v.push(op("softmax", vec![rand_tensor(rng, &[3, 4, 5], 2.0)], |t, x| {
        let a = project(t, &t.softmax(&x[0], 0)?, 17)?;
        let b = project(t, &t.softmax(&x[0], 2)?, 18)?;
        t.add(&a, &b)
    }));
    v.push(op("reshape", vec![rand_tensor(rng, &[2, 6], 1.0)], |t, x| {
        let y = t.reshape(&x[0], &[3, 4])?;
        project(t, &t.matmul(&y, &Tensor::full(&[4, 2], 0.5))?, 19)
    }));
    v.push(op("concat", vec![rand_tensor(rng, &[2, 3], 1.0), rand_tensor(rng, &[2, 2], 1.0)], |t, x| {
        project(t, &t.concat(&[&x[0], &x[1]], 1)?, 20)
    }));
    v.push(op("slice", vec![rand_tensor(rng, &[4, 5], 1.0)], |t, x| {
        project(t, &t.slice(&x[0], 1, 1, 3)?, 21)
    }));
    v.push(op("sum", vec![rand_tensor(rng, &[6], 1.0)], |t, x| {
        let s = t.sum(&x[0])?;
        t.mul(&s, &s)
    }));
    v.push(op("sum_axis", vec![rand_tensor(rng, &[3, 4, 2], 1.0)], |t, x| {
        project(t, &t.sum_axis(&x[0], 1)?, 22)
    }));
    v.push(op("mean", vec![rand_tensor(rng, &[6], 1.0)], |t, x| {
        let m = t.mean(&x[0])?;
        t.mul(&m, &m)
    }));
    let pts = off_grid(rng, &[5, 2], 4.0, 3.0);
    v.push(op("bilinear_sample", vec![rand_tensor(rng, &[3, 4, 2], 1.0), pts], |t, x| {
        project(t, &t.bilinear_sample(&x[0], &x[1])?, 23)
    }));
    let dpts = off_grid(rng, &[3, 2, 3, 2], 4.0, 3.0);
    v.push(op(
        "deform_sample",
        vec![rand_tensor(rng, &[3, 4, 4], 1.0), dpts, rand_tensor(rng, &[3, 2, 3], 1.0)],
        |t, x| project(t, &t.deform_sample(&x[0], &x[1], &x[2])?, 24),
    ));
    v.push(op("upsample_bilinear", vec![rand_tensor(rng, &[2, 3, 2], 1.0)], |t, x| {
        project(t, &t.upsample_bilinear(&x[0], 2)?, 25)
    }));
    v.push(op("gather_rows", vec![rand_tensor(rng, &[4, 3], 1.0)], |t, x| {
        project(t, &t.gather_rows(&x[0], &[2, 0, 2, 3])?, 26)
    }));
    v.push(op("scatter_rows", vec![rand_tensor(rng, &[3, 2], 1.0)], |t, x| {
        project(t, &t.scatter_rows(&x[0], &[4, 1, 2], 5)?, 27)
    }));
    v
}

/// Two 8×8 cameras looking forward and backward, tilted down onto a small
/// grid around the ego origin.
pub fn tiny_rig() -> Vec<CameraModel> {
    [0.0, std::f64::consts::PI]
        .into_iter()
        .map(|yaw| CameraModel::looking([0.0, 0.0, 1.5], yaw, 0.5, 100f64.to_radians(), 8, 8).expect("valid camera"))
        .collect()
}

/// 4×4 cells over 8 m, C = 8, two anchors, three levels.
pub fn tiny_grid() -> BevGridSpec {
    BevGridSpec::new(4, 4, (8.0, 8.0), 8, vec![0.0, 1.0], 3).expect("valid grid")
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        grid: tiny_grid(),
        cameras: 2,
        heads: 2,
        points: 2,
        delta: 0.25,
        layers: 1,
        ffn_mult: 1,
        stem_stride: 1,
        class: Class::Vehicle,
        variant: Variant::Ours,
    }
}

fn f64_store(seed: u64, f: impl FnOnce(&mut Init) -> Result<()>) -> Result<ParamStore> {
    let mut store = ParamStore::new(Precision::F64);
    f(&mut Init::new(&mut store, seed))?;
    Ok(store)
}

fn block_checks(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<Check>> {
    let c = 8;
    let mut v = Vec::new();

    for (name, cfg) in [
        ("inter_cim_proposed", InterCimConfig::proposed(c, 2, 0.25)),
        ("inter_cim_conventional", InterCimConfig::conventional(c, 2)),
    ] {
        let mut store = f64_store(seed, |init| cfg.init(init, "inter"))?;
        if !cfg.camera_embed {
            cfg.spread_offsets(&mut store, "inter", 4, 4)?;
        }
        let maps = vec![rand_tensor(rng, &[4, 4, c], 1.0), rand_tensor(rng, &[4, 4, c], 1.0)];
        v.push(module(name, &store, maps, NormMode::Train, 6, move |ctx, d| {
            let (out, _) = inter_camera_attn(ctx, "inter", &cfg, d)?;
            let t = ctx.tape;
            Ok(t.add(&project(t, &out[0], 31)?, &project(t, &out[1], 32)?)?)
        }));
    }

    let sa = SelfAttnConfig {
        channels: c,
        heads: 2,
        points: 3,
        ffn_hidden: c,
    };
    let mut store = f64_store(seed, |init| sa.init(init, "sa"))?;
    sa.spread_offsets(&mut store, "sa", 4, 4)?;
    v.push(module("bev_self_attn", &store, vec![rand_tensor(rng, &[4, 4, c], 1.0)], NormMode::Train, 8, move |ctx, d| {
        let (y, _) = bev_self_attn(ctx, "sa", &sa, &d[0])?;
        Ok(project(ctx.tape, &y, 33)?)
    }));

    let rig = tiny_rig();
    let grid = tiny_grid();
    let table: ProjectionTable = precompute_projection_table(&grid, &rig);
    let level = table.level(0)?.clone();
    let ca = CrossAttnConfig {
        channels: c,
        heads: 2,
        anchors: grid.z_anchors.len(),
        feature_levels: 2,
        cameras: 2,
    };
    let store = f64_store(seed, |init| ca.init(init, "ca"))?;
    let mut data = vec![rand_tensor(rng, &[4, 4, c], 1.0)];
    for _ in 0..2 {
        data.push(rand_tensor(rng, &[4, 4, c], 1.0));
        data.push(rand_tensor(rng, &[2, 2, c], 1.0));
    }
    v.push(module("spatial_cross_attn", &store, data, NormMode::Train, 8, move |ctx, d| {
        let features = vec![vec![d[1].clone(), d[2].clone()], vec![d[3].clone(), d[4].clone()]];
        let (y, _) = spatial_cross_attn(ctx, "ca", &ca, &d[0], &features, &level)?;
        Ok(project(ctx.tape, &y, 34)?)
    }));

    let target = Tensor::from_fn(&[4, 5], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    v.push(op("focal_loss", vec![rand_tensor(rng, &[4, 5], 3.0)], move |t, x| {
        focal_loss(t, &x[0], &target, FocalParams::default()).map_err(to_tensor_err)
    }));
    let target = Tensor::from_fn(&[3, 3], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    v.push(op("focal_loss_gamma0", vec![rand_tensor(rng, &[3, 3], 3.0)], move |t, x| {
        focal_loss(t, &x[0], &target, FocalParams { gamma: 0.0, a_f: 0.4 }).map_err(to_tensor_err)
    }));
    Ok(v)
}

fn end_to_end_check(rng: &mut ChaCha8Rng, seed: u64) -> Result<Check> {
    let cfg = tiny_model();
    let store = init_model(&cfg, seed, Precision::F64)?;
    let table = precompute_projection_table(&cfg.effective_grid(), &tiny_rig());
    let images = vec![
        Tensor::from_fn(&[8, 8, 3], |_| rng.random_range(0.0..1.0)),
        Tensor::from_fn(&[8, 8, 3], |_| rng.random_range(0.0..1.0)),
    ];
    let target = Tensor::from_fn(&[4, 4], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    let mut check = module("end_to_end_tiny", &store, images, NormMode::Train, 3, move |ctx, d| {
        let out = forward(ctx, &cfg, d, &table)?;
        let parts = total_loss(ctx.tape, &[out.logits], &[(cfg.class, target.clone())], &LossWeights::default())?;
        Ok(parts.total)
    });
    // the query maps start near zero, where layer norm is sharply curved
    check.step = 1e-6;
    Ok(check)
}

/// Every check, in report order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = primitive_checks(&mut rng);
    checks.extend(block_checks(&mut rng, opts.seed)?);
    checks.push(end_to_end_check(&mut rng, opts.seed)?);
    checks
        .into_iter()
        .map(|c| {
            let go = GradCheckOptions {
                max_elements: c.max_elements,
                step: c.step,
                rtol: SUITE_RTOL,
                seed: opts.seed,
                fault: opts.fault,
                ..GradCheckOptions::default()
            };
            let report = check_gradients(&c.f, &c.inputs, &go)?;
            Ok(CheckOutcome {
                name: c.name,
                passed: report.passed(SUITE_RTOL),
                report,
            })
        })
        .collect()
}
