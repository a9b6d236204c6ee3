use bevr_tensor::gradcheck::{check_gradients, GradCheckOptions};
use bevr_tensor::{BnStats, Conv2dSpec, NormMode, OpKind, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Project an arbitrary output onto a scalar with fixed random weights.
fn project(tape: &Tape, y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, y.shape(), 1.0);
    let p = tape.mul(y, &w)?;
    tape.sum(&p)
}

fn assert_grads<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let opts = GradCheckOptions::default();
    let report = check_gradients(f, inputs, &opts).unwrap();
    assert!(
        report.passed(opts.rtol),
        "{name}: max rel error {:.3e} over {} probes ({} skipped), worst {:?}",
        report.max_rel_error,
        report.checked,
        report.skipped,
        report.worst
    );
}

#[test]
fn sum_gradient_is_all_ones() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_fn(&[2, 3, 2], |i| i as f64));
    let s = tape.sum(&x).unwrap();
    let g = tape.backward(&s).unwrap().get(&x).unwrap();
    assert!(g.data().iter().all(|&v| v == 1.0));
}

#[test]
fn square_gradient_is_twice_input() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(&x, &x).unwrap();
    let s = tape.sum(&sq).unwrap();
    assert_eq!(tape.backward(&s).unwrap().get(&x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_detached() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::ones(&[3]));
    assert!(matches!(
        tape.backward(&x),
        Err(bevr_tensor::TensorError::NotScalar(_))
    ));
    let c = Tensor::scalar(1.0);
    assert!(matches!(
        tape.backward(&c),
        Err(bevr_tensor::TensorError::Detached)
    ));
}

#[test]
fn untracked_tensor_gets_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::ones(&[2]));
    let c = Tensor::full(&[2], 3.0);
    let y = tape.mul(&x, &c).unwrap();
    let s = tape.sum(&y).unwrap();
    let grads = tape.backward(&s).unwrap();
    assert!(grads.get(&c).is_none());
    assert_eq!(grads.get(&x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn tape_is_drained_by_backward() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::ones(&[2]));
    let s = tape.sum(&x).unwrap();
    tape.backward(&s).unwrap();
    assert!(tape.is_empty());
    assert!(matches!(
        tape.sum(&x),
        Err(bevr_tensor::TensorError::ForeignTape)
    ));
}

#[test]
fn elementwise_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4], 2.0);
    let b = rand_tensor(&mut rng, &[4], 2.0);
    let c = rand_tensor(&mut rng, &[3, 1], 2.0);
    assert_grads("add", &[a.clone(), b.clone()], |t, x| {
        let y = t.add(&x[0], &x[1])?;
        project(t, &y, 2)
    });
    assert_grads("sub", &[a.clone(), c.clone()], |t, x| {
        let y = t.sub(&x[1], &x[0])?;
        project(t, &y, 3)
    });
    assert_grads("mul", &[a.clone(), b.clone(), c.clone()], |t, x| {
        let y = t.mul(&x[0], &x[1])?;
        let y = t.mul(&y, &x[2])?;
        project(t, &y, 4)
    });
    assert_grads("scale/add_scalar", &[a.clone()], |t, x| {
        let y = t.scale(&x[0], -1.7)?;
        let y = t.add_scalar(&y, 0.3)?;
        project(t, &y, 5)
    });
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, 3], 2.5);
    for (name, kind) in [
        ("relu", OpKind::Relu),
        ("tanh", OpKind::Tanh),
        ("sigmoid", OpKind::Sigmoid),
        ("exp", OpKind::Exp),
        ("log_sigmoid", OpKind::LogSigmoid),
    ] {
        assert_grads(name, &[x.clone()], |t, x| {
            let y = match kind {
                OpKind::Relu => t.relu(&x[0])?,
                OpKind::Tanh => t.tanh(&x[0])?,
                OpKind::Sigmoid => t.sigmoid(&x[0])?,
                OpKind::Exp => t.exp(&x[0])?,
                _ => t.log_sigmoid(&x[0])?,
            };
            project(t, &y, 6)
        });
    }
}

#[test]
fn log_sigmoid_gradient_at_large_logits() {
    let x = Tensor::new(&[4], vec![-30.0, -12.0, 15.0, 30.0]).unwrap();
    assert_grads("log_sigmoid large", &[x], |t, x| {
        let y = t.log_sigmoid(&x[0])?;
        t.sum(&y)
    });
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    let b = rand_tensor(&mut rng, &[4, 5], 1.0);
    assert_grads("matmul", &[a, b], |t, x| {
        let y = t.matmul(&x[0], &x[1])?;
        project(t, &y, 7)
    });
}

#[test]
fn conv2d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[7, 6, 3], 1.0);
    let w = rand_tensor(&mut rng, &[3, 3, 3, 4], 0.5);
    for spec in [Conv2dSpec::same(3), Conv2dSpec::new(2, 1), Conv2dSpec::new(1, 0)] {
        assert_grads("conv2d", &[x.clone(), w.clone()], |t, v| {
            let y = t.conv2d(&v[0], &v[1], spec)?;
            project(t, &y, 8)
        });
    }
}

#[test]
fn normalization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 3, 5], 2.0);
    let gamma = rand_tensor(&mut rng, &[5], 1.5);
    let beta = rand_tensor(&mut rng, &[5], 1.0);
    let mut stats = BnStats::identity(5);
    stats.mean = vec![0.1, -0.2, 0.3, 0.0, 0.5];
    stats.var = vec![1.2, 0.8, 2.0, 0.5, 1.0];
    for mode in [NormMode::Train, NormMode::Eval] {
        let stats = stats.clone();
        assert_grads(
            "batchnorm",
            &[x.clone(), gamma.clone(), beta.clone()],
            move |t, v| {
                let (y, _) = t.batch_norm(&v[0], &v[1], &v[2], &stats, mode, 1e-5)?;
                project(t, &y, 9)
            },
        );
    }
    assert_grads("layernorm", &[x, gamma, beta], |t, v| {
        let y = t.layer_norm(&v[0], &v[1], &v[2], 1e-5)?;
        project(t, &y, 10)
    });
}

#[test]
fn softmax_gradient_every_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 4, 2], 2.0);
    for axis in 0..3 {
        assert_grads("softmax", &[x.clone()], |t, v| {
            let y = t.softmax(&v[0], axis)?;
            project(t, &y, 11)
        });
    }
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[3, 4, 2], 1.0);
    let y = rand_tensor(&mut rng, &[3, 2, 2], 1.0);
    assert_grads("reshape/concat/slice", &[x.clone(), y], |t, v| {
        let c = t.concat(&[&v[0], &v[1]], 1)?;
        let s = t.slice(&c, 1, 1, 4)?;
        let r = t.reshape(&s, &[6, 4])?;
        project(t, &r, 12)
    });
    assert_grads("sum_axis/mean", &[x.clone()], |t, v| {
        let s = t.sum_axis(&v[0], 1)?;
        let s = t.mul(&s, &s)?;
        t.mean(&s)
    });
    assert_grads("gather/scatter", &[x], |t, v| {
        let g = t.gather_rows(&v[0], &[2, 0, 2])?;
        let s = t.scatter_rows(&g, &[1, 3, 0], 4)?;
        project(t, &s, 13)
    });
}

/// Keep sample coordinates away from integer loci where bilinear
/// interpolation is not differentiable.
fn off_grid_points(rng: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * n);
    while v.len() < 2 * n {
        let lim = if v.len() % 2 == 0 { w } else { h };
        let c: f64 = rng.random_range(-1.5..lim + 0.5);
        let frac = c - c.floor();
        if frac > 0.05 && frac < 0.95 {
            v.push(c);
        }
    }
    v
}

#[test]
fn sampling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let map = rand_tensor(&mut rng, &[5, 6, 4], 1.0);
    let pts = Tensor::new(&[9, 2], off_grid_points(&mut rng, 9, 6.0, 5.0)).unwrap();
    assert_grads("bilinear_sample", &[map.clone(), pts], |t, v| {
        let y = t.bilinear_sample(&v[0], &v[1])?;
        project(t, &y, 14)
    });
    let pts = Tensor::new(&[3, 2, 3, 2], off_grid_points(&mut rng, 18, 6.0, 5.0)).unwrap();
    let w = rand_tensor(&mut rng, &[3, 2, 3], 1.0);
    assert_grads("deform_sample", &[map.clone(), pts, w], |t, v| {
        let y = t.deform_sample(&v[0], &v[1], &v[2])?;
        project(t, &y, 15)
    });
    for factor in [1, 2, 3] {
        assert_grads("upsample_bilinear", &[map.clone()], |t, v| {
            let y = t.upsample_bilinear(&v[0], factor)?;
            project(t, &y, 16)
        });
    }
}

/// Random composite graphs: a chain of up to six primitives over small
/// extents, checked end to end.
#[test]
fn random_composed_graphs() {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(2..=8);
        let depth = rng.random_range(2..=6);
        let ops: Vec<u8> = (0..depth).map(|_| rng.random_range(0..8)).collect();
        let x = rand_tensor(&mut rng, &[rows, cols], 1.0);
        let w = rand_tensor(&mut rng, &[cols, cols], 0.7);
        let b = rand_tensor(&mut rng, &[cols], 0.5);
        let ones = Tensor::ones(&[cols]);
        let zeros = Tensor::zeros(&[cols]);
        assert_grads(&format!("composite {seed} {ops:?}"), &[x, w, b], |t, v| {
            let mut h = v[0].clone();
            for &op in &ops {
                h = match op {
                    0 => t.matmul(&h, &v[1])?,
                    1 => t.add(&h, &v[2])?,
                    2 => t.tanh(&h)?,
                    3 => t.softmax(&h, 1)?,
                    4 => t.mul(&h, &h)?,
                    5 => t.layer_norm(&h, &ones, &zeros, 1e-5)?,
                    6 => t.sigmoid(&h)?,
                    _ => {
                        let s = t.slice(&h, 1, 0, 1)?;
                        let rest = t.slice(&h, 1, 1, cols - 1)?;
                        t.concat(&[&rest, &s], 1)?
                    }
                };
            }
            project(t, &h, seed)
        });
    }
}

#[test]
fn injected_fault_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[4, 4], 1.0);
    let opts = GradCheckOptions {
        fault: Some((OpKind::Tanh, 1.01)),
        ..GradCheckOptions::default()
    };
    let report = check_gradients(
        |t, v| {
            let y = t.tanh(&v[0])?;
            project(t, &y, 17)
        },
        &[x],
        &opts,
    )
    .unwrap();
    assert!(!report.passed(opts.rtol));
}
