use bevr_tensor::{Conv2dSpec, Tape, Tensor};
use proptest::prelude::*;

/// Direct convolution by definition, no im2col.
fn conv_by_definition(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if y < 0 || xx < 0 || y as usize >= h || xx as usize >= wd {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.at(&[y as usize, xx as usize, ci]) * w.at(&[ky, kx, ci, co]);
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    Tensor::new(&[ho, wo, cout], out).unwrap()
}

#[test]
fn one_by_one_kernel_of_two_doubles_ones() {
    let tape = Tape::no_grad();
    let x = Tensor::ones(&[3, 3, 1]);
    let w = Tensor::full(&[1, 1, 1, 1], 2.0);
    let y = tape.conv2d(&x, &w, Conv2dSpec::new(1, 0)).unwrap();
    assert_eq!(y, conv_by_definition(&x, &w, 1, 0));
    assert_eq!(y, Tensor::full(&[3, 3, 1], 2.0));
}

#[test]
fn conv_matches_definition_oracle() {
    let tape = Tape::no_grad();
    let x = Tensor::from_fn(&[9, 7, 3], |i| ((i * 37) % 11) as f64 - 5.0);
    let w = Tensor::from_fn(&[3, 3, 3, 5], |i| ((i * 13) % 7) as f64 * 0.25 - 0.75);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (3, 2)] {
        let y = tape.conv2d(&x, &w, Conv2dSpec::new(stride, pad)).unwrap();
        let oracle = conv_by_definition(&x, &w, stride, pad);
        assert!(y.max_abs_diff(&oracle) < 1e-12, "stride {stride} pad {pad}");
    }
}

/// Per-pixel half-pixel bilinear interpolation with edge clamping.
fn upsample_oracle(map: &[Vec<f64>], factor: usize, oy: usize, ox: usize) -> f64 {
    let (h, w) = (map.len() as f64, map[0].len() as f64);
    let sy = ((oy as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, h - 1.0);
    let sx = ((ox as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, w - 1.0);
    let (y0, x0) = (sy.floor(), sx.floor());
    let (y1, x1) = ((y0 + 1.0).min(h - 1.0), (x0 + 1.0).min(w - 1.0));
    let (fy, fx) = (sy - y0, sx - x0);
    let v = |y: f64, x: f64| map[y as usize][x as usize];
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

#[test]
fn two_by_two_upsample_matches_oracle() {
    let tape = Tape::no_grad();
    let grid = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
    let m = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let u = tape.upsample_bilinear(&m, 2).unwrap();
    assert_eq!(u.shape(), &[4, 4, 1]);
    for oy in 0..4 {
        for ox in 0..4 {
            let want = upsample_oracle(&grid, 2, oy, ox);
            assert!((u.at(&[oy, ox, 0]) - want).abs() < 1e-15, "({oy},{ox})");
        }
    }
    // first row: 0, 0.25, 0.75, 1
    assert_eq!(&u.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
}

fn grid_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        (Just(h), Just(w), prop::collection::vec(-5.0f64..5.0, h * w))
    })
}

proptest! {
    #[test]
    fn softmax_positive_and_normalized(v in prop::collection::vec(-40.0f64..40.0, 1..16)) {
        let tape = Tape::no_grad();
        let n = v.len();
        let y = tape.softmax(&Tensor::new(&[n], v).unwrap(), 0).unwrap();
        prop_assert!(y.data().iter().all(|&p| p > 0.0));
        prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_exact_on_texels_and_linear_between((h, w, vals) in grid_strategy(),
                                                   t in 0.0f64..1.0) {
        let tape = Tape::no_grad();
        let map = Tensor::new(&[h, w, 1], vals).unwrap();
        for y in 0..h {
            for x in 0..w {
                let p = Tensor::new(&[1, 2], vec![x as f64, y as f64]).unwrap();
                let v = tape.bilinear_sample(&map, &p).unwrap();
                prop_assert_eq!(v.data()[0], map.at(&[y, x, 0]));
                if x + 1 < w {
                    let p = Tensor::new(&[1, 2], vec![x as f64 + t, y as f64]).unwrap();
                    let v = tape.bilinear_sample(&map, &p).unwrap().data()[0];
                    let want = (1.0 - t) * map.at(&[y, x, 0]) + t * map.at(&[y, x + 1, 0]);
                    prop_assert!((v - want).abs() < 1e-12);
                }
                if y + 1 < h {
                    let p = Tensor::new(&[1, 2], vec![x as f64, y as f64 + t]).unwrap();
                    let v = tape.bilinear_sample(&map, &p).unwrap().data()[0];
                    let want = (1.0 - t) * map.at(&[y, x, 0]) + t * map.at(&[y + 1, x, 0]);
                    prop_assert!((v - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_matches_oracle_everywhere((h, w, vals) in grid_strategy(), factor in 1usize..5) {
        let tape = Tape::no_grad();
        let grid: Vec<Vec<f64>> = vals.chunks(w).map(|r| r.to_vec()).collect();
        let m = Tensor::new(&[h, w, 1], vals).unwrap();
        let u = tape.upsample_bilinear(&m, factor).unwrap();
        for oy in 0..h * factor {
            for ox in 0..w * factor {
                let want = upsample_oracle(&grid, factor, oy, ox);
                prop_assert!((u.at(&[oy, ox, 0]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_fn(&[6, 5, 3], |i| (i as f64 * 0.731).sin()));
        let w = tape.leaf(&Tensor::from_fn(&[3, 3, 3, 4], |i| (i as f64 * 0.377).cos() * 0.2));
        let y = tape.conv2d(&x, &w, Conv2dSpec::same(3)).unwrap();
        let y = tape.tanh(&y).unwrap();
        let s = tape.sum(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        (y.to_vec(), g.get(&w).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}
