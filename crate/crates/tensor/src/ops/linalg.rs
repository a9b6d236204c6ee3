use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tape::{Backward, OpKind, Tape};
use crate::tensor::Tensor;

/// `c = a · b` for row-major `a: m×k`, `b: k×n` (optionally transposed views).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // strides of the logical (non-transposed) operands
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    // SAFETY: slices are sized m*k, k*n and m*n by every caller and the
    // strides above describe exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatMulBackward {
    m: usize,
    k: usize,
    n: usize,
    a: Arc<[f64]>,
    b: Arc<[f64]>,
}

impl Backward for MatMulBackward {
    fn backward(&self, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let ga = needs[0].then(|| {
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g, false, &self.b, true, &mut ga, false);
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, &self.a, true, g, false, &mut gb, false);
            gb
        });
        vec![ga, gb]
    }
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Input pixel under kernel tap (ky, kx) of output pixel (oy, ox).
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
            .then(|| (y as usize, x as usize))
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let mut cols = vec![0.0; self.ho * self.wo * patch];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = (oy * self.wo + ox) * patch;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                            let dst = row + (ky * self.kw + kx) * self.cin;
                            let src = (y * self.w + x) * self.cin;
                            cols[dst..dst + self.cin]
                                .copy_from_slice(&input[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let mut out = vec![0.0; self.h * self.w * self.cin];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = (oy * self.wo + ox) * patch;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                            let src = row + (ky * self.kw + kx) * self.cin;
                            let dst = (y * self.w + x) * self.cin;
                            for c in 0..self.cin {
                                out[dst + c] += cols[src + c];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

struct ConvBackward {
    geom: ConvGeom,
    cols: Option<Vec<f64>>,
    weight: Arc<[f64]>,
}

impl Backward for ConvBackward {
    fn backward(&self, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let geom = self.geom;
        let rows = geom.ho * geom.wo;
        let patch = geom.patch();
        let gx = needs[0].then(|| {
            let mut gcols = vec![0.0; rows * patch];
            gemm(rows, geom.cout, patch, g, false, &self.weight, true, &mut gcols, false);
            geom.col2im(&gcols)
        });
        let gw = needs[1].then(|| {
            let cols = self.cols.as_ref().expect("conv saves columns for weight grad");
            let mut gw = vec![0.0; patch * geom.cout];
            gemm(patch, rows, geom.cout, cols, true, g, false, &mut gw, false);
            gw
        });
        vec![gx, gw]
    }
}

impl Tape {
    /// `[..., k] · [k, n] -> [..., n]`; leading axes of `a` are flattened.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() < 1 || b.rank() != 2 || a.shape()[a.rank() - 1] != b.shape()[0] {
            return shape_err(
                OpKind::MatMul,
                format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
            );
        }
        let k = b.shape()[0];
        let n = b.shape()[1];
        let m = if k == 0 { a.shape()[..a.rank() - 1].iter().product() } else { a.len() / k };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        self.record(OpKind::MatMul, &[a, b], shape, out, || {
            Box::new(MatMulBackward {
                m,
                k,
                n,
                a: a.shared(),
                b: b.shared(),
            })
        })
    }

    /// 2-D convolution of an `H×W×Cin` map with a `kh×kw×Cin×Cout` kernel,
    /// zero padding. Bias is added separately.
    pub fn conv2d(&self, input: &Tensor, weight: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
        let bad = |detail: String| shape_err(OpKind::Conv2d, detail);
        if input.rank() != 3 || weight.rank() != 4 {
            return bad(format!(
                "expected input H×W×C and kernel kh×kw×Cin×Cout, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            ));
        }
        let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (kh, kw, wcin, cout) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wcin != cin {
            return bad(format!(
                "input has {cin} channels but kernel {:?} expects {wcin}",
                weight.shape()
            ));
        }
        if spec.stride == 0 || h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return bad(format!(
                "kernel {kh}×{kw} with stride {} and padding {} does not fit input {h}×{w}",
                spec.stride, spec.padding
            ));
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
            wo: (w + 2 * spec.padding - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        };
        let rows = geom.ho * geom.wo;
        let cols = geom.im2col(input.data());
        let mut out = vec![0.0; rows * cout];
        gemm(rows, geom.patch(), cout, &cols, false, weight.data(), false, &mut out, false);
        self.record(
            OpKind::Conv2d,
            &[input, weight],
            vec![geom.ho, geom.wo, cout],
            out,
            || {
                Box::new(ConvBackward {
                    geom,
                    cols: weight.requires_grad().then_some(cols),
                    weight: weight.shared(),
                })
            },
        )
    }
}
