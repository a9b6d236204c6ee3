use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tape::{Backward, OpKind, Tape};
use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - input.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + pad] = acc;
        }
        acc *= input[i];
    }
    strides
}

/// Flat offset pairs for every element of the broadcast output.
#[derive(Clone)]
pub(crate) enum Layout {
    Same,
    /// `b` repeats every `period` elements (it is a trailing block of `a`).
    RepeatB(usize),
    RepeatA(usize),
    General {
        out: Vec<usize>,
        sa: Vec<usize>,
        sb: Vec<usize>,
    },
}

impl Layout {
    fn new(a: &[usize], b: &[usize], out: &[usize]) -> Layout {
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        let no: usize = out.iter().product();
        if a == b {
            return Layout::Same;
        }
        let trailing = |small: &[usize], n_small: usize| {
            let s: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
            s.len() <= out.len() && out[out.len() - s.len()..] == s[..] && n_small > 0
        };
        if na == no && trailing(b, nb) {
            return Layout::RepeatB(nb);
        }
        if nb == no && trailing(a, na) {
            return Layout::RepeatA(na);
        }
        Layout::General {
            out: out.to_vec(),
            sa: broadcast_strides(a, out),
            sb: broadcast_strides(b, out),
        }
    }

    fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Layout::Same => (0..n).for_each(|i| f(i, i, i)),
            Layout::RepeatB(p) => (0..n).for_each(|i| f(i, i, i % p)),
            Layout::RepeatA(p) => (0..n).for_each(|i| f(i, i % p, i)),
            Layout::General { out, sa, sb } => {
                let rank = out.len();
                let mut idx = vec![0usize; rank];
                let (mut oa, mut ob) = (0usize, 0usize);
                for o in 0..n {
                    f(o, oa, ob);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        oa += sa[d];
                        ob += sb[d];
                        if idx[d] < out[d] {
                            break;
                        }
                        oa -= sa[d] * out[d];
                        ob -= sb[d] * out[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryBackward {
    op: Binary,
    layout: Layout,
    out_len: usize,
    len_a: usize,
    len_b: usize,
    a: Option<Arc<[f64]>>,
    b: Option<Arc<[f64]>>,
}

impl Backward for BinaryBackward {
    fn backward(&self, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut ga = needs[0].then(|| vec![0.0; self.len_a]);
        let mut gb = needs[1].then(|| vec![0.0; self.len_b]);
        match self.op {
            Binary::Add | Binary::Sub => {
                let sign = if matches!(self.op, Binary::Sub) { -1.0 } else { 1.0 };
                if let (Layout::Same, Some(ga)) = (&self.layout, ga.as_mut()) {
                    ga.copy_from_slice(g);
                } else if let Some(ga) = ga.as_mut() {
                    self.layout.for_each(self.out_len, |o, ia, _| ga[ia] += g[o]);
                }
                if let Some(gb) = gb.as_mut() {
                    self.layout
                        .for_each(self.out_len, |o, _, ib| gb[ib] += sign * g[o]);
                }
            }
            Binary::Mul => {
                if let Some(ga) = ga.as_mut() {
                    let b = self.b.as_ref().expect("mul saves b");
                    self.layout
                        .for_each(self.out_len, |o, ia, ib| ga[ia] += g[o] * b[ib]);
                }
                if let Some(gb) = gb.as_mut() {
                    let a = self.a.as_ref().expect("mul saves a");
                    self.layout
                        .for_each(self.out_len, |o, ia, ib| gb[ib] += g[o] * a[ia]);
                }
            }
        }
        vec![ga, gb]
    }
}

struct MapBackward {
    // derivative of the map at each input element
    deriv: Vec<f64>,
}

impl Backward for MapBackward {
    fn backward(&self, g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().zip(&self.deriv).map(|(g, d)| g * d).collect())]
    }
}

struct ScaleBackward(f64);

impl Backward for ScaleBackward {
    fn backward(&self, g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|x| x * self.0).collect())]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Tape {
    fn binary(&self, kind: OpKind, op: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let Some(out_shape) = broadcast_shape(a.shape(), b.shape()) else {
            return shape_err(
                kind,
                format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
            );
        };
        let n: usize = out_shape.iter().product();
        let layout = Layout::new(a.shape(), b.shape(), &out_shape);
        let (da, db) = (a.data(), b.data());
        let mut out = vec![0.0; n];
        match op {
            Binary::Add => layout.for_each(n, |o, ia, ib| out[o] = da[ia] + db[ib]),
            Binary::Sub => layout.for_each(n, |o, ia, ib| out[o] = da[ia] - db[ib]),
            Binary::Mul => layout.for_each(n, |o, ia, ib| out[o] = da[ia] * db[ib]),
        }
        self.record(kind, &[a, b], out_shape, out, || {
            let keep = matches!(op, Binary::Mul);
            Box::new(BinaryBackward {
                op,
                layout,
                out_len: n,
                len_a: a.len(),
                len_b: b.len(),
                a: (keep && b.requires_grad()).then(|| a.shared()),
                b: (keep && a.requires_grad()).then(|| b.shared()),
            })
        })
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(OpKind::Add, Binary::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(OpKind::Sub, Binary::Sub, a, b)
    }

    /// Elementwise product with numpy broadcasting.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(OpKind::Mul, Binary::Mul, a, b)
    }

    pub fn scale(&self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let out = x.data().iter().map(|v| v * factor).collect();
        self.record(OpKind::Scale, &[x], x.shape().to_vec(), out, || {
            Box::new(ScaleBackward(factor))
        })
    }

    pub fn add_scalar(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        let out = x.data().iter().map(|v| v + c).collect();
        self.record(OpKind::AddScalar, &[x], x.shape().to_vec(), out, || {
            Box::new(ScaleBackward(1.0))
        })
    }

    fn unary(
        &self,
        kind: OpKind,
        x: &Tensor,
        f: impl Fn(f64) -> (f64, f64),
    ) -> Result<Tensor> {
        let n = x.len();
        let mut out = Vec::with_capacity(n);
        let mut deriv = Vec::with_capacity(if x.requires_grad() { n } else { 0 });
        for &v in x.data() {
            let (y, d) = f(v);
            out.push(y);
            if x.requires_grad() {
                deriv.push(d);
            }
        }
        self.record(kind, &[x], x.shape().to_vec(), out, move || {
            Box::new(MapBackward { deriv })
        })
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Relu, x, |v| {
            if v > 0.0 {
                (v, 1.0)
            } else {
                (0.0, 0.0)
            }
        })
    }

    pub fn tanh(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Tanh, x, |v| {
            let t = v.tanh();
            (t, 1.0 - t * t)
        })
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Sigmoid, x, |v| {
            let s = sigmoid(v);
            (s, s * (1.0 - s))
        })
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Exp, x, |v| {
            let e = v.exp();
            (e, e)
        })
    }

    /// Numerically stable `log(sigmoid(x))`; derivative `sigmoid(-x)`.
    pub fn log_sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::LogSigmoid, x, |v| (log_sigmoid(v), sigmoid(-v)))
    }
}
