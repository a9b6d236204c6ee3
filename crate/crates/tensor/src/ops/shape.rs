use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::tape::{Backward, OpKind, Tape};
use crate::tensor::Tensor;

struct Identity;

impl Backward for Identity {
    fn backward(&self, g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

/// Index arithmetic of an (outer, axis, inner) split.
#[derive(Clone, Copy)]
struct AxisSplit {
    outer: usize,
    inner: usize,
}

impl AxisSplit {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

struct ConcatBackward {
    split: AxisSplit,
    lens: Vec<usize>,
}

impl Backward for ConcatBackward {
    fn backward(&self, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.lens.iter().sum();
        let inner = self.split.inner;
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.lens.len());
        for (part, &len) in self.lens.iter().enumerate() {
            if needs[part] {
                let mut gi = Vec::with_capacity(self.split.outer * len * inner);
                for o in 0..self.split.outer {
                    let start = (o * total + offset) * inner;
                    gi.extend_from_slice(&g[start..start + len * inner]);
                }
                out.push(Some(gi));
            } else {
                out.push(None);
            }
            offset += len;
        }
        out
    }
}

struct SliceBackward {
    split: AxisSplit,
    full: usize,
    start: usize,
    len: usize,
}

impl Backward for SliceBackward {
    fn backward(&self, g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let inner = self.split.inner;
        let mut gx = vec![0.0; self.split.outer * self.full * inner];
        for o in 0..self.split.outer {
            let dst = (o * self.full + self.start) * inner;
            let src = o * self.len * inner;
            gx[dst..dst + self.len * inner].copy_from_slice(&g[src..src + self.len * inner]);
        }
        vec![Some(gx)]
    }
}

struct FillBackward {
    len: usize,
    scale: f64,
}

impl Backward for FillBackward {
    fn backward(&self, g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; self.len])]
    }
}

struct SumAxisBackward {
    split: AxisSplit,
    len: usize,
}

impl Backward for SumAxisBackward {
    fn backward(&self, g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let inner = self.split.inner;
        let mut gx = vec![0.0; self.split.outer * self.len * inner];
        for o in 0..self.split.outer {
            for k in 0..self.len {
                let dst = (o * self.len + k) * inner;
                gx[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
        }
        vec![Some(gx)]
    }
}

struct RowsBackward {
    index: Arc<[usize]>,
    row: usize,
    // rows of the input
    rows_in: usize,
    gather: bool,
}

fn gather(src: &[f64], index: &[usize], row: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(index.len() * row);
    for &i in index {
        out.extend_from_slice(&src[i * row..(i + 1) * row]);
    }
    out
}

fn scatter(src: &[f64], index: &[usize], row: usize, rows_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows_out * row];
    for (k, &i) in index.iter().enumerate() {
        for c in 0..row {
            out[i * row + c] += src[k * row + c];
        }
    }
    out
}

impl Backward for RowsBackward {
    fn backward(&self, g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gx = if self.gather {
            scatter(g, &self.index, self.row, self.rows_in)
        } else {
            gather(g, &self.index, self.row)
        };
        vec![Some(gx)]
    }
}

impl Tape {
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != x.len() {
            return shape_err(
                OpKind::Reshape,
                format!("cannot view {:?} as {:?}", x.shape(), shape),
            );
        }
        self.record(OpKind::Reshape, &[x], shape.to_vec(), x.to_vec(), || {
            Box::new(Identity)
        })
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let op = OpKind::Concat;
        let Some(first) = parts.first() else {
            return shape_err(op, "nothing to concatenate");
        };
        if axis >= first.rank() {
            return shape_err(op, format!("axis {axis} out of range for {:?}", first.shape()));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return shape_err(
                    op,
                    format!("{:?} and {:?} differ off axis {axis}", first.shape(), p.shape()),
                );
            }
        }
        let split = AxisSplit::of(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let inner = split.inner;
        let mut out = Vec::with_capacity(split.outer * total * inner);
        for o in 0..split.outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        self.record(op, parts, shape, out, || Box::new(ConcatBackward { split, lens }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= x.rank() || start + len > x.shape()[axis] {
            return shape_err(
                OpKind::Slice,
                format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
            );
        }
        let split = AxisSplit::of(x.shape(), axis);
        let full = x.shape()[axis];
        let inner = split.inner;
        let mut out = Vec::with_capacity(split.outer * len * inner);
        for o in 0..split.outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.record(OpKind::Slice, &[x], shape, out, || {
            Box::new(SliceBackward {
                split,
                full,
                start,
                len,
            })
        })
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.data().iter().sum();
        self.record(OpKind::Sum, &[x], Vec::new(), vec![s], || {
            Box::new(FillBackward {
                len: x.len(),
                scale: 1.0,
            })
        })
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        if x.is_empty() {
            return shape_err(OpKind::Mean, "mean of an empty tensor");
        }
        let n = x.len() as f64;
        let s = x.data().iter().sum::<f64>() / n;
        self.record(OpKind::Mean, &[x], Vec::new(), vec![s], || {
            Box::new(FillBackward {
                len: x.len(),
                scale: 1.0 / n,
            })
        })
    }

    /// Sum along `axis`, which is removed from the shape.
    pub fn sum_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return shape_err(
                OpKind::SumAxis,
                format!("axis {axis} out of range for {:?}", x.shape()),
            );
        }
        let split = AxisSplit::of(x.shape(), axis);
        let len = x.shape()[axis];
        let inner = split.inner;
        let mut out = vec![0.0; split.outer * inner];
        for o in 0..split.outer {
            for k in 0..len {
                let src = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[src + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.record(OpKind::SumAxis, &[x], shape, out, || {
            Box::new(SumAxisBackward { split, len })
        })
    }

    /// Rows (first-axis entries) of `x` at `index`, in order.
    pub fn gather_rows(&self, x: &Tensor, index: &[usize]) -> Result<Tensor> {
        let op = OpKind::GatherRows;
        if x.rank() == 0 {
            return shape_err(op, "cannot gather rows of a scalar");
        }
        let rows = x.shape()[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return shape_err(op, format!("row {bad} out of range for {:?}", x.shape()));
        }
        let row: usize = x.shape()[1..].iter().product();
        let out = gather(x.data(), index, row);
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        let index: Arc<[usize]> = index.into();
        self.record(op, &[x], shape, out, || {
            Box::new(RowsBackward {
                index,
                row,
                rows_in: rows,
                gather: true,
            })
        })
    }

    /// Inverse of [`Tape::gather_rows`]: row `k` of `x` is added into row
    /// `index[k]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&self, x: &Tensor, index: &[usize], rows: usize) -> Result<Tensor> {
        let op = OpKind::ScatterRows;
        if x.rank() == 0 || x.shape()[0] != index.len() {
            return shape_err(
                op,
                format!("{} indices for rows of {:?}", index.len(), x.shape()),
            );
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Shape {
                op,
                detail: format!("target row {bad} out of range for {rows} rows"),
            });
        }
        let row: usize = x.shape()[1..].iter().product();
        let out = scatter(x.data(), index, row, rows);
        let mut shape = x.shape().to_vec();
        shape[0] = rows;
        let index: Arc<[usize]> = index.into();
        self.record(op, &[x], shape, out, || {
            Box::new(RowsBackward {
                index,
                row,
                rows_in: 0,
                gather: false,
            })
        })
    }
}
