use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tape::{Backward, OpKind, Tape};
use crate::tensor::Tensor;

/// Batch-norm mode. Training normalizes with batch statistics; evaluation
/// uses the running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving update toward batch statistics.
    pub fn update(&mut self, batch: &BnStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Shared by batch-norm (statistics over rows, per channel) and layer-norm
/// (statistics over channels, per row): `y = gamma * xhat + beta`.
struct AffineNormBackward {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Arc<[f64]>,
    rows: usize,
    channels: usize,
    // false: statistics are constants (batch-norm in eval mode)
    batch_stats: bool,
    per_row: bool,
}

impl Backward for AffineNormBackward {
    fn backward(&self, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (rows, ch) = (self.rows, self.channels);
        let mut ggamma = needs[1].then(|| vec![0.0; ch]);
        let mut gbeta = needs[2].then(|| vec![0.0; ch]);
        for r in 0..rows {
            for c in 0..ch {
                let i = r * ch + c;
                if let Some(gg) = ggamma.as_mut() {
                    gg[c] += g[i] * self.xhat[i];
                }
                if let Some(gb) = gbeta.as_mut() {
                    gb[c] += g[i];
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; rows * ch];
            if !self.batch_stats {
                for r in 0..rows {
                    for c in 0..ch {
                        let i = r * ch + c;
                        gx[i] = g[i] * self.gamma[c] * self.inv_std[c];
                    }
                }
            } else if self.per_row {
                for r in 0..rows {
                    let base = r * ch;
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for c in 0..ch {
                        let gy = g[base + c] * self.gamma[c];
                        s1 += gy;
                        s2 += gy * self.xhat[base + c];
                    }
                    let (m1, m2) = (s1 / ch as f64, s2 / ch as f64);
                    for c in 0..ch {
                        let gy = g[base + c] * self.gamma[c];
                        gx[base + c] = self.inv_std[r] * (gy - m1 - self.xhat[base + c] * m2);
                    }
                }
            } else {
                let mut s1 = vec![0.0; ch];
                let mut s2 = vec![0.0; ch];
                for r in 0..rows {
                    for c in 0..ch {
                        let i = r * ch + c;
                        let gy = g[i] * self.gamma[c];
                        s1[c] += gy;
                        s2[c] += gy * self.xhat[i];
                    }
                }
                let n = rows as f64;
                for r in 0..rows {
                    for c in 0..ch {
                        let i = r * ch + c;
                        let gy = g[i] * self.gamma[c];
                        gx[i] = self.inv_std[c] * (gy - s1[c] / n - self.xhat[i] * s2[c] / n);
                    }
                }
            }
            gx
        });
        vec![gx, ggamma, gbeta]
    }
}

struct SoftmaxBackward {
    y: Vec<f64>,
    outer: usize,
    len: usize,
    inner: usize,
}

impl Backward for SoftmaxBackward {
    fn backward(&self, g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; g.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |k: usize| (o * self.len + k) * self.inner + i;
                let dot: f64 = (0..self.len).map(|k| g[at(k)] * self.y[at(k)]).sum();
                for k in 0..self.len {
                    gx[at(k)] = self.y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

fn check_channel_param(op: OpKind, p: &Tensor, channels: usize, what: &str) -> Result<()> {
    if p.len() != channels {
        return shape_err(
            op,
            format!("{what} has shape {:?}, expected {channels} channels", p.shape()),
        );
    }
    Ok(())
}

impl Tape {
    /// Batch normalization over every axis but the last (channels).
    ///
    /// Returns the batch statistics in training mode so the caller can update
    /// its running statistics.
    pub fn batch_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running: &BnStats,
        mode: NormMode,
        eps: f64,
    ) -> Result<(Tensor, Option<BnStats>)> {
        let op = OpKind::BatchNorm;
        if x.rank() == 0 {
            return shape_err(op, "input must have a channel axis");
        }
        let ch = x.shape()[x.rank() - 1];
        check_channel_param(op, gamma, ch, "gamma")?;
        check_channel_param(op, beta, ch, "beta")?;
        if running.mean.len() != ch || running.var.len() != ch {
            return shape_err(op, format!("running statistics do not have {ch} channels"));
        }
        let rows = if ch == 0 { 0 } else { x.len() / ch };
        let xd = x.data();
        let (mean, var, batch) = match mode {
            NormMode::Train => {
                if rows == 0 {
                    return shape_err(op, "training mode needs at least one row");
                }
                let mut mean = vec![0.0; ch];
                for r in 0..rows {
                    for c in 0..ch {
                        mean[c] += xd[r * ch + c];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; ch];
                for r in 0..rows {
                    for c in 0..ch {
                        let d = xd[r * ch + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let stats = BnStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval => (running.mean.clone(), running.var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..ch {
                let i = r * ch + c;
                xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                out[i] = gd[c] * xhat[i] + bd[c];
            }
        }
        let y = self.record(op, &[x, gamma, beta], x.shape().to_vec(), out, || {
            Box::new(AffineNormBackward {
                xhat,
                inv_std,
                gamma: gamma.shared(),
                rows,
                channels: ch,
                batch_stats: mode == NormMode::Train,
                per_row: false,
            })
        })?;
        Ok((y, batch))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let op = OpKind::LayerNorm;
        if x.rank() == 0 {
            return shape_err(op, "input must have a feature axis");
        }
        let ch = x.shape()[x.rank() - 1];
        check_channel_param(op, gamma, ch, "gamma")?;
        check_channel_param(op, beta, ch, "beta")?;
        let rows = if ch == 0 { 0 } else { x.len() / ch };
        let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * ch..(r + 1) * ch];
            let mean = row.iter().sum::<f64>() / ch as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ch as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..ch {
                let i = r * ch + c;
                xhat[i] = (xd[i] - mean) * is;
                out[i] = gd[c] * xhat[i] + bd[c];
            }
        }
        self.record(op, &[x, gamma, beta], x.shape().to_vec(), out, || {
            Box::new(AffineNormBackward {
                xhat,
                inv_std,
                gamma: gamma.shared(),
                rows,
                channels: ch,
                batch_stats: true,
                per_row: true,
            })
        })
    }

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return shape_err(
                OpKind::Softmax,
                format!("axis {axis} out of range for shape {:?}", x.shape()),
            );
        }
        let len = x.shape()[axis];
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let xd = x.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xd[at(k)] - max).exp();
                    y[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    y[at(k)] /= total;
                }
            }
        }
        let saved = x.requires_grad().then(|| y.clone());
        self.record(OpKind::Softmax, &[x], x.shape().to_vec(), y, move || {
            Box::new(SoftmaxBackward {
                y: saved.expect("softmax saves output"),
                outer,
                len,
                inner,
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::no_grad();
        let y = tape.softmax(&Tensor::zeros(&[2]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let tape = Tape::no_grad();
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin() * 5.0);
        let y = tape.softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| y.at(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_eval_with_identity_stats_is_affine() {
        let tape = Tape::no_grad();
        let x = Tensor::from_fn(&[3, 2], |i| i as f64);
        let gamma = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        let beta = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let (y, stats) = tape
            .batch_norm(&x, &gamma, &beta, &BnStats::identity(2), NormMode::Eval, 0.0)
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(y.data(), &[1.0, 2.0, 5.0, 8.0, 9.0, 14.0]);
    }

    #[test]
    fn batch_norm_train_normalizes_each_channel() {
        let tape = Tape::no_grad();
        let x = Tensor::from_fn(&[4, 2], |i| if i % 2 == 0 { i as f64 } else { 10.0 - i as f64 });
        let one = Tensor::ones(&[2]);
        let zero = Tensor::zeros(&[2]);
        let (y, stats) = tape
            .batch_norm(&x, &one, &zero, &BnStats::identity(2), NormMode::Train, 1e-12)
            .unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![3.0, 6.0]);
        for c in 0..2 {
            let m: f64 = (0..4).map(|r| y.at(&[r, c])).sum::<f64>() / 4.0;
            let v: f64 = (0..4).map(|r| y.at(&[r, c]).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }
}
