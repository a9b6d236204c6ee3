//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{OpKind, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Relative tolerance on `|analytic - numeric|`.
    pub rtol: f64,
    /// Gradients with magnitude below `floor` are compared with absolute
    /// tolerance `rtol * floor`.
    pub floor: f64,
    /// At most this many elements are probed per input.
    pub max_elements: usize,
    /// Elements whose one-sided differences disagree by more than this
    /// (relative) straddle a non-smooth point and are skipped.
    pub kink_tol: f64,
    pub seed: u64,
    /// Deliberately corrupt one operation's backward pass.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            floor: 1e-3,
            max_elements: 48,
            kink_tol: 1e-2,
            seed: 0x5eed,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// (input, element, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    /// Passed: every probed element within tolerance, at least one element
    /// probed, and at most a tenth of the probes skipped as non-smooth.
    pub fn passed(&self, rtol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= rtol && self.skipped * 10 <= self.checked
    }
}

fn pick_elements(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut picked = Vec::with_capacity(max);
    while picked.len() < max {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let i = (state % len as u64) as usize;
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` against central
/// differences.
///
/// `f` receives the tape and the inputs (recorded as leaves on the analytic
/// pass, plain values on the probing passes).
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    if let Some((kind, factor)) = opts.fault {
        tape.inject_fault(kind, factor);
    }
    let leaves: Vec<Tensor> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let loss = f(&tape, &leaves)?;
    let f0 = loss.item().unwrap_or(f64::NAN);
    let grads = tape.backward(&loss)?;
    let eval = |which: usize, elem: usize, delta: f64| -> Result<f64> {
        let probe = Tape::no_grad();
        let mut xs = inputs.to_vec();
        let mut data = xs[which].to_vec();
        data[elem] += delta;
        xs[which] = Tensor::new(inputs[which].shape(), data)?;
        let v = f(&probe, &xs)?;
        Ok(v.item().unwrap_or(f64::NAN))
    };
    let mut report = GradCheckReport::default();
    for (which, (x, leaf)) in inputs.iter().zip(&leaves).enumerate() {
        let analytic = grads.get(leaf).expect("leaf gradient");
        let seed = opts.seed.wrapping_add(which as u64 * 7919);
        for elem in pick_elements(x.len(), opts.max_elements, seed) {
            let fp = eval(which, elem, opts.step)?;
            let fm = eval(which, elem, -opts.step)?;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let fwd = (fp - f0) / opts.step;
            let bwd = (f0 - fm) / opts.step;
            let spread = fwd.abs().max(bwd.abs()).max(opts.floor);
            if (fwd - bwd).abs() > opts.kink_tol * spread {
                report.skipped += 1;
                continue;
            }
            let a = analytic.data()[elem];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((which, elem, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
