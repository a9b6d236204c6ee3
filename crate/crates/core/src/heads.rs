//! Class headers, map decoders, the focal losses and the IoU metric.

use bevr_tensor::{Conv2dSpec, Tape, Tensor};

use crate::class::Class;
use crate::error::{CoreError, Result};
use crate::nn::{self, Ctx, Init};

/// Initial bias of every logit conv: sigmoid of it is a 1% foreground
/// prior, so early training is not spent suppressing the background.
pub const PRIOR_LOGIT: f64 = -4.59511985013459;

fn init_logit(init: &mut Init, prefix: &str, channels: usize) -> Result<()> {
    init.conv(&format!("{prefix}.logit"), 1, channels, 1, false)?;
    init.constant(&format!("{prefix}.logit.b"), &[1], PRIOR_LOGIT)
}

pub fn init_class_header(init: &mut Init, prefix: &str, channels: usize) -> Result<()> {
    init.conv_bn(&format!("{prefix}.0"), 3, channels, channels)?;
    init.conv_bn(&format!("{prefix}.1"), 3, channels, channels)
}

/// Two channel-preserving conv-BN-relu blocks.
pub fn class_header(ctx: &Ctx, prefix: &str, b: &Tensor) -> Result<Tensor> {
    let x = nn::conv_bn_relu(ctx, &format!("{prefix}.0"), b, 3, 1)?;
    nn::conv_bn_relu(ctx, &format!("{prefix}.1"), &x, 3, 1)
}

pub fn init_map_decoder(init: &mut Init, prefix: &str, channels: usize) -> Result<()> {
    init.conv_bn(&format!("{prefix}.0"), 3, channels, channels)?;
    init_logit(init, prefix, channels)
}

fn to_logits(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    Ok(tape.reshape(x, &[s[0], s[1]])?)
}

/// conv-BN-relu, then a 1×1 conv to one logit per cell.
pub fn map_decoder(ctx: &Ctx, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let y = nn::conv_bn_relu(ctx, &format!("{prefix}.0"), x, 3, 1)?;
    let y = nn::conv(ctx, &format!("{prefix}.logit"), &y, Conv2dSpec::new(1, 0))?;
    to_logits(ctx.tape, &y)
}

pub fn init_aux_decoder(init: &mut Init, prefix: &str, channels: usize, upsamples: usize) -> Result<()> {
    for k in 0..upsamples {
        init.conv_bn(&format!("{prefix}.up{k}"), 3, channels, channels)?;
    }
    init_logit(init, prefix, channels)
}

/// `upsamples` × [bilinear ×2, conv, BN, relu], then a 1×1 conv to logits.
pub fn aux_decoder(ctx: &Ctx, prefix: &str, q: &Tensor, upsamples: usize) -> Result<Tensor> {
    let mut x = q.clone();
    for k in 0..upsamples {
        x = ctx.tape.upsample_bilinear(&x, 2)?;
        x = nn::conv_bn_relu(ctx, &format!("{prefix}.up{k}"), &x, 3, 1)?;
    }
    let y = nn::conv(ctx, &format!("{prefix}.logit"), &x, Conv2dSpec::new(1, 0))?;
    to_logits(ctx.tape, &y)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    /// Weight of positive cells; negatives get `1 − a_f`.
    pub a_f: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, a_f: 0.25 }
    }
}

/// Mean over cells of `−a_t·(1 − p_t)^γ·log p_t`, evaluated through
/// log-sigmoids so that large logits stay finite.
pub fn focal_loss(tape: &Tape, logits: &Tensor, target: &Tensor, fp: FocalParams) -> Result<Tensor> {
    if logits.shape() != target.shape() {
        return Err(CoreError::Input(format!(
            "focal loss: logits {:?} and target {:?} differ in shape",
            logits.shape(),
            target.shape()
        )));
    }
    if let Some((index, &value)) = target.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(CoreError::NonBinaryTarget { index, value });
    }
    let sign = target.map(|y| 2.0 * y - 1.0);
    let at = target.map(|y| if y == 1.0 { fp.a_f } else { 1.0 - fp.a_f });
    let z = tape.mul(logits, &sign)?;
    let log_pt = tape.log_sigmoid(&z)?;
    let mut per_cell = tape.mul(&log_pt, &at.map(|a| -a))?;
    if fp.gamma != 0.0 {
        // (1 − p_t)^γ = exp(γ · log σ(−z))
        let log_q = tape.log_sigmoid(&tape.scale(&z, -1.0)?)?;
        let modulator = tape.exp(&tape.scale(&log_q, fp.gamma)?)?;
        per_cell = tape.mul(&per_cell, &modulator)?;
    }
    Ok(tape.mean(&per_cell)?)
}

/// Coefficients of the total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    /// `λ_c` per class; classes absent here get weight 1.
    pub lambda: Vec<(Class, f64)>,
    pub focal: FocalParams,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: Vec::new(),
            focal: FocalParams::default(),
        }
    }
}

impl LossWeights {
    pub fn lambda(&self, class: Class) -> f64 {
        self.lambda.iter().find(|(c, _)| *c == class).map_or(1.0, |&(_, l)| l)
    }
}

/// Per-class logits of one forward pass. `aux` may hold several maps per
/// class (their losses are averaged) or none.
#[derive(Clone, Debug)]
pub struct ClassLogits {
    pub class: Class,
    pub main: Tensor,
    pub aux: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Tensor,
    /// `(class, L_main, L_aux)` as plain numbers.
    pub per_class: Vec<(Class, f64, f64)>,
}

/// `Σ_c λ_c (L_main^c + α L_aux^c)` over already-evaluated losses.
pub fn combine_losses(tape: &Tape, parts: &[(Class, Tensor, Option<Tensor>)], w: &LossWeights) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (class, main, aux) in parts {
        let mut term = main.clone();
        if let Some(aux) = aux {
            term = tape.add(&term, &tape.scale(aux, w.alpha)?)?;
        }
        let term = tape.scale(&term, w.lambda(*class))?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    total.ok_or_else(|| CoreError::ClassMismatch("no classes to combine".into()))
}

/// Focal losses of every class against its ground truth, combined.
pub fn total_loss(tape: &Tape, logits: &[ClassLogits], gt: &[(Class, Tensor)], w: &LossWeights) -> Result<LossParts> {
    let mut classes: Vec<Class> = logits.iter().map(|l| l.class).collect();
    let mut gt_classes: Vec<Class> = gt.iter().map(|g| g.0).collect();
    classes.sort();
    gt_classes.sort();
    if classes != gt_classes {
        return Err(CoreError::ClassMismatch(format!(
            "logits for {classes:?}, ground truth for {gt_classes:?}"
        )));
    }
    let mut parts = Vec::with_capacity(logits.len());
    let mut per_class = Vec::with_capacity(logits.len());
    for cl in logits {
        let target = &gt.iter().find(|g| g.0 == cl.class).expect("matched above").1;
        let main = focal_loss(tape, &cl.main, target, w.focal)?;
        let aux = if cl.aux.is_empty() {
            None
        } else {
            let mut acc: Option<Tensor> = None;
            for a in &cl.aux {
                let l = focal_loss(tape, a, target, w.focal)?;
                acc = Some(match acc {
                    Some(s) => tape.add(&s, &l)?,
                    None => l,
                });
            }
            Some(tape.scale(&acc.expect("non-empty"), 1.0 / cl.aux.len() as f64)?)
        };
        per_class.push((cl.class, main.data()[0], aux.as_ref().map_or(0.0, |a| a.data()[0])));
        parts.push((cl.class, main, aux));
    }
    Ok(LossParts {
        total: combine_losses(tape, &parts, w)?,
        per_class,
    })
}

/// `sigmoid(logit) ≥ 0.5` per cell.
pub fn binarize(logits: &Tensor) -> Vec<bool> {
    logits.data().iter().map(|&x| x >= 0.0).collect()
}

/// `|P ∩ G| / |P ∪ G|`, or 1 when both maps are empty.
pub fn iou_score(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "iou of maps with different sizes");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
