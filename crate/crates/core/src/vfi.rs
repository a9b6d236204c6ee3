//! Visual feature interaction: a small convolutional backbone, the
//! feature-pyramid (intra-camera) pathway and inter-camera attention.

use bevr_tensor::{Conv2dSpec, Tensor};

use crate::attention::{inter_camera_attn, AttnTrace, InterCimConfig};
use crate::error::{CoreError, Result};
use crate::nn::{self, Ctx, Init};

/// Channel widths of the stem and of the three strided stages.
pub const BACKBONE_WIDTHS: [usize; 4] = [16, 24, 32, 48];

/// Number of feature levels (/4, /8, /16).
pub const FEATURE_LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct VfiConfig {
    pub channels: usize,
    pub cameras: usize,
    /// Stride of the stem conv: 2 gives levels at /4, /8, /16; 1 gives /2,
    /// /4, /8 for very small images.
    pub stem_stride: usize,
    /// Run the feature-pyramid pathway.
    pub intra: bool,
    /// Inter-camera attention, shared by all levels; `None` skips it.
    pub inter: Option<InterCimConfig>,
}

impl VfiConfig {
    pub fn init(&self, init: &mut Init) -> Result<()> {
        init_backbone(init, "bb", self.channels)?;
        if self.intra {
            init_intra_cim(init, "fpn", self.channels)?;
        }
        if let Some(inter) = &self.inter {
            inter.init(init, "inter")?;
        }
        Ok(())
    }
}

pub fn init_backbone(init: &mut Init, prefix: &str, channels: usize) -> Result<()> {
    let w = BACKBONE_WIDTHS;
    init.conv_bn(&format!("{prefix}.stem"), 3, 3, w[0])?;
    for s in 0..3 {
        init.conv_bn(&format!("{prefix}.s{s}.a"), 3, w[s], w[s + 1])?;
        init.conv_bn(&format!("{prefix}.s{s}.b"), 3, w[s + 1], w[s + 1])?;
        init.conv(&format!("{prefix}.match{s}"), 1, w[s + 1], channels, true)?;
    }
    Ok(())
}

/// Strided conv stages emitting three channel-matched maps, each half the
/// size of the previous one; the finest is `/(2·stem_stride)`.
pub fn tiny_backbone(ctx: &Ctx, prefix: &str, image: &Tensor, stem_stride: usize) -> Result<Vec<Tensor>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(CoreError::Input(format!("backbone expects an H×W×3 image, got {s:?}")));
    }
    let m = 8 * stem_stride;
    if s[0] % m != 0 || s[1] % m != 0 || s[0] == 0 || s[1] == 0 {
        return Err(CoreError::Input(format!(
            "image size {}×{} is not a positive multiple of {m}",
            s[0], s[1]
        )));
    }
    let mut x = nn::conv_bn_relu(ctx, &format!("{prefix}.stem"), image, 3, stem_stride)?;
    let mut out = Vec::with_capacity(FEATURE_LEVELS);
    for st in 0..3 {
        x = nn::conv_bn_relu(ctx, &format!("{prefix}.s{st}.a"), &x, 3, 2)?;
        x = nn::conv_bn_relu(ctx, &format!("{prefix}.s{st}.b"), &x, 3, 1)?;
        out.push(nn::conv(ctx, &format!("{prefix}.match{st}"), &x, Conv2dSpec::new(1, 0))?);
    }
    Ok(out)
}

pub fn init_intra_cim(init: &mut Init, prefix: &str, channels: usize) -> Result<()> {
    for l in 0..FEATURE_LEVELS {
        init.conv(&format!("{prefix}.lat{l}"), 1, channels, channels, true)?;
        init.conv(&format!("{prefix}.smooth{l}"), 3, channels, channels, true)?;
    }
    Ok(())
}

/// Top-down feature pyramid over one camera's maps, finest first: each
/// level adds the ×2-upsampled merged level above to its lateral 1×1 conv,
/// then a 3×3 conv smooths it.
pub fn intra_cim(ctx: &Ctx, prefix: &str, levels: &[Tensor]) -> Result<Vec<Tensor>> {
    let t = ctx.tape;
    let mut merged: Vec<Tensor> = Vec::with_capacity(levels.len());
    for (l, x) in levels.iter().enumerate().rev() {
        let mut m = nn::conv(ctx, &format!("{prefix}.lat{l}"), x, Conv2dSpec::new(1, 0))?;
        if let Some(above) = merged.last() {
            m = t.add(&m, &t.upsample_bilinear(above, 2)?)?;
        }
        merged.push(m);
    }
    merged.reverse();
    merged
        .iter()
        .enumerate()
        .map(|(l, m)| nn::conv(ctx, &format!("{prefix}.smooth{l}"), m, Conv2dSpec::same(3)))
        .collect()
}

/// Per-camera, per-level feature maps at channel dim C.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `maps[camera][level]`, level 0 finest.
    pub maps: Vec<Vec<Tensor>>,
    /// One trace per level when inter-camera attention ran.
    pub inter_traces: Vec<AttnTrace>,
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<Vec<Vec<usize>>> {
        self.maps
            .iter()
            .map(|cam| cam.iter().map(|m| m.shape().to_vec()).collect())
            .collect()
    }
}

/// Backbone per camera, then the pyramid pathway per camera, then
/// inter-camera attention per level (as enabled).
pub fn vfi_forward(ctx: &Ctx, cfg: &VfiConfig, images: &[Tensor]) -> Result<FeaturePyramid> {
    if images.len() != cfg.cameras || images.is_empty() {
        return Err(CoreError::Input(format!(
            "expected {} camera images, got {}",
            cfg.cameras,
            images.len()
        )));
    }
    let mut maps = Vec::with_capacity(images.len());
    for img in images {
        let raw = tiny_backbone(ctx, "bb", img, cfg.stem_stride)?;
        maps.push(if cfg.intra { intra_cim(ctx, "fpn", &raw)? } else { raw });
    }
    let mut inter_traces = Vec::new();
    if let Some(inter) = &cfg.inter {
        for l in 0..FEATURE_LEVELS {
            let level: Vec<Tensor> = maps.iter().map(|m| m[l].clone()).collect();
            let (out, trace) = inter_camera_attn(ctx, "inter", inter, &level)?;
            for (cam, o) in maps.iter_mut().zip(out) {
                cam[l] = o;
            }
            inter_traces.push(trace);
        }
    }
    Ok(FeaturePyramid { maps, inter_traces })
}
