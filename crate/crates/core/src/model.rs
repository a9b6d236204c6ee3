//! The assembled network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use bevr_tensor::{ParamStore, Precision, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::InterCimConfig;
use crate::class::Class;
use crate::error::{CoreError, Result};
use crate::geometry::{BevGridSpec, ProjectionTable};
use crate::heads::{self, ClassLogits};
use crate::nn::{Ctx, Init};
use crate::vfi::{self, FeaturePyramid, VfiConfig, FEATURE_LEVELS};
use crate::vtencoder::{self, EncoderConfig, QueryPyramid, Refined};

/// Ablation variants; `ALL` is in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    Ours,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterKind {
    Proposed,
    Conventional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxMode {
    None,
    /// One decoder on the updated coarsest map.
    Coarsest,
    /// One decoder per level except the target resolution.
    AllNonFinal,
}

/// Architectural switches implied by a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switches {
    pub intra: bool,
    pub inter: Option<InterKind>,
    pub single_level: bool,
    pub aux: AuxMode,
    pub final_add: bool,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
        Variant::Ours,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::M1 => "m1",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
            Variant::M4 => "m4",
            Variant::M5 => "m5",
            Variant::M6 => "m6",
            Variant::Ours => "ours",
        }
    }

    pub fn switches(self) -> Switches {
        let ours = Switches {
            intra: true,
            inter: Some(InterKind::Proposed),
            single_level: false,
            aux: AuxMode::Coarsest,
            final_add: true,
        };
        match self {
            Variant::Ours => ours,
            Variant::M1 => Switches {
                intra: false,
                inter: None,
                ..ours
            },
            Variant::M2 => Switches { inter: None, ..ours },
            Variant::M3 => Switches {
                inter: Some(InterKind::Conventional),
                ..ours
            },
            Variant::M4 => Switches {
                single_level: true,
                aux: AuxMode::None,
                final_add: false,
                ..ours
            },
            Variant::M5 => Switches {
                aux: AuxMode::None,
                ..ours
            },
            Variant::M6 => Switches {
                aux: AuxMode::AllNonFinal,
                final_add: false,
                ..ours
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown variant {s:?} (expected ours or m1..m6)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Grid of the full model; variants may use fewer levels.
    pub grid: BevGridSpec,
    pub cameras: usize,
    pub heads: usize,
    pub points: usize,
    pub delta: f64,
    pub layers: usize,
    pub ffn_mult: usize,
    pub stem_stride: usize,
    pub class: Class,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn desk(class: Class, variant: Variant) -> Self {
        Self {
            grid: BevGridSpec::desk(),
            cameras: 4,
            heads: 8,
            points: 4,
            delta: 0.25,
            layers: 2,
            ffn_mult: 2,
            stem_stride: 2,
            class,
            variant,
        }
    }

    pub fn switches(&self) -> Switches {
        self.variant.switches()
    }

    /// The grid this variant actually runs on.
    pub fn effective_grid(&self) -> BevGridSpec {
        let mut g = self.grid.clone();
        if self.switches().single_level {
            g.levels = 1;
        }
        g
    }

    pub fn vfi(&self) -> VfiConfig {
        let c = self.grid.channels;
        let sw = self.switches();
        let inter = sw.inter.map(|k| {
            let mut cfg = match k {
                InterKind::Proposed => InterCimConfig::proposed(c, self.cameras, self.delta),
                InterKind::Conventional => InterCimConfig::conventional(c, self.cameras),
            };
            cfg.ffn_hidden = self.ffn_mult * c;
            cfg
        });
        VfiConfig {
            channels: c,
            cameras: self.cameras,
            stem_stride: self.stem_stride,
            intra: sw.intra,
            inter,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.grid.channels,
            heads: self.heads,
            points: self.points,
            anchors: self.grid.z_anchors.len(),
            feature_levels: FEATURE_LEVELS,
            cameras: self.cameras,
            layers: self.layers,
            ffn_hidden: self.ffn_mult * self.grid.channels,
        }
    }

    /// Pyramid levels that feed an auxiliary decoder.
    pub fn aux_levels(&self) -> Vec<usize> {
        let levels = self.effective_grid().levels;
        match self.switches().aux {
            AuxMode::None => Vec::new(),
            AuxMode::Coarsest => vec![levels - 1],
            AuxMode::AllNonFinal => (1..levels).collect(),
        }
    }
}

fn head_prefix(class: Class) -> String {
    format!("head.{class}")
}

fn decoder_prefix(class: Class) -> String {
    format!("dec.{class}")
}

fn aux_prefix(class: Class, level: usize) -> String {
    format!("aux.{class}.{level}")
}

/// Fresh parameters for a model, deterministic in `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64, precision: Precision) -> Result<ParamStore> {
    let grid = cfg.effective_grid();
    let c = grid.channels;
    let mut store = ParamStore::new(precision);
    {
        let mut init = Init::new(&mut store, seed);
        let vfi = cfg.vfi();
        vfi.init(&mut init)?;
        heads::init_class_header(&mut init, &head_prefix(cfg.class), c)?;
        heads::init_map_decoder(&mut init, &decoder_prefix(cfg.class), c)?;
        for level in cfg.aux_levels() {
            heads::init_aux_decoder(&mut init, &aux_prefix(cfg.class, level), c, level)?;
        }
    }
    if let Some(inter) = &cfg.vfi().inter {
        if inter.reference == crate::attention::Reference::QueryPixel {
            // spread in units of the finest feature level; shared by all levels
            inter.spread_offsets(&mut store, "inter", 8, 8)?;
        }
    }
    cfg.encoder().init_stacks(&mut store, seed.wrapping_add(1), &grid)?;
    vtencoder::init_query_pyramid(&grid, seed.wrapping_add(2)).register(&mut store)?;
    Ok(store)
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: ClassLogits,
    pub refined: Refined,
    pub features: FeaturePyramid,
}

/// Images (`H×W×3` per camera, rig order) to per-class BEV logits.
pub fn forward(ctx: &Ctx, cfg: &ModelConfig, images: &[Tensor], table: &ProjectionTable) -> Result<ModelOutput> {
    let grid = cfg.effective_grid();
    let features = vfi::vfi_forward(ctx, &cfg.vfi(), images)?;
    let queries = QueryPyramid::from_ctx(ctx, grid.levels)?;
    let refined = vtencoder::refine_pyramid(ctx, &cfg.encoder(), &queries, &features, table, cfg.switches().final_add)?;
    let h = heads::class_header(ctx, &head_prefix(cfg.class), &refined.bev)?;
    let main = heads::map_decoder(ctx, &decoder_prefix(cfg.class), &h)?;
    let aux = cfg
        .aux_levels()
        .into_iter()
        .map(|level| heads::aux_decoder(ctx, &aux_prefix(cfg.class, level), &refined.updated[level], level))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelOutput {
        logits: ClassLogits {
            class: cfg.class,
            main,
            aux,
        },
        refined,
        features,
    })
}
