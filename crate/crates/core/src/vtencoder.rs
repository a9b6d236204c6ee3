//! Progressive refinement of the multi-resolution BEV query pyramid.

use bevr_tensor::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{bev_self_attn, spatial_cross_attn, AttnTrace, CrossAttnConfig, SelfAttnConfig};
use crate::error::{CoreError, Result};
use crate::geometry::{BevGridSpec, ProjectionTable};
use crate::nn::{self, Ctx, Init};
use crate::vfi::FeaturePyramid;

pub const QUERY_STD: f64 = 0.02;

/// Learnable query maps, level 0 finest.
#[derive(Clone, Debug)]
pub struct QueryPyramid {
    pub maps: Vec<Tensor>,
}

pub fn query_name(level: usize) -> String {
    format!("query.{level}")
}

/// Query maps drawn from N(0, 0.02²), deterministic in `seed`.
pub fn init_query_pyramid(spec: &BevGridSpec, seed: u64) -> QueryPyramid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, QUERY_STD).expect("valid std");
    let maps = (0..spec.levels)
        .map(|l| {
            let (r, c) = spec.level_dims(l);
            Tensor::from_fn(&[r, c, spec.channels], |_| dist.sample(&mut rng))
        })
        .collect();
    QueryPyramid { maps }
}

impl QueryPyramid {
    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        for (l, m) in self.maps.iter().enumerate() {
            store.insert(query_name(l), m.clone())?;
        }
        Ok(())
    }

    pub fn from_ctx(ctx: &Ctx, levels: usize) -> Result<Self> {
        let maps = (0..levels).map(|l| ctx.p(&query_name(l)).cloned()).collect::<Result<_>>()?;
        Ok(Self { maps })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub heads: usize,
    /// Sampling points per head in self-attention.
    pub points: usize,
    pub anchors: usize,
    pub feature_levels: usize,
    pub cameras: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
}

impl EncoderConfig {
    pub fn self_attn(&self) -> SelfAttnConfig {
        SelfAttnConfig {
            channels: self.channels,
            heads: self.heads,
            points: self.points,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn cross_attn(&self) -> CrossAttnConfig {
        CrossAttnConfig {
            channels: self.channels,
            heads: self.heads,
            anchors: self.anchors,
            feature_levels: self.feature_levels,
            cameras: self.cameras,
        }
    }

    pub fn init_layer(&self, init: &mut Init, prefix: &str) -> Result<()> {
        self.self_attn().init(init, &format!("{prefix}.sa"))?;
        self.cross_attn().init(init, &format!("{prefix}.ca"))?;
        init.ffn_block(&format!("{prefix}.out"), self.channels, self.ffn_hidden)
    }

    /// Encoder stacks for every pyramid level of `spec`.
    pub fn init_stacks(&self, store: &mut ParamStore, seed: u64, spec: &BevGridSpec) -> Result<()> {
        let mut init = Init::new(store, seed);
        for level in 0..spec.levels {
            for layer in 0..self.layers {
                self.init_layer(&mut init, &layer_prefix(level, layer))?;
            }
        }
        for level in 0..spec.levels {
            let (r, c) = spec.level_dims(level);
            for layer in 0..self.layers {
                self.self_attn().spread_offsets(store, &format!("{}.sa", layer_prefix(level, layer)), r, c)?;
            }
        }
        Ok(())
    }
}

pub fn layer_prefix(level: usize, layer: usize) -> String {
    format!("enc{level}.{layer}")
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub self_attn: AttnTrace,
    pub cross_attn: AttnTrace,
}

/// Self-attention block, then cross-attention, then `LN(x + FFN(x))`.
pub fn encoder_layer(
    ctx: &Ctx,
    prefix: &str,
    cfg: &EncoderConfig,
    q_map: &Tensor,
    features: &FeaturePyramid,
    table: &ProjectionTable,
    level: usize,
) -> Result<(Tensor, LayerTrace)> {
    let (x, self_attn) = bev_self_attn(ctx, &format!("{prefix}.sa"), &cfg.self_attn(), q_map)?;
    let (x, cross_attn) = spatial_cross_attn(
        ctx,
        &format!("{prefix}.ca"),
        &cfg.cross_attn(),
        &x,
        &features.maps,
        table.level(level)?,
    )?;
    let s = x.shape().to_vec();
    let flat = ctx.tape.reshape(&x, &[s[0] * s[1], s[2]])?;
    let y = nn::ffn_block(ctx, &format!("{prefix}.out"), &flat)?;
    Ok((ctx.tape.reshape(&y, &s)?, LayerTrace { self_attn, cross_attn }))
}

/// `upsample_bilinear(coarse, 2) + fine`.
pub fn merge_maps(tape: &Tape, coarse: &Tensor, fine: &Tensor) -> Result<Tensor> {
    let (cs, fs) = (coarse.shape(), fine.shape());
    if cs.len() != 3 || fs.len() != 3 || fs[0] != 2 * cs[0] || fs[1] != 2 * cs[1] || fs[2] != cs[2] {
        return Err(CoreError::Input(format!(
            "merge needs the fine map at twice the coarse extents, got coarse {cs:?} and fine {fs:?}"
        )));
    }
    Ok(tape.add(&tape.upsample_bilinear(coarse, 2)?, fine)?)
}

#[derive(Clone, Debug)]
pub struct Refined {
    /// Final BEV feature map at the target resolution.
    pub bev: Tensor,
    /// Post-encoder maps per level (level 0 finest), before merging upward.
    pub updated: Vec<Tensor>,
    /// Extents `(rows, cols)` of the map entering each encoder stack, in
    /// processing order (coarsest first).
    pub chain: Vec<(usize, usize)>,
    pub traces: Vec<Vec<LayerTrace>>,
}

impl Refined {
    /// Updated coarsest map, which feeds the auxiliary decoder.
    pub fn coarsest(&self) -> &Tensor {
        self.updated.last().expect("at least one level")
    }
}

/// Run the encoder stacks from the coarsest level to the finest, merging
/// each updated map into the next finer query map. With `final_add` and more
/// than one level, `B = Q_0' + upsample(Q_coarsest', 2^(levels−1))`;
/// otherwise `B = Q_0'`.
pub fn refine_pyramid(
    ctx: &Ctx,
    cfg: &EncoderConfig,
    queries: &QueryPyramid,
    features: &FeaturePyramid,
    table: &ProjectionTable,
    final_add: bool,
) -> Result<Refined> {
    let t = ctx.tape;
    let levels = queries.maps.len();
    if levels == 0 || table.num_levels() < levels {
        return Err(CoreError::Input(format!(
            "{levels} query levels but the projection table has {}",
            table.num_levels()
        )));
    }
    let mut updated: Vec<Option<Tensor>> = vec![None; levels];
    let mut chain = Vec::with_capacity(levels);
    let mut traces = vec![Vec::new(); levels];
    let mut prev: Option<Tensor> = None;
    for level in (0..levels).rev() {
        let q = &queries.maps[level];
        let mut x = match &prev {
            Some(coarse) => merge_maps(t, coarse, q)?,
            None => q.clone(),
        };
        chain.push((x.shape()[0], x.shape()[1]));
        for layer in 0..cfg.layers {
            let (y, tr) = encoder_layer(ctx, &layer_prefix(level, layer), cfg, &x, features, table, level)?;
            x = y;
            traces[level].push(tr);
        }
        updated[level] = Some(x.clone());
        prev = Some(x);
    }
    let updated: Vec<Tensor> = updated.into_iter().map(|u| u.expect("every level ran")).collect();
    let mut bev = updated[0].clone();
    if final_add && levels > 1 {
        let up = t.upsample_bilinear(&updated[levels - 1], 1 << (levels - 1))?;
        bev = t.add(&bev, &up)?;
    }
    Ok(Refined {
        bev,
        updated,
        chain,
        traces,
    })
}
