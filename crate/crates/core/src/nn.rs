//! Parameter initialization and the small layer vocabulary shared by every
//! module: linear maps, convolutions, batch/layer norm and FFNs.

use std::cell::RefCell;
use std::collections::BTreeMap;

use bevr_tensor::{BnStats, Conv2dSpec, Gradients, NormMode, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Registers freshly initialized parameters in a store.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.store.insert(name, t)?;
        Ok(())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value))?;
        Ok(())
    }

    /// `W: in×out` with He-normal entries scaled by `gain`, zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<()> {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        self.normal(&format!("{prefix}.w"), &[fan_in, fan_out], std)?;
        self.constant(&format!("{prefix}.b"), &[fan_out], 0.0)
    }

    pub fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize, bias: bool) -> Result<()> {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        self.normal(&format!("{prefix}.w"), &[k, k, cin, cout], std)?;
        if bias {
            self.constant(&format!("{prefix}.b"), &[cout], 0.0)?;
        }
        Ok(())
    }

    pub fn batch_norm(&mut self, prefix: &str, ch: usize) -> Result<()> {
        self.constant(&format!("{prefix}.gamma"), &[ch], 1.0)?;
        self.constant(&format!("{prefix}.beta"), &[ch], 0.0)?;
        self.constant(&format!("{prefix}#mean"), &[ch], 0.0)?;
        self.constant(&format!("{prefix}#var"), &[ch], 1.0)
    }

    pub fn layer_norm(&mut self, prefix: &str, ch: usize) -> Result<()> {
        self.constant(&format!("{prefix}.gamma"), &[ch], 1.0)?;
        self.constant(&format!("{prefix}.beta"), &[ch], 0.0)
    }

    pub fn conv_bn(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) -> Result<()> {
        self.conv(&format!("{prefix}.conv"), k, cin, cout, false)?;
        self.batch_norm(&format!("{prefix}.bn"), cout)
    }

    /// Parameters of [`mlp2`]; `last_gain` scales the output layer.
    pub fn mlp2(&mut self, prefix: &str, fan_in: usize, hidden: usize, fan_out: usize, last_gain: f64) -> Result<()> {
        self.linear(&format!("{prefix}.0"), fan_in, hidden, 1.0)?;
        self.linear(&format!("{prefix}.1"), hidden, fan_out, last_gain)
    }

    /// Parameters of [`ffn_block`].
    pub fn ffn_block(&mut self, prefix: &str, ch: usize, hidden: usize) -> Result<()> {
        self.mlp2(&format!("{prefix}.ffn"), ch, hidden, ch, 0.5)?;
        self.layer_norm(&format!("{prefix}.ln_ffn"), ch)
    }
}

/// One forward pass: the tape, every trainable parameter bound as a leaf,
/// and the batch-norm statistics observed in training mode.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub mode: NormMode,
    /// Fill in inspection-only trace tensors that cost extra work.
    pub full_traces: bool,
    params: BTreeMap<String, Tensor>,
    bn_updates: RefCell<Vec<(String, BnStats)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &ParamStore, mode: NormMode) -> Self {
        let params = store
            .iter()
            .map(|(name, value)| {
                let t = if bevr_tensor::is_buffer(name) {
                    value.clone()
                } else {
                    tape.leaf(value)
                };
                (name.to_owned(), t)
            })
            .collect();
        Self {
            tape,
            mode,
            full_traces: true,
            params,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Bind `params` exactly as given (already leaves of `tape`, or plain
    /// values on a probing pass).
    pub fn from_params(tape: &'a Tape, params: BTreeMap<String, Tensor>, mode: NormMode) -> Self {
        Self {
            tape,
            mode,
            full_traces: true,
            params,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| CoreError::Tensor(bevr_tensor::TensorError::UnknownParam(name.to_owned())))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Gradients of every trainable parameter, by name.
    pub fn grads(&self, g: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, leaf)| g.get(leaf).map(|t| (name.clone(), t)))
            .collect()
    }

    /// Batch statistics recorded in training mode, keyed by norm prefix.
    pub fn take_bn_updates(&self) -> Vec<(String, BnStats)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Fold observed batch statistics into the running buffers of `store`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(String, BnStats)]) -> Result<()> {
    for (prefix, batch) in updates {
        let mean_name = format!("{prefix}#mean");
        let var_name = format!("{prefix}#var");
        let mut running = BnStats {
            mean: store.get(&mean_name)?.to_vec(),
            var: store.get(&var_name)?.to_vec(),
        };
        running.update(batch, BN_MOMENTUM);
        let n = running.mean.len();
        store.set(&mean_name, Tensor::new(&[n], running.mean)?)?;
        store.set(&var_name, Tensor::new(&[n], running.var)?)?;
    }
    Ok(())
}

pub fn linear(ctx: &Ctx, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let t = ctx.tape;
    let y = t.matmul(x, ctx.p(&format!("{prefix}.w"))?)?;
    Ok(t.add(&y, ctx.p(&format!("{prefix}.b"))?)?)
}

/// Output columns `block·k..(block+1)·k` of a linear map whose `k·blocks`
/// outputs form equal consecutive blocks.
pub fn linear_block(ctx: &Ctx, prefix: &str, x: &Tensor, blocks: usize, block: usize) -> Result<Tensor> {
    let t = ctx.tape;
    let w = ctx.p(&format!("{prefix}.w"))?;
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    if blocks == 0 || cout % blocks != 0 || block >= blocks {
        return Err(CoreError::Input(format!("{prefix}: cannot take block {block} of {blocks} from {cout} outputs")));
    }
    let k = cout / blocks;
    let wb = t.reshape(&t.slice(&t.reshape(w, &[cin, blocks, k])?, 1, block, 1)?, &[cin, k])?;
    let bb = t.slice(ctx.p(&format!("{prefix}.b"))?, 0, block * k, k)?;
    Ok(t.add(&t.matmul(x, &wb)?, &bb)?)
}

/// Two linear maps with a relu between them.
pub fn mlp2(ctx: &Ctx, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let h = ctx.tape.relu(&linear(ctx, &format!("{prefix}.0"), x)?)?;
    linear(ctx, &format!("{prefix}.1"), &h)
}

pub fn conv(ctx: &Ctx, prefix: &str, x: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let t = ctx.tape;
    let y = t.conv2d(x, ctx.p(&format!("{prefix}.w"))?, spec)?;
    match ctx.params.get(&format!("{prefix}.b")) {
        Some(b) => Ok(t.add(&y, b)?),
        None => Ok(y),
    }
}

pub fn batch_norm(ctx: &Ctx, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let running = BnStats {
        mean: ctx.p(&format!("{prefix}#mean"))?.to_vec(),
        var: ctx.p(&format!("{prefix}#var"))?.to_vec(),
    };
    let (y, observed) = ctx.tape.batch_norm(
        x,
        ctx.p(&format!("{prefix}.gamma"))?,
        ctx.p(&format!("{prefix}.beta"))?,
        &running,
        ctx.mode,
        BN_EPS,
    )?;
    if let Some(stats) = observed {
        ctx.bn_updates.borrow_mut().push((prefix.to_owned(), stats));
    }
    Ok(y)
}

pub fn layer_norm(ctx: &Ctx, prefix: &str, x: &Tensor) -> Result<Tensor> {
    Ok(ctx.tape.layer_norm(
        x,
        ctx.p(&format!("{prefix}.gamma"))?,
        ctx.p(&format!("{prefix}.beta"))?,
        LN_EPS,
    )?)
}

/// conv (no bias) → BN → relu.
pub fn conv_bn_relu(ctx: &Ctx, prefix: &str, x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let spec = Conv2dSpec::new(stride, kernel / 2);
    let y = conv(ctx, &format!("{prefix}.conv"), x, spec)?;
    let y = batch_norm(ctx, &format!("{prefix}.bn"), &y)?;
    Ok(ctx.tape.relu(&y)?)
}

/// `LN(x + FFN(x))`.
pub fn ffn_block(ctx: &Ctx, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let y = mlp2(ctx, &format!("{prefix}.ffn"), x)?;
    let y = ctx.tape.add(x, &y)?;
    layer_norm(ctx, &format!("{prefix}.ln_ffn"), &y)
}
