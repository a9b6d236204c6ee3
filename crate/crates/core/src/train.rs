//! Training, evaluation and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use bevr_tensor::{BnStats, NormMode, ParamStore, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::class::Class;
use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::geometry::{precompute_projection_table, ProjectionTable, Rig};
use crate::heads::{self, binarize, iou_score};
use crate::model::{self, ModelConfig};
use crate::nn::{apply_bn_updates, Ctx};
use crate::synthscene::SceneSample;

/// Checkpoint buffers holding the effective config and rig as UTF-8 bytes.
pub const CONFIG_BUFFER: &str = "#config";
pub const RIG_BUFFER: &str = "#rig";

/// Worker threads from `BEVR_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("BEVR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// `f` over `items` on up to `threads` scoped threads, results in input
/// order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads.min(items.len()));
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// A sample converted to network inputs for one class.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub images: Vec<Tensor>,
    pub target: Tensor,
    pub gt: Vec<bool>,
}

/// Everything fixed for a run: config, rig, network layout and the
/// projection table.
#[derive(Clone, Debug)]
pub struct Session {
    pub run: RunConfig,
    pub rig: Rig,
    pub model: ModelConfig,
    pub table: ProjectionTable,
}

impl Session {
    pub fn new(run: RunConfig, rig: Rig) -> Result<Self> {
        run.validate()?;
        if rig.cameras.is_empty() {
            return Err(CoreError::Config("the rig has no cameras".into()));
        }
        let model = run.model(rig.cameras.len())?;
        let table = precompute_projection_table(&model.effective_grid(), &rig.cameras);
        Ok(Self { run, rig, model, table })
    }

    pub fn class(&self) -> Class {
        self.run.class
    }

    pub fn init_params(&self) -> Result<ParamStore> {
        model::init_model(&self.model, self.run.seed, self.run.precision)
    }

    /// Check samples against the rig and grid and convert them.
    pub fn prepare(&self, samples: &[SceneSample]) -> Result<Vec<Prepared>> {
        let grid = &self.model.grid;
        samples
            .iter()
            .enumerate()
            .map(|(k, s)| {
                if s.images.len() != self.rig.cameras.len() {
                    return Err(CoreError::Input(format!(
                        "sample {k} has {} images, the rig has {} cameras",
                        s.images.len(),
                        self.rig.cameras.len()
                    )));
                }
                for (img, cam) in s.images.iter().zip(&self.rig.cameras) {
                    if (img.height, img.width) != (cam.height, cam.width) {
                        return Err(CoreError::Input(format!(
                            "sample {k}: image {}×{} does not match the camera's {}×{}",
                            img.height, img.width, cam.height, cam.width
                        )));
                    }
                }
                let map = s.map(self.class()).ok_or(CoreError::ClassNotInScene(self.class().name()))?;
                if (map.rows, map.cols) != (grid.rows, grid.cols) {
                    return Err(CoreError::Input(format!(
                        "sample {k}: {} map is {}×{}, the grid is {}×{}",
                        self.class(),
                        map.rows,
                        map.cols,
                        grid.rows,
                        grid.cols
                    )));
                }
                Ok(Prepared {
                    images: s.images.iter().map(|i| i.to_tensor()).collect(),
                    target: map.to_tensor(),
                    gt: map.data.clone(),
                })
            })
            .collect()
    }

    /// Main and auxiliary logits of one sample, evaluation mode.
    pub fn predict(&self, store: &ParamStore, images: &[Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        let tape = Tape::no_grad();
        let mut ctx = Ctx::new(&tape, store, NormMode::Eval);
        ctx.full_traces = false;
        let out = model::forward(&ctx, &self.model, images, &self.table)?;
        Ok((out.logits.main, out.logits.aux))
    }

    /// Per-sample IoU of the binarized main prediction.
    pub fn evaluate(&self, store: &ParamStore, data: &[Prepared]) -> Result<Vec<f64>> {
        par_map(data, worker_threads(), |p| {
            let (main, _) = self.predict(store, &p.images)?;
            Ok(iou_score(&binarize(&main), &p.gt))
        })
        .into_iter()
        .collect()
    }

    fn sample_pass(&self, store: &ParamStore, p: &Prepared, scale: f64) -> Result<SampleStep> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, store, NormMode::Train);
        ctx.full_traces = false;
        let out = model::forward(&ctx, &self.model, &p.images, &self.table)?;
        let iou = iou_score(&binarize(&out.logits.main), &p.gt);
        let parts = heads::total_loss(&tape, &[out.logits], &[(self.class(), p.target.clone())], &self.run.loss_weights())?;
        let loss = parts.total.data()[0];
        let (_, main, aux) = parts.per_class[0];
        let grads = if loss.is_finite() {
            let g = tape.backward(&tape.scale(&parts.total, scale)?)?;
            ctx.grads(&g)
        } else {
            BTreeMap::new()
        };
        Ok(SampleStep {
            loss,
            main,
            aux,
            iou,
            grads,
            bn: ctx.take_bn_updates(),
        })
    }

    /// Train `store` in place for `run.epochs` epochs (or until the IoU
    /// target is met), calling `on_epoch` after each epoch.
    pub fn train(
        &self,
        store: &mut ParamStore,
        data: &[Prepared],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if data.is_empty() {
            return Err(CoreError::Input("cannot train on an empty dataset".into()));
        }
        let opt = self.run.optimizer();
        let threads = worker_threads();
        let mut logs = Vec::with_capacity(self.run.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 1..=self.run.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
            order.shuffle(&mut rng);
            let (mut sum_main, mut sum_aux, mut sum_iou) = (0.0, 0.0, 0.0);
            for batch in order.chunks(self.run.batch_size) {
                let step = store.step() + 1;
                let scale = 1.0 / batch.len() as f64;
                let frozen: &ParamStore = store;
                let results = par_map(batch, threads, |&i| self.sample_pass(frozen, &data[i], scale));
                let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
                let mut bn: Vec<(String, BnStats)> = Vec::new();
                for r in results {
                    let r = match r {
                        Err(CoreError::Tensor(TensorError::NumericFault { .. })) => {
                            return Err(CoreError::NonFiniteLoss { step })
                        }
                        r => r?,
                    };
                    if !r.loss.is_finite() {
                        return Err(CoreError::NonFiniteLoss { step });
                    }
                    sum_main += r.main;
                    sum_aux += r.aux;
                    sum_iou += r.iou;
                    for (name, g) in r.grads {
                        match grads.get_mut(&name) {
                            Some(acc) => *acc = acc_add(acc, &g),
                            None => {
                                grads.insert(name, g);
                            }
                        }
                    }
                    bn.extend(r.bn);
                }
                if grads.values().any(|g| !g.all_finite()) {
                    return Err(CoreError::NonFiniteLoss { step });
                }
                store.adamw_step(&grads, &opt)?;
                apply_bn_updates(store, &bn)?;
            }
            let n = data.len() as f64;
            let log = EpochLog {
                epoch,
                step: store.step(),
                main: sum_main / n,
                aux: sum_aux / n,
                iou: sum_iou / n,
                eval_iou: None,
            };
            let mut log = log;
            let mut stop = false;
            if let Some(target) = self.run.stop_at_iou {
                if log.iou >= target {
                    let ious = self.evaluate(store, data)?;
                    let mean = ious.iter().sum::<f64>() / n;
                    log.eval_iou = Some(mean);
                    stop = mean >= target;
                }
            }
            on_epoch(&log);
            logs.push(log);
            if stop {
                break;
            }
        }
        Ok(logs)
    }
}

fn acc_add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

struct SampleStep {
    loss: f64,
    main: f64,
    aux: f64,
    iou: f64,
    grads: BTreeMap<String, Tensor>,
    bn: Vec<(String, BnStats)>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far, including earlier runs.
    pub step: u64,
    pub main: f64,
    pub aux: f64,
    /// Mean IoU of the training-mode predictions seen during the epoch.
    pub iou: f64,
    /// Evaluation-mode IoU over the training set, when it was computed.
    pub eval_iou: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch\t{}\tstep\t{}\tl_main\t{:.6}\tl_aux\t{:.6}\ttrain_iou\t{:.4}",
            self.epoch, self.step, self.main, self.aux, self.iou
        )?;
        if let Some(e) = self.eval_iou {
            write!(f, "\teval_iou\t{e:.4}")?;
        }
        Ok(())
    }
}

fn text_buffer(text: &str) -> Tensor {
    let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
    Tensor::new(&[bytes.len()], bytes).expect("1-d")
}

fn buffer_text(store: &mut ParamStore, name: &str) -> Result<String> {
    let t = store
        .remove(name)
        .ok_or_else(|| CoreError::Config(format!("checkpoint has no {name} record")))?;
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| u8::try_from(v as i64).ok().filter(|&b| f64::from(b) == v))
        .collect::<Option<_>>()
        .ok_or_else(|| CoreError::Config(format!("checkpoint {name} record is not a byte string")))?;
    String::from_utf8(bytes).map_err(|_| CoreError::Config(format!("checkpoint {name} record is not UTF-8")))
}

/// Checkpoint bytes: the parameters plus the config and rig needed to
/// rebuild the session.
pub fn checkpoint_bytes(store: &ParamStore, session: &Session) -> Result<Vec<u8>> {
    let mut s = store.clone();
    s.remove(CONFIG_BUFFER);
    s.remove(RIG_BUFFER);
    s.insert(CONFIG_BUFFER, text_buffer(&session.run.to_text()))?;
    s.insert(RIG_BUFFER, text_buffer(&session.rig.to_text()))?;
    Ok(s.to_checkpoint_bytes())
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, session: &Session) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(store, session)?).map_err(|e| CoreError::io(path, e))
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(ParamStore, Session)> {
    let mut store = ParamStore::from_checkpoint_bytes(buf)?;
    let run = RunConfig::parse(&buffer_text(&mut store, CONFIG_BUFFER)?)?;
    let rig = Rig::parse(&buffer_text(&mut store, RIG_BUFFER)?)?;
    Ok((store, Session::new(run, rig)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, Session)> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    checkpoint_from_bytes(&buf)
}
