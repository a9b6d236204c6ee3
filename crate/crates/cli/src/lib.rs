//! The `bevr` command line: argument parsing, config resolution and the
//! six subcommands. `main.rs` only maps results to exit codes.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use bevr_core::config::RunConfig;
use bevr_core::dataset::{from_bytes, load_dataset, save_dataset};
use bevr_core::geometry::Rig;
use bevr_core::gradsuite::{run_suite, SuiteOptions, SUITE_RTOL};
use bevr_core::heads::binarize;
use bevr_core::model::Variant;
use bevr_core::synthscene::{generate_dataset, BevMap, Image, SceneSample};
use bevr_core::train::{checkpoint_bytes, load_checkpoint, save_checkpoint, Session};
use bevr_core::{Class, CoreError};
use bevr_tensor::{OpKind, ParamStore};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    /// A check ran to completion and failed.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Runtime(m) => f.write_str(m),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(format!("writing output: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "bevr", version, about = "Multi-camera BEV segmentation with multi-resolution query refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every subcommand accepts. Values given here override the config
/// file, which overrides the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// `key = value` config file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Dataset file
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Camera rig file (default: the four-camera desk rig)
    #[arg(long, value_name = "PATH")]
    pub rig: Option<PathBuf>,
    /// vehicle, pedestrian, drivable or lane
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// ours or m1..m6
    #[arg(long, value_name = "TAG")]
    pub variant: Option<String>,
    /// Override one config setting; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Train one class and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Report per-sample and mean IoU of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Train every ablation variant and print the comparison table
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Write ground truth, predictions and camera images of one sample as PPM files
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Finite-difference check of every gradient
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, value_name = "OP:FACTOR")]
        inject_fault: Option<String>,
    },
}

/// Layer `common` (config file, `--set` pairs, then flags) over `base`.
pub fn resolve(common: &Common, base: RunConfig) -> CliResult<RunConfig> {
    let mut run = base;
    let bad = |e: CoreError| CliError::Usage(e.to_string());
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        run.apply_text(&text).map_err(bad)?;
    }
    for pair in &common.set {
        let Some((k, v)) = pair.split_once('=') else {
            return usage(format!("--set expects KEY=VALUE, got {pair:?}"));
        };
        run.set(k.trim(), v.trim()).map_err(bad)?;
    }
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    if let Some(c) = &common.class {
        run.class = c.parse().map_err(bad)?;
    }
    if let Some(v) = &common.variant {
        run.variant = v.parse().map_err(bad)?;
    }
    if let Some(d) = &common.data {
        run.data = Some(d.clone());
    }
    if let Some(r) = &common.rig {
        run.rig = Some(r.clone());
    }
    run.validate().map_err(bad)?;
    Ok(run)
}

pub fn load_rig(run: &RunConfig) -> CliResult<Rig> {
    Ok(match &run.rig {
        Some(path) => Rig::load(path)?,
        None => Rig::desk(),
    })
}

fn data_path(run: &RunConfig) -> CliResult<&Path> {
    match &run.data {
        Some(p) => Ok(p),
        None => usage("no dataset given (--data PATH or `data` in the config)"),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Gen { common, count } => cmd_gen(&common, count, out),
        Command::Train { common, resume } => cmd_train(&common, resume.as_deref(), out),
        Command::Eval { common, checkpoint } => cmd_eval(&common, &checkpoint, out),
        Command::Ablate { common } => cmd_ablate(&common, out),
        Command::Render { common, checkpoint, index } => cmd_render(&common, &checkpoint, index, out),
        Command::Gradcheck { common, inject_fault } => cmd_gradcheck(&common, inject_fault.as_deref(), out),
    }
}

fn cmd_gen(common: &Common, count: usize, out: &mut dyn Write) -> CliResult<()> {
    let run = resolve(common, RunConfig::default())?;
    let Some(path) = &common.out else {
        return usage("gen needs --out PATH");
    };
    let rig = load_rig(&run)?;
    let samples = generate_dataset(run.seed, count, &rig, &run.grid()?)?;
    save_dataset(path, &samples)?;
    writeln!(out, "samples\t{count}\tseed\t{}\tout\t{}", run.seed, path.display())?;
    Ok(())
}

fn layout(store: &ParamStore) -> Vec<(String, Vec<usize>)> {
    store.iter().map(|(n, t)| (n.to_owned(), t.shape().to_vec())).collect()
}

fn cmd_train(common: &Common, resume: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let Some(ckpt) = &common.out else {
        return usage("train needs --out PATH for the checkpoint");
    };
    let (base, resumed) = match resume {
        Some(p) => {
            let (store, session) = load_checkpoint(p)?;
            (session.run.clone(), Some((store, session.rig)))
        }
        None => (RunConfig::default(), None),
    };
    let run = resolve(common, base)?;
    let rig = match (&common.rig, &resumed) {
        (None, Some((_, rig))) => rig.clone(),
        _ => load_rig(&run)?,
    };
    let samples = load_dataset(data_path(&run)?)?;
    let session = Session::new(run, rig)?;
    let data = session.prepare(&samples)?;
    let fresh = session.init_params()?;
    let mut store = match resumed {
        Some((store, _)) => {
            if layout(&store) != layout(&fresh) {
                return Err(CliError::Runtime(
                    "the checkpoint's parameters do not match the configured model".into(),
                ));
            }
            store
        }
        None => fresh,
    };
    let mut write_err = None;
    session.train(&mut store, &data, |log| {
        if let Err(e) = writeln!(out, "{log}").and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    save_checkpoint(ckpt, &store, &session)?;
    writeln!(out, "checkpoint\t{}\tstep\t{}", ckpt.display(), store.step())?;
    Ok(())
}

/// IoU of every sample under `session`, as printed by `eval`.
pub fn eval_report(session: &Session, store: &ParamStore, samples: &[SceneSample]) -> CliResult<String> {
    let data = session.prepare(samples)?;
    let ious = session.evaluate(store, &data)?;
    let mut s = format!("class\t{}\tsamples\t{}\n", session.class(), ious.len());
    for (k, v) in ious.iter().enumerate() {
        s.push_str(&format!("sample\t{k}\tiou\t{v:.6}\n"));
    }
    if !ious.is_empty() {
        s.push_str(&format!("mean_iou\t{:.6}\n", ious.iter().sum::<f64>() / ious.len() as f64));
    }
    Ok(s)
}

fn cmd_eval(common: &Common, checkpoint: &Path, out: &mut dyn Write) -> CliResult<()> {
    let (store, session) = load_checkpoint(checkpoint)?;
    if let Some(c) = &common.class {
        let want: Class = c.parse().map_err(|e: CoreError| CliError::Usage(e.to_string()))?;
        if want != session.class() {
            return Err(CliError::Runtime(format!(
                "the checkpoint was trained for {}, not {want}",
                session.class()
            )));
        }
    }
    let path = match &common.data {
        Some(p) => p.clone(),
        None => data_path(&session.run)?.to_path_buf(),
    };
    let samples = load_dataset(&path)?;
    out.write_all(eval_report(&session, &store, &samples)?.as_bytes())?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Held-out mean IoU per seed.
    pub per_seed: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub class: Class,
    pub dataset_sha256: String,
    pub samples: usize,
    pub train: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Median of "ours" at least the median of m4.
    pub fn ours_beats_m4(&self) -> Option<bool> {
        Some(self.row(Variant::Ours)?.median >= self.row(Variant::M4)?.median)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "dataset_sha256\t{}\tsamples\t{}\ttrain\t{}\theldout\t{}",
            self.dataset_sha256,
            self.samples,
            self.train,
            self.samples - self.train
        )?;
        write!(f, "variant\t{}", self.class)?;
        for s in &self.seeds {
            write!(f, "\tseed_{s}")?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{}\t{:.4}", r.variant, r.median)?;
            for v in &r.per_seed {
                write!(f, "\t{v:.4}")?;
            }
            writeln!(f)?;
        }
        if let (Some(ours), Some(m4)) = (self.row(Variant::Ours), self.row(Variant::M4)) {
            writeln!(
                f,
                "ours_vs_m4\t{:.4}\t{:.4}\t{}",
                ours.median,
                m4.median,
                if ours.median >= m4.median { "ours>=m4" } else { "ours<m4" }
            )?;
        }
        Ok(())
    }
}

/// Leading `fraction` of the samples for training, the rest held out.
pub fn ablation_split(samples: &[SceneSample], fraction: f64) -> CliResult<(&[SceneSample], &[SceneSample])> {
    let n = samples.len();
    let train = ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(1));
    if train == 0 {
        return Err(CliError::Runtime(format!(
            "{n} samples cannot be split into training and held-out parts"
        )));
    }
    Ok(samples.split_at(train))
}

/// Train one variant with one seed; held-out mean IoU and the final
/// checkpoint bytes.
pub fn ablation_cell(
    base: &RunConfig,
    rig: &Rig,
    train: &[SceneSample],
    heldout: &[SceneSample],
    variant: Variant,
    seed: u64,
) -> CliResult<(f64, Vec<u8>)> {
    let mut run = base.clone();
    run.variant = variant;
    run.seed = seed;
    let session = Session::new(run, rig.clone())?;
    let train_data = session.prepare(train)?;
    let held = session.prepare(heldout)?;
    let mut store = session.init_params()?;
    session.train(&mut store, &train_data, |_| {})?;
    let ious = session.evaluate(&store, &held)?;
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok((mean, checkpoint_bytes(&store, &session)?))
}

/// Every variant under the same seeds, budget and dataset bytes.
pub fn ablate(
    base: &RunConfig,
    rig: &Rig,
    dataset: &[u8],
    mut progress: impl FnMut(Variant, u64, f64, &[u8]),
) -> CliResult<AblationReport> {
    let samples = from_bytes(dataset)?;
    let (train, heldout) = ablation_split(&samples, base.ablate_train_fraction)?;
    let seeds: Vec<u64> = (0..base.ablate_seeds as u64).map(|s| base.seed.wrapping_add(s)).collect();
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let (iou, checkpoint) = ablation_cell(base, rig, train, heldout, variant, seed)?;
            progress(variant, seed, iou, &checkpoint);
            per_seed.push(iou);
        }
        rows.push(AblationRow {
            variant,
            median: median(&per_seed),
            per_seed,
        });
    }
    Ok(AblationReport {
        class: base.class,
        dataset_sha256: sha256_hex(dataset),
        samples: samples.len(),
        train: train.len(),
        seeds,
        rows,
    })
}

fn cmd_ablate(common: &Common, out: &mut dyn Write) -> CliResult<()> {
    let run = resolve(common, RunConfig::default())?;
    let rig = load_rig(&run)?;
    let path = data_path(&run)?;
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let report = ablate(&run, &rig, &bytes, |v, seed, iou, ckpt| {
        eprintln!("ablate\t{v}\tseed\t{seed}\theldout_iou\t{iou:.4}\tcheckpoint_sha256\t{}", sha256_hex(ckpt));
    })?;
    let text = report.to_string();
    out.write_all(text.as_bytes())?;
    if let Some(p) = &common.out {
        fs::write(p, &text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

/// Display color of each class; cells of no class are white.
pub fn class_color(class: Class) -> [u8; 3] {
    match class {
        Class::Vehicle => [255, 140, 0],
        Class::Pedestrian => [30, 90, 255],
        Class::Drivable => [128, 128, 128],
        Class::Lane => [220, 30, 30],
    }
}

pub const BACKGROUND: [u8; 3] = [255; 3];

/// A binary map as an RGB raster, ego-forward up and ego-left on the left:
/// pixel `(i, j)` shows map cell `(rows-1-i, cols-1-j)`.
pub fn map_pixels(map: &BevMap, class: Class) -> Vec<u8> {
    let mut px = Vec::with_capacity(map.rows * map.cols * 3);
    for i in 0..map.rows {
        for j in 0..map.cols {
            let on = map.get(map.rows - 1 - i, map.cols - 1 - j);
            px.extend(if on { class_color(class) } else { BACKGROUND });
        }
    }
    px
}

pub fn image_pixels(img: &Image) -> Vec<u8> {
    img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Binary (P6) portable pixmap.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> CliResult<()> {
    assert_eq!(rgb.len(), width * height * 3, "raster size");
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_render(common: &Common, checkpoint: &Path, index: usize, out: &mut dyn Write) -> CliResult<()> {
    let Some(dir) = &common.out else {
        return usage("render needs --out DIR");
    };
    let (store, session) = load_checkpoint(checkpoint)?;
    let path = match &common.data {
        Some(p) => p.clone(),
        None => data_path(&session.run)?.to_path_buf(),
    };
    let samples = load_dataset(&path)?;
    let Some(sample) = samples.get(index) else {
        return Err(CliError::Runtime(format!(
            "sample index {index} is out of range ({} samples)",
            samples.len()
        )));
    };
    let prepared = session.prepare(std::slice::from_ref(sample))?;
    let (main, aux) = session.predict(&store, &prepared[0].images)?;
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;

    let class = session.class();
    let gt = sample.map(class).expect("prepare checked the class");
    let as_map = |logits: &bevr_tensor::Tensor| BevMap {
        rows: gt.rows,
        cols: gt.cols,
        data: binarize(logits),
    };
    let mut maps = vec![("gt", gt.clone()), ("pred", as_map(&main))];
    if let Some(a) = aux.first() {
        maps.push(("aux", as_map(a)));
    }
    for (name, map) in &maps {
        let p = dir.join(format!("{name}.ppm"));
        write_ppm(&p, map.cols, map.rows, &map_pixels(map, class))?;
        writeln!(out, "{name}\t{}", p.display())?;
    }
    for (k, img) in sample.images.iter().enumerate() {
        let p = dir.join(format!("cam{k}.ppm"));
        write_ppm(&p, img.width, img.height, &image_pixels(img))?;
        writeln!(out, "cam{k}\t{}", p.display())?;
    }
    Ok(())
}

fn parse_fault(spec: &str) -> CliResult<(OpKind, f64)> {
    let (op, factor) = spec.split_once(':').unwrap_or((spec, "1.01"));
    let Some(kind) = OpKind::from_name(op) else {
        return usage(format!("unknown op {op:?} for fault injection"));
    };
    match factor.parse::<f64>() {
        Ok(f) if f.is_finite() => Ok((kind, f)),
        _ => usage(format!("bad fault factor {factor:?}")),
    }
}

fn cmd_gradcheck(common: &Common, fault: Option<&str>, out: &mut dyn Write) -> CliResult<()> {
    let fault = fault.map(parse_fault).transpose()?;
    let outcomes = run_suite(&SuiteOptions {
        seed: common.seed.unwrap_or(0),
        fault,
    })?;
    let mut failed = 0;
    for o in &outcomes {
        if !o.passed {
            failed += 1;
        }
        writeln!(
            out,
            "{}\t{}\tmax_rel_err\t{:.3e}\tprobed\t{}\tskipped\t{}",
            if o.passed { "pass" } else { "FAIL" },
            o.name,
            o.report.max_rel_error,
            o.report.checked,
            o.report.skipped
        )?;
    }
    writeln!(out, "checks\t{}\tpassed\t{}\trtol\t{SUITE_RTOL:e}", outcomes.len(), outcomes.len() - failed)?;
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} gradient checks failed", outcomes.len())));
    }
    Ok(())
}
