//! Run configuration: `key = value` lines with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bevr_tensor::{AdamW, Precision};

use crate::class::Class;
use crate::error::{CoreError, Result};
use crate::geometry::{BevGridSpec, DEFAULT_Z_ANCHORS};
use crate::heads::{FocalParams, LossWeights};
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub levels: usize,
    pub channels: usize,
    pub heads: usize,
    /// Sampling points per head in the self-attention and inter-camera blocks.
    pub points: usize,
    pub z_anchors: Vec<f64>,
    pub layers: usize,
    pub delta: f64,
    pub ffn_mult: usize,
    /// 2 for camera images whose sides are multiples of 16; 1 allows
    /// multiples of 8.
    pub stem_stride: usize,
    pub bev_rows: usize,
    pub bev_cols: usize,
    pub extent_m: (f64, f64),
    pub gamma: f64,
    pub focal_alpha: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub data: Option<PathBuf>,
    pub rig: Option<PathBuf>,
    pub class: Class,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub precision: Precision,
    /// Stop training once the training-set IoU (in evaluation mode) reaches
    /// this value.
    pub stop_at_iou: Option<f64>,
    /// Fraction of an ablation dataset used for training; the rest is scored.
    pub ablate_train_fraction: f64,
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            channels: 32,
            heads: 8,
            points: 4,
            z_anchors: DEFAULT_Z_ANCHORS.to_vec(),
            layers: 2,
            delta: 0.25,
            ffn_mult: 2,
            stem_stride: 2,
            bev_rows: 64,
            bev_cols: 64,
            extent_m: (40.0, 40.0),
            gamma: 2.0,
            focal_alpha: 0.25,
            alpha: 1.0,
            lambda: 1.0,
            data: None,
            rig: None,
            class: Class::Vehicle,
            lr: 2e-4,
            weight_decay: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 28,
            batch_size: 4,
            seed: 0,
            variant: Variant::Ours,
            precision: Precision::F32,
            stop_at_iou: None,
            ablate_train_fraction: 0.8,
            ablate_seeds: 3,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CoreError::Config(format!("{key}: cannot parse {v:?}")))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "levels" => self.levels = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "points" => self.points = parse_num(key, v)?,
            "z_anchors" => {
                self.z_anchors = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "layers" => self.layers = parse_num(key, v)?,
            "delta" => self.delta = parse_num(key, v)?,
            "ffn_mult" => self.ffn_mult = parse_num(key, v)?,
            "stem_stride" => self.stem_stride = parse_num(key, v)?,
            "bev_rows" => self.bev_rows = parse_num(key, v)?,
            "bev_cols" => self.bev_cols = parse_num(key, v)?,
            "extent_m" => {
                let parts: Vec<f64> = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
                match parts[..] {
                    [a] => self.extent_m = (a, a),
                    [a, b] => self.extent_m = (a, b),
                    _ => return Err(CoreError::Config(format!("extent_m: expected one or two lengths, got {v:?}"))),
                }
            }
            "gamma" => self.gamma = parse_num(key, v)?,
            "focal_alpha" => self.focal_alpha = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "rig" => self.rig = (!v.is_empty()).then(|| PathBuf::from(v)),
            "class" => self.class = v.parse()?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "variant" => self.variant = v.parse()?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(CoreError::Config(format!("precision: expected f32 or f64, got {v:?}"))),
                }
            }
            "stop_at_iou" => self.stop_at_iou = if v == "none" { None } else { Some(parse_num(key, v)?) },
            "ablate_train_fraction" => self.ablate_train_fraction = parse_num(key, v)?,
            "ablate_seeds" => self.ablate_seeds = parse_num(key, v)?,
            "version" => {
                if v != "1" {
                    return Err(CoreError::Config(format!("unsupported config version {v:?}")));
                }
            }
            _ => return Err(CoreError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a config text over `self`. Later lines win.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CoreError::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)));
            };
            self.set(k.trim(), v).map_err(|e| match e {
                CoreError::Config(m) => CoreError::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text)
    }

    /// Every setting, one per line, in a form `parse` reads back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::from("version = 1\n");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("levels", self.levels.to_string());
        kv("channels", self.channels.to_string());
        kv("heads", self.heads.to_string());
        kv("points", self.points.to_string());
        kv("z_anchors", fmt_list(&self.z_anchors));
        kv("layers", self.layers.to_string());
        kv("delta", format!("{:?}", self.delta));
        kv("ffn_mult", self.ffn_mult.to_string());
        kv("stem_stride", self.stem_stride.to_string());
        kv("bev_rows", self.bev_rows.to_string());
        kv("bev_cols", self.bev_cols.to_string());
        kv("extent_m", fmt_list(&[self.extent_m.0, self.extent_m.1]));
        kv("gamma", format!("{:?}", self.gamma));
        kv("focal_alpha", format!("{:?}", self.focal_alpha));
        kv("alpha", format!("{:?}", self.alpha));
        kv("lambda", format!("{:?}", self.lambda));
        kv("data", path(&self.data));
        kv("rig", path(&self.rig));
        kv("class", self.class.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("variant", self.variant.to_string());
        kv(
            "precision",
            match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
        );
        kv("stop_at_iou", self.stop_at_iou.map_or("none".into(), |v| format!("{v:?}")));
        kv("ablate_train_fraction", format!("{:?}", self.ablate_train_fraction));
        kv("ablate_seeds", self.ablate_seeds.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        self.grid()?;
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("{} channels cannot be split over {} heads", self.channels, self.heads));
        }
        if self.channels % 4 != 0 {
            return bad(format!("channels must be a multiple of 4 for the positional embedding, got {}", self.channels));
        }
        if self.points == 0 || self.layers == 0 || self.ffn_mult == 0 {
            return bad("points, layers and ffn_mult must be positive".into());
        }
        if !(1..=2).contains(&self.stem_stride) {
            return bad(format!("stem_stride must be 1 or 2, got {}", self.stem_stride));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.gamma < 0.0 {
            return bad("focal_alpha must lie in [0, 1] and gamma must be non-negative".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if !(0.0 < self.ablate_train_fraction && self.ablate_train_fraction <= 1.0) || self.ablate_seeds == 0 {
            return bad("ablate_train_fraction must lie in (0, 1] and ablate_seeds must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<BevGridSpec> {
        BevGridSpec::new(
            self.bev_rows,
            self.bev_cols,
            self.extent_m,
            self.channels,
            self.z_anchors.clone(),
            self.levels,
        )
    }

    pub fn model(&self, cameras: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            grid: self.grid()?,
            cameras,
            heads: self.heads,
            points: self.points,
            delta: self.delta,
            layers: self.layers,
            ffn_mult: self.ffn_mult,
            stem_stride: self.stem_stride,
            class: self.class,
            variant: self.variant,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            lambda: vec![(self.class, self.lambda)],
            focal: FocalParams {
                gamma: self.gamma,
                a_f: self.focal_alpha,
            },
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamW::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_configuration() {
        let c = RunConfig::default();
        assert_eq!((c.levels, c.channels, c.heads, c.z_anchors.len(), c.layers), (3, 32, 8, 4, 2));
        assert_eq!((c.delta, c.alpha, c.lr, c.weight_decay, c.batch_size), (0.25, 1.0, 2e-4, 1e-7, 4));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("lr = 1e-3 # faster\nvariant = m3\nz_anchors = -0.5, 0.5, 1.5\nstop_at_iou = 0.9\nclass = lane").unwrap();
        assert_eq!(c.variant, Variant::M3);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("lr = 1e-3\n\nheads: 4").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let e = RunConfig::parse("bogus = 1").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        assert!(RunConfig::parse("heads = 5").is_err());
    }
}
