//! Flat `key = value` training configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, and command-line overrides are applied last. The
//! `arch` key loads a named preset and is applied before every other key, so
//! individual architecture keys can adjust it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{ArchSpec, Engine, Family};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision `{s}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        samples: usize,
        margin: f64,
    },
    /// A CIFAR-10 binary file, or a directory of `data_batch_*.bin` files.
    Cifar10(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    None,
    /// Pad 4, random crop back to size, random horizontal flip.
    CropFlip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub decay_steps: Vec<u64>,
    pub decay_factor: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Measure the gradient angle every this many steps.
    pub angle_interval: Option<u64>,
    pub engine: Engine,
    pub zero_init_residual: bool,
    pub data: DataSource,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchSpec {
                family: Family::Revnet,
                bottleneck: false,
                units: vec![2, 2],
                channels: vec![8, 8, 16],
                classes: 2,
                input_shape: (3, 8, 8),
            },
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 32,
            total_steps: 500,
            decay_steps: vec![],
            decay_factor: 0.1,
            seed: 0,
            precision: Precision::F64,
            angle_interval: None,
            engine: Engine::Reversible,
            zero_init_residual: true,
            data: DataSource::Synthetic { samples: 512, margin: 1.0 },
            augment: Augment::None,
        }
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(['-', ',']).map(|p| parse(key, p.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn join<V: ToString>(xs: &[V], sep: &str) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

impl TrainConfig {
    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.extend(overrides.iter().cloned());
        let mut cfg = TrainConfig::default();
        if let Some((_, name)) = pairs.iter().rev().find(|(k, _)| k == "arch") {
            cfg.arch = ArchSpec::preset(name).ok_or_else(|| Error::Config(format!("arch: unknown preset `{name}`")))?;
        }
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "arch" => {}
            "family" => self.arch.family = v.parse()?,
            "bottleneck" => self.arch.bottleneck = parse_bool(key, v)?,
            "units" => self.arch.units = parse_list(key, v)?,
            "channels" => self.arch.channels = parse_list(key, v)?,
            "classes" => self.arch.classes = parse(key, v)?,
            "input_shape" => {
                let d: Vec<usize> = v.split('x').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                let [c, h, w] = d[..] else {
                    return Err(Error::Config(format!("input_shape: expected CxHxW, got `{v}`")));
                };
                self.arch.input_shape = (c, h, w);
            }
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "decay_steps" => self.decay_steps = parse_list(key, v)?,
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            "angle_interval" => {
                self.angle_interval = match v {
                    "off" | "" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "engine" => self.engine = v.parse()?,
            "zero_init_residual" => self.zero_init_residual = parse_bool(key, v)?,
            "dataset" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic { samples: 512, margin: 1.0 },
                    "cifar10" => DataSource::Cifar10(match &self.data {
                        DataSource::Cifar10(p) => p.clone(),
                        _ => PathBuf::new(),
                    }),
                    _ => return Err(Error::Config(format!("dataset: unknown source `{v}`"))),
                }
            }
            "data_path" => self.data = DataSource::Cifar10(PathBuf::from(v)),
            "synthetic_samples" | "synthetic_margin" => {
                let DataSource::Synthetic { samples, margin } = &mut self.data else {
                    return Err(Error::Config(format!("{key} requires dataset = synthetic")));
                };
                if key == "synthetic_samples" {
                    *samples = parse(key, v)?;
                } else {
                    *margin = parse(key, v)?;
                }
            }
            "augment" => {
                self.augment = match v {
                    "none" => Augment::None,
                    "crop-flip" => Augment::CropFlip,
                    _ => return Err(Error::Config(format!("augment: expected none or crop-flip, got `{v}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.decay_factor.is_nan() || self.decay_factor <= 0.0 {
            return bad("decay_factor must be positive");
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_steps must be strictly increasing");
        }
        if self.decay_steps.last().is_some_and(|&s| s >= self.total_steps) {
            return bad("decay_steps must be below total_steps");
        }
        if self.angle_interval == Some(0) {
            return bad("angle_interval must be positive or off");
        }
        match &self.data {
            DataSource::Synthetic { samples, margin } => {
                if *samples == 0 {
                    return bad("synthetic_samples must be positive");
                }
                if !margin.is_finite() {
                    return bad("synthetic_margin must be finite");
                }
            }
            DataSource::Cifar10(p) => {
                if p.as_os_str().is_empty() {
                    return bad("dataset = cifar10 needs data_path");
                }
                if self.arch.input_shape != (3, 32, 32) || self.arch.classes != 10 {
                    return bad("cifar10 data needs input_shape 3x32x32 and 10 classes");
                }
            }
        }
        Ok(())
    }

    /// Renders the configuration in the same format [`TrainConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("family", a.family.to_string());
        kv("bottleneck", a.bottleneck.to_string());
        kv("units", join(&a.units, "-"));
        kv("channels", join(&a.channels, "-"));
        kv("classes", a.classes.to_string());
        kv(
            "input_shape",
            format!("{}x{}x{}", a.input_shape.0, a.input_shape.1, a.input_shape.2),
        );
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("decay_steps", join(&self.decay_steps, ","));
        kv("decay_factor", self.decay_factor.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        kv("angle_interval", self.angle_interval.map_or("off".into(), |i| i.to_string()));
        kv(
            "engine",
            match self.engine {
                Engine::Reversible => "reversible",
                Engine::Stored => "stored",
            }
            .into(),
        );
        kv("zero_init_residual", self.zero_init_residual.to_string());
        match &self.data {
            DataSource::Synthetic { samples, margin } => {
                kv("dataset", "synthetic".into());
                kv("synthetic_samples", samples.to_string());
                kv("synthetic_margin", margin.to_string());
            }
            DataSource::Cifar10(p) => {
                kv("dataset", "cifar10".into());
                kv("data_path", p.display().to_string());
            }
        }
        kv(
            "augment",
            match self.augment {
                Augment::None => "none",
                Augment::CropFlip => "crop-flip",
            }
            .into(),
        );
        s
    }
}
