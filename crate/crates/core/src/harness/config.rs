//! Training hyperparameters and the plain-text `key = value` config format.
//!
//! Keys are the field names of [`GrtnConfig`] and [`TrainConfig`]. A
//! `preset` key selects both sets of defaults first; every other key then
//! overrides, regardless of line order.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::OrthoMode;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::net::{Alignment, GrtnConfig};
use crate::rsste::AttentionKind;

use super::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
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
pub struct TrainConfig {
    pub preset: String,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    /// Frames per clip; gradients flow through the recurrence within a clip.
    pub clip_length: usize,
    pub base_lr: f64,
    pub lr_floor: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub ortho_mode: OrthoMode,
    /// Loss/validation rows are emitted every this many iterations.
    pub log_every: usize,
    pub val_sigma: f64,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            preset: "toy".into(),
            iterations: 3000,
            batch_size: 2,
            patch_size: 64,
            clip_length: 4,
            base_lr: 4e-4,
            lr_floor: 1e-6,
            sigma_min: 15.0,
            sigma_max: 35.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.001,
            ortho_mode: OrthoMode::Signed,
            log_every: 100,
            val_sigma: 25.0,
            precision: Precision::F32,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            preset: "paper".into(),
            iterations: 480_000,
            batch_size: 8,
            patch_size: 256,
            sigma_min: 0.0,
            sigma_max: 50.0,
            ..Self::toy()
        }
    }

    pub fn tiny() -> Self {
        TrainConfig {
            preset: "tiny".into(),
            iterations: 20,
            batch_size: 1,
            patch_size: 8,
            clip_length: 2,
            log_every: 10,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected toy, paper or tiny)"
            ))),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            ortho_mode: self.ortho_mode,
        }
    }

    pub fn validate(&self, model: &GrtnConfig) -> Result<()> {
        let unit = 2 * model.window;
        if self.patch_size == 0 || self.patch_size % unit != 0 {
            return Err(Error::Config(format!(
                "patch_size must be a positive multiple of 2·window = {unit}, got {}",
                self.patch_size
            )));
        }
        if self.batch_size == 0 || self.clip_length == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size, clip_length and log_every must be positive".into(),
            ));
        }
        if !(0.0..=50.0).contains(&self.sigma_min)
            || !(0.0..=50.0).contains(&self.sigma_max)
            || self.sigma_min > self.sigma_max
        {
            return Err(Error::Config(format!(
                "sigma range must satisfy 0 ≤ sigma_min ≤ sigma_max ≤ 50, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.base_lr > 0.0) || !(self.lr_floor >= 0.0) || self.lr_floor > self.base_lr {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 ≤ lr_floor ≤ base_lr, base_lr > 0; got {} and {}",
                self.base_lr, self.lr_floor
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("optimizer moments must lie in [0, 1) and adam_eps be positive".into()));
        }
        if !(self.val_sigma >= 0.0) {
            return Err(Error::Config("val_sigma must be non-negative".into()));
        }
        self.loss().validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Model and training configuration together, as read from a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: GrtnConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(RunConfig {
            model: GrtnConfig::preset(name)?,
            train: TrainConfig::preset(name)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)
    }

    pub const KEYS: &'static [&'static str] = &[
        "preset",
        "channels",
        "heads",
        "window",
        "layers",
        "mlp_ratio",
        "epsilon_norm",
        "leaky_slope",
        "downsample",
        "alignment",
        "search_radius",
        "gates_enabled",
        "attention_kind",
        "sigma_normalizer",
        "image_channels",
        "iterations",
        "batch_size",
        "patch_size",
        "clip_length",
        "base_lr",
        "lr_floor",
        "sigma_min",
        "sigma_max",
        "seed",
        "beta1",
        "beta2",
        "adam_eps",
        "lambda",
        "ortho_mode",
        "log_every",
        "val_sigma",
        "precision",
    ];

    /// Sets one key; unknown keys list every valid key in the error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
            }
        }
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "preset" => *self = RunConfig::preset(value)?,
            "channels" => m.channels = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "window" => m.window = num(key, value)?,
            "layers" => m.layers = num(key, value)?,
            "mlp_ratio" => m.mlp_ratio = num(key, value)?,
            "epsilon_norm" => m.epsilon_norm = num(key, value)?,
            "leaky_slope" => m.leaky_slope = num(key, value)?,
            "downsample" => m.downsample = num(key, value)?,
            "alignment" => m.alignment = value.parse::<Alignment>()?,
            "search_radius" => m.search_radius = num(key, value)?,
            "gates_enabled" => m.gates_enabled = flag(key, value)?,
            "attention_kind" => m.attention_kind = value.parse::<AttentionKind>()?,
            "sigma_normalizer" => m.sigma_normalizer = num(key, value)?,
            "image_channels" => m.image_channels = num(key, value)?,
            "iterations" => t.iterations = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "patch_size" => t.patch_size = num(key, value)?,
            "clip_length" => t.clip_length = num(key, value)?,
            "base_lr" => t.base_lr = num(key, value)?,
            "lr_floor" => t.lr_floor = num(key, value)?,
            "sigma_min" => t.sigma_min = num(key, value)?,
            "sigma_max" => t.sigma_max = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "lambda" => t.lambda = num(key, value)?,
            "ortho_mode" => t.ortho_mode = value.parse::<OrthoMode>()?,
            "log_every" => t.log_every = num(key, value)?,
            "val_sigma" => t.val_sigma = num(key, value)?,
            "precision" => t.precision = value.parse()?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key `{key}`; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment) on top of the toy preset.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            entries.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::preset("toy")?;
        if let Some((_, _, name)) = entries.iter().rev().find(|(_, k, _)| k == "preset") {
            cfg = RunConfig::preset(name)?;
        }
        for (line, k, v) in entries.iter().filter(|(_, k, _)| k != "preset") {
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
                other => other,
            })?;
        }
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    /// Every key, in a form [`RunConfig::parse`] reads back exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (m, t) = (&self.model, &self.train);
        writeln!(f, "preset = {}", t.preset)?;
        writeln!(f, "channels = {}", m.channels)?;
        writeln!(f, "heads = {}", m.heads)?;
        writeln!(f, "window = {}", m.window)?;
        writeln!(f, "layers = {}", m.layers)?;
        writeln!(f, "mlp_ratio = {}", m.mlp_ratio)?;
        writeln!(f, "epsilon_norm = {:e}", m.epsilon_norm)?;
        writeln!(f, "leaky_slope = {}", m.leaky_slope)?;
        writeln!(f, "downsample = {}", m.downsample)?;
        writeln!(f, "alignment = {}", m.alignment.name())?;
        writeln!(f, "search_radius = {}", m.search_radius)?;
        writeln!(f, "gates_enabled = {}", m.gates_enabled)?;
        writeln!(f, "attention_kind = {}", m.attention_kind.name())?;
        writeln!(f, "sigma_normalizer = {}", m.sigma_normalizer)?;
        writeln!(f, "image_channels = {}", m.image_channels)?;
        writeln!(f, "iterations = {}", t.iterations)?;
        writeln!(f, "batch_size = {}", t.batch_size)?;
        writeln!(f, "patch_size = {}", t.patch_size)?;
        writeln!(f, "clip_length = {}", t.clip_length)?;
        writeln!(f, "base_lr = {:e}", t.base_lr)?;
        writeln!(f, "lr_floor = {:e}", t.lr_floor)?;
        writeln!(f, "sigma_min = {}", t.sigma_min)?;
        writeln!(f, "sigma_max = {}", t.sigma_max)?;
        writeln!(f, "seed = {}", t.seed)?;
        writeln!(f, "beta1 = {}", t.beta1)?;
        writeln!(f, "beta2 = {}", t.beta2)?;
        writeln!(f, "adam_eps = {:e}", t.adam_eps)?;
        writeln!(f, "lambda = {}", t.lambda)?;
        writeln!(f, "ortho_mode = {}", t.ortho_mode.name())?;
        writeln!(f, "log_every = {}", t.log_every)?;
        writeln!(f, "val_sigma = {}", t.val_sigma)?;
        writeln!(f, "precision = {}", t.precision.name())
    }
}
