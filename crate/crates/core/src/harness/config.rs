//! `key = value` configuration files for training and data generation.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objective::{Consistency, Discrepancy, LossWeights, Objective, PairReduction, SharpenConfig};
use crate::segnet::{DecoderMode, ModelConfig};
use crate::synthdata::GenConfig;

/// The four ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Dice supervision only.
    Supervised,
    /// Pairwise discrepancy between raw probabilities.
    Cc,
    /// Pairwise discrepancy between sharpened probabilities.
    CcStar,
    /// Mutual consistency against soft pseudo labels.
    Mc,
}

impl Variant {
    pub fn consistency(self) -> Consistency {
        match self {
            Variant::Supervised => Consistency::None,
            Variant::Cc => Consistency::Raw,
            Variant::CcStar => Consistency::Sharpened,
            Variant::Mc => Consistency::Mutual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - t / iterations)^0.9`
    Poly,
}

impl LrSchedule {
    /// Learning rate for the 1-based iteration `iter` of `total`.
    pub fn rate(self, base: f64, iter: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Poly => base * (1.0 - (iter - 1) as f64 / total as f64).powf(0.9),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub lambda: f64,
    pub beta_max: f64,
    pub ramp_iters: u64,
    /// Sharpening temperature (`T` in config files).
    pub temperature: f64,
    pub n_decoders: usize,
    pub decoder_modes: Vec<DecoderMode>,
    pub discrepancy: Discrepancy,
    pub pair_reduction: PairReduction,
    pub variant: Variant,
    /// Evaluate on the validation split every this many iterations (0: only
    /// at the start and the end).
    pub eval_every: u64,
    pub checkpoint: PathBuf,
    pub base_width: usize,
    pub depth: usize,
    pub detach: bool,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            seed: 1337,
            iterations: 3000,
            batch_size: 4,
            lr: 1e-2,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Constant,
            lambda: 1.0,
            beta_max: 0.1,
            ramp_iters: 3000,
            temperature: 0.1,
            n_decoders: 3,
            decoder_modes: (0..3).map(DecoderMode::default_for).collect(),
            discrepancy: Discrepancy::Mse,
            pair_reduction: PairReduction::Sum,
            variant: Variant::Mc,
            eval_every: 500,
            checkpoint: PathBuf::from("model.mcnf"),
            base_width: 16,
            depth: 3,
            detach: true,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if self.variant != Variant::Supervised && self.n_decoders < 2 {
            return Err(Error::Config(format!(
                "variant {} needs at least 2 decoders, got {}",
                self.variant, self.n_decoders
            )));
        }
        self.model_config(1)?;
        self.objective()?;
        Ok(())
    }

    /// Architecture for a dataset with `num_classes` classes (2 means a
    /// single-channel binary head).
    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n_decoders: self.n_decoders,
            decoder_modes: self.decoder_modes.clone(),
            in_channels: 1,
            num_classes: if num_classes <= 2 { 1 } else { num_classes },
            base_width: self.base_width,
            depth: self.depth,
            norm_enabled: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn objective(&self) -> Result<Objective> {
        let weights = LossWeights {
            lambda: self.lambda,
            beta_max: self.beta_max,
            ramp_iters: self.ramp_iters,
            discrepancy: self.discrepancy,
            pair_reduction: self.pair_reduction,
        };
        weights.validate()?;
        Ok(Objective {
            sharpen: SharpenConfig::new(self.temperature)?,
            weights,
            consistency: self.variant.consistency(),
            detach: self.detach,
        })
    }

    /// Set `n_decoders` and extend or truncate the mode list with the default
    /// layout.
    pub fn set_decoders(&mut self, n: usize) {
        self.n_decoders = n;
        self.decoder_modes = (0..n)
            .map(|i| self.decoder_modes.get(i).copied().unwrap_or_else(|| DecoderMode::default_for(i)))
            .collect();
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "seed" => self.seed = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "lambda" => self.lambda = num(key, value)?,
            "beta_max" => self.beta_max = num(key, value)?,
            "ramp_iters" => self.ramp_iters = num(key, value)?,
            "T" => self.temperature = num(key, value)?,
            "n_decoders" => self.set_decoders(num(key, value)?),
            "decoder_modes" => {
                self.decoder_modes = value.split(',').map(str::parse).collect::<Result<_>>()?;
                self.n_decoders = self.decoder_modes.len();
            }
            "discrepancy" => self.discrepancy = value.parse()?,
            "pair_reduction" => self.pair_reduction = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "eval_every" => self.eval_every = num(key, value)?,
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "base_width" => self.base_width = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "detach" => self.detach = flag(key, value)?,
            "augment" => self.augment = flag(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key '{key}'"))),
        }
        Ok(())
    }
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

/// Split a config file into `(key, value)` pairs. Blank lines and lines
/// starting with `#` are ignored; repeated keys are an error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in parse_pairs(text)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_gen_config(text: &str) -> Result<GenConfig> {
    let mut cfg = GenConfig::default();
    for (k, v) in parse_pairs(text)? {
        let (k, v) = (k.as_str(), v.as_str());
        match k {
            "seed" => cfg.seed = num(k, v)?,
            "train_count" => cfg.train_count = num(k, v)?,
            "val_count" => cfg.val_count = num(k, v)?,
            "test_count" => cfg.test_count = num(k, v)?,
            "large_count" => cfg.large_count = num(k, v)?,
            "size" => cfg.size = num(k, v)?,
            "large_size" => cfg.large_size = num(k, v)?,
            "branch_count_min" => cfg.branch_count_min = num(k, v)?,
            "branch_count_max" => cfg.branch_count_max = num(k, v)?,
            "branch_width_min" => cfg.branch_width_min = num(k, v)?,
            "branch_width_max" => cfg.branch_width_max = num(k, v)?,
            "noise_sigma" => cfg.noise_sigma = num(k, v)?,
            "inhomogeneity" => cfg.inhomogeneity = num(k, v)?,
            "labeled_fraction" => cfg.labeled_fraction = num(k, v)?,
            "root" => cfg.root = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown generation key '{k}'"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    parse_train_config(&read_text(path)?)
}

pub fn read_gen_config(path: &Path) -> Result<GenConfig> {
    parse_gen_config(&read_text(path)?)
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Supervised => "supervised",
            Variant::Cc => "CC",
            Variant::CcStar => "CCstar",
            Variant::Mc => "MC",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "supervised" => Ok(Variant::Supervised),
            "cc" => Ok(Variant::Cc),
            "ccstar" | "cc*" => Ok(Variant::CcStar),
            "mc" => Ok(Variant::Mc),
            _ => Err(Error::Config(format!("unknown variant '{s}' (supervised|CC|CCstar|MC)"))),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Poly => "poly",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "poly" => Ok(LrSchedule::Poly),
            _ => Err(Error::Config(format!("unknown lr_schedule '{s}' (constant|poly)"))),
        }
    }
}
