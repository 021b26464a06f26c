//! Run configuration: the single source of truth for every hyperparameter.
//!
//! Configs are flat documents of dotted keys (`optim.lr_generator = 7e-6`).
//! Unknown keys are rejected so a typo can never silently fall back to a
//! default.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    List(Vec<f64>),
}

impl fmt::Display for ConfigValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigValue::Int(v) => write!(f, "{v}"),
            ConfigValue::Float(v) => write!(f, "{v:e}"),
            ConfigValue::Bool(v) => write!(f, "{v}"),
            ConfigValue::Str(v) => write!(f, "{v:?}"),
            ConfigValue::List(v) => {
                f.write_str("[")?;
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{x:e}")?;
                }
                f.write_str("]")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Pixel-wise L2 reconstruction.
    Pwl,
    /// Perceptual loss with generally pretrained features.
    PlGeneral,
    /// Perceptual loss with features pretrained on the task's normal data.
    PlProblemSpecific,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Pwl => "pwl",
            LossMode::PlGeneral => "pl-g",
            LossMode::PlProblemSpecific => "pl-ps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "pwl" => Some(LossMode::Pwl),
            "pl-g" => Some(LossMode::PlGeneral),
            "pl-ps" => Some(LossMode::PlProblemSpecific),
            _ => None,
        }
    }

    pub fn needs_extractor(self) -> bool {
        self != LossMode::Pwl
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    Multiply,
    Concat,
}

impl SkipMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipMode::Multiply => "multiply",
            SkipMode::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multiply" => Ok(SkipMode::Multiply),
            "concat" => Ok(SkipMode::Concat),
            other => Err(Error::UnknownSkipMode(other.into())),
        }
    }
}

/// Form of the generator's adversarial term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialForm {
    /// `-ln C(x')`
    NonSaturating,
    /// `ln(1 - C(x'))`
    Minimax,
}

impl AdversarialForm {
    pub fn as_str(self) -> &'static str {
        match self {
            AdversarialForm::NonSaturating => "non-saturating",
            AdversarialForm::Minimax => "minimax",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub image_size: usize,
    pub channels: usize,
    pub z_low_size: usize,
    pub z_low_channels: usize,
    pub z_high_channels: usize,
    pub gen_width: usize,
    pub disc_width: usize,
    pub backbone_stages: usize,
    pub backbone_blocks: usize,
    pub backbone_full: bool,
    pub attention_maps: usize,
    pub filter_bank: usize,
    pub skip_mode: SkipMode,

    pub enable_high_path: bool,
    pub enable_e1_high: bool,
    pub enable_e1_low: bool,

    pub loss_mode: LossMode,
    pub adversarial: AdversarialForm,
    pub extractor_path: Option<String>,
    pub tap_layer: usize,
    pub extractor_width: usize,

    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_perceptual: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub sgd_momentum: f64,
    pub d_steps: usize,

    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub attention_augment: bool,
    pub pretrain_epochs: usize,

    pub score_weights: [f64; 3],
    pub mask_threshold: f64,
    pub mask_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            z_low_size: 8,
            z_low_channels: 16,
            z_high_channels: 32,
            gen_width: 16,
            disc_width: 8,
            backbone_stages: 4,
            backbone_blocks: 1,
            backbone_full: false,
            attention_maps: 8,
            filter_bank: 16,
            skip_mode: SkipMode::Multiply,
            enable_high_path: true,
            enable_e1_high: true,
            enable_e1_low: true,
            loss_mode: LossMode::Pwl,
            adversarial: AdversarialForm::NonSaturating,
            extractor_path: None,
            tap_layer: 14,
            extractor_width: 8,
            lr_generator: 7e-6,
            lr_discriminator: 1e-5,
            lr_perceptual: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            sgd_momentum: 0.9,
            d_steps: 1,
            batch_size: 15,
            epochs: 10,
            seed: 0,
            checkpoint_every: 0,
            attention_augment: true,
            pretrain_epochs: 5,
            score_weights: [1.0, 1.0, 1.0],
            mask_threshold: 0.5,
            mask_sigma: 2.0,
        }
    }
}

/// Every accepted key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    (
        "model.image_size",
        "square input resolution; power of two >= 16 (default 64)",
    ),
    ("model.channels", "image channels, 1 or 3 (default 3)"),
    (
        "model.z_low_size",
        "spatial size of the low latent; power of two (default 8)",
    ),
    (
        "model.z_low_channels",
        "channels of the low latent (default 16)",
    ),
    (
        "model.z_high_channels",
        "channels of the high latent (default 32)",
    ),
    (
        "model.gen_width",
        "generator base channel width (default 16)",
    ),
    (
        "model.disc_width",
        "discriminator backbone base width (default 8)",
    ),
    (
        "model.backbone_stages",
        "residual stages in the critic backbone (default 4)",
    ),
    (
        "model.backbone_blocks",
        "residual blocks per stage (default 1)",
    ),
    (
        "model.backbone_full",
        "use the 3-4-6-3 block layout of a 50-layer residual net (default false)",
    ),
    (
        "model.attention_maps",
        "number of attention maps M (default 8)",
    ),
    (
        "model.filter_bank",
        "1x1 filters in the critic's discriminative filter bank (default 16)",
    ),
    (
        "model.skip_mode",
        "skip combination: multiply | concat (default multiply)",
    ),
    (
        "ablation.high_path",
        "enable the high encoder/decoder pair (default true)",
    ),
    (
        "ablation.e1_high",
        "enable the secondary high encoder (default true)",
    ),
    (
        "ablation.e1_low",
        "enable the secondary low encoder (default true)",
    ),
    (
        "loss.mode",
        "reconstruction loss: pwl | pl-g | pl-ps (default pwl)",
    ),
    (
        "loss.adversarial",
        "generator adversarial term: non-saturating | minimax",
    ),
    (
        "loss.extractor",
        "feature extractor weight file (required for pl-g / pl-ps)",
    ),
    (
        "loss.tap_layer",
        "number of feature-stack modules run by the extractor (default 14)",
    ),
    (
        "loss.extractor_width",
        "first-block width of the extractor stack (default 8; 64 = full size)",
    ),
    (
        "optim.lr_generator",
        "generator Adam learning rate (default 7e-6)",
    ),
    (
        "optim.lr_discriminator",
        "discriminator Adam learning rate (default 1e-5)",
    ),
    (
        "optim.lr_perceptual",
        "extractor pretraining SGD learning rate (default 1e-4)",
    ),
    ("optim.adam_beta1", "Adam beta1 (default 0.5)"),
    ("optim.adam_beta2", "Adam beta2 (default 0.999)"),
    (
        "optim.sgd_momentum",
        "SGD momentum for extractor pretraining (default 0.9)",
    ),
    (
        "optim.d_steps",
        "discriminator updates per generator update (default 1)",
    ),
    ("train.batch_size", "mini-batch size (default 15)"),
    ("train.epochs", "training epochs (default 10)"),
    ("train.seed", "run seed (default 0)"),
    (
        "train.checkpoint_every",
        "steps between periodic checkpoints; 0 = final only",
    ),
    (
        "train.attention_augment",
        "attention-guided augmentation of real critic inputs (default true)",
    ),
    (
        "train.pretrain_epochs",
        "epochs of extractor pretraining (default 5)",
    ),
    (
        "score.weights",
        "weights of [recon_err, 1-C(x), 1-C(x')] (default [1, 1, 1])",
    ),
    (
        "score.mask_threshold",
        "mask binarisation fraction of the map maximum (default 0.5)",
    ),
    (
        "score.mask_sigma",
        "Gaussian smoothing of residual maps in pixels (default 2)",
    ),
];

fn as_usize(key: &str, v: &ConfigValue) -> Result<usize> {
    match v {
        ConfigValue::Int(i) if *i >= 0 => Ok(*i as usize),
        ConfigValue::Int(i) => Err(Error::range(key, format!("{i} is negative"))),
        ConfigValue::Float(f) if libm::trunc(*f) == *f && *f >= 0.0 => Ok(*f as usize),
        other => Err(Error::range(
            key,
            format!("expected a non-negative integer, got {other}"),
        )),
    }
}

fn as_f64(key: &str, v: &ConfigValue) -> Result<f64> {
    match v {
        ConfigValue::Int(i) => Ok(*i as f64),
        ConfigValue::Float(f) => Ok(*f),
        other => Err(Error::range(key, format!("expected a number, got {other}"))),
    }
}

fn as_bool(key: &str, v: &ConfigValue) -> Result<bool> {
    match v {
        ConfigValue::Bool(b) => Ok(*b),
        other => Err(Error::range(
            key,
            format!("expected a boolean, got {other}"),
        )),
    }
}

fn as_str<'a>(key: &str, v: &'a ConfigValue) -> Result<&'a str> {
    match v {
        ConfigValue::Str(s) => Ok(s),
        other => Err(Error::range(key, format!("expected a string, got {other}"))),
    }
}

fn positive_rate(key: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::range(
            key,
            format!("learning rate must be > 0, got {v}"),
        ))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<usize> {
    if v >= min {
        Ok(v)
    } else {
        Err(Error::range(key, format!("must be >= {min}, got {v}")))
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &ConfigValue) -> Result<()> {
        match key {
            "model.image_size" => self.image_size = as_usize(key, v)?,
            "model.channels" => self.channels = as_usize(key, v)?,
            "model.z_low_size" => self.z_low_size = as_usize(key, v)?,
            "model.z_low_channels" => self.z_low_channels = at_least(key, as_usize(key, v)?, 1)?,
            "model.z_high_channels" => self.z_high_channels = at_least(key, as_usize(key, v)?, 1)?,
            "model.gen_width" => self.gen_width = at_least(key, as_usize(key, v)?, 1)?,
            "model.disc_width" => self.disc_width = at_least(key, as_usize(key, v)?, 1)?,
            "model.backbone_stages" => self.backbone_stages = at_least(key, as_usize(key, v)?, 1)?,
            "model.backbone_blocks" => self.backbone_blocks = at_least(key, as_usize(key, v)?, 1)?,
            "model.backbone_full" => self.backbone_full = as_bool(key, v)?,
            "model.attention_maps" => self.attention_maps = at_least(key, as_usize(key, v)?, 1)?,
            "model.filter_bank" => self.filter_bank = at_least(key, as_usize(key, v)?, 1)?,
            "model.skip_mode" => {
                self.skip_mode = SkipMode::parse(as_str(key, v)?)
                    .map_err(|e| Error::range(key, e.to_string()))?
            }
            "ablation.high_path" => self.enable_high_path = as_bool(key, v)?,
            "ablation.e1_high" => self.enable_e1_high = as_bool(key, v)?,
            "ablation.e1_low" => self.enable_e1_low = as_bool(key, v)?,
            "loss.mode" => {
                let s = as_str(key, v)?;
                self.loss_mode = LossMode::parse(s).ok_or_else(|| {
                    Error::range(key, format!("`{s}` is not one of pwl, pl-g, pl-ps"))
                })?
            }
            "loss.adversarial" => {
                self.adversarial = match as_str(key, v)? {
                    "non-saturating" => AdversarialForm::NonSaturating,
                    "minimax" => AdversarialForm::Minimax,
                    s => {
                        return Err(Error::range(
                            key,
                            format!("`{s}` is not one of non-saturating, minimax"),
                        ))
                    }
                }
            }
            "loss.extractor" => self.extractor_path = Some(as_str(key, v)?.into()),
            "loss.tap_layer" => self.tap_layer = as_usize(key, v)?,
            "loss.extractor_width" => self.extractor_width = at_least(key, as_usize(key, v)?, 1)?,
            "optim.lr_generator" => self.lr_generator = positive_rate(key, as_f64(key, v)?)?,
            "optim.lr_discriminator" => {
                self.lr_discriminator = positive_rate(key, as_f64(key, v)?)?
            }
            "optim.lr_perceptual" => self.lr_perceptual = positive_rate(key, as_f64(key, v)?)?,
            "optim.adam_beta1" => self.adam_beta1 = as_f64(key, v)?,
            "optim.adam_beta2" => self.adam_beta2 = as_f64(key, v)?,
            "optim.sgd_momentum" => self.sgd_momentum = as_f64(key, v)?,
            "optim.d_steps" => self.d_steps = at_least(key, as_usize(key, v)?, 1)?,
            "train.batch_size" => self.batch_size = at_least(key, as_usize(key, v)?, 1)?,
            "train.epochs" => self.epochs = at_least(key, as_usize(key, v)?, 1)?,
            "train.seed" => {
                self.seed = match v {
                    ConfigValue::Int(i) => *i as u64,
                    other => {
                        return Err(Error::range(
                            key,
                            format!("expected an integer, got {other}"),
                        ))
                    }
                }
            }
            "train.checkpoint_every" => self.checkpoint_every = as_usize(key, v)?,
            "train.attention_augment" => self.attention_augment = as_bool(key, v)?,
            "train.pretrain_epochs" => self.pretrain_epochs = at_least(key, as_usize(key, v)?, 1)?,
            "score.weights" => {
                let ConfigValue::List(w) = v else {
                    return Err(Error::range(
                        key,
                        format!("expected a list of 3 numbers, got {v}"),
                    ));
                };
                if w.len() != 3 {
                    return Err(Error::range(
                        key,
                        format!("expected 3 weights, got {}", w.len()),
                    ));
                }
                self.score_weights = [w[0], w[1], w[2]];
            }
            "score.mask_threshold" => self.mask_threshold = as_f64(key, v)?,
            "score.mask_sigma" => self.mask_sigma = as_f64(key, v)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Cross-field validation. Every rule names the offending key.
    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v != 0 && v & (v - 1) == 0;
        if !pow2(self.image_size) || self.image_size < 16 {
            return Err(Error::range(
                "model.image_size",
                format!("must be a power of two >= 16, got {}", self.image_size),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::range(
                "model.channels",
                format!("must be 1 or 3, got {}", self.channels),
            ));
        }
        let min_low = if self.enable_high_path { 2 } else { 1 };
        if !pow2(self.z_low_size)
            || self.z_low_size < min_low
            || self.z_low_size * 2 > self.image_size
        {
            return Err(Error::range(
                "model.z_low_size",
                format!(
                    "must be a power of two in [{min_low}, image_size/2], got {}",
                    self.z_low_size
                ),
            ));
        }
        if self.image_size >> self.backbone_stages == 0 {
            return Err(Error::range(
                "model.backbone_stages",
                format!(
                    "{} stages downsample a {}px image below 1px",
                    self.backbone_stages, self.image_size
                ),
            ));
        }
        if self.enable_e1_high && !self.enable_high_path {
            return Err(Error::range(
                "ablation.e1_high",
                "requires ablation.high_path = true",
            ));
        }
        if self.loss_mode.needs_extractor() && self.extractor_path.is_none() {
            return Err(Error::MissingKey("loss.extractor".into()));
        }
        if !(1..=crate::perceptual::VGG19_MODULES).contains(&self.tap_layer) {
            return Err(Error::range(
                "loss.tap_layer",
                format!(
                    "must be in 1..={}, got {}",
                    crate::perceptual::VGG19_MODULES,
                    self.tap_layer
                ),
            ));
        }
        for (key, b) in [
            ("optim.adam_beta1", self.adam_beta1),
            ("optim.adam_beta2", self.adam_beta2),
            ("optim.sgd_momentum", self.sgd_momentum),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::range(key, format!("must be in [0, 1), got {b}")));
            }
        }
        let w = self.score_weights;
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::range(
                "score.weights",
                format!("must be nonnegative and not all zero, got {w:?}"),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::range(
                "score.mask_threshold",
                format!("must be in [0, 1], got {}", self.mask_threshold),
            ));
        }
        if !(self.mask_sigma.is_finite() && self.mask_sigma > 0.0) {
            return Err(Error::range(
                "score.mask_sigma",
                format!("must be > 0, got {}", self.mask_sigma),
            ));
        }
        Ok(())
    }

    /// Canonical `(key, value)` listing; feeding it back through
    /// [`make_run_config`] reproduces `self`.
    pub fn to_entries(&self) -> Vec<(String, ConfigValue)> {
        use ConfigValue::*;
        let u = |v: usize| Int(v as i64);
        let mut out = vec![
            ("model.image_size", u(self.image_size)),
            ("model.channels", u(self.channels)),
            ("model.z_low_size", u(self.z_low_size)),
            ("model.z_low_channels", u(self.z_low_channels)),
            ("model.z_high_channels", u(self.z_high_channels)),
            ("model.gen_width", u(self.gen_width)),
            ("model.disc_width", u(self.disc_width)),
            ("model.backbone_stages", u(self.backbone_stages)),
            ("model.backbone_blocks", u(self.backbone_blocks)),
            ("model.backbone_full", Bool(self.backbone_full)),
            ("model.attention_maps", u(self.attention_maps)),
            ("model.filter_bank", u(self.filter_bank)),
            ("model.skip_mode", Str(self.skip_mode.as_str().into())),
            ("ablation.high_path", Bool(self.enable_high_path)),
            ("ablation.e1_high", Bool(self.enable_e1_high)),
            ("ablation.e1_low", Bool(self.enable_e1_low)),
            ("loss.mode", Str(self.loss_mode.as_str().into())),
            ("loss.adversarial", Str(self.adversarial.as_str().into())),
            ("loss.tap_layer", u(self.tap_layer)),
            ("loss.extractor_width", u(self.extractor_width)),
            ("optim.lr_generator", Float(self.lr_generator)),
            ("optim.lr_discriminator", Float(self.lr_discriminator)),
            ("optim.lr_perceptual", Float(self.lr_perceptual)),
            ("optim.adam_beta1", Float(self.adam_beta1)),
            ("optim.adam_beta2", Float(self.adam_beta2)),
            ("optim.sgd_momentum", Float(self.sgd_momentum)),
            ("optim.d_steps", u(self.d_steps)),
            ("train.batch_size", u(self.batch_size)),
            ("train.epochs", u(self.epochs)),
            ("train.seed", Int(self.seed as i64)),
            ("train.checkpoint_every", u(self.checkpoint_every)),
            ("train.attention_augment", Bool(self.attention_augment)),
            ("train.pretrain_epochs", u(self.pretrain_epochs)),
            ("score.weights", List(self.score_weights.to_vec())),
            ("score.mask_threshold", Float(self.mask_threshold)),
            ("score.mask_sigma", Float(self.mask_sigma)),
        ];
        if let Some(p) = &self.extractor_path {
            out.push(("loss.extractor", Str(p.clone())));
        }
        out.sort_by(|a, b| a.0.cmp(b.0));
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Deterministic `key = value` rendering (one key per line, sorted).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Number of low-encoder stride-2 stages.
    pub fn low_stages(&self) -> usize {
        (self.image_size / self.z_low_size).trailing_zeros() as usize
    }
}

/// Builds a validated config from a flat key/value document. Missing keys
/// take their documented defaults; later duplicates override earlier ones.
pub fn make_run_config<'a, I>(raw: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = (&'a str, &'a ConfigValue)>,
{
    let mut cfg = RunConfig::default();
    for (k, v) in raw {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
