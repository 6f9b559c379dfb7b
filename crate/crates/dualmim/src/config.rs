//! Run configuration: training hyperparameters, both encoder shapes, and
//! corpus settings, plus the line-based `key = value` text format that
//! addresses every field by dotted key. Unknown or duplicate keys are
//! errors; parsing starts from the defaults.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::Error;
use crate::losses::LossConfig;
use crate::nn::EncoderConfig;

/// AdamW hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), Error> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adamw.{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adamw.eps {} must be > 0", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "adamw.weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Which geometric augmentations run during pre-training. Both transforms
/// apply identically to RGB, height, and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentConfig {
    /// Horizontal flip with probability 1/2.
    pub flip: bool,
    /// Random crop with area scale in [0.6, 1.0], resized back.
    pub crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            crop: true,
        }
    }
}

/// Pre-training loop parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub mask_ratio: f64,
    /// Side length, in patches, of each masked block.
    pub mask_unit: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Use one mask for both modalities instead of independent draws.
    pub shared_mask: bool,
    /// Epochs between intermediate checkpoints; 0 writes only the final.
    pub checkpoint_interval: usize,
    /// Diagnostic: keep the alignment subgraph when alpha is 0 instead of
    /// skipping it. Updates are identical either way.
    pub nce_when_alpha_zero: bool,
    pub adamw: AdamWConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            base_lr: 5e-4,
            warmup_epochs: 0,
            mask_ratio: 0.6,
            mask_unit: 1,
            image_size: 64,
            seed: 42,
            shared_mask: false,
            checkpoint_interval: 0,
            nce_when_alpha_zero: false,
            adamw: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

/// Synthetic corpus settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataConfig {
    pub cities: Vec<String>,
    pub tiles_per_city: usize,
    /// Extra held-out tiles per city for evaluation.
    pub eval_tiles_per_city: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cities: vec!["flatford".into(), "gablewick".into(), "towerline".into()],
            tiles_per_city: 86,
            eval_tiles_per_city: 24,
            seed: 7,
        }
    }
}

/// Everything one run needs: training loop, both towers, corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub rgb_encoder: EncoderConfig,
    pub dsm_encoder: EncoderConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let rgb = EncoderConfig {
            in_channels: 3,
            image_size: 64,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            window: 4,
            mlp_ratio: 4.0,
        };
        let dsm = EncoderConfig {
            in_channels: 1,
            ..rgb.clone()
        };
        Self {
            train: TrainConfig::default(),
            rgb_encoder: rgb,
            dsm_encoder: dsm,
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if t.warmup_epochs >= t.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs {} must be < train.epochs {}",
                t.warmup_epochs, t.epochs
            )));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(t.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "train.base_lr {} must be > 0",
                t.base_lr
            )));
        }
        if !(0.0..=1.0).contains(&t.mask_ratio) {
            return Err(Error::Config(format!(
                "train.mask_ratio {} outside [0, 1]",
                t.mask_ratio
            )));
        }
        t.adamw.validate()?;
        t.loss.validate().map_err(Error::Nn)?;
        for (name, enc, channels) in [
            ("rgb_encoder", &self.rgb_encoder, 3),
            ("dsm_encoder", &self.dsm_encoder, 1),
        ] {
            enc.validate().map_err(Error::Nn)?;
            if enc.in_channels != channels {
                return Err(Error::Config(format!(
                    "{name}.in_channels must be {channels}, got {}",
                    enc.in_channels
                )));
            }
            if enc.image_size != t.image_size {
                return Err(Error::Config(format!(
                    "{name}.image_size {} != train.image_size {}",
                    enc.image_size, t.image_size
                )));
            }
            if enc.grid_side() % t.mask_unit != 0 {
                return Err(Error::Config(format!(
                    "{name} token grid {} not divisible by train.mask_unit {}",
                    enc.grid_side(),
                    t.mask_unit
                )));
            }
        }
        if self.rgb_encoder.grid_side() != self.dsm_encoder.grid_side() {
            return Err(Error::Config(format!(
                "token grids disagree: rgb {} vs dsm {}",
                self.rgb_encoder.grid_side(),
                self.dsm_encoder.grid_side()
            )));
        }
        if t.loss.alpha > 0.0 {
            if t.batch_size < 2 {
                return Err(Error::Config(
                    "train.batch_size must be >= 2 when loss.alpha > 0".into(),
                ));
            }
            if self.rgb_encoder.embed_dim != self.dsm_encoder.embed_dim {
                return Err(Error::Config(format!(
                    "alignment loss needs equal embed dims, got rgb {} vs dsm {}",
                    self.rgb_encoder.embed_dim, self.dsm_encoder.embed_dim
                )));
            }
        }
        if self.data.cities.is_empty() {
            return Err(Error::Config("data.cities must not be empty".into()));
        }
        if self.data.tiles_per_city == 0 {
            return Err(Error::Config("data.tiles_per_city must be >= 1".into()));
        }
        Ok(())
    }
}

// ── Text format ────────────────────────────────────────────────────────────

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, Error> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key} = {value:?}: expected true or false"
        ))),
    }
}

fn apply_encoder(enc: &mut EncoderConfig, key: &str, field: &str, value: &str) -> Result<(), Error> {
    match field {
        "in_channels" => enc.in_channels = parse_scalar(key, value)?,
        "image_size" => enc.image_size = parse_scalar(key, value)?,
        "patch_size" => enc.patch_size = parse_scalar(key, value)?,
        "embed_dim" => enc.embed_dim = parse_scalar(key, value)?,
        "depth" => enc.depth = parse_scalar(key, value)?,
        "heads" => enc.heads = parse_scalar(key, value)?,
        "window" => enc.window = parse_scalar(key, value)?,
        "mlp_ratio" => enc.mlp_ratio = parse_scalar(key, value)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

impl RunConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {key:?} is not dotted")))?;
        match section {
            "train" => match field {
                "epochs" => self.train.epochs = parse_scalar(key, value)?,
                "batch_size" => self.train.batch_size = parse_scalar(key, value)?,
                "base_lr" => self.train.base_lr = parse_scalar(key, value)?,
                "warmup_epochs" => self.train.warmup_epochs = parse_scalar(key, value)?,
                "mask_ratio" => self.train.mask_ratio = parse_scalar(key, value)?,
                "mask_unit" => self.train.mask_unit = parse_scalar(key, value)?,
                "image_size" => self.train.image_size = parse_scalar(key, value)?,
                "seed" => self.train.seed = parse_scalar(key, value)?,
                "shared_mask" => self.train.shared_mask = parse_bool(key, value)?,
                "checkpoint_interval" => {
                    self.train.checkpoint_interval = parse_scalar(key, value)?
                }
                "nce_when_alpha_zero" => {
                    self.train.nce_when_alpha_zero = parse_bool(key, value)?
                }
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
            "adamw" => match field {
                "beta1" => self.train.adamw.beta1 = parse_scalar(key, value)?,
                "beta2" => self.train.adamw.beta2 = parse_scalar(key, value)?,
                "eps" => self.train.adamw.eps = parse_scalar(key, value)?,
                "weight_decay" => self.train.adamw.weight_decay = parse_scalar(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
            "augment" => match field {
                "flip" => self.train.augment.flip = parse_bool(key, value)?,
                "crop" => self.train.augment.crop = parse_bool(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
            "loss" => match field {
                "alpha" => self.train.loss.alpha = parse_scalar(key, value)?,
                "tau" => self.train.loss.tau = parse_scalar(key, value)?,
                "symmetric_nce" => self.train.loss.symmetric_nce = parse_bool(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
            "rgb_encoder" => apply_encoder(&mut self.rgb_encoder, key, field, value)?,
            "dsm_encoder" => apply_encoder(&mut self.dsm_encoder, key, field, value)?,
            "data" => match field {
                "cities" => {
                    self.data.cities = value
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect()
                }
                "tiles_per_city" => self.data.tiles_per_city = parse_scalar(key, value)?,
                "eval_tiles_per_city" => {
                    self.data.eval_tiles_per_city = parse_scalar(key, value)?
                }
                "seed" => self.data.seed = parse_scalar(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses overrides on top of the defaults. Lines are `key = value`,
    /// blank, or `#` comments; keys may not repeat.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: {raw:?} is not `key = value`", ln + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", ln + 1)));
            }
            cfg.apply(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        Ok(cfg)
    }

    /// Canonical text form; every field appears once, keys sorted within
    /// their section. `parse(serialize(c))` reproduces `c` exactly.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let _ = write!(
            s,
            "train.base_lr = {}\ntrain.batch_size = {}\ntrain.checkpoint_interval = {}\n\
             train.epochs = {}\ntrain.image_size = {}\ntrain.mask_ratio = {}\n\
             train.mask_unit = {}\ntrain.nce_when_alpha_zero = {}\ntrain.seed = {}\n\
             train.shared_mask = {}\ntrain.warmup_epochs = {}\n",
            t.base_lr,
            t.batch_size,
            t.checkpoint_interval,
            t.epochs,
            t.image_size,
            t.mask_ratio,
            t.mask_unit,
            t.nce_when_alpha_zero,
            t.seed,
            t.shared_mask,
            t.warmup_epochs
        );
        let _ = write!(
            s,
            "adamw.beta1 = {}\nadamw.beta2 = {}\nadamw.eps = {}\nadamw.weight_decay = {}\n",
            t.adamw.beta1, t.adamw.beta2, t.adamw.eps, t.adamw.weight_decay
        );
        let _ = write!(s, "augment.crop = {}\naugment.flip = {}\n", t.augment.crop, t.augment.flip);
        let _ = write!(
            s,
            "loss.alpha = {}\nloss.symmetric_nce = {}\nloss.tau = {}\n",
            t.loss.alpha, t.loss.symmetric_nce, t.loss.tau
        );
        for (name, e) in [("rgb_encoder", &self.rgb_encoder), ("dsm_encoder", &self.dsm_encoder)] {
            let _ = write!(
                s,
                "{name}.depth = {}\n{name}.embed_dim = {}\n{name}.heads = {}\n\
                 {name}.image_size = {}\n{name}.in_channels = {}\n{name}.mlp_ratio = {}\n\
                 {name}.patch_size = {}\n{name}.window = {}\n",
                e.depth,
                e.embed_dim,
                e.heads,
                e.image_size,
                e.in_channels,
                e.mlp_ratio,
                e.patch_size,
                e.window
            );
        }
        let _ = write!(
            s,
            "data.cities = {}\ndata.eval_tiles_per_city = {}\ndata.seed = {}\ndata.tiles_per_city = {}\n",
            self.data.cities.join(","),
            self.data.eval_tiles_per_city,
            self.data.seed,
            self.data.tiles_per_city
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_overrides_fields() {
        let cfg = RunConfig::parse(
            "# a comment\n\
             train.epochs = 3\n\
             loss.alpha = 0\n\
             rgb_encoder.embed_dim = 16\n\
             dsm_encoder.embed_dim = 16\n\
             data.cities = flatford , towerline\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.loss.alpha, 0.0);
        assert_eq!(cfg.rgb_encoder.embed_dim, 16);
        assert_eq!(cfg.data.cities, vec!["flatford", "towerline"]);
        // Untouched fields keep their defaults.
        assert_eq!(cfg.train.batch_size, RunConfig::default().train.batch_size);
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        assert!(RunConfig::parse("train.epoch = 3\n").is_err());
        assert!(RunConfig::parse("nonsense.alpha = 1\n").is_err());
        assert!(RunConfig::parse("epochs = 3\n").is_err());
        assert!(RunConfig::parse("train.epochs 3\n").is_err());
        assert!(RunConfig::parse("train.epochs = three\n").is_err());
        assert!(RunConfig::parse("loss.symmetric_nce = yes\n").is_err());
        assert!(RunConfig::parse("train.epochs = 2\ntrain.epochs = 3\n").is_err());
    }

    #[test]
    fn serialization_roundtrips_exactly() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 7;
        cfg.train.base_lr = 3.25e-4;
        cfg.train.loss.alpha = 0.125;
        cfg.train.augment.crop = false;
        cfg.rgb_encoder.embed_dim = 48;
        cfg.dsm_encoder.depth = 1;
        cfg.data.cities = vec!["gablewick".into()];
        let text = cfg.serialize();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn every_serialized_key_parses_alone() {
        // The canonical form exercises the full key space; each line must
        // be individually addressable.
        for line in RunConfig::default().serialize().lines() {
            RunConfig::parse(&format!("{line}\n"))
                .unwrap_or_else(|e| panic!("{line:?}: {e}"));
        }
    }

    #[test]
    fn validation_failures() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.train.warmup_epochs = cfg.train.epochs;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.train.batch_size = 1; // alpha > 0 needs pairs
        assert!(cfg.validate().is_err());
        cfg.train.loss.alpha = 0.0;
        cfg.validate().unwrap();

        let mut cfg = RunConfig::default();
        cfg.rgb_encoder.embed_dim = 16; // unequal dims with alpha > 0
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.dsm_encoder.image_size = 32;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.data.cities.clear();
        assert!(cfg.validate().is_err());
    }
}
