use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::nn::{BackboneLayout, BackboneSpec};
use crate::ssl::{LossVariant, SslArchitecture};

/// Which stages run before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Random backbone, supervised training only.
    Scratch,
    /// External backbone weights, then supervised training.
    Transfer,
    /// External backbone weights, self-supervised pre-training, then supervised training.
    TransferSsl,
    /// Random backbone, self-supervised pre-training, then supervised training.
    SslOnly,
}

impl InitMode {
    pub fn uses_external_backbone(self) -> bool {
        matches!(self, InitMode::Transfer | InitMode::TransferSsl)
    }

    pub fn runs_ssl(self) -> bool {
        matches!(self, InitMode::TransferSsl | InitMode::SslOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            InitMode::Scratch => "scratch",
            InitMode::Transfer => "transfer",
            InitMode::TransferSsl => "transfer_ssl",
            InitMode::SslOnly => "ssl_only",
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every hyperparameter of a run. Stored verbatim in checkpoints and run directories.
///
/// The file format is flat TOML, one `key = value` per line; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ssl_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub mlp_hidden: usize,
    pub projection_size: usize,
    pub view_size: usize,
    pub init_mode: InitMode,
    pub label_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub loss_variant: LossVariant,

    /// Backbone family and stage widths, e.g. `conv:32,64,128,256`.
    pub backbone: String,
    pub input_channels: usize,
    /// Side length images are resized to for fine-tuning and evaluation.
    pub finetune_size: usize,
    pub train_ratio: f64,
    pub eval_last_k: usize,
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub flip_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    /// Also feed test-split images to self-supervised pre-training (labels stay unused).
    pub ssl_include_test: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ssl_epochs: 40,
            finetune_epochs: 30,
            batch_size: 256,
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 0.0004,
            tau: 0.996,
            mlp_hidden: 4096,
            projection_size: 256,
            view_size: 128,
            init_mode: InitMode::TransferSsl,
            label_fraction: 1.0,
            seed: None,
            loss_variant: LossVariant::Paper,
            backbone: "conv:32,64,128,256".into(),
            input_channels: 3,
            finetune_size: 128,
            train_ratio: 0.8,
            eval_last_k: 10,
            pixel_mean: 0.5,
            pixel_std: 0.25,
            crop_scale_min: 0.2,
            crop_scale_max: 1.0,
            flip_probability: 0.5,
            blur_probability: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
            ssl_include_test: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau = {} must lie in [0, 1]", self.tau));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label_fraction = {} must lie in (0, 1]", self.label_fraction));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(format!("train_ratio = {} must lie in (0, 1)", self.train_ratio));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch normalization".into());
        }
        for (name, v) in [
            ("mlp_hidden", self.mlp_hidden),
            ("projection_size", self.projection_size),
            ("view_size", self.view_size),
            ("input_channels", self.input_channels),
            ("finetune_size", self.finetune_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be a non-negative number"));
            }
        }
        if !(self.pixel_std > 0.0 && self.pixel_mean.is_finite()) {
            return bad("pixel_std must be positive and pixel_mean finite".into());
        }
        self.layout()?;
        self.augmentation().validate()
    }

    pub fn layout(&self) -> Result<BackboneLayout> {
        self.backbone.parse()
    }

    pub fn ssl_backbone_spec(&self) -> Result<BackboneSpec> {
        Ok(self.layout()?.spec(self.input_channels, self.view_size))
    }

    pub fn finetune_backbone_spec(&self) -> Result<BackboneSpec> {
        Ok(self.layout()?.spec(self.input_channels, self.finetune_size))
    }

    pub fn ssl_architecture(&self) -> Result<SslArchitecture> {
        Ok(SslArchitecture {
            backbone: self.ssl_backbone_spec()?,
            mlp_hidden: self.mlp_hidden,
            projection_size: self.projection_size,
        })
    }

    pub fn augmentation(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            crop_scale_range: (self.crop_scale_min, self.crop_scale_max),
            flip_probability: self.flip_probability,
            blur_probability: self.blur_probability,
            blur_sigma_range: (self.blur_sigma_min, self.blur_sigma_max),
            view_size: self.view_size,
        }
    }

    pub fn resolved_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("no seed set".into()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

impl FromStr for TrainConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainConfig::from_toml(s)
    }
}
