//! `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::capsule::MaskTokenSpec;
use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::masking::ImageShape;
use crate::model::{ModelConfig, Phase};
use crate::params::NormStyle;

/// Environment variable that overrides `data_dir`.
pub const DATA_DIR_ENV: &str = "MCAE_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Viewpoint,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "viewpoint" => Ok(DatasetKind::Viewpoint),
            _ => Err(Error::Config(format!("unknown dataset {s:?} (expected mnist or viewpoint)"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Viewpoint => "viewpoint",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconTarget {
    MaskedOnly,
    AllPatches,
}

impl FromStr for ReconTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_only" => Ok(ReconTarget::MaskedOnly),
            "all_patches" => Ok(ReconTarget::AllPatches),
            _ => Err(Error::Config(format!("unknown reconstruction_target {s:?} (expected masked_only or all_patches)"))),
        }
    }
}

impl std::fmt::Display for ReconTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReconTarget::MaskedOnly => "masked_only",
            ReconTarget::AllPatches => "all_patches",
        })
    }
}

/// How class scores enter the cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeVariant {
    /// `−log clamp(ŷ_true)` on the averaged activations.
    Average,
    /// `−log softmax(ŷ)_true`, treating the activations as logits.
    Softmax,
}

impl FromStr for CeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(CeVariant::Average),
            "softmax" => Ok(CeVariant::Softmax),
            _ => Err(Error::Config(format!("unknown ce_variant {s:?} (expected average or softmax)"))),
        }
    }
}

impl std::fmt::Display for CeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CeVariant::Average => "average",
            CeVariant::Softmax => "softmax",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub backbone: BackboneKind,
    pub backbone_depth: usize,
    pub vit_norm: NormStyle,
    pub patch_size: usize,
    pub num_caps: usize,
    pub caps_dim: usize,
    pub encoder_layers: usize,
    pub mask_ratio: f64,
    pub reconstruction_target: ReconTarget,
    /// `None` selects the phase default.
    pub epochs: Option<usize>,
    pub lr_init: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mask_token_sigma: f64,
    pub mask_token_activation: f64,
    pub augment_policy: AugmentPolicy,
    pub val_fraction: f64,
    /// `0` keeps every training example.
    pub train_samples: usize,
    /// `0` keeps every test example.
    pub test_samples: usize,
    pub ce_variant: CeVariant,
    pub viewpoint_per_cell: usize,
}

/// `(key, default, description)` for every accepted key.
pub const KEYS: [(&str, &str, &str); 25] = [
    ("dataset", "mnist", "mnist | viewpoint (synthetic rotated glyphs)"),
    ("data_dir", "data/mnist", "directory holding the MNIST IDX files; overridden by MCAE_DATA_DIR"),
    ("backbone", "convmixer", "convmixer | vit"),
    ("backbone_depth", "4", "blocks in the backbone"),
    ("vit_norm", "layer", "layer | batch normalization inside ViT blocks"),
    ("patch_size", "7", "patch side in pixels; must divide the image size"),
    ("num_caps", "16", "capsule types per location (K)"),
    ("caps_dim", "16", "pose dimension (D)"),
    ("encoder_layers", "3", "1x1 self-routing layers in the encoder"),
    ("mask_ratio", "0.5", "fraction of patches removed during pretraining, in [0, 1)"),
    ("reconstruction_target", "masked_only", "masked_only | all_patches"),
    ("epochs", "50 (pretrain) / 350 (finetune)", "training epochs"),
    ("lr_init", "0.1", "initial learning rate of the cosine schedule"),
    ("momentum", "0.9", "SGD momentum"),
    ("batch_size", "128", "examples per optimizer step"),
    ("seed", "0", "seed for initialization, splits, masks and shuffling"),
    ("out_dir", "runs/default", "directory for checkpoint.mcae and metrics.csv"),
    ("mask_token_sigma", "0.02", "std of the Gaussian noise poses at masked locations"),
    ("mask_token_activation", "0", "activation of the masked-location placeholder, in [0, 1]"),
    ("augment_policy", "none", "none | pad4_randcrop | pad4_randcrop+hflip"),
    ("val_fraction", "0.1", "fraction of the training set held out for validation"),
    ("train_samples", "0", "use only the first N training examples (0 = all)"),
    ("test_samples", "0", "use only the first N test examples (0 = all)"),
    ("ce_variant", "average", "average | softmax"),
    ("viewpoint_per_cell", "20", "synthetic examples per (angle, class) cell"),
];

/// Default `data_dir`: `data/mnist` under the workspace root.
pub fn default_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dataset: DatasetKind::Mnist,
            data_dir: default_data_dir(),
            backbone: BackboneKind::ConvMixer,
            backbone_depth: 4,
            vit_norm: NormStyle::Layer,
            patch_size: 7,
            num_caps: 16,
            caps_dim: 16,
            encoder_layers: 3,
            mask_ratio: 0.5,
            reconstruction_target: ReconTarget::MaskedOnly,
            epochs: None,
            lr_init: 0.1,
            momentum: 0.9,
            batch_size: 128,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            mask_token_sigma: 0.02,
            mask_token_activation: 0.0,
            augment_policy: AugmentPolicy::None,
            val_fraction: 0.1,
            train_samples: 0,
            test_samples: 0,
            ce_variant: CeVariant::Average,
            viewpoint_per_cell: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, then applies the `MCAE_DATA_DIR` override.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::parse(&text)?;
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            cfg.data_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "backbone" => self.backbone = v.parse()?,
            "backbone_depth" => self.backbone_depth = parse(key, v)?,
            "vit_norm" => self.vit_norm = v.parse()?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "num_caps" => self.num_caps = parse(key, v)?,
            "caps_dim" => self.caps_dim = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "reconstruction_target" => self.reconstruction_target = v.parse()?,
            "epochs" => self.epochs = Some(parse(key, v)?),
            "lr_init" => self.lr_init = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "mask_token_sigma" => self.mask_token_sigma = parse(key, v)?,
            "mask_token_activation" => self.mask_token_activation = parse(key, v)?,
            "augment_policy" => self.augment_policy = v.parse()?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "train_samples" => self.train_samples = parse(key, v)?,
            "test_samples" => self.test_samples = parse(key, v)?,
            "ce_variant" => self.ce_variant = v.parse()?,
            "viewpoint_per_cell" => self.viewpoint_per_cell = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return fail(format!("lr_init {} must be positive", self.lr_init));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio {} must lie in [0, 1)", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction {} must lie in (0, 1)", self.val_fraction));
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.num_caps == 0 || self.caps_dim == 0 {
            return fail("batch_size, patch_size, num_caps and caps_dim must be positive".into());
        }
        if self.epochs == Some(0) {
            return fail("epochs must be positive".into());
        }
        if self.viewpoint_per_cell == 0 {
            return fail("viewpoint_per_cell must be positive".into());
        }
        self.mask_token().validate()
    }

    pub fn epochs_for(&self, phase: Phase) -> usize {
        self.epochs.unwrap_or(match phase {
            Phase::Pretrain => 50,
            Phase::Finetune => 350,
        })
    }

    pub fn mask_token(&self) -> MaskTokenSpec {
        MaskTokenSpec {
            sigma: self.mask_token_sigma,
            activation_fill: self.mask_token_activation,
            resample_each_forward: true,
        }
    }

    pub fn model_config(&self, image: ImageShape, classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                kind: self.backbone,
                image,
                patch: self.patch_size,
                types: self.num_caps,
                dim: self.caps_dim,
                depth: self.backbone_depth,
                kernel: 3,
                heads: 4,
                mlp_ratio: 2,
                vit_norm: self.vit_norm,
            },
            encoder_layers: self.encoder_layers,
            classes,
            mask_token: self.mask_token(),
        }
    }

    /// Canonical `key=value` text of every setting that affects results,
    /// followed by `phase`. Paths are omitted so runs in different
    /// directories produce identical checkpoints.
    pub fn to_text(&self, phase: Phase) -> String {
        let epochs = self.epochs_for(phase);
        let mut lines = vec![
            format!("dataset={}", self.dataset),
            format!("backbone={}", self.backbone),
            format!("backbone_depth={}", self.backbone_depth),
            format!("vit_norm={}", self.vit_norm),
            format!("patch_size={}", self.patch_size),
            format!("num_caps={}", self.num_caps),
            format!("caps_dim={}", self.caps_dim),
            format!("encoder_layers={}", self.encoder_layers),
            format!("mask_ratio={}", self.mask_ratio),
            format!("reconstruction_target={}", self.reconstruction_target),
            format!("epochs={epochs}"),
            format!("lr_init={}", self.lr_init),
            format!("momentum={}", self.momentum),
            format!("batch_size={}", self.batch_size),
            format!("seed={}", self.seed),
            format!("mask_token_sigma={}", self.mask_token_sigma),
            format!("mask_token_activation={}", self.mask_token_activation),
            format!("augment_policy={}", self.augment_policy),
            format!("val_fraction={}", self.val_fraction),
            format!("train_samples={}", self.train_samples),
            format!("test_samples={}", self.test_samples),
            format!("ce_variant={}", self.ce_variant),
            format!("viewpoint_per_cell={}", self.viewpoint_per_cell),
        ];
        lines.push(format!("phase={phase}"));
        lines.join("\n")
    }

    /// Reads back the text written by [`Config::to_text`]; the `phase` line is
    /// returned separately.
    pub fn from_text(text: &str) -> Result<(Config, Phase)> {
        let mut phase = None;
        let mut body = String::new();
        for line in text.lines() {
            match line.split_once('=') {
                Some((k, v)) if k.trim() == "phase" => phase = Some(v.trim().parse()?),
                _ => {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        let phase = phase.ok_or_else(|| Error::Config("config text has no phase".into()))?;
        Ok((Config::parse(&body)?, phase))
    }

    /// Help text listing every key with its default.
    pub fn help() -> String {
        let mut out = String::from("Config keys (key = value, one per line, # comments):\n");
        for (k, d, desc) in KEYS {
            out.push_str(&format!("  {k:<22} default {d:<32} {desc}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_recipe() {
        let c = Config::parse("").unwrap();
        assert_eq!((c.mask_ratio, c.lr_init, c.encoder_layers, c.num_caps), (0.5, 0.1, 3, 16));
        assert_eq!((c.epochs_for(Phase::Pretrain), c.epochs_for(Phase::Finetune)), (50, 350));
        assert_eq!(c.batch_size, 128);
    }

    #[test]
    fn parses_and_rejects() {
        let c = Config::parse("num_caps = 8  # small\n\nbackbone=vit\naugment_policy = pad4_randcrop+hflip").unwrap();
        assert_eq!(c.num_caps, 8);
        assert_eq!(c.backbone, BackboneKind::Vit);
        assert!(matches!(Config::parse("nope = 1"), Err(Error::Config(m)) if m.contains("nope")));
        assert!(Config::parse("num_caps = eight").is_err());
        assert!(Config::parse("mask_ratio = 1.0").is_err());
        assert!(Config::parse("just words").is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = Config::parse("caps_dim = 4\nepochs = 3\nseed = 9").unwrap();
        let (back, phase) = Config::from_text(&c.to_text(Phase::Finetune)).unwrap();
        assert_eq!(phase, Phase::Finetune);
        assert_eq!(back.to_text(Phase::Finetune), c.to_text(Phase::Finetune));
    }

    #[test]
    fn help_lists_every_key() {
        let help = Config::help();
        let mut cfg = Config::default();
        for (k, _, _) in KEYS {
            assert!(help.contains(k));
            // every documented key is accepted by the parser
            let sample = match k {
                "dataset" => "mnist",
                "backbone" => "convmixer",
                "vit_norm" => "layer",
                "reconstruction_target" => "masked_only",
                "augment_policy" => "none",
                "ce_variant" => "average",
                "data_dir" | "out_dir" => "x",
                "mask_ratio" | "mask_token_sigma" | "mask_token_activation" | "val_fraction" | "lr_init" | "momentum" => "0.5",
                _ => "2",
            };
            cfg.set(k, sample).unwrap();
        }
    }
}
