//! Run configuration: one TOML file with a section per module.
//!
//! ```toml
//! [stage1]
//! epochs = 20
//! alpha = 0.2
//!
//! [detector.loss_weights]
//! box_weight = 0.05
//! ```
//!
//! Every key is optional; missing keys take the desk-scale defaults below.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datakit::{DatasetFormat, MissingLabels, SynthConfig, SHAPE_NAMES};
use crate::detector::DetectorConfig;
use crate::enhance::{DipStage, DEFAULT_ORDER};
use crate::error::{Error, Result};
use crate::esm::EsmConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the detection term against the regression term.
    pub alpha: f64,
    /// Side of the square training input.
    pub input_size: usize,
    /// Random horizontal flips of training samples.
    pub hflip: bool,
    /// Blend factor of batch statistics into running statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            lr: 0.01,
            lr_schedule: LrSchedule::Constant,
            epochs: 20,
            batch_size: 8,
            momentum: 0.937,
            weight_decay: 0.0005,
            alpha: 0.2,
            input_size: 128,
            hflip: true,
            bn_momentum: 0.1,
            seed: 0,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            lr: 0.001,
            epochs: 10,
            batch_size: 1,
            ..Self::stage1()
        }
    }

    /// Full-size settings: 640 px inputs, 100 and 30 epochs.
    pub fn full_scale(stage: u8) -> Self {
        match stage {
            2 => Self {
                epochs: 30,
                input_size: 640,
                ..Self::stage2()
            },
            _ => Self {
                epochs: 100,
                input_size: 640,
                ..Self::stage1()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=2).contains(&self.stage) {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]".into());
        }
        if self.input_size < crate::primitives::MIN_SIDE {
            return bad(format!("input_size {} too small", self.input_size));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; `synth` writes here and training reads from here.
    pub root: PathBuf,
    pub format: DatasetFormat,
    pub class_names: Vec<String>,
    pub missing_labels: MissingLabels,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            format: DatasetFormat::YoloTxt,
            class_names: SHAPE_NAMES.iter().map(|s| s.to_string()).collect(),
            missing_labels: MissingLabels::Fail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub curve_width: usize,
    /// Thumbnail side seen by the filter-parameter network.
    pub pp_input: usize,
    pub dip_order: Vec<DipStage>,
    /// Epochs of restoration pretraining for the frozen curve enhancer.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            curve_width: 16,
            pp_input: 64,
            dip_order: DEFAULT_ORDER.to_vec(),
            pretrain_epochs: 5,
            pretrain_lr: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub iou_thresh: f64,
    /// Cut for scalar precision and recall.
    pub conf_thresh: f64,
    /// Cut applied when decoding detections for AP.
    pub decode_conf: f64,
    pub nms_iou: f64,
    pub plots: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            conf_thresh: 0.25,
            decode_conf: 0.001,
            nms_iou: 0.45,
            plots: true,
        }
    }
}

impl EvalSettings {
    pub fn eval_config(&self) -> crate::evalkit::EvalConfig {
        crate::evalkit::EvalConfig {
            iou_thresh: self.iou_thresh,
            conf_thresh: self.conf_thresh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub enhance: EnhanceConfig,
    pub detector: DetectorConfig,
    pub esm: EsmConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            enhance: EnhanceConfig::default(),
            detector: DetectorConfig::default(),
            esm: EsmConfig::default(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            eval: EvalSettings::default(),
        }
    }
}

impl Config {
    /// Full-size training settings and the 50-layer selector.
    pub fn full_scale() -> Self {
        Self {
            stage1: TrainConfig::full_scale(1),
            stage2: TrainConfig::full_scale(2),
            esm: EsmConfig::resnet50(),
            ..Self::default()
        }
    }

    /// Parses a config file, filling absent keys from [`Config::default`].
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged =
            toml::Value::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_into(&mut merged, user, "")?;
        let cfg: Config = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.detector.validate()?;
        self.esm.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.stage != 1 || self.stage2.stage != 2 {
            return Err(Error::Config(
                "stage1.stage must be 1 and stage2.stage 2".into(),
            ));
        }
        if self.data.class_names.len() != self.detector.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} detector classes",
                self.data.class_names.len(),
                self.detector.num_classes
            )));
        }
        if self.enhance.curve_width == 0 || self.enhance.pp_input < 32 {
            return Err(Error::Config(
                "curve_width must be >= 1 and pp_input >= 32".into(),
            ));
        }
        let e = &self.eval;
        if !(e.iou_thresh > 0.0 && e.iou_thresh <= 1.0) || !(e.nms_iou > 0.0 && e.nms_iou < 1.0) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&e.conf_thresh) || !(0.0..=1.0).contains(&e.decode_conf) {
            return Err(Error::Config(
                "confidence thresholds must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Applies `section.key=value`. The key must already exist; the value is
    /// read as a TOML literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let path: Vec<&str> = key.split('.').collect();
        if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!(
                "override key `{key}` must be section.key"
            )));
        }
        let value = parse_literal(raw.trim());
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        for (depth, part) in path.iter().enumerate() {
            let table = slot.as_table_mut().ok_or_else(|| {
                Error::Config(format!("`{}` is not a section", path[..depth].join(".")))
            })?;
            slot = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        let updated: Config = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{key}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Seeds every stochastic component from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
    }
}

/// Overlays `user` onto `base`; tables merge, everything else replaces.
fn merge_into(base: &mut toml::Value, user: toml::Table, prefix: &str) -> Result<()> {
    let table = base
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{prefix}` is not a section")))?;
    for (key, value) in user {
        let full = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        let slot = table
            .get_mut(&key)
            .ok_or_else(|| Error::Config(format!("unknown config key `{full}`")))?;
        match value {
            toml::Value::Table(t) if slot.is_table() => merge_into(slot, t, &full)?,
            other => *slot = other,
        }
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
