//! Run configuration: one JSON document, validated before any work starts.
//! Every section is optional and defaults to the standard hyperparameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::convert::CalibrationConfig;
use crate::data::SynthParams;
use crate::energy::{AnchorMode, EnergyConstants};
use crate::error::{config, Error, Result};
use crate::network::{build_cnn32h_with, build_cnn3d_with_patch, NetworkSpec, CNN32H_HIDDEN};
use crate::quant::{MAX_BITS, MIN_BITS};
use crate::train::{InferenceConfig, LrSchedule, OptimizerKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Cnn3d,
    Cnn32h,
}

impl Architecture {
    pub fn default_patch(self) -> usize {
        match self {
            Architecture::Cnn3d => 5,
            Architecture::Cnn32h => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Cube stem or any of its files; synthetic data is used when absent.
    pub path: Option<PathBuf>,
    pub synthetic: SynthParams,
    /// Defaults to 5 for cnn3d and 3 for cnn32h.
    pub patch_size: Option<usize>,
    pub train_fraction: f64,
    pub normalize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: SynthParams::default(),
            patch_size: None,
            train_fraction: 0.4,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub decay: f64,
    pub milestones: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnSection {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for AnnSection {
    fn default() -> Self {
        let s = LrSchedule::ann_default();
        Self {
            epochs: s.epochs,
            lr: s.initial,
            schedule: ScheduleConfig {
                decay: s.decay,
                milestones: s.milestones,
            },
            batch_size: 50,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            decay: 0.1,
            milestones: vec![60, 80, 90],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnnSection {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    /// Fake-quantization width; `null` trains in full precision.
    pub bits: Option<u32>,
    pub timesteps: usize,
    pub gamma: f64,
    pub learn_lif: bool,
}

impl Default for SnnSection {
    fn default() -> Self {
        let s = LrSchedule::snn_default();
        Self {
            epochs: s.epochs,
            lr: s.initial,
            schedule: ScheduleConfig {
                decay: s.decay,
                milestones: s.milestones,
            },
            batch_size: 50,
            bits: Some(6),
            timesteps: 5,
            gamma: crate::train::DEFAULT_GAMMA,
            learn_lif: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    pub ann_bits: u32,
    pub snn_bits: u32,
    pub mac_exponent: f64,
    pub ac_exponent: f64,
    pub anchors: AnchorMode,
}

impl Default for EnergySection {
    fn default() -> Self {
        let c = EnergyConstants::default();
        Self {
            ann_bits: 32,
            snn_bits: 6,
            mac_exponent: c.mac_exponent,
            ac_exponent: c.ac_exponent,
            anchors: c.anchors,
        }
    }
}

impl EnergySection {
    pub fn constants(&self) -> EnergyConstants {
        EnergyConstants {
            mac_exponent: self.mac_exponent,
            ac_exponent: self.ac_exponent,
            anchors: self.anchors,
            ..EnergyConstants::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub architecture: Architecture,
    /// Hidden width of the cnn32h linear layer.
    pub hidden_width: usize,
    pub ann: AnnSection,
    pub snn: SnnSection,
    pub calibration: CalibrationConfig,
    pub inference: InferenceConfig,
    pub energy: EnergySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            architecture: Architecture::Cnn3d,
            hidden_width: CNN32H_HIDDEN,
            ann: AnnSection::default(),
            snn: SnnSection::default(),
            calibration: CalibrationConfig::default(),
            inference: InferenceConfig::default(),
            energy: EnergySection::default(),
        }
    }
}

fn check_bits(what: &str, bits: Option<u32>) -> Result<()> {
    match bits {
        Some(b) if !(MIN_BITS..=MAX_BITS).contains(&b) => {
            config(format!("{what} must lie in {MIN_BITS}..={MAX_BITS}, got {b}"))
        }
        _ => Ok(()),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn patch_size(&self) -> usize {
        self.dataset.patch_size.unwrap_or(self.architecture.default_patch())
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size();
        if p.is_multiple_of(2) {
            return config(format!("patch size must be odd, got {p}"));
        }
        if !(0.0..=1.0).contains(&self.dataset.train_fraction) {
            return config("train_fraction must lie in [0, 1]");
        }
        self.ann_train_config().schedule.validate()?;
        self.snn_train_config().schedule.validate()?;
        if self.ann.batch_size == 0 || self.snn.batch_size == 0 {
            return config("batch sizes must be positive");
        }
        if self.snn.timesteps == 0 || self.inference.timesteps == 0 {
            return config("timesteps must be at least 1");
        }
        if !(self.snn.gamma > 0.0) {
            return config("gamma must be positive");
        }
        check_bits("snn.bits", self.snn.bits)?;
        check_bits("inference.weight_bits", self.inference.weight_bits)?;
        check_bits("inference.input_bits", self.inference.input_bits)?;
        check_bits("inference.potential_bits", self.inference.potential_bits)?;
        check_bits("energy.ann_bits", Some(self.energy.ann_bits))?;
        check_bits("energy.snn_bits", Some(self.energy.snn_bits))?;
        self.energy.constants().validate()?;
        self.calibration.validate()?;
        if self.hidden_width == 0 {
            return config("hidden_width must be positive");
        }
        Ok(())
    }

    pub fn ann_train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: LrSchedule {
                initial: self.ann.lr,
                decay: self.ann.schedule.decay,
                milestones: self.ann.schedule.milestones.clone(),
                epochs: self.ann.epochs,
            },
            optimizer: OptimizerKind::Sgd {
                momentum: self.ann.momentum,
                weight_decay: self.ann.weight_decay,
            },
            batch_size: self.ann.batch_size,
            seed: self.seed,
            ..TrainConfig::ann_default()
        }
    }

    pub fn snn_train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: LrSchedule {
                initial: self.snn.lr,
                decay: self.snn.schedule.decay,
                milestones: self.snn.schedule.milestones.clone(),
                epochs: self.snn.epochs,
            },
            batch_size: self.snn.batch_size,
            seed: self.seed,
            timesteps: self.snn.timesteps,
            bits: self.snn.bits,
            gamma: self.snn.gamma,
            learn_lif: self.snn.learn_lif,
            ..TrainConfig::snn_default()
        }
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        CalibrationConfig {
            seed: self.seed,
            ..self.calibration.clone()
        }
    }

    pub fn build_network(&self, bands: usize, classes: usize) -> Result<NetworkSpec> {
        match self.architecture {
            Architecture::Cnn3d => build_cnn3d_with_patch(bands, classes, self.patch_size()),
            Architecture::Cnn32h => build_cnn32h_with(bands, classes, self.patch_size(), self.hidden_width),
        }
    }
}
