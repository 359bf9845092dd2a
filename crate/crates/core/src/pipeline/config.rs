use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsseval::EvalConfig;
use crate::error::{Error, Result};
use crate::sed::{SedArch, SedTrainConfig};
use crate::separator::{SepTrainConfig, UNetConfig};
use crate::synthdata::DataConfig;
use crate::util::{derive_seed, fnv1a64};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SedSection {
    pub arch: SedArch,
    pub train: SedTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparatorSection {
    pub unet: UNetConfig,
    pub train: SepTrainConfig,
}

/// Everything a full run depends on. Unknown keys are rejected and omitted sections
/// take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub sed: SedSection,
    pub separator: SeparatorSection,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Canonical pretty JSON; field order is fixed, so equal configs give equal bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_json().as_bytes())
    }

    /// Seed for one stage, derived from the global seed and the stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn anchor_samples(&self) -> usize {
        self.separator.unet.segment_samples
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.sed.arch.validate()?;
        self.sed.train.validate()?;
        self.separator.unet.validate()?;
        self.separator.train.validate()?;
        self.eval.validate()?;
        let k = self.data.num_classes;
        if self.sed.arch.num_classes != k || self.separator.unet.num_classes != k {
            return Err(Error::Config(format!(
                "class counts disagree: data {k}, sed {}, separator {}",
                self.sed.arch.num_classes, self.separator.unet.num_classes
            )));
        }
        let sr = self.data.sample_rate;
        if self.sed.arch.sample_rate != sr || self.separator.unet.sample_rate != sr {
            return Err(Error::Config(format!(
                "sample rates disagree: data {sr}, sed {}, separator {}",
                self.sed.arch.sample_rate, self.separator.unet.sample_rate
            )));
        }
        if self.anchor_samples() > self.data.clip_samples() {
            return Err(Error::Config(format!(
                "separator segment of {} samples is longer than a {}-sample clip",
                self.anchor_samples(),
                self.data.clip_samples()
            )));
        }
        let sed_frames = self.sed.arch.window_frames(self.anchor_samples());
        if sed_frames < self.sed.arch.min_extent() {
            return Err(Error::Config("separator segments are too short for the SED network".into()));
        }
        if self.data.train_clips < self.sed.train.batch_size {
            return Err(Error::Config(format!(
                "{} training clips cannot fill an SED batch of {}",
                self.data.train_clips, self.sed.train.batch_size
            )));
        }
        Ok(())
    }
}
