use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::density::{Location, DEFAULT_GRID_POINTS};
use super::PipelineError;
use crate::data::SynthKind;
use crate::nn::{ArchParams, LatentConfig};
use crate::optim::PlateauConfig;
use crate::vae::ReconLikelihood;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            lr: 1e-4,
            batch: 16,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: u64,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub labels_per_class: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            lr: 1e-3,
            batch: 32,
            weight_decay: 0.0,
            labels_per_class: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub recon: ReconLikelihood,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Cifar10,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub kind: SynthKind,
    pub train: usize,
    pub test: usize,
    pub size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            kind: SynthKind::GradientPatterns,
            train: 64,
            test: 32,
            size: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Keep only the first `n` training images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    pub grid_points: usize,
    /// Defaults to the quarter-point pixels plus pooled channel 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locations: Option<Vec<Location>>,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            grid_points: DEFAULT_GRID_POINTS,
            locations: None,
        }
    }
}

/// Everything that determines a run. All randomness derives from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub latent: LatentConfig,
    pub arch: ArchParams,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub scheduler: PlateauConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub density: DensityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            precision: Precision::F32,
            latent: LatentConfig::default(),
            arch: ArchParams::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            scheduler: PlateauConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            density: DensityConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        self.latent.validate()?;
        self.arch.validate()?;
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch == 0 || !(p.lr > 0.0) || !(p.weight_decay >= 0.0) {
            return bad(format!("pretrain settings must be positive: {p:?}"));
        }
        let f = &self.finetune;
        if f.epochs == 0 || f.batch == 0 || f.labels_per_class == 0 || !(f.lr > 0.0) || !(f.weight_decay >= 0.0) {
            return bad(format!("finetune settings must be positive: {f:?}"));
        }
        let s = &self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) || !(s.threshold >= 0.0) || !(s.min_lr >= 0.0) {
            return bad(format!("scheduler needs 0 < factor < 1 and non-negative threshold, min_lr: {s:?}"));
        }
        if self.density.grid_points < 2 {
            return bad("density.grid_points must be at least 2".into());
        }
        let d = &self.data;
        if d.train_limit == Some(0) || d.test_limit == Some(0) {
            return bad("data limits must be positive".into());
        }
        if d.source == DataSource::Synthetic {
            let syn = &d.synthetic;
            if syn.train == 0 || syn.test == 0 {
                return bad("synthetic train and test counts must be positive".into());
            }
            if syn.size != self.arch.image_size {
                return bad(format!(
                    "synthetic image size {} differs from arch.image_size {}",
                    syn.size, self.arch.image_size
                ));
            }
        } else if self.arch.image_size != crate::data::CIFAR_SIDE {
            return bad(format!(
                "CIFAR-10 images are {0}x{0}; arch.image_size is {1}",
                crate::data::CIFAR_SIDE,
                self.arch.image_size
            ));
        }
        Ok(())
    }
}
