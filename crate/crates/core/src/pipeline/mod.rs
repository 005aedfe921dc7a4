//! Experiment driver: pre-training, frozen-encoder fine-tuning, evaluation
//! and the latent-size sweep.

mod config;
pub mod density;
pub mod metrics;
mod sweep;
mod train;

use thiserror::Error;

use crate::data::{load_cifar10, synth_dataset, DataError, Dataset, Split};
use crate::nn::{NnError, ParamGroup};
use crate::optim::OptimError;
use crate::rng::stream_seed;
use crate::tensor::TensorError;

pub use config::{
    DataConfig, DataSource, DensityConfig, ExperimentConfig, FinetuneConfig, LossConfig, Precision, PretrainConfig,
    SyntheticConfig,
};
pub use density::{default_locations, pixel_density_estimate, DensityTable, Location};
pub use metrics::{format_g9, FinetuneRow, MetricRow, MetricsLog, PretrainRow};
pub use sweep::{sweep, ArmOutcome, BudgetOutcome, SweepReport, SweepRow};
pub use train::{
    accuracy, cross_entropy, encode_features, evaluate_classifier, evaluate_elbo, finetune, pretrain, reconstruct,
    reconstruction_density, test_rmse, FinetuneOutcome, Pretrainer, EVAL_BATCH,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{stage}: non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        stage: &'static str,
        epoch: u64,
        batch: usize,
        what: String,
    },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("frozen {group} parameters changed during fine-tuning")]
    FreezeViolation { group: ParamGroup },
    #[error("label {label} at position {index} is outside 0..{classes}")]
    Label { index: usize, label: usize, classes: usize },
    #[error("metrics log: {0}")]
    Log(String),
    #[error("density estimate: {0}")]
    Density(String),
}

impl PipelineError {
    /// True for NaN/Inf failures, as opposed to bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        match self {
            PipelineError::NonFinite { .. } => true,
            PipelineError::Optim(e) => !matches!(e, OptimError::ShapeMismatch { .. }),
            PipelineError::Nn(e) => matches!(e.tensor_error(), Some(TensorError::NonFinite { .. })),
            _ => false,
        }
    }
}

/// Training and test sets described by `cfg.data`.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), PipelineError> {
    let d = &cfg.data;
    let (train, test) = match d.source {
        DataSource::Cifar10 => {
            let dir = d
                .dir
                .as_ref()
                .ok_or_else(|| PipelineError::Config("data.dir is required for the cifar10 source".into()))?;
            load_cifar10(dir)?
        }
        DataSource::Synthetic => {
            let s = &d.synthetic;
            let train = synth_dataset(s.kind, s.train, s.size, stream_seed(cfg.seed, "synthetic-train"));
            let mut test = synth_dataset(s.kind, s.test, s.size, stream_seed(cfg.seed, "synthetic-test"));
            test.split = Split::Test;
            (train, test)
        }
    };
    let limit = |ds: Dataset, n: Option<usize>| match n {
        Some(n) => ds.take(n),
        None => ds,
    };
    Ok((limit(train, d.train_limit), limit(test, d.test_limit)))
}
