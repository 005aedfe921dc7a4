use rayon::prelude::*;

use super::density::DensityTable;
use super::metrics::{csv_string, format_g9, FinetuneRow, MetricsLog, PretrainRow};
use super::train::{finetune, reconstruction_density, Pretrainer};
use super::{ExperimentConfig, PipelineError};
use crate::data::{sample_labeled_subset, Dataset};
use crate::nn::{LatentConfig, VaeModel};
use crate::rng::stream_seed;
use crate::tensor::Element;

/// One labeled-budget fine-tune inside an arm.
#[derive(Clone, Debug)]
pub struct BudgetOutcome {
    pub labels_per_class: usize,
    pub log: MetricsLog<FinetuneRow>,
    pub test_accuracy: f64,
}

/// Everything one latent size produced.
#[derive(Clone, Debug)]
pub struct ArmOutcome<T: Element> {
    pub spatial: usize,
    pub flat_size: usize,
    pub model: VaeModel<T>,
    pub pretrain_log: MetricsLog<PretrainRow>,
    pub density: DensityTable,
    pub finetunes: Vec<BudgetOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub spatial: usize,
    pub flat_size: usize,
    pub labels_per_class: usize,
    pub test_elbo: f64,
    pub test_rmse: f64,
    pub test_accuracy: f64,
    /// `None` on success, otherwise the arm's error.
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct SweepReport<T: Element> {
    pub rows: Vec<SweepRow>,
    /// Per size, in the order requested.
    pub arms: Vec<(usize, Result<ArmOutcome<T>, PipelineError>)>,
}

impl<T: Element> SweepReport<T> {
    pub fn to_csv(&self) -> String {
        let header = [
            "spatial",
            "flat_size",
            "labels_per_class",
            "test_elbo",
            "test_rmse",
            "test_accuracy",
            "status",
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let status = match &r.error {
                    None => "ok".to_string(),
                    Some(e) => format!("error: {}", e.replace([',', '\n', '\r'], ";")),
                };
                vec![
                    r.spatial.to_string(),
                    r.flat_size.to_string(),
                    r.labels_per_class.to_string(),
                    format_g9(r.test_elbo),
                    format_g9(r.test_rmse),
                    format_g9(r.test_accuracy),
                    status,
                ]
            })
            .collect();
        csv_string(&header, &rows)
    }
}

fn run_arm<T: Element>(
    base: &ExperimentConfig,
    spatial: usize,
    budgets: &[usize],
    train: &Dataset,
    test: &Dataset,
    on_epoch: &(dyn Fn(usize, &Pretrainer<T>) -> Result<(), PipelineError> + Sync),
) -> Result<ArmOutcome<T>, PipelineError> {
    let mut cfg = base.clone();
    cfg.latent = LatentConfig::new(base.latent.channels, spatial);
    let mut trainer = Pretrainer::<T>::new(cfg.clone())?;
    trainer.run(train, test, |t| on_epoch(spatial, t))?;
    let Pretrainer { mut model, log, .. } = trainer;
    let density = reconstruction_density(&model, test, &cfg)?;
    let mut finetunes = Vec::with_capacity(budgets.len());
    for &per_class in budgets {
        let mut ft_cfg = cfg.clone();
        ft_cfg.finetune.labels_per_class = per_class;
        let subset = sample_labeled_subset(train, per_class, stream_seed(cfg.seed, "labeled-subset"))?;
        let out = finetune(&ft_cfg, &mut model, train, &subset, test)?;
        let acc = out.log.last().map_or(0.0, |r| r.test_accuracy);
        finetunes.push(BudgetOutcome {
            labels_per_class: per_class,
            log: out.log,
            test_accuracy: acc,
        });
    }
    Ok(ArmOutcome {
        spatial,
        flat_size: cfg.latent.flat_size(),
        model,
        pretrain_log: log,
        density,
        finetunes,
    })
}

/// Pretrain, fine-tune and evaluate once per latent spatial size. Arms share
/// seeds and data, run in parallel, and fail independently. Each labeled
/// budget (per class) gets its own fine-tune of the same pretrained model.
pub fn sweep<T: Element>(
    base: &ExperimentConfig,
    spatial_sizes: &[usize],
    budgets_per_class: &[usize],
    train: &Dataset,
    test: &Dataset,
    on_epoch: &(dyn Fn(usize, &Pretrainer<T>) -> Result<(), PipelineError> + Sync),
) -> Result<SweepReport<T>, PipelineError> {
    if spatial_sizes.is_empty() {
        return Err(PipelineError::Config("sweep needs at least one latent size".into()));
    }
    if let Some(&s) = spatial_sizes.iter().find(|&&s| s == 0) {
        return Err(PipelineError::Config(format!("latent spatial size {s} is invalid")));
    }
    let budgets: Vec<usize> = if budgets_per_class.is_empty() {
        vec![base.finetune.labels_per_class]
    } else {
        budgets_per_class.to_vec()
    };
    let arms: Vec<(usize, Result<ArmOutcome<T>, PipelineError>)> = spatial_sizes
        .par_iter()
        .map(|&s| (s, run_arm(base, s, &budgets, train, test, on_epoch)))
        .collect();

    let mut rows = Vec::new();
    for (spatial, arm) in &arms {
        let flat_size = base.latent.channels * spatial * spatial;
        match arm {
            Ok(a) => {
                let last = a.pretrain_log.last();
                for b in &a.finetunes {
                    rows.push(SweepRow {
                        spatial: *spatial,
                        flat_size,
                        labels_per_class: b.labels_per_class,
                        test_elbo: last.map_or(f64::NAN, |r| r.test_total),
                        test_rmse: last.map_or(f64::NAN, |r| r.test_rmse),
                        test_accuracy: b.test_accuracy,
                        error: None,
                    });
                }
            }
            Err(e) => rows.push(SweepRow {
                spatial: *spatial,
                flat_size,
                labels_per_class: 0,
                test_elbo: f64::NAN,
                test_rmse: f64::NAN,
                test_accuracy: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(SweepReport { rows, arms })
}
