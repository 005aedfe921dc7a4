use super::density::{default_locations, pixel_density_estimate, DensityTable};
use super::metrics::{FinetuneRow, MetricsLog, PretrainRow};
use super::{ExperimentConfig, PipelineError};
use crate::data::{ordered_batches, BatchPlan, DataError, Dataset, LabeledSubset};
use crate::nn::{Classifier, NnError, ParamGroup, VaeModel, NUM_CLASSES};
use crate::optim::{adam_step, AdamConfig, AdamState, GradBuffer, OptimError, PlateauScheduler};
use crate::rng::{stream_seed, SeededRng};
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};
use crate::vae::{elbo_loss, ElboTerms, Noise};

/// Batch size for every evaluation pass.
pub const EVAL_BATCH: usize = 64;

const GROUPS: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Classifier];

fn numeric(e: NnError, stage: &'static str, epoch: u64, batch: usize) -> PipelineError {
    match e.tensor_error() {
        Some(TensorError::NonFinite { op, index }) => PipelineError::NonFinite {
            stage,
            epoch,
            batch,
            what: format!("value from {op} at index {index}"),
        },
        _ => PipelineError::Nn(e),
    }
}

fn optim(e: OptimError, stage: &'static str, epoch: u64, batch: usize) -> PipelineError {
    match e {
        OptimError::NonFiniteGradient { param, index } => PipelineError::NonFinite {
            stage,
            epoch,
            batch,
            what: format!("gradient of {param} at index {index}"),
        },
        other => PipelineError::Optim(other),
    }
}

fn layer(name: &'static str) -> impl Fn(TensorError) -> NnError {
    move |e| NnError::layer(name, e)
}

/// Pre-training state: everything a checkpoint must hold to resume.
#[derive(Clone, Debug)]
pub struct Pretrainer<T: Element> {
    pub config: ExperimentConfig,
    pub model: VaeModel<T>,
    pub adam: AdamState<T>,
    pub scheduler: PlateauScheduler,
    pub log: MetricsLog<PretrainRow>,
    /// Reparameterization noise for training steps.
    pub noise: SeededRng,
}

impl<T: Element> Pretrainer<T> {
    pub fn new(config: ExperimentConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let model = VaeModel::new(config.latent, config.arch, config.seed)?;
        let adam = AdamState::new(
            &model.params,
            &AdamConfig {
                lr: config.pretrain.lr,
                weight_decay: config.pretrain.weight_decay,
                ..AdamConfig::default()
            },
        );
        let scheduler = PlateauScheduler::new(config.scheduler, config.pretrain.lr);
        let noise = SeededRng::stream(config.seed, "noise");
        Ok(Pretrainer {
            config,
            model,
            adam,
            scheduler,
            log: MetricsLog::new(),
            noise,
        })
    }

    pub fn epochs_done(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.config.pretrain.epochs
    }

    /// One pass of Adam over `train`, then test ELBO and RMSE; the RMSE
    /// drives the plateau scheduler. The logged lr is the one used this epoch.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<PretrainRow, PipelineError> {
        if train.is_empty() {
            return Err(DataError::Invalid("empty training set".into()).into());
        }
        let epoch = self.epochs_done() + 1;
        let plan = BatchPlan::new(self.config.pretrain.batch, stream_seed(self.config.seed, "shuffle"));
        let mut sums = [0.0f64; 3];
        for (bi, idx) in plan.index_batches(train.len(), epoch).into_iter().enumerate() {
            let x = train.batch_tensor::<T>(&idx);
            let terms = self.step(x, epoch, bi)?;
            let n = idx.len() as f64;
            sums[0] += terms.total * n;
            sums[1] += terms.kl * n;
            sums[2] += terms.recon * n;
        }
        let n = train.len() as f64;
        let test_terms = evaluate_elbo(&self.model, test, &self.config)?;
        let rmse = test_rmse(&self.model, test)?;
        let lr = self.adam.lr;
        self.adam.lr = self.scheduler.step(rmse).map_err(|e| optim(e, "pretrain", epoch, 0))?;
        let row = PretrainRow {
            epoch,
            train_total: sums[0] / n,
            train_kl: sums[1] / n,
            train_recon: sums[2] / n,
            test_total: test_terms.total,
            test_rmse: rmse,
            lr,
        };
        self.log.push(row)?;
        Ok(row)
    }

    /// A single Adam step on one batch; returns the loss terms before the update.
    pub fn step(&mut self, x: Tensor<T>, epoch: u64, batch: usize) -> Result<ElboTerms, PipelineError> {
        let fail = |e| numeric(e, "pretrain", epoch, batch);
        let mut g = Graph::new();
        let p = self.model.bind(&mut g).map_err(fail)?;
        let xv = g.constant(x).map_err(layer("input")).map_err(fail)?;
        let elbo = elbo_loss(&mut g, &self.model, &p, xv, Noise::Sample(&mut self.noise), self.config.loss.recon)
            .map_err(fail)?;
        let terms = elbo.terms(&g);
        if !terms.total.is_finite() {
            return Err(PipelineError::NonFinite {
                stage: "pretrain",
                epoch,
                batch,
                what: format!("loss (kl {}, recon {})", terms.kl, terms.recon),
            });
        }
        let grads = g.backward(elbo.total).map_err(layer("backward")).map_err(fail)?;
        let mut buf = GradBuffer::new(&self.model.params);
        buf.zero();
        buf.accumulate(&grads).map_err(|e| optim(e, "pretrain", epoch, batch))?;
        let frozen: Vec<ParamGroup> = GROUPS.into_iter().filter(|&gr| self.model.is_frozen(gr)).collect();
        adam_step(&mut self.adam, &mut self.model.params, &buf, |gr| !frozen.contains(&gr))
            .map_err(|e| optim(e, "pretrain", epoch, batch))?;
        Ok(terms)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run<E>(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut on_epoch: impl FnMut(&Self) -> Result<(), E>,
    ) -> Result<(), E>
    where
        E: From<PipelineError>,
    {
        while !self.is_finished() {
            self.run_epoch(train, test)?;
            on_epoch(self)?;
        }
        Ok(())
    }
}

/// Pre-trains a fresh model for `cfg.pretrain.epochs` epochs.
pub fn pretrain<T: Element>(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(VaeModel<T>, MetricsLog<PretrainRow>), PipelineError> {
    let mut trainer = Pretrainer::<T>::new(cfg.clone())?;
    trainer.run(train, test, |_| Ok::<(), PipelineError>(()))?;
    Ok((trainer.model, trainer.log))
}

/// Per-example test ELBO. The noise comes from a dedicated stream that is
/// re-seeded on every call, so successive epochs see the same draws.
pub fn evaluate_elbo<T: Element>(
    model: &VaeModel<T>,
    test: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<ElboTerms, PipelineError> {
    if test.is_empty() {
        return Err(DataError::Invalid("empty test set".into()).into());
    }
    let mut rng = SeededRng::stream(cfg.seed, "eval-noise");
    let mut sums = [0.0f64; 3];
    for (bi, batch) in ordered_batches::<T>(test, EVAL_BATCH).enumerate() {
        let fail = |e| numeric(e, "evaluate", 0, bi);
        let n = batch.indices.len() as f64;
        let mut g = Graph::inference();
        let p = model.bind(&mut g).map_err(fail)?;
        let x = g.constant(batch.images).map_err(layer("input")).map_err(fail)?;
        let elbo = elbo_loss(&mut g, model, &p, x, Noise::Sample(&mut rng), cfg.loss.recon).map_err(fail)?;
        let t = elbo.terms(&g);
        sums[0] += t.total * n;
        sums[1] += t.kl * n;
        sums[2] += t.recon * n;
    }
    let n = test.len() as f64;
    Ok(ElboTerms {
        total: sums[0] / n,
        kl: sums[1] / n,
        recon: sums[2] / n,
    })
}

fn map_batches<T: Element>(
    ds: &Dataset,
    mut f: impl FnMut(&mut Graph<T>, Var) -> Result<Var, NnError>,
) -> Result<Vec<Tensor<T>>, PipelineError> {
    let mut out = Vec::new();
    for (bi, batch) in ordered_batches::<T>(ds, EVAL_BATCH).enumerate() {
        let fail = |e| numeric(e, "evaluate", 0, bi);
        let mut g = Graph::inference();
        let x = g.constant(batch.images).map_err(layer("input")).map_err(fail)?;
        let y = f(&mut g, x).map_err(fail)?;
        out.push(g.value(y).clone());
    }
    Ok(out)
}

fn stack<T: Element>(parts: Vec<Tensor<T>>) -> Result<Tensor<T>, PipelineError> {
    let first = parts
        .first()
        .ok_or_else(|| PipelineError::Data(DataError::Invalid("empty dataset".into())))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data: Vec<T> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data).map_err(|e| PipelineError::Nn(NnError::layer("stack", e)))
}

/// `decode(mu)` for every example, `[N, C, H, W]`.
pub fn reconstruct<T: Element>(model: &VaeModel<T>, ds: &Dataset) -> Result<Tensor<T>, PipelineError> {
    let parts = map_batches(ds, |g, x| {
        let p = model.bind(g)?;
        let (mu, _) = model.encode(g, &p, x)?;
        model.decode(g, &p, mu)
    })?;
    stack(parts)
}

/// Flattened encoder means `[N, channels·s·s]`, the classifier's features.
pub fn encode_features<T: Element>(model: &VaeModel<T>, ds: &Dataset) -> Result<Tensor<T>, PipelineError> {
    let parts = map_batches(ds, |g, x| {
        let p = model.bind(g)?;
        let (mu, _) = model.encode(g, &p, x)?;
        g.flatten(mu).map_err(layer("flatten"))
    })?;
    stack(parts)
}

/// `sqrt(mean((x − decode(mu))²))` over every pixel of `test`.
pub fn test_rmse<T: Element>(model: &VaeModel<T>, test: &Dataset) -> Result<f64, PipelineError> {
    if test.is_empty() {
        return Err(DataError::Invalid("empty test set".into()).into());
    }
    let recon = reconstruct(model, test)?;
    let sse: f64 = recon
        .data()
        .iter()
        .zip(test.images().data())
        .map(|(&r, &x)| (r.as_f64() - x as f64).powi(2))
        .sum();
    Ok((sse / recon.len() as f64).sqrt())
}

/// Input and reconstruction densities on `ds`, at the configured locations.
pub fn reconstruction_density<T: Element>(
    model: &VaeModel<T>,
    ds: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<DensityTable, PipelineError> {
    let recon = reconstruct(model, ds)?;
    let [_, h, w] = ds.image_shape();
    let locations = cfg.density.locations.clone().unwrap_or_else(|| default_locations(h, w));
    let inputs: Tensor<T> = ds.images().cast();
    pixel_density_estimate(&inputs, &recon, &locations, cfg.density.grid_points)
}

/// Mean cross-entropy with labels checked against the class count.
pub fn cross_entropy<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var, PipelineError> {
    let classes = g.shape(logits).get(1).copied().unwrap_or(0).min(NUM_CLASSES);
    if let Some(index) = labels.iter().position(|&l| l >= classes) {
        return Err(PipelineError::Label {
            index,
            label: labels[index],
            classes,
        });
    }
    g.cross_entropy(logits, labels)
        .map_err(|e| PipelineError::Nn(NnError::layer("cross_entropy", e)))
}

/// Fraction of rows whose argmax equals the label; ties go to the lowest class.
pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

fn rows<T: Element>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(&[idx.len(), d], data).expect("non-empty row gather")
}

fn labels_of(ds: &Dataset) -> Result<Vec<usize>, PipelineError> {
    ds.labels()
        .map(|l| l.iter().map(|&v| v as usize).collect())
        .ok_or_else(|| DataError::Unlabeled(ds.source.clone()).into())
}

/// Logits of `features` in evaluation-sized chunks.
fn classifier_logits<T: Element>(head: &Classifier<T>, features: &Tensor<T>) -> Result<Tensor<T>, PipelineError> {
    let n = features.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let mut g = Graph::inference();
        let p = head.params.bind(&mut g, |_| false).map_err(layer("bind"))?;
        let x = g.constant(rows(features, &idx)).map_err(layer("input"))?;
        let y = head.logits(&mut g, &p, x)?;
        parts.push(g.value(y).clone());
    }
    stack(parts)
}

fn mean_ce<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64, PipelineError> {
    let mut g = Graph::inference();
    let l = g.constant(logits.clone()).map_err(layer("logits"))?;
    let ce = cross_entropy(&mut g, l, labels)?;
    Ok(g.value(ce).item().as_f64())
}

/// Accuracy of `head` on encoder-mean features of `test`.
pub fn evaluate_classifier<T: Element>(
    model: &VaeModel<T>,
    head: &Classifier<T>,
    test: &Dataset,
) -> Result<f64, PipelineError> {
    let labels = labels_of(test)?;
    let logits = classifier_logits(head, &encode_features(model, test)?)?;
    Ok(accuracy(&logits, &labels))
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T: Element> {
    pub classifier: Classifier<T>,
    pub log: MetricsLog<FinetuneRow>,
    /// SHA-256 of the encoder and decoder parameters, identical before and after.
    pub frozen_checksums: Vec<(ParamGroup, String)>,
}

/// Trains a classifier head on encoder means of the labeled subset while the
/// encoder and decoder stay frozen. Any change to their bytes is fatal.
pub fn finetune<T: Element>(
    cfg: &ExperimentConfig,
    model: &mut VaeModel<T>,
    train: &Dataset,
    subset: &LabeledSubset,
    test: &Dataset,
) -> Result<FinetuneOutcome<T>, PipelineError> {
    cfg.validate()?;
    let frozen = [ParamGroup::Encoder, ParamGroup::Decoder];
    for g in frozen {
        model.freeze(g);
    }
    let before: Vec<(ParamGroup, String)> = frozen.iter().map(|&g| (g, model.params.checksum(g))).collect();

    if subset.indices.iter().any(|&i| i >= train.len()) {
        return Err(DataError::Invalid("labeled subset indexes past the training set".into()).into());
    }
    let labeled = train.subset(&subset.indices);
    let train_labels = labels_of(&labeled)?;
    let test_labels = labels_of(test)?;
    let train_x = encode_features(model, &labeled)?;
    let test_x = encode_features(model, test)?;

    let f = &cfg.finetune;
    let mut head = Classifier::<T>::new(&model.latent(), cfg.seed)?;
    let mut adam = AdamState::new(
        &head.params,
        &AdamConfig {
            lr: f.lr,
            weight_decay: f.weight_decay,
            ..AdamConfig::default()
        },
    );
    let plan = BatchPlan::new(f.batch, stream_seed(cfg.seed, "finetune-shuffle"));
    let mut buf = GradBuffer::new(&head.params);
    let mut log = MetricsLog::new();
    for epoch in 1..=f.epochs {
        let mut ce_sum = 0.0;
        for (bi, idx) in plan.index_batches(labeled.len(), epoch).into_iter().enumerate() {
            let fail = |e| numeric(e, "finetune", epoch, bi);
            let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let mut g = Graph::new();
            let p = head.params.bind(&mut g, |_| false).map_err(layer("bind")).map_err(fail)?;
            let x = g.constant(rows(&train_x, &idx)).map_err(layer("input")).map_err(fail)?;
            let logits = head.logits(&mut g, &p, x).map_err(fail)?;
            let loss = cross_entropy(&mut g, logits, &labels)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(PipelineError::NonFinite {
                    stage: "finetune",
                    epoch,
                    batch: bi,
                    what: "cross-entropy".into(),
                });
            }
            let grads = g.backward(loss).map_err(layer("backward")).map_err(fail)?;
            buf.zero();
            buf.accumulate(&grads).map_err(|e| optim(e, "finetune", epoch, bi))?;
            adam_step(&mut adam, &mut head.params, &buf, |_| true).map_err(|e| optim(e, "finetune", epoch, bi))?;
            ce_sum += value * idx.len() as f64;
        }
        let logits = classifier_logits(&head, &test_x)?;
        log.push(FinetuneRow {
            epoch,
            train_ce: ce_sum / labeled.len() as f64,
            test_ce: mean_ce(&logits, &test_labels)?,
            test_accuracy: accuracy(&logits, &test_labels),
            lr: adam.lr,
        })?;
    }

    for (group, sum) in &before {
        if model.params.checksum(*group) != *sum {
            return Err(PipelineError::FreezeViolation { group: *group });
        }
    }
    Ok(FinetuneOutcome {
        classifier: head,
        log,
        frozen_checksums: before,
    })
}
