//! Mapping between training state and checkpoint contents.

use std::path::Path;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::config::{config_to_toml, parse_config};
use crate::nn::{Classifier, ParamGroup, ParamStore, VaeModel};
use crate::optim::AdamState;
use crate::pipeline::{ExperimentConfig, FinetuneRow, MetricRow, MetricsLog, Pretrainer};
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

pub const KIND_PRETRAIN: &str = "pretrain";
pub const KIND_CLASSIFIER: &str = "classifier";

fn content(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Content(msg.into())
}

fn put_params<T: Element>(ck: &mut Checkpoint, prefix: &str, store: &ParamStore<T>) {
    for (_, p) in store.iter() {
        ck.push(format!("{prefix}{}", p.name), &p.value);
    }
}

fn get_params<T: Element>(ck: &Checkpoint, prefix: &str, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
    for (_, p) in store.iter_mut() {
        let t: Tensor<T> = ck.tensor(&format!("{prefix}{}", p.name))?;
        if t.shape() != p.value.shape() {
            return Err(content(format!(
                "{}: stored shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

fn put_config(ck: &mut Checkpoint, cfg: &ExperimentConfig) -> Result<(), CheckpointError> {
    let text = config_to_toml(cfg).map_err(|e| content(e.to_string()))?;
    ck.set("config", text);
    Ok(())
}

pub fn config_of(ck: &Checkpoint) -> Result<ExperimentConfig, CheckpointError> {
    parse_config(ck.get("config")?, "checkpoint config").map_err(|e| content(e.to_string()))
}

fn put_log<R: MetricRow>(ck: &mut Checkpoint, prefix: &str, log: &MetricsLog<R>) {
    ck.set(format!("{prefix}.rows"), log.len());
    for r in log.rows() {
        let vals: Vec<String> = r.values().iter().map(|v| v.to_string()).collect();
        ck.set(format!("{prefix}.{:06}", r.epoch()), vals.join(","));
    }
}

fn get_log<R: MetricRow>(ck: &Checkpoint, prefix: &str) -> Result<MetricsLog<R>, CheckpointError> {
    let n: u64 = ck.parse(&format!("{prefix}.rows"))?;
    let mut log = MetricsLog::new();
    for epoch in 1..=n {
        let key = format!("{prefix}.{epoch:06}");
        let vals = ck
            .get(&key)?
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|_| content(format!("{key}: bad number {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let row = R::from_values(epoch, &vals).ok_or_else(|| content(format!("{key}: wrong column count")))?;
        log.push(row).map_err(|e| content(e.to_string()))?;
    }
    Ok(log)
}

fn check_kind(ck: &Checkpoint, kind: &str) -> Result<(), CheckpointError> {
    let found = ck.get("kind")?;
    if found != kind {
        return Err(content(format!("expected a {kind} checkpoint, found {found}")));
    }
    Ok(())
}

fn check_dtype<T: Element>(ck: &Checkpoint) -> Result<(), CheckpointError> {
    let found = ck.get("dtype")?;
    if found != T::DTYPE.to_string() {
        return Err(content(format!("checkpoint holds {found} tensors, expected {}", T::DTYPE)));
    }
    Ok(())
}

/// Element type recorded in a checkpoint.
pub fn dtype_of(ck: &Checkpoint) -> Result<crate::tensor::DType, CheckpointError> {
    match ck.get("dtype")? {
        "f32" => Ok(crate::tensor::DType::F32),
        "f64" => Ok(crate::tensor::DType::F64),
        other => Err(content(format!("unknown dtype {other}"))),
    }
}

pub fn pretrainer_to_checkpoint<T: Element>(t: &Pretrainer<T>) -> Result<Checkpoint, CheckpointError> {
    let mut ck = Checkpoint::new();
    ck.set("kind", KIND_PRETRAIN);
    ck.set("dtype", T::DTYPE);
    put_config(&mut ck, &t.config)?;
    ck.set("epoch", t.epochs_done());
    let a = &t.adam;
    ck.set("adam.t", a.t);
    ck.set("adam.lr", a.lr);
    ck.set("adam.beta1", a.beta1);
    ck.set("adam.beta2", a.beta2);
    ck.set("adam.eps", a.eps);
    ck.set("adam.weight_decay", a.weight_decay);
    let s = &t.scheduler;
    ck.set("scheduler.lr", s.lr);
    ck.set("scheduler.best", s.best.map_or("none".to_string(), |b| b.to_string()));
    ck.set("scheduler.epochs_since_improvement", s.epochs_since_improvement);
    ck.set("rng.noise.seed", t.noise.seed());
    ck.set("rng.noise.word_pos", t.noise.word_pos());
    let frozen: Vec<String> = [ParamGroup::Encoder, ParamGroup::Decoder]
        .into_iter()
        .filter(|&g| t.model.is_frozen(g))
        .map(|g| g.to_string())
        .collect();
    ck.set("frozen", frozen.join(","));
    put_log(&mut ck, "log.pretrain", &t.log);
    put_params(&mut ck, "param/", &t.model.params);
    for (id, p) in t.model.params.iter() {
        ck.push(format!("adam/m/{}", p.name), &a.m[id.0]);
        ck.push(format!("adam/v/{}", p.name), &a.v[id.0]);
    }
    Ok(ck)
}

pub fn pretrainer_from_checkpoint<T: Element>(ck: &Checkpoint) -> Result<Pretrainer<T>, CheckpointError> {
    check_kind(ck, KIND_PRETRAIN)?;
    check_dtype::<T>(ck)?;
    let config = config_of(ck)?;
    let mut t = Pretrainer::<T>::new(config).map_err(|e| content(e.to_string()))?;
    get_params(ck, "param/", &mut t.model.params)?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (_, p) in t.model.params.iter() {
        m.push(ck.tensor::<T>(&format!("adam/m/{}", p.name))?);
        v.push(ck.tensor::<T>(&format!("adam/v/{}", p.name))?);
    }
    t.adam = AdamState {
        m,
        v,
        t: ck.parse("adam.t")?,
        lr: ck.parse("adam.lr")?,
        beta1: ck.parse("adam.beta1")?,
        beta2: ck.parse("adam.beta2")?,
        eps: ck.parse("adam.eps")?,
        weight_decay: ck.parse("adam.weight_decay")?,
    };
    t.scheduler.lr = ck.parse("scheduler.lr")?;
    t.scheduler.best = match ck.get("scheduler.best")? {
        "none" => None,
        _ => Some(ck.parse("scheduler.best")?),
    };
    t.scheduler.epochs_since_improvement = ck.parse("scheduler.epochs_since_improvement")?;
    t.noise = SeededRng::restore(ck.parse("rng.noise.seed")?, ck.parse("rng.noise.word_pos")?);
    for name in ck.get("frozen")?.split(',').filter(|s| !s.is_empty()) {
        match name {
            "encoder" => t.model.freeze(ParamGroup::Encoder),
            "decoder" => t.model.freeze(ParamGroup::Decoder),
            other => return Err(content(format!("unknown frozen group {other}"))),
        }
    }
    t.log = get_log(ck, "log.pretrain")?;
    let epoch: u64 = ck.parse("epoch")?;
    if epoch != t.epochs_done() {
        return Err(content(format!("epoch {epoch} but {} logged rows", t.epochs_done())));
    }
    Ok(t)
}

/// A fine-tuned head plus the pretrained model it reads features from.
#[derive(Clone, Debug)]
pub struct ClassifierState<T: Element> {
    pub config: ExperimentConfig,
    pub model: VaeModel<T>,
    pub classifier: Classifier<T>,
    pub log: MetricsLog<FinetuneRow>,
    pub source: String,
}

pub fn classifier_to_checkpoint<T: Element>(s: &ClassifierState<T>) -> Result<Checkpoint, CheckpointError> {
    let mut ck = Checkpoint::new();
    ck.set("kind", KIND_CLASSIFIER);
    ck.set("dtype", T::DTYPE);
    ck.set("source", &s.source);
    ck.set("labels_per_class", s.config.finetune.labels_per_class);
    put_config(&mut ck, &s.config)?;
    put_log(&mut ck, "log.finetune", &s.log);
    put_params(&mut ck, "param/", &s.model.params);
    put_params(&mut ck, "head/", &s.classifier.params);
    Ok(ck)
}

pub fn classifier_from_checkpoint<T: Element>(ck: &Checkpoint) -> Result<ClassifierState<T>, CheckpointError> {
    check_kind(ck, KIND_CLASSIFIER)?;
    check_dtype::<T>(ck)?;
    let config = config_of(ck)?;
    let mut model =
        VaeModel::<T>::new(config.latent, config.arch, config.seed).map_err(|e| content(e.to_string()))?;
    get_params(ck, "param/", &mut model.params)?;
    model.freeze(ParamGroup::Encoder);
    model.freeze(ParamGroup::Decoder);
    let mut classifier = Classifier::<T>::new(&config.latent, config.seed).map_err(|e| content(e.to_string()))?;
    get_params(ck, "head/", &mut classifier.params)?;
    Ok(ClassifierState {
        log: get_log(ck, "log.finetune")?,
        source: ck.get("source")?.to_string(),
        config,
        model,
        classifier,
    })
}

/// Model weights from either checkpoint kind.
pub fn model_from_checkpoint<T: Element>(ck: &Checkpoint) -> Result<(ExperimentConfig, VaeModel<T>), CheckpointError> {
    check_dtype::<T>(ck)?;
    let config = config_of(ck)?;
    let mut model =
        VaeModel::<T>::new(config.latent, config.arch, config.seed).map_err(|e| content(e.to_string()))?;
    get_params(ck, "param/", &mut model.params)?;
    Ok((config, model))
}

pub fn load_pretrainer<T: Element>(path: &Path) -> Result<Pretrainer<T>, CheckpointError> {
    pretrainer_from_checkpoint(&Checkpoint::load(path)?)
}
