//! Adam with decoupled weight decay, and a reduce-on-plateau scheduler.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Element, Gradients, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient for {param} is non-finite at index {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("{param}: gradient has {actual} elements, parameter has {expected}")]
    ShapeMismatch {
        param: String,
        expected: usize,
        actual: usize,
    },
    #[error("plateau scheduler got a non-finite metric ({0})")]
    NonFiniteMetric(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter gradient accumulators. The training loop zeroes them
/// explicitly before each step.
#[derive(Clone, Debug)]
pub struct GradBuffer<T: Element> {
    bufs: Vec<Vec<T>>,
}

impl<T: Element> GradBuffer<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        GradBuffer {
            bufs: store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds every registered parameter gradient into its buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<(), OptimError> {
        for id in grads.param_ids() {
            let g = grads.param(id).expect("registered id");
            let buf = &mut self.bufs[id];
            if buf.len() != g.len() {
                return Err(OptimError::ShapeMismatch {
                    param: format!("#{id}"),
                    expected: buf.len(),
                    actual: g.len(),
                });
            }
            for (b, &v) in buf.iter_mut().zip(g.data()) {
                *b = *b + v;
            }
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.bufs[id.0]
    }

    pub fn set(&mut self, id: ParamId, values: &[T]) {
        self.bufs[id.0].copy_from_slice(values);
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }
}

/// Adam moments and hyperparameters for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(store: &ParamStore<T>, cfg: &AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One Adam update of every parameter whose group passes `trainable`:
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`, with decay only on tensors flagged
/// for it. Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Element>(
    state: &mut AdamState<T>,
    store: &mut ParamStore<T>,
    grads: &GradBuffer<T>,
    trainable: impl Fn(ParamGroup) -> bool,
) -> Result<(), OptimError> {
    for (id, p) in store.iter() {
        if !trainable(p.group) {
            continue;
        }
        let g = grads.get(id);
        if g.len() != p.value.len() {
            return Err(OptimError::ShapeMismatch {
                param: p.name.clone(),
                expected: p.value.len(),
                actual: g.len(),
            });
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient {
                param: p.name.clone(),
                index,
            });
        }
    }

    state.t += 1;
    let c = |v: f64| T::from_f64_lossy(v);
    let (b1, b2) = (c(state.beta1), c(state.beta2));
    let (one_b1, one_b2) = (c(1.0 - state.beta1), c(1.0 - state.beta2));
    let bc1 = c(1.0 - state.beta1.powi(state.t as i32));
    let bc2 = c(1.0 - state.beta2.powi(state.t as i32));
    let (lr, eps) = (c(state.lr), c(state.eps));
    let lr_wd = c(state.lr * state.weight_decay);

    for (id, p) in store.iter_mut() {
        if !trainable(p.group) {
            continue;
        }
        let g = grads.get(id);
        let decay = p.decay && state.weight_decay != 0.0;
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let old = theta[i];
            let mut next = old - lr * m_hat / (v_hat.sqrt() + eps);
            if decay {
                next = next - lr_wd * old;
            }
            theta[i] = next;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: u32,
    /// Relative improvement a metric must show to count as better.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 5,
            threshold: 1e-4,
            min_lr: 1e-7,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric has
/// failed to improve for more than `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub epochs_since_improvement: u32,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        PlateauScheduler {
            config,
            lr: lr.max(config.min_lr),
            best: None,
            epochs_since_improvement: 0,
        }
    }

    /// Feeds one epoch's metric; returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> Result<f64, OptimError> {
        if !metric.is_finite() {
            return Err(OptimError::NonFiniteMetric(metric));
        }
        let improved = match self.best {
            None => true,
            Some(best) => metric < best * (1.0 - self.config.threshold),
        };
        if improved {
            self.best = Some(metric);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement > self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.epochs_since_improvement = 0;
            }
        }
        Ok(self.lr)
    }
}
