//! Layers and the encoder / decoder / classifier builders.
//!
//! Layers hold [`ParamId`]s only; the tensors live in a [`ParamStore`] and
//! are bound onto a graph per forward pass.

mod layers;
mod params;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::{Element, Graph, TensorError, Var};

pub use layers::{Conv2dLayer, DenseBlock, DenseLayer};
pub use params::{grad_check_params, Bindings, Param, ParamGroup, ParamId, ParamStore};

/// Flattened latent size above which the classifier gets a hidden layer.
pub const CLASSIFIER_HIDDEN_THRESHOLD: usize = 8192;
pub const CLASSIFIER_HIDDEN_UNITS: usize = 512;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("layer {layer}: {msg}")]
    Shape { layer: String, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

fn wrap(name: &str) -> impl Fn(TensorError) -> NnError + '_ {
    move |e| NnError::layer(name, e)
}

impl NnError {
    pub(crate) fn layer(layer: &str, source: TensorError) -> Self {
        NnError::Layer {
            layer: layer.to_string(),
            source,
        }
    }

    pub(crate) fn shape(layer: &str, msg: impl Into<String>) -> Self {
        NnError::Shape {
            layer: layer.to_string(),
            msg: msg.into(),
        }
    }

    /// The underlying tensor error, if this wraps one.
    pub fn tensor_error(&self) -> Option<&TensorError> {
        match self {
            NnError::Layer { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Latent tensor layout `channels × spatial × spatial`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    pub channels: usize,
    pub spatial: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            channels: 100,
            spatial: 8,
        }
    }
}

impl LatentConfig {
    pub fn new(channels: usize, spatial: usize) -> Self {
        LatentConfig { channels, spatial }
    }

    pub fn flat_size(&self) -> usize {
        self.channels * self.spatial * self.spatial
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.channels == 0 || self.spatial == 0 {
            return Err(NnError::Config(format!(
                "latent channels and spatial size must be >= 1, got {}x{}",
                self.channels, self.spatial
            )));
        }
        Ok(())
    }
}

/// Shape of the convolutional trunk shared by encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchParams {
    pub image_channels: usize,
    pub image_size: usize,
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub block_layers: usize,
    pub transition_channels: usize,
    /// Number of dense-block stages; each halves (encoder) or doubles (decoder) the resolution.
    pub stages: usize,
}

impl Default for ArchParams {
    fn default() -> Self {
        ArchParams {
            image_channels: 3,
            image_size: 32,
            stem_channels: 32,
            growth_rate: 12,
            block_layers: 2,
            transition_channels: 32,
            stages: 2,
        }
    }
}

impl ArchParams {
    /// Resolution at the bottom of the trunk, before resizing to the latent grid.
    pub fn trunk_size(&self) -> usize {
        self.image_size >> self.stages
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let positive = [
            self.image_channels,
            self.image_size,
            self.stem_channels,
            self.growth_rate,
            self.transition_channels,
        ];
        if positive.contains(&0) {
            return Err(NnError::Config(format!("architecture sizes must be positive: {self:?}")));
        }
        if self.stages >= usize::BITS as usize || self.image_size % (1 << self.stages) != 0 || self.trunk_size() == 0 {
            return Err(NnError::Config(format!(
                "image size {} is not divisible by 2^{} stages",
                self.image_size, self.stages
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub block: DenseBlock,
    pub transition: Conv2dLayer,
}

/// Recognition network: image → (mu, logvar), each `[B, latentC, s, s]`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Conv2dLayer,
    pub stages: Vec<EncoderStage>,
    pub mu_head: Conv2dLayer,
    pub logvar_head: Conv2dLayer,
    pub latent: LatentConfig,
    pub arch: ArchParams,
}

impl Encoder {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<(Var, Var), NnError> {
        let s = g.shape(x);
        let a = &self.arch;
        if s.len() != 4 || s[1] != a.image_channels || s[2] != a.image_size || s[3] != a.image_size {
            return Err(NnError::shape(
                "encoder",
                format!(
                    "expected [B, {}, {}, {}], got {:?}",
                    a.image_channels, a.image_size, a.image_size, s
                ),
            ));
        }
        let mut h = self.stem.forward(g, p, x)?;
        for stage in &self.stages {
            h = stage.block.forward(g, p, h)?;
            h = g.relu(h).map_err(wrap(&stage.transition.name))?;
            h = stage.transition.forward(g, p, h)?;
            h = g.avg_pool2(h).map_err(wrap(&stage.transition.name))?;
        }
        h = g.relu(h).map_err(wrap("encoder.resize"))?;
        let s = self.latent.spatial;
        h = g.resize_nearest(h, (s, s)).map_err(wrap("encoder.resize"))?;
        let mu = self.mu_head.forward(g, p, h)?;
        let logvar = self.logvar_head.forward(g, p, h)?;
        Ok((mu, logvar))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub block: DenseBlock,
    pub transition: Conv2dLayer,
}

/// Generative network: latent `[B, latentC, s, s]` → image in (0, 1).
#[derive(Clone, Debug)]
pub struct Decoder {
    pub latent_in: Conv2dLayer,
    pub stages: Vec<DecoderStage>,
    pub output: Conv2dLayer,
    pub latent: LatentConfig,
    pub arch: ArchParams,
}

impl Decoder {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bindings, z: Var) -> Result<Var, NnError> {
        let s = g.shape(z);
        let l = &self.latent;
        if s.len() != 4 || s[1] != l.channels || s[2] != l.spatial || s[3] != l.spatial {
            return Err(NnError::shape(
                "decoder",
                format!("expected [B, {}, {}, {}], got {:?}", l.channels, l.spatial, l.spatial, s),
            ));
        }
        let mut size = self.arch.trunk_size();
        let mut h = g.resize_nearest(z, (size, size)).map_err(wrap("decoder.resize"))?;
        h = self.latent_in.forward(g, p, h)?;
        for stage in &self.stages {
            h = stage.block.forward(g, p, h)?;
            h = g.relu(h).map_err(wrap(&stage.transition.name))?;
            h = stage.transition.forward(g, p, h)?;
            size *= 2;
            h = g.resize_nearest(h, (size, size)).map_err(wrap(&stage.transition.name))?;
        }
        h = g.relu(h).map_err(wrap(&self.output.name))?;
        h = self.output.forward(g, p, h)?;
        g.sigmoid(h).map_err(wrap(&self.output.name))
    }
}

/// Fully connected head over flattened latent features.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub layers: Vec<DenseLayer>,
    pub in_dim: usize,
    pub num_classes: usize,
}

impl ClassifierHead {
    /// Logits `[B, classes]`; inputs of rank > 2 are flattened first.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var, NnError> {
        let mut h = if g.shape(x).len() > 2 {
            g.flatten(x).map_err(|e| NnError::layer("classifier", e))?
        } else {
            x
        };
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h).map_err(|e| NnError::layer(&layer.name, e))?;
            }
            h = layer.forward(g, p, h)?;
        }
        Ok(h)
    }

    pub fn hidden_units(&self) -> Option<usize> {
        (self.layers.len() > 1).then(|| self.layers[0].out_dim)
    }
}

pub fn build_encoder<T: Element>(
    cfg: &LatentConfig,
    arch: &ArchParams,
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
) -> Result<Encoder, NnError> {
    cfg.validate()?;
    arch.validate()?;
    let group = ParamGroup::Encoder;
    let stem = Conv2dLayer::new(store, rng, "enc.stem", group, arch.image_channels, arch.stem_channels, 3, 1, 1);
    let mut channels = arch.stem_channels;
    let mut size = arch.image_size;
    assert_eq!(stem.out_size(size), Some(size), "stem preserves resolution");
    let mut stages = Vec::with_capacity(arch.stages);
    for i in 0..arch.stages {
        let block = DenseBlock::new(
            store,
            rng,
            &format!("enc.stage{i}.block"),
            group,
            channels,
            arch.growth_rate,
            arch.block_layers,
        );
        let transition = Conv2dLayer::new(
            store,
            rng,
            &format!("enc.stage{i}.transition"),
            group,
            block.out_channels(),
            arch.transition_channels,
            1,
            1,
            0,
        );
        channels = arch.transition_channels;
        size /= 2;
        stages.push(EncoderStage { block, transition });
    }
    debug_assert_eq!(size, arch.trunk_size());
    let mu_head = Conv2dLayer::new(store, rng, "enc.mu", group, channels, cfg.channels, 1, 1, 0);
    let logvar_head = Conv2dLayer::new(store, rng, "enc.logvar", group, channels, cfg.channels, 1, 1, 0);
    store.get_mut(logvar_head.weight).decay = false;
    Ok(Encoder {
        stem,
        stages,
        mu_head,
        logvar_head,
        latent: *cfg,
        arch: *arch,
    })
}

pub fn build_decoder<T: Element>(
    cfg: &LatentConfig,
    arch: &ArchParams,
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
) -> Result<Decoder, NnError> {
    cfg.validate()?;
    arch.validate()?;
    let group = ParamGroup::Decoder;
    let latent_in = Conv2dLayer::new(store, rng, "dec.latent_in", group, cfg.channels, arch.transition_channels, 1, 1, 0);
    let mut channels = arch.transition_channels;
    let mut stages = Vec::with_capacity(arch.stages);
    for i in 0..arch.stages {
        let block = DenseBlock::new(
            store,
            rng,
            &format!("dec.stage{i}.block"),
            group,
            channels,
            arch.growth_rate,
            arch.block_layers,
        );
        let transition = Conv2dLayer::new(
            store,
            rng,
            &format!("dec.stage{i}.transition"),
            group,
            block.out_channels(),
            arch.transition_channels,
            1,
            1,
            0,
        );
        channels = arch.transition_channels;
        stages.push(DecoderStage { block, transition });
    }
    let output = Conv2dLayer::new(store, rng, "dec.output", group, channels, arch.image_channels, 3, 1, 1);
    Ok(Decoder {
        latent_in,
        stages,
        output,
        latent: *cfg,
        arch: *arch,
    })
}

/// One dense layer to `NUM_CLASSES` logits, with a ReLU hidden layer in
/// front when the flattened latent exceeds [`CLASSIFIER_HIDDEN_THRESHOLD`].
pub fn build_classifier<T: Element>(
    cfg: &LatentConfig,
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
) -> Result<ClassifierHead, NnError> {
    cfg.validate()?;
    let flat = cfg.flat_size();
    let group = ParamGroup::Classifier;
    let layers = if flat > CLASSIFIER_HIDDEN_THRESHOLD {
        vec![
            DenseLayer::new(store, rng, "head.hidden", group, flat, CLASSIFIER_HIDDEN_UNITS),
            DenseLayer::new(store, rng, "head.out", group, CLASSIFIER_HIDDEN_UNITS, NUM_CLASSES),
        ]
    } else {
        vec![DenseLayer::new(store, rng, "head.out", group, flat, NUM_CLASSES)]
    };
    Ok(ClassifierHead {
        layers,
        in_dim: flat,
        num_classes: NUM_CLASSES,
    })
}

/// Encoder and decoder together with their parameters and freeze flags.
#[derive(Clone, Debug)]
pub struct VaeModel<T: Element> {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub params: ParamStore<T>,
    frozen: BTreeSet<ParamGroup>,
}

impl<T: Element> VaeModel<T> {
    /// Builds and initializes from the `init` stream of `seed`.
    pub fn new(latent: LatentConfig, arch: ArchParams, seed: u64) -> Result<Self, NnError> {
        let mut rng = SeededRng::stream(seed, "init");
        let mut params = ParamStore::new();
        let encoder = build_encoder(&latent, &arch, &mut params, &mut rng)?;
        let decoder = build_decoder(&latent, &arch, &mut params, &mut rng)?;
        Ok(VaeModel {
            encoder,
            decoder,
            params,
            frozen: BTreeSet::new(),
        })
    }

    pub fn latent(&self) -> LatentConfig {
        self.encoder.latent
    }

    pub fn arch(&self) -> ArchParams {
        self.encoder.arch
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn unfreeze(&mut self, group: ParamGroup) {
        self.frozen.remove(&group);
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bindings, NnError> {
        self.params
            .bind(g, |grp| self.frozen.contains(&grp))
            .map_err(|e| NnError::layer("bind", e))
    }

    pub fn encode(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<(Var, Var), NnError> {
        self.encoder.forward(g, p, x)
    }

    pub fn decode(&self, g: &mut Graph<T>, p: &Bindings, z: Var) -> Result<Var, NnError> {
        self.decoder.forward(g, p, z)
    }
}

/// Classifier head plus its own parameter store.
#[derive(Clone, Debug)]
pub struct Classifier<T: Element> {
    pub head: ClassifierHead,
    pub params: ParamStore<T>,
}

impl<T: Element> Classifier<T> {
    /// Builds and initializes from the `head-init` stream of `seed`.
    pub fn new(latent: &LatentConfig, seed: u64) -> Result<Self, NnError> {
        let mut rng = SeededRng::stream(seed, "head-init");
        let mut params = ParamStore::new();
        let head = build_classifier(latent, &mut params, &mut rng)?;
        Ok(Classifier { head, params })
    }

    pub fn logits(&self, g: &mut Graph<T>, p: &Bindings, features: Var) -> Result<Var, NnError> {
        self.head.forward(g, p, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_flat_sizes() {
        assert_eq!(LatentConfig::new(100, 8).flat_size(), 6400);
        assert_eq!(LatentConfig::new(100, 10).flat_size(), 10000);
        assert_eq!(LatentConfig::new(100, 12).flat_size(), 14400);
        assert!(LatentConfig::new(100, 0).validate().is_err());
    }

    #[test]
    fn arch_validation() {
        assert!(ArchParams::default().validate().is_ok());
        assert_eq!(ArchParams::default().trunk_size(), 8);
        let odd = ArchParams {
            image_size: 30,
            ..ArchParams::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn classifier_depth_follows_threshold() {
        let mut rng = SeededRng::from_seed(0);
        let mut store = ParamStore::<f32>::new();
        let small = build_classifier(&LatentConfig::new(100, 8), &mut store, &mut rng).unwrap();
        assert_eq!(small.layers.len(), 1);
        assert_eq!(small.hidden_units(), None);
        let mut store = ParamStore::<f32>::new();
        let big = build_classifier(&LatentConfig::new(100, 10), &mut store, &mut rng).unwrap();
        assert_eq!(big.hidden_units(), Some(CLASSIFIER_HIDDEN_UNITS));
    }

    #[test]
    fn logvar_head_skips_decay() {
        let model = VaeModel::<f32>::new(LatentConfig::new(4, 2), tiny_arch(), 1).unwrap();
        let p = &model.params;
        assert!(!p.get(model.encoder.logvar_head.weight).decay);
        assert!(p.get(model.encoder.mu_head.weight).decay);
        assert!(p.iter().filter(|(_, q)| q.name.ends_with(".bias")).all(|(_, q)| !q.decay));
    }

    fn tiny_arch() -> ArchParams {
        ArchParams {
            image_size: 8,
            stem_channels: 4,
            growth_rate: 2,
            block_layers: 1,
            transition_channels: 4,
            ..ArchParams::default()
        }
    }
}
