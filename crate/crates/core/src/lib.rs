//! Convolutional VAE pre-training on unlabeled images, frozen-encoder
//! classifier fine-tuning, and latent-size sweeps, all on the CPU.

pub mod cli;
pub mod data;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vae;
