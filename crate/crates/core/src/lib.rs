//! Hierarchical vector-quantized autoencoder with autoregressive latent
//! priors, trained under a phased data-augmentation schedule, plus a
//! Fréchet-distance evaluation harness.

pub mod augment;
pub mod data;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod image;
pub mod nn;
pub mod pixelcnn;
pub mod rng;
pub mod sample;
pub mod tensor;
pub mod train;
pub mod vqvae;

pub use error::{Error, Result};
