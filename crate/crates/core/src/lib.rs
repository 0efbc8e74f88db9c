//! Desk-scale simulator for split-model personalized federated learning:
//! FedAvg-style pretraining of split models, mixture-of-personalized-modules
//! fine-tuning with Top-K gating, energy-based expert denoising, and an
//! independent verifier for the gated-mixture accuracy lower bound.

pub mod checkpoint;
pub mod datagen;
pub mod energy;
pub mod error;
pub mod federation;
pub mod harness;
pub mod moe;
pub mod numerics;
pub mod parallel;
pub mod rng;
pub mod splitmodel;
pub mod theory;

pub use error::{Error, Result};
