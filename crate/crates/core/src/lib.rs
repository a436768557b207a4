//! Masked capsule autoencoder.
//!
//! A capsule network over a flattened 1D map of patch locations: a patch
//! backbone produces primary capsules, an isotropic stack of 1×1 self-routing
//! layers encodes each location independently, and either a fully-connected
//! capsule decoder (masked-patch pretraining) or a class-capsule head
//! (supervised finetuning) sits on top.

pub mod error;
pub mod gradsuite;
pub mod backbone;
pub mod capsule;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
