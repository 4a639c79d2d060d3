//! Vessel segmentation synthesis from T2-weighted MRI slices.
//!
//! A single encoder feeds two output branches: a decoder branch that
//! reconstructs the T2 input and a synthesis branch that predicts a vessel
//! probability map. Training runs in two phases: autoencoder pretraining with
//! the synthesis branch frozen, then joint training where the decoder is
//! supervised only inside a local attention mask (the dilated predicted
//! vessels) and both task losses are balanced by learned homoscedastic
//! uncertainties.
//!
//! The numeric engine (`tensor`, `nn`) is a small CPU implementation with
//! explicit backward passes. Batch-level loops run through [`par`], which is
//! rayon-backed when the `parallel` feature is on and sequential otherwise;
//! every reduction is performed in a fixed order so both builds produce
//! bit-identical results.

pub mod ablation;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
