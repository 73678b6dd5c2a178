//! Brain extraction for head MRI.
//!
//! The crate covers the whole workflow: NIfTI ingestion and RAS
//! canonicalisation, resampling to a 1.5 mm isotropic network grid, a small
//! reverse-mode autodiff engine, a 3D residual U-Net with deep supervision,
//! the stochastic augmentation pipeline and trainer, mirror-TTA ensembled
//! inference with largest-component cleanup, and the evaluation harness
//! (DICE, HD95, nonparametric comparison statistics).
//!
//! Synthetic head phantoms (see [`phantom`]) make it possible to train and
//! validate everything without clinical data.

pub mod augment;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod phantom;
pub mod predictor;
pub mod resample;
pub mod stats;
pub mod tensor;
pub mod trainer;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BrainMask, Grid, Volume};
