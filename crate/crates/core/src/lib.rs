//! contextseg: a self-contained convolutional-network engine and semantic
//! segmentation toolkit built around a global-context fusion module.
//!
//! The crate provides a dense 4-D tensor type, exact forward/backward layer
//! kernels (including per-pixel L2 normalization with a learned per-channel
//! scale), network assembly with early/late fusion of a global average
//! pooled context branch, SGD with momentum and poly/step learning-rate
//! policies, receptive-field probing, a synthetic cue-sensitive dataset,
//! segmentation metrics, and a CLI for running the whole pipeline.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod pnm;
pub mod rfprobe;
pub mod segdata;
pub mod tensor;

pub use error::{Error, Result};
