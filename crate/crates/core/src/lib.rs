//! A small laboratory for LoRA-the-Explorer style training: many low-rank
//! adapter heads trained in parallel on private mini-batches and periodically
//! merged into a frozen base weight.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense matrices, SVD, seeded random streams, initializers
//!   and quantization emulation.
//! - [`layers`]: LoRA-parameterized linear layers and their gradients.
//! - [`network`]: small MLPs built from those layers, losses and a
//!   finite-difference gradient checker.
//! - [`optim`]: SGD and AdamW steppers.
//! - [`data`]: synthetic least-squares tasks with controlled rank.
//! - [`lte`]: the parallel-worker scheduler, merge policies and the
//!   multi-head / full-model baselines.
//! - [`analysis`]: effective rank, Grassmann distance, head alignment,
//!   trajectory deviation and the effective-update verifier.
//! - [`costmodel`]: communication and memory accounting for DDP vs LTE.
//! - [`cli`]: configuration, experiment commands and artifact writers.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod costmodel;
pub mod data;
mod error;
pub mod layers;
pub mod lte;
pub mod network;
pub mod numerics;
pub mod optim;

pub use error::{Error, Result};
pub use numerics::{InitScheme, Matrix, RandomSource};
