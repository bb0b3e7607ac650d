//! Domain-composition segmentation toolkit.
//!
//! A 2-D U-Net whose decoder features are recalibrated by attention-weighted
//! banks of channel descriptors, built for studying generalisation to unseen
//! acquisition domains. Ships with a deterministic training/evaluation
//! harness (leave-one-domain-out protocol), a synthetic multi-domain data
//! generator, volume metrics, and a small CLI.
//!
//! Everything numeric runs on a purpose-built reverse-mode tape (`tensor`)
//! over `ndarray`, in either f32 or f64, with analytic adjoints verified
//! against central differences.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dca;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod plot;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
