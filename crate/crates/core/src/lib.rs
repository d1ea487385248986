//! Squeeze-and-excitation attention blocks (channel, spatial and their
//! parallel sum) inside a U-Net segmentation network, built on a small
//! reverse-mode autodiff engine, with CT preprocessing, synthetic
//! phantoms, segmentation metrics and a deterministic training harness.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod gradient_suite;
pub mod init;
pub mod network;
pub mod metrics;
pub mod params;
pub mod preprocessing;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{DType, Scalar, Tensor};
