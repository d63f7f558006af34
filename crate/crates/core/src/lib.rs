//! Continuous sign language recognition at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine and, on top of it,
//! a recognition model made of a convolutional visual module with
//! keypoint-guided spatial attention, a local transformer sequential module
//! with a CTC head, a sentence embedding extractor used for a visual/sequential
//! consistency loss, and a signer removal branch trained through gradient
//! reversal. Synthetic multi-signer data, training, decoding and WER
//! evaluation are included.

pub mod autodiff;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sec;
pub mod sequential;
pub mod srm;
pub mod train;
pub mod visual;

pub use autodiff::{Graph, ParamStore, Tensor, Var};
pub use error::{Error, Result};
