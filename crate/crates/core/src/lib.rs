//! Regional attention network for fine-grained image classification.
//!
//! The crate is organized bottom-up: [`tensor`] and [`autodiff`] provide the
//! numeric substrate, [`regions`] and [`roi`] turn a feature map into
//! per-region descriptors, [`se`] and [`head`] implement the region-specific
//! squeeze-excitation blocks and the attention head, and [`model`] / [`train`]
//! assemble, fit, evaluate and explain the full network.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod head;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod regions;
pub mod roi;
pub mod se;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, PairNorm, Padding, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
