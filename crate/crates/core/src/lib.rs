//! Hybrid action classification on pre-extracted trajectory descriptors.
//!
//! The unsupervised half turns per-video descriptors into Fisher Vectors
//! (RootSIFT, descriptor PCA, spatio-temporal augmentation, GMM codebooks,
//! sum pooling, double normalization). The supervised half is either a
//! one-vs-rest linear SVM or a multi-layer network whose first layer is a
//! frozen PCA/whitening projection or is trained with the rest of the net.

mod codec;
pub mod classify;
pub mod descriptor_io;
pub mod error;
pub mod fv;
pub mod gmm;
pub mod net;
pub mod pipeline;
pub mod reduction;

pub use error::{Error, Result};
