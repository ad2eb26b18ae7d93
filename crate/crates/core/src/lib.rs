//! Learned data sampling trained through an expected SGD step.
//!
//! A sampler network assigns every training sample an energy; the softmax of
//! those energies is the sampling policy. The sampler is trained by
//! differentiating the loss of a held-out evaluation batch, measured after the
//! policy-weighted expected SGD update of the model, with respect to the
//! sampler parameters. The crate provides the pieces end to end:
//!
//! - [`autodiff`]: a small reverse-mode engine over dense `f64` tensors.
//! - [`models`]: the embedding model and the sampler energy networks.
//! - [`losses`]: cross-entropy, margin triplet and focal losses.
//! - [`policy`]: softmax policies, subset normalization, drawing and the
//!   hard-mining baselines.
//! - [`meta`]: expected losses, the expected update and the sampler step.
//! - [`trainer`]: the full training loop with periodic policy refresh.
//! - [`data`]: synthetic identity datasets and their transforms.
//! - [`eval`]: mAP, CMC and accuracy.

pub mod autodiff;
pub mod checkpoint;
pub mod compare;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod meta;
pub mod models;
pub mod parallel;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
