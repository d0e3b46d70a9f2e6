//! Token-wise cross-modal retrieval with dual attribute prompts.
//!
//! Everything here is `no_std` + `alloc`: tensors, a small reverse-mode
//! tape, the encoders, every training objective, the synthetic dataset
//! generator, retrieval metrics and the optimizer. File formats and the
//! command line live in the `attrank` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attributes;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod similarity;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, ParamId};
pub use numeric::{cosine_similarity, finite_diff_grad, softmax, GradResult};
pub use tensor::DenseTensor;
