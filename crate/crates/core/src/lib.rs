//! Joint vision-language transformer for chest X-ray images and reports.
//!
//! The crate covers attention-mask construction, joint input embedding, the
//! transformer encoder (with its own small autodiff tape), pre-training
//! objectives, downstream tasks, evaluation metrics and a synthetic corpus.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod params;
pub mod seed;
pub mod tasks;
pub mod tensor;
pub mod visual;
pub mod vocab;

pub use error::{Error, Result};
