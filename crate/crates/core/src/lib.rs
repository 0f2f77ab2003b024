//! Self-supervised tracklet representation learning from temporal structure.
//!
//! The crate generates colonoscopy-like detection streams, builds fixed-length
//! tracklets, samples candidate-positive bags by temporal rank with a cosine
//! temperature curriculum, trains a small attention encoder under a
//! noise-aware contrastive loss with exact reverse-mode gradients, and
//! evaluates the frozen embeddings on retrieval, re-identification, and
//! non-linear attribute probes.

pub mod builder;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod loss;
pub mod numeric;
pub mod optim;
pub mod rng;
pub mod encoder;
pub mod params;
pub mod sampler;
pub mod synth;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
